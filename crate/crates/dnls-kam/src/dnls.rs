//! The DNLS Hamiltonian in Fourier coordinates, its partial Birkhoff normal
//! form, the action-angle reduction around a tangential torus, and the
//! affine frequency maps.

use crate::error::{Error, Result};
use crate::index::{MultiIndex, Powers};
use crate::series::{LieOptions, TruncationBudget};
use crate::{Series, SiteSet, C};
use num_complex::Complex64;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

/// One monomial c e^{imx} u^a ū^b of the higher-order nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuinticTerm {
    pub m: i32,
    pub a: u32,
    pub b: u32,
    pub c: Complex64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnlsConfig {
    pub mode_cutoff: i64,
    pub mu: f64,
    pub quintic: Vec<QuinticTerm>,
    /// Cutoff of the Δ1 split.
    pub n_split: i64,
    /// Degree budget of the q-coordinate series.
    pub degree_max: u32,
}

impl DnlsConfig {
    pub fn new(mode_cutoff: i64, n_split: i64) -> Self {
        Self { mode_cutoff, mu: 1.0, quintic: Vec::new(), n_split, degree_max: 6 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode_cutoff < 1 {
            return Err(Error::InvalidSites("empty mode set".into()));
        }
        if self.n_split < 1 || self.n_split > self.mode_cutoff {
            return Err(Error::Config(format!("need 1 ≤ N ≤ J_max, got N={}", self.n_split)));
        }
        if self.mu != 1.0 {
            return Err(Error::Config("only μ = 1 is supported".into()));
        }
        if self.degree_max < 4 {
            return Err(Error::Config("Birkhoff degree budget must be ≥ 4".into()));
        }
        for t in &self.quintic {
            if t.a + t.b < 5 {
                return Err(Error::Config(format!("nonlinearity term u^{}ū^{} has order < 5", t.a, t.b)));
            }
        }
        Ok(())
    }
}

/// H = Λ + B + Q1 + Q2 + K in q-coordinates.
#[derive(Clone, Debug)]
pub struct HamiltonianSplit {
    pub lambda: Series,
    pub b: Series,
    pub q1: Series,
    pub q2: Series,
    pub k: Series,
}

impl HamiltonianSplit {
    pub fn total(&self) -> Result<Series> {
        let mut h = self.lambda.clone();
        for p in [&self.b, &self.q1, &self.q2, &self.k] {
            h.axpy(C::one(), p)?;
        }
        Ok(h)
    }
}

fn gamma(j: i32) -> f64 {
    (j.abs() as f64).sqrt()
}

fn qmono(a: &[(i32, u32)], b: &[(i32, u32)]) -> MultiIndex {
    MultiIndex::new(&[], &[], a, b)
}

/// q_j q̄_k q_l q̄_m is normal iff {j,l} = {k,m}.
fn is_normal_quartic(j: i32, k: i32, _l: i32, m: i32) -> bool {
    j == k || j == m
}

/// Builds Λ, G (split into B, Q1, Q2) and K.
pub fn build_dnls_hamiltonian(cfg: &DnlsConfig) -> Result<HamiltonianSplit> {
    cfg.validate()?;
    let sites = Arc::new(SiteSet::fourier(cfg.mode_cutoff)?);
    let budget = TruncationBudget::new(cfg.degree_max, 0);
    let modes: Vec<i32> = sites.normal_modes().to_vec();
    let jmax = cfg.mode_cutoff as i32;
    let nn = cfg.n_split as i32;
    let mut lambda = Series::new(sites.clone(), budget);
    for &j in &modes {
        lambda.add_term(qmono(&[(j, 1)], &[(j, 1)]), C::new((j.signum() * j * j) as f64, 0.0));
    }
    let mut b = Series::new(sites.clone(), budget);
    let mut q1 = Series::new(sites.clone(), budget);
    let mut q2 = Series::new(sites.clone(), budget);
    for &j in &modes {
        for &k in &modes {
            for &l in &modes {
                let m = j - k + l;
                if m == 0 || m.abs() > jmax {
                    continue;
                }
                let c = gamma(j) * gamma(k) * gamma(l) * gamma(m) / (4.0 * PI);
                let mono = qmono(&[(j, 1), (l, 1)], &[(k, 1), (m, 1)]);
                let target = if is_normal_quartic(j, k, l, m) {
                    &mut b
                } else if [j, k, l, m].iter().filter(|x| x.abs() <= nn).count() >= 2 {
                    &mut q1
                } else {
                    &mut q2
                };
                target.add_term(mono, C::new(c, 0.0));
            }
        }
    }
    let mut k = Series::new(sites.clone(), budget);
    for t in &cfg.quintic {
        add_nonlinearity(&mut k, &modes, t);
    }
    Ok(HamiltonianSplit { lambda, b, q1, q2, k })
}

/// ∫ c e^{imx} u^a ū^b dx with u = Σγ_j q_j φ_j.
fn add_nonlinearity(k: &mut Series, modes: &[i32], t: &QuinticTerm) {
    let deg = (t.a + t.b) as usize;
    if deg as u32 > k.budget().degree_max {
        return;
    }
    let pref = t.c * (2.0 * PI).powf(1.0 - deg as f64 / 2.0);
    let mut idx = vec![0usize; deg];
    loop {
        let picks: Vec<i32> = idx.iter().map(|&i| modes[i]).collect();
        let (us, bs) = picks.split_at(t.a as usize);
        if t.m + us.iter().sum::<i32>() - bs.iter().sum::<i32>() == 0 {
            let g: f64 = picks.iter().map(|j| gamma(*j)).product();
            let a: Vec<(i32, u32)> = us.iter().map(|j| (*j, 1)).collect();
            let bb: Vec<(i32, u32)> = bs.iter().map(|j| (*j, 1)).collect();
            k.add_term(qmono(&a, &bb), pref * g);
        }
        let mut p = 0;
        loop {
            if p == deg {
                return;
            }
            idx[p] += 1;
            if idx[p] < modes.len() {
                break;
            }
            idx[p] = 0;
            p += 1;
        }
    }
}

/// Divisor d_m with {Λ, m} = −i d_m m, read off the bracket.
pub fn birkhoff_divisor(lambda: &Series, m: &MultiIndex) -> f64 {
    let mono = Series::monomial(lambda.sites().clone(), lambda.budget(), m.clone(), C::one());
    let br = lambda.bracket(&mono).expect("same sites");
    -br.coeff(m).im
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BirkhoffReport {
    /// Δ1 monomials whose divisor vanished (left in place).
    pub zero_divisors: Vec<String>,
    /// max |coefficient| over Δ1-indexed quartic terms of H∘Φ, relative to max |Q1|.
    pub delta1_residual: f64,
    pub lie_orders: usize,
}

#[derive(Clone, Debug)]
pub struct BirkhoffResult {
    pub f4: Series,
    pub h_nf: Series,
    /// Order ≥ 5 part of H∘Φ.
    pub r: Series,
    pub report: BirkhoffReport,
}

/// Removes Q1 by the time-1 map of F4 with {Λ, F4} + Q1 = 0.
pub fn partial_birkhoff(h: &HamiltonianSplit) -> Result<BirkhoffResult> {
    let mut f4 = h.q1.empty_like();
    let mut report = BirkhoffReport::default();
    let mut stuck = h.q1.empty_like();
    for (m, c) in h.q1.iter() {
        let d = birkhoff_divisor(&h.lambda, m);
        if d == 0.0 {
            report.zero_divisors.push(format!("{m:?}"));
            stuck.add_term(m.clone(), *c);
        } else {
            f4.add_term(m.clone(), *c / C::new(0.0, d));
        }
    }
    let total = h.total()?;
    let (h_nf, lie) = total.lie_transform(&f4, LieOptions::default())?;
    report.lie_orders = lie.orders;
    let scale = h.q1.max_abs().max(f64::MIN_POSITIVE);
    let mut resid: f64 = 0.0;
    for (m, c) in h_nf.iter() {
        if m.weighted_degree() == 4 && h.q1.coeff(m) != C::zero() && stuck.coeff(m) == C::zero() {
            resid = resid.max(c.norm() / scale);
        }
    }
    report.delta1_residual = resid;
    let r = h_nf.filter(|m, _| m.weighted_degree() >= 5);
    Ok(BirkhoffResult { f4, h_nf, r, report })
}

/// Affine frequency maps and the ξ ↔ ζ change of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyData {
    pub sites: SiteSet,
    /// Assumption (A) constant realised by the affine maps.
    pub m: f64,
    pub m1: f64,
    pub m2: f64,
}

impl FrequencyData {
    pub fn new(sites: &SiteSet) -> Self {
        let n = sites.n() as f64;
        Self { sites: sites.clone(), m: 0.5, m1: sites.c_j() as f64, m2: n / (n - 0.5) }
    }

    fn js(&self) -> &[i32] {
        self.sites.sites()
    }

    /// ω_b − j_b² = j_b ξ_b.
    pub fn omega_small(&self, xi: &[f64]) -> Vec<f64> {
        self.js().iter().zip(xi).map(|(j, x)| *j as f64 * x).collect()
    }

    pub fn omega(&self, xi: &[f64]) -> Vec<f64> {
        self.js().iter().zip(xi).map(|(j, x)| (j * j) as f64 + *j as f64 * x).collect()
    }

    /// Ω_j − j² = j Σξ/(n−½).
    pub fn big_omega_small(&self, j: i32, xi: &[f64]) -> f64 {
        let n = self.sites.n() as f64;
        j as f64 * xi.iter().sum::<f64>() / (n - 0.5)
    }

    pub fn big_omega(&self, j: i32, xi: &[f64]) -> f64 {
        (j * j) as f64 + self.big_omega_small(j, xi)
    }

    /// c = 2Σξ/(2n−1).
    pub fn c(&self, xi: &[f64]) -> f64 {
        2.0 * xi.iter().sum::<f64>() / (2.0 * self.sites.n() as f64 - 1.0)
    }

    pub fn xi_from_zeta(&self, zeta: &[f64]) -> Vec<f64> {
        let a: Vec<f64> = self.js().iter().zip(zeta).map(|(j, z)| j.abs() as f64 * z).collect();
        let tot: f64 = a.iter().sum();
        a.iter().map(|ab| (tot - 0.5 * ab) / PI).collect()
    }

    /// ∂ξ/∂ζ = (1/π)(𝟙𝟙ᵀ − ½I) diag(|j_b|).
    pub fn jacobian(&self) -> Vec<Vec<f64>> {
        let n = self.sites.n();
        (0..n)
            .map(|r| (0..n).map(|c| (if r == c { 0.5 } else { 1.0 }) * self.js()[c].abs() as f64 / PI).collect())
            .collect()
    }

    /// (4π/(2n−1)) diag(1/|j_b|)(𝟙𝟙ᵀ + (½−n)I).
    pub fn jacobian_inverse(&self) -> Vec<Vec<f64>> {
        let n = self.sites.n();
        let pre = 4.0 * PI / (2.0 * n as f64 - 1.0);
        (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| pre / self.js()[r].abs() as f64 * if r == c { 1.5 - n as f64 } else { 1.0 })
                    .collect()
            })
            .collect()
    }

    pub fn zeta_from_xi(&self, xi: &[f64]) -> Vec<f64> {
        self.jacobian_inverse().iter().map(|row| row.iter().zip(xi).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Output of the action-angle reduction at one parameter point.
#[derive(Clone, Debug)]
pub struct ReducedHamiltonian {
    pub xi: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Perturbation P = Q̃ + Q2 + R in (x,y,z,z̄).
    pub p: Series,
    pub q_tilde: Series,
    /// Small parts of ω and Ω read off the reduced B (checked against the affine maps).
    pub omega_small_read: Vec<f64>,
    pub big_omega_small_read: BTreeMap<i32, f64>,
    /// Bound on the discarded √(ζ+y) binomial tail.
    pub binomial_tail: f64,
}

/// Options for [`action_angle_reduce`].
#[derive(Clone, Copy, Debug)]
pub struct ReduceOptions {
    pub budget: TruncationBudget,
    pub binomial_order: u32,
    /// Radius r of the y-ball (needs r² < min ζ).
    pub r: f64,
}

fn binom_half(e: u32, t: u32) -> f64 {
    let h = e as f64 / 2.0;
    let mut v = 1.0;
    for i in 0..t {
        v *= (h - i as f64) / (i + 1) as f64;
    }
    v
}

/// Σ_{t>T}|binom(e/2,t)|ρ^t and the full sum.
fn binom_sums(e: u32, order: u32, rho: f64) -> (f64, f64) {
    let (mut head, mut all) = (0.0, 0.0);
    for t in 0..400 {
        let v = binom_half(e, t).abs() * rho.powi(t as i32);
        all += v;
        if t <= order {
            head += v;
        }
        if v == 0.0 && t > order {
            break;
        }
    }
    (head, all)
}

/// Substitutes q_{j_b} = √(ζ_b+y_b)e^{ix_b} in one q-series.
pub fn reduce_series(q: &Series, sites: &Arc<SiteSet>, zeta: &[f64], opts: &ReduceOptions) -> (Series, f64) {
    let n = sites.n();
    let mut out = Series::new(sites.clone(), opts.budget);
    let zmin = zeta.iter().cloned().fold(f64::INFINITY, f64::min);
    let rho = opts.r * opts.r / zmin;
    let mut tail = 0.0;
    for (m, c) in q.iter() {
        let mut k = vec![0i32; n];
        let mut e = vec![0u32; n];
        for (b, &jb) in sites.sites().iter().enumerate() {
            let (a, cb) = (m.alpha_of(jb), m.beta_of(jb));
            k[b] = a as i32 - cb as i32;
            e[b] = a + cb;
        }
        let keep = |p: &Powers| -> Powers { p.iter().copied().filter(|(j, _)| !sites.sites().contains(j)).collect() };
        let alpha = keep(&m.alpha);
        let beta = keep(&m.beta);
        let zdeg: u32 = alpha.iter().chain(beta.iter()).map(|p| p.1).sum();
        if zdeg > opts.budget.degree_max || k.iter().map(|x| x.unsigned_abs()).sum::<u32>() > opts.budget.fourier_max {
            continue;
        }
        let base: f64 = (0..n).map(|b| zeta[b].powf(e[b] as f64 / 2.0)).product();
        let ymax = (opts.budget.degree_max - zdeg) / 2;
        let mut head_prod = 1.0;
        let mut all_prod = 1.0;
        for b in 0..n {
            let (h, a) = binom_sums(e[b], opts.binomial_order.min(ymax), rho);
            head_prod *= h;
            all_prod *= a;
        }
        tail += c.norm() * base * (all_prod - head_prod).max(0.0) * opts.r.powi(zdeg as i32);
        // enumerate y-powers t with Σt ≤ ymax, t_b ≤ order
        let mut t = vec![0u32; n];
        loop {
            let tot: u32 = t.iter().sum();
            if tot <= ymax {
                let mut coef = *c * base;
                for b in 0..n {
                    coef *= binom_half(e[b], t[b]) * zeta[b].powi(-(t[b] as i32));
                }
                if coef != C::zero() {
                    let idx = MultiIndex { k: k.iter().copied().collect(), i: t.iter().copied().collect(), alpha: alpha.clone(), beta: beta.clone() };
                    out.add_term(idx, coef);
                }
            }
            let mut p = 0;
            loop {
                if p == n {
                    break;
                }
                t[p] += 1;
                if t[p] <= opts.binomial_order.min(ymax) {
                    break;
                }
                t[p] = 0;
                p += 1;
            }
            if p == n {
                break;
            }
        }
    }
    (out, tail)
}

/// Splits H∘Ψ = Λ + B + Q2 + R into N + P at the parameter point ξ.
pub fn action_angle_reduce(
    split: &HamiltonianSplit,
    r_birk: &Series,
    sites: &Arc<SiteSet>,
    xi: &[f64],
    point: usize,
    opts: &ReduceOptions,
) -> Result<ReducedHamiltonian> {
    let freq = FrequencyData::new(sites);
    let zeta = freq.zeta_from_xi(xi);
    if let Some(b) = zeta.iter().position(|z| !(*z > 0.0)) {
        return Err(Error::Domain { point, reason: format!("ζ_{b} = {:e} ≤ 0", zeta[b]) });
    }
    let zmin = zeta.iter().cloned().fold(f64::INFINITY, f64::min);
    if opts.r * opts.r >= zmin {
        return Err(Error::Domain { point, reason: format!("r² = {:e} ≥ min ζ = {zmin:e}", opts.r * opts.r) });
    }
    let (b_red, t1) = reduce_series(&split.b, sites, &zeta, opts);
    let (q2_red, t2) = reduce_series(&split.q2, sites, &zeta, opts);
    let (r_red, t3) = reduce_series(r_birk, sites, &zeta, opts);
    let n = sites.n();
    let mut omega_small_read = vec![0.0; n];
    let mut big_omega_small_read = BTreeMap::new();
    let mut q_tilde = b_red.empty_like();
    for (m, c) in b_red.iter() {
        let flat = m.k.iter().all(|k| *k == 0);
        if flat && m.weighted_degree() == 0 {
            continue;
        }
        if flat && m.z_degree() == 0 && m.y_degree() == 1 {
            let b = m.i.iter().position(|x| *x == 1).unwrap();
            omega_small_read[b] = c.re * sites.site_sign(b) as f64;
            continue;
        }
        if flat && m.y_degree() == 0 && m.alpha.len() == 1 && m.beta.len() == 1 && m.alpha == m.beta && m.alpha[0].1 == 1 {
            let j = m.alpha[0].0;
            big_omega_small_read.insert(j, c.re * j.signum() as f64);
            continue;
        }
        q_tilde.add_term(m.clone(), *c);
    }
    let mut p = q_tilde.clone();
    p.axpy(C::one(), &q2_red)?;
    p.axpy(C::one(), &r_red)?;
    Ok(ReducedHamiltonian {
        xi: xi.to_vec(),
        zeta,
        p,
        q_tilde,
        omega_small_read,
        big_omega_small_read,
        binomial_tail: t1 + t2 + t3,
    })
}

/// Coordinate-function brackets after a transform, compared with the
/// canonical values; returns the largest deviation up to degree budget−2.
pub fn symplecticity_defect(f: &Series, modes: &[i32]) -> Result<f64> {
    let sites = f.sites().clone();
    let bud = f.budget();
    let mut images = Vec::new();
    for &j in modes {
        for bar in [false, true] {
            let m = if bar { qmono(&[], &[(j, 1)]) } else { qmono(&[(j, 1)], &[]) };
            let s = Series::monomial(sites.clone(), bud, m, C::one());
            images.push((j, bar, s.lie_transform(f, LieOptions::default())?.0));
        }
    }
    let lim = bud.degree_max.saturating_sub(2);
    let mut worst: f64 = 0.0;
    for (ja, bara, a) in &images {
        for (jb, barb, b) in &images {
            let br = a.bracket(b)?;
            let mut want = Series::new(sites.clone(), bud);
            if ja == jb && bara != barb {
                let s = if *bara { 1.0 } else { -1.0 } * ja.signum() as f64;
                want.add_term(MultiIndex::zero(0), C::new(0.0, s));
            }
            let d = br.sub(&want)?.filter(|m, _| m.weighted_degree() <= lim);
            worst = worst.max(d.max_abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_examples() {
        let fd = FrequencyData::new(&SiteSet::new(&[-1, 2], 8).unwrap());
        let xi = [0.3, 0.15];
        let w = fd.omega(&xi);
        assert!((w[0] - 0.7).abs() < 1e-15 && (w[1] - 4.3).abs() < 1e-15);
        assert!((fd.big_omega(1, &xi) - 1.3).abs() < 1e-15);
        assert!((fd.big_omega(-3, &xi) - 8.1).abs() < 1e-14);
        assert!((fd.c(&xi) - 0.3).abs() < 1e-15);
        assert_eq!(fd.omega(&[0.0, 0.0]), vec![1.0, 4.0]);
    }

    #[test]
    fn jacobian_inverse_is_inverse() {
        for sites in [vec![-1, 2], vec![-2, 1, 3], vec![-5, -1, 2, 7]] {
            let fd = FrequencyData::new(&SiteSet::new(&sites, 9).unwrap());
            let (a, b) = (fd.jacobian(), fd.jacobian_inverse());
            let n = sites.len();
            for r in 0..n {
                for c in 0..n {
                    let v: f64 = (0..n).map(|k| a[r][k] * b[k][c]).sum();
                    assert!((v - if r == c { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn b_coefficients() {
        let h = build_dnls_hamiltonian(&DnlsConfig::new(2, 1)).unwrap();
        for j in [-2, -1, 1, 2] {
            let m = qmono(&[(j, 2)], &[(j, 2)]);
            assert!((h.b.coeff(&m).re - (j * j) as f64 / (4.0 * PI)).abs() < 1e-14);
        }
        let m = qmono(&[(1, 1), (-2, 1)], &[(1, 1), (-2, 1)]);
        // four ordered tuples, each with γ product 2
        assert!((h.b.coeff(&m).re - 2.0 / PI).abs() < 1e-14);
        assert!(h.total().unwrap().is_momentum_conserving());
    }
}
