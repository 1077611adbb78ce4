//! Randomised numeric checks of the auxiliary inequalities: lattice sums,
//! the loss of |k|^{τ+1}, the 1/|j| smoothing of quadratic blocks, the
//! commutator estimate and the bound for the time-one flow.
//!
//! Every instance is truncated at |k| ≤ 40. Failures are data: they are
//! counted and the first few witnesses are kept.

use crate::fourier::l1;
use crate::norms::{hamiltonian_vector_field, majorant_norm, NormWeights};
use crate::series::{LieOptions, TruncationBudget};
use crate::{Fourier, MultiIndex, Series, SiteSet, C};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::E;
use std::sync::Arc;

pub const K_TRUNC: u32 = 40;
const MAX_WITNESSES: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LemmaTally {
    pub lemma: String,
    pub samples: usize,
    pub passed: usize,
    pub failed: usize,
    /// Largest lhs/rhs seen.
    pub worst_ratio: f64,
    pub witnesses: Vec<String>,
}

impl LemmaTally {
    fn new(name: &str) -> Self {
        Self { lemma: name.into(), ..Default::default() }
    }

    fn check(&mut self, lhs: f64, rhs: f64, witness: impl FnOnce() -> String) {
        self.samples += 1;
        let ratio = if rhs > 0.0 { lhs / rhs } else if lhs > 0.0 { f64::INFINITY } else { 0.0 };
        self.worst_ratio = self.worst_ratio.max(ratio);
        // relative slack for rounding in the two sums
        if lhs <= rhs * (1.0 + 1e-12) {
            self.passed += 1;
        } else {
            self.failed += 1;
            if self.witnesses.len() < MAX_WITNESSES {
                self.witnesses.push(format!("lhs={lhs:e} rhs={rhs:e} {}", witness()));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppendixReport {
    pub seed: u64,
    pub samples_per_lemma: usize,
    pub lemmas: Vec<LemmaTally>,
}

impl AppendixReport {
    pub fn all_passed(&self) -> bool {
        self.lemmas.iter().all(|l| l.failed == 0 && l.samples > 0)
    }
}

/// Σ_{|k|≤K} e^{−2|k|σ}|k|^ν over Z^n, grouped by |k| = m.
fn lattice_sum(n: usize, sigma: f64, nu: f64, kmax: u32) -> f64 {
    (0..=kmax)
        .map(|m| {
            let w = if nu == 0.0 { 1.0 } else { (m as f64).powf(nu) };
            count_l1_sphere(n, m) * w * (-2.0 * m as f64 * sigma).exp()
        })
        .sum()
}

/// #{k ∈ Z^n : |k|_1 = m} = Σ_i 2^i C(n,i) C(m−1,i−1).
fn count_l1_sphere(n: usize, m: u32) -> f64 {
    if m == 0 {
        return 1.0;
    }
    let binom = |a: u64, b: u64| -> f64 {
        if b > a {
            return 0.0;
        }
        (0..b).fold(1.0, |acc, i| acc * (a - i) as f64 / (i + 1) as f64)
    };
    (1..=n as u64).map(|i| 2f64.powi(i as i32) * binom(n as u64, i) * binom(m as u64 - 1, i - 1)).sum()
}

/// The three lattice inequalities at random n, σ, ν.
fn lattice<R: Rng>(rng: &mut R, count: usize) -> Vec<LemmaTally> {
    let mut a = LemmaTally::new("lattice-sum");
    let mut b = LemmaTally::new("lattice-sum-weighted");
    let mut c = LemmaTally::new("lattice-sup");
    for _ in 0..count {
        let n = rng.gen_range(1..=4usize);
        let sigma = rng.gen_range(0.02..2.0);
        let nu = rng.gen_range(0.05..12.0);
        let nf = n as f64;
        let w = || format!("n={n} σ={sigma} ν={nu}");
        a.check(lattice_sum(n, sigma, 0.0, K_TRUNC), (1.0 + E).powf(nf) / sigma.powf(nf), w);
        let rhs = (nu / E).powf(nu) / sigma.powf(nu + nf) * (1.0 + E).powf(nf);
        b.check(lattice_sum(n, sigma, nu, K_TRUNC), rhs, w);
        let sup = (0..=K_TRUNC).map(|m| (-(m as f64) * sigma).exp() * (m as f64).powf(nu)).fold(0.0, f64::max);
        c.check(sup, (nu / E).powf(nu) / sigma.powf(nu), w);
    }
    vec![a, b, c]
}

fn random_sites<R: Rng>(rng: &mut R) -> Vec<i32> {
    const SETS: [&[i32]; 3] = [&[-1, 2], &[-2, 1, 3], &[1, 3]];
    SETS[rng.gen_range(0..SETS.len())].to_vec()
}

/// Random k with |k| uniform in 0..=kmax: cut |k| into n parts, random signs.
fn random_mode<R: Rng>(rng: &mut R, n: usize, kmax: u32) -> Vec<i32> {
    let m = rng.gen_range(0..=kmax) as i32;
    let mut cuts: Vec<i32> = (0..n - 1).map(|_| rng.gen_range(0..=m)).collect();
    cuts.sort_unstable();
    cuts.push(m);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let part = c - prev;
            prev = c;
            if rng.gen_bool(0.5) { part } else { -part }
        })
        .collect()
}

fn random_c<R: Rng>(rng: &mut R) -> C<f64> {
    C::from_polar(rng.gen_range(0.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU))
}

/// |u|_{s−σ,τ+1} ≤ ((τ+1)/e)^{τ+1} σ^{−(τ+1)} |u|_{s,𝐚,0}.
fn tau_loss<R: Rng>(rng: &mut R, count: usize) -> LemmaTally {
    let mut t = LemmaTally::new("tau-loss");
    for _ in 0..count {
        let js = random_sites(rng);
        let n = js.len();
        let mut u = Fourier::zero(&js, 0);
        for _ in 0..rng.gen_range(1..=12) {
            u.set(&random_mode(rng, n, K_TRUNC), random_c(rng));
        }
        let s = rng.gen_range(0.05..1.0);
        let sigma = rng.gen_range(0.01..1.0) * s;
        let tau = rng.gen_range(n as f64 + 3.0..n as f64 + 8.0);
        let a = rng.gen_range(0.0..0.2);
        let lhs = u.norm_tau(s - sigma, tau + 1.0);
        let rhs = ((tau + 1.0) / E).powf(tau + 1.0) / sigma.powf(tau + 1.0) * u.norm(s, a);
        t.check(lhs, rhs, || format!("J={js:?} s={s} σ={sigma} τ={tau} 𝐚={a} modes={}", u.len()));
    }
    t
}

fn normal_modes(sites: &SiteSet, cutoff: i32) -> Vec<i32> {
    (-cutoff..=cutoff).filter(|j| *j != 0 && !sites.sites().contains(j)).collect()
}

/// ‖X_{⟨Fz,z̄⟩}‖_{s−2σ,r,p,𝐚} ≤ (3/σ)‖X_{⟨Rz,z̄⟩}‖_{s,r,p−1,𝐚} for any F
/// dominated blockwise by R/max{|i|,|j|}.
fn quadratic_smoothing<R: Rng>(rng: &mut R, count: usize) -> LemmaTally {
    let mut t = LemmaTally::new("quadratic-smoothing");
    for _ in 0..count {
        let js = random_sites(rng);
        let sites = Arc::new(SiteSet::new(&js.iter().map(|j| *j as i64).collect::<Vec<_>>(), 8).unwrap());
        let n = js.len();
        let budget = TruncationBudget::new(2, K_TRUNC);
        let modes = normal_modes(&sites, 8);
        let s = rng.gen_range(0.05..0.9);
        let sigma = rng.gen_range(0.01..1.0) * (s / 2.0f64).min(1.0);
        let r = rng.gen_range(0.05..0.9);
        let p = rng.gen_range(1.0..3.0);
        let a_exp = rng.gen_range(0.0..0.3);
        let a_mom = rng.gen_range(0.0..0.2);
        let mut rs = Series::new(sites.clone(), budget);
        let mut fs = Series::new(sites.clone(), budget);
        for _ in 0..rng.gen_range(1..=20) {
            let i = modes[rng.gen_range(0..modes.len())];
            let j = modes[rng.gen_range(0..modes.len())];
            let k = random_mode(rng, n, K_TRUNC);
            let m = MultiIndex::new(&k, &vec![0; n], &[(i, 1)], &[(j, 1)]);
            // one draw per block keeps F dominated coefficientwise
            if rs.coeff(&m) != C::new(0.0, 0.0) {
                continue;
            }
            let c = random_c(rng);
            let theta = rng.gen_range(0.0..=1.0);
            let phase = C::from_polar(1.0, rng.gen_range(0.0..std::f64::consts::TAU));
            let kk = l1(&k) as f64;
            rs.add_term(m.clone(), c);
            fs.add_term(m, c * phase * (theta * (kk * sigma).exp() / i.abs().max(j.abs()) as f64));
        }
        let lw = NormWeights::new(s - 2.0 * sigma, r, p, p, a_exp, a_mom).unwrap();
        let rw = NormWeights::new(s, r, p, p - 1.0, a_exp, a_mom).unwrap();
        let lhs = majorant_norm(&hamiltonian_vector_field(&fs), &lw);
        let rhs = 3.0 / sigma * majorant_norm(&hamiltonian_vector_field(&rs), &rw);
        t.check(lhs, rhs, || format!("J={js:?} s={s} σ={sigma} r={r} p={p} a={a_exp} 𝐚={a_mom} terms={}", rs.len()));
    }
    t
}

/// A random Hamiltonian with weighted degree ≤ 3 and |k| ≤ 40.
fn random_hamiltonian<R: Rng>(rng: &mut R, sites: &Arc<SiteSet>, budget: TruncationBudget, terms: usize) -> Series {
    let n = sites.n();
    let modes = normal_modes(sites, 5);
    let mut h = Series::new(sites.clone(), budget);
    for _ in 0..terms {
        let k = random_mode(rng, n, K_TRUNC);
        let mut i = vec![0u32; n];
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        match rng.gen_range(0..5) {
            0 => {}
            1 => i[rng.gen_range(0..n)] = 1,
            2 => alpha.push((modes[rng.gen_range(0..modes.len())], 1)),
            3 => beta.push((modes[rng.gen_range(0..modes.len())], 1)),
            _ => {
                alpha.push((modes[rng.gen_range(0..modes.len())], 1));
                beta.push((modes[rng.gen_range(0..modes.len())], 1));
            }
        }
        h.add_term(MultiIndex::new(&k, &i, &alpha, &beta), random_c(rng));
    }
    h
}

struct Domains {
    s: f64,
    r: f64,
    s1: f64,
    r1: f64,
    p: f64,
    q: f64,
    a_exp: f64,
    a_mom: f64,
}

impl Domains {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let s = rng.gen_range(0.05..0.9);
        let r = rng.gen_range(0.05..0.9);
        let p = rng.gen_range(1.0..3.0);
        Self {
            s,
            r,
            s1: s * rng.gen_range(0.5..0.95),
            r1: r * rng.gen_range(0.5..0.95),
            p,
            q: p - 1.0,
            a_exp: rng.gen_range(0.0..0.3),
            a_mom: rng.gen_range(0.0..0.2),
        }
    }

    fn factor(&self) -> f64 {
        (self.s / (self.s - self.s1)).max(self.r / (self.r - self.r1))
    }

    fn outer(&self, q: f64) -> NormWeights {
        NormWeights::new(self.s, self.r, self.p, q, self.a_exp, self.a_mom).unwrap()
    }

    fn inner(&self, q: f64) -> NormWeights {
        NormWeights::new(self.s1, self.r1, self.p, q, self.a_exp, self.a_mom).unwrap()
    }

    fn describe(&self) -> String {
        format!("s={} r={} s'={} r'={} p={} a={} 𝐚={}", self.s, self.r, self.s1, self.r1, self.p, self.a_exp, self.a_mom)
    }
}

/// ‖[X,Y]‖_{s',r',q,𝐚} ≤ 2^{2n+3} max{s/(s−s'), r/(r−r')} ‖X‖_{s,r,q,𝐚}‖Y‖_{s,r,p,𝐚}.
fn commutator<R: Rng>(rng: &mut R, count: usize) -> LemmaTally {
    let mut t = LemmaTally::new("commutator");
    for _ in 0..count {
        let js = random_sites(rng);
        let sites = Arc::new(SiteSet::new(&js.iter().map(|j| *j as i64).collect::<Vec<_>>(), 5).unwrap());
        let n = js.len();
        let budget = TruncationBudget::new(6, 2 * K_TRUNC);
        let d = Domains::draw(rng);
        let (tx, ty) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let x = hamiltonian_vector_field(&random_hamiltonian(rng, &sites, budget, tx));
        let y = hamiltonian_vector_field(&random_hamiltonian(rng, &sites, budget, ty));
        let lhs = majorant_norm(&x.commutator(&y).unwrap(), &d.inner(d.q));
        let rhs = 2f64.powi(2 * n as i32 + 3) * d.factor() * majorant_norm(&x, &d.outer(d.q)) * majorant_norm(&y, &d.outer(d.p));
        t.check(lhs, rhs, || format!("J={js:?} {}", d.describe()));
    }
    t
}

/// ‖X_{H∘Φ_F}‖ ≤ ‖X_H‖/(1 − 2^{2n+5}e max{…}‖X_F‖) when the denominator is
/// positive. The transformed field is measured with the weights of D(s,r)
/// over the smaller domain D(s',r').
fn time_one_flow<R: Rng>(rng: &mut R, count: usize) -> LemmaTally {
    let mut t = LemmaTally::new("time-one-flow");
    for _ in 0..count {
        let js = random_sites(rng);
        let sites = Arc::new(SiteSet::new(&js.iter().map(|j| *j as i64).collect::<Vec<_>>(), 5).unwrap());
        let n = js.len();
        let budget = TruncationBudget::new(6, 2 * K_TRUNC);
        let d = Domains::draw(rng);
        let (th, tf) = (rng.gen_range(1..=6), rng.gen_range(1..=4));
        let h = random_hamiltonian(rng, &sites, budget, th);
        let mut f = random_hamiltonian(rng, &sites, budget, tf);
        let c = 2f64.powi(2 * n as i32 + 5) * E * d.factor();
        let xf = majorant_norm(&hamiltonian_vector_field(&f), &d.outer(d.p));
        // scale F so that c‖X_F‖ = θ < 1
        let theta = rng.gen_range(0.01..0.95);
        f = f.scale(C::new(theta / (c * xf), 0.0));
        let xf = majorant_norm(&hamiltonian_vector_field(&f), &d.outer(d.p));
        let (hf, _) = h.lie_transform(&f, LieOptions::default()).unwrap();
        let lhs = majorant_norm(&hamiltonian_vector_field(&hf), &d.outer(d.q).on_domain(d.s1, d.r1));
        let rhs = majorant_norm(&hamiltonian_vector_field(&h), &d.outer(d.q)) / (1.0 - c * xf);
        t.check(lhs, rhs, || format!("J={js:?} θ={theta} {}", d.describe()));
    }
    t
}

/// Runs every check on `sample_count` random instances each.
pub fn verify_appendix_bounds(sample_count: usize, seed: u64) -> AppendixReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lemmas = lattice(&mut rng, sample_count);
    lemmas.push(tau_loss(&mut rng, sample_count));
    lemmas.push(quadratic_smoothing(&mut rng, sample_count));
    lemmas.push(commutator(&mut rng, sample_count));
    lemmas.push(time_one_flow(&mut rng, sample_count));
    AppendixReport { seed, samples_per_lemma: sample_count, lemmas }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_counts() {
        use crate::fourier::modes_upto;
        assert_eq!(count_l1_sphere(1, 3), 2.0);
        assert_eq!(count_l1_sphere(2, 1), 4.0);
        assert_eq!(count_l1_sphere(2, 3), 12.0);
        assert_eq!(count_l1_sphere(3, 2), 18.0);
        let direct = modes_upto(2, 5).iter().filter(|k| l1(k) == 5).count();
        assert_eq!(count_l1_sphere(2, 5), direct as f64);
    }

    #[test]
    fn lattice_example() {
        // n = 2, σ = 1/2: direct sum against (1+e)²/σ²
        let mut direct = 0.0;
        for a in -40i32..=40 {
            for b in -40i32..=40 {
                let k = (a.abs() + b.abs()) as f64;
                if k <= 40.0 {
                    direct += (-k).exp();
                }
            }
        }
        assert!((lattice_sum(2, 0.5, 0.0, 40) - direct).abs() < 1e-12);
        assert!(direct <= (1.0 + E).powi(2) / 0.25);
    }

    #[test]
    fn single_mode_tau_loss() {
        let js = [-1, 2];
        let mut u = Fourier::zero(&js, 0);
        u.set(&[3, 1], C::new(0.5, 0.0));
        let (s, sigma, tau) = (0.4, 0.1, 5.0);
        let lhs = u.norm_tau(s - sigma, tau + 1.0);
        assert!((lhs - 0.5 * 4f64.powf(6.0) * (4.0 * 0.3f64).exp()).abs() < 1e-9);
        assert!(lhs <= (6.0 / E).powf(6.0) / sigma.powf(6.0) * u.norm(s, 0.0));
    }

    #[test]
    fn zero_commutator() {
        let sites = Arc::new(SiteSet::new(&[-1, 2], 5).unwrap());
        let z = hamiltonian_vector_field(&Series::new(sites, TruncationBudget::new(4, 10)));
        let w = NormWeights::new(0.3, 0.3, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(majorant_norm(&z.commutator(&z).unwrap(), &w), 0.0);
    }
}
