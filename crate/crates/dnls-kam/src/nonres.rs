//! Small divisors, the constant audit of assumptions (A)-(C), the
//! dichotomy lemma for the affine divisors, resonance zones and the
//! excluded-measure bookkeeping.

use crate::dnls::FrequencyData;
use crate::error::{Error, Result};
use crate::fourier::modes_upto;
use crate::norms::ParameterGrid;
use crate::SiteSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// (k, l) with l a finitely supported map on normal modes, |l| ≤ 2.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DivisorSpec {
    pub k: Vec<i64>,
    /// Sorted by mode, no zero entries.
    pub l: Vec<(i32, i64)>,
}

impl DivisorSpec {
    pub fn new(k: &[i64], l: &[(i32, i64)]) -> Result<Self> {
        let mut acc: BTreeMap<i32, i64> = BTreeMap::new();
        for &(j, c) in l {
            if j == 0 {
                return Err(Error::ZeroIndex);
            }
            *acc.entry(j).or_default() += c;
        }
        let l: Vec<(i32, i64)> = acc.into_iter().filter(|(_, c)| *c != 0).collect();
        if l.iter().map(|(_, c)| c.abs()).sum::<i64>() > 2 {
            return Err(Error::Config("divisor needs |l| ≤ 2".into()));
        }
        Ok(Self { k: k.to_vec(), l })
    }

    pub fn k_norm(&self) -> i64 {
        self.k.iter().map(|x| x.abs()).sum()
    }

    /// ⟨k⟩ = max{1,|k|}.
    pub fn bracket_k(&self) -> i64 {
        self.k_norm().max(1)
    }

    /// ⟨l⟩_∞ = max{1, sup|j l_j|}.
    pub fn bracket_l(&self) -> i64 {
        self.l.iter().map(|(j, c)| (*j as i64 * c).abs()).max().unwrap_or(0).max(1)
    }

    /// Σ|j l_j|.
    pub fn l_weight(&self) -> i64 {
        self.l.iter().map(|(j, c)| (*j as i64 * c).abs()).sum()
    }

    /// max{|k|, Σ|j l_j|}.
    pub fn scale(&self) -> i64 {
        self.k_norm().max(self.l_weight())
    }

    /// Some(j) with j > 0 when l = ±(e_{−j} − e_j).
    pub fn pair_mode(&self) -> Option<i32> {
        match self.l.as_slice() {
            [(a, ca), (b, cb)] if *a == -*b && ca.abs() == 1 && *ca == -*cb => Some(b.abs()),
            _ => None,
        }
    }

    pub fn is_supported_on(&self, sites: &SiteSet) -> bool {
        self.k.len() == sites.n() && self.l.iter().all(|(j, _)| !sites.sites().contains(j))
    }
}

/// D(ξ) = I + g·ξ with g_b = num_b/(2n−1), all exact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineDivisor {
    pub integer: i128,
    pub grad_num: Vec<i128>,
    pub den: i128,
}

impl AffineDivisor {
    pub fn of(spec: &DivisorSpec, sites: &SiteSet) -> Self {
        let n = sites.n() as i128;
        let (big_l, q) = l_sums(&spec.l);
        let mut integer = q;
        let mut grad_num = Vec::with_capacity(sites.n());
        for (b, &jb) in sites.sites().iter().enumerate() {
            let kb = spec.k[b] as i128;
            integer += kb * (jb as i128) * (jb as i128);
            grad_num.push((2 * n - 1) * kb * jb as i128 + 2 * big_l);
        }
        Self { integer, grad_num, den: 2 * n - 1 }
    }

    pub fn is_identically_zero(&self) -> bool {
        self.integer == 0 && self.grad_num.iter().all(|g| *g == 0)
    }

    pub fn grad(&self) -> Vec<f64> {
        self.grad_num.iter().map(|g| *g as f64 / self.den as f64).collect()
    }

    pub fn eval(&self, xi: &[f64]) -> f64 {
        self.integer as f64 + self.grad().iter().zip(xi).map(|(g, x)| g * x).sum::<f64>()
    }
}

fn l_sums(l: &[(i32, i64)]) -> (i128, i128) {
    l.iter().fold((0, 0), |(a, b), (j, c)| {
        let (j, c) = (*j as i128, *c as i128);
        (a + c * j, b + c * j * j)
    })
}

/// Frequencies at one parameter point: integer parts are implicit (j²),
/// only the small parts are stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqPoint {
    pub xi: Vec<f64>,
    pub omega_small: Vec<f64>,
    /// Small part of Ω̄_j for the retained modes; other modes use the affine map.
    pub big_small: BTreeMap<i32, f64>,
}

impl FreqPoint {
    pub fn affine(fd: &FrequencyData, xi: &[f64]) -> Self {
        Self { xi: xi.to_vec(), omega_small: fd.omega_small(xi), big_small: BTreeMap::new() }
    }

    fn affine_big(&self, j: i32) -> f64 {
        let n = self.xi.len() as f64;
        j as f64 * self.xi.iter().sum::<f64>() / (n - 0.5)
    }

    pub fn big_omega_small(&self, j: i32) -> f64 {
        self.big_small.get(&j).copied().unwrap_or_else(|| self.affine_big(j))
    }
}

/// ⟨k,ω⟩ + ⟨l,Ω⟩ with the integer part summed exactly.
pub fn divisor(spec: &DivisorSpec, sites: &SiteSet, f: &FreqPoint) -> f64 {
    let (_, q) = l_sums(&spec.l);
    let mut integer = q;
    let mut small = 0.0;
    for (b, &jb) in sites.sites().iter().enumerate() {
        integer += spec.k[b] as i128 * (jb as i128) * (jb as i128);
        small += spec.k[b] as f64 * f.omega_small[b];
    }
    for (j, c) in &spec.l {
        small += *c as f64 * f.big_omega_small(*j);
    }
    integer as f64 + small
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma32 {
    Inequality0,
    InequalityB(usize),
    None,
}

/// First of the n+1 dichotomy inequalities that holds, in exact arithmetic.
pub fn lemma32(spec: &DivisorSpec, sites: &SiteSet) -> Lemma32 {
    let (big_l, q) = l_sums(&spec.l);
    lemma32_raw(&spec.k, big_l, q, spec.l_weight() as i128, sites)
}

fn lemma32_raw(k: &[i64], big_l: i128, q: i128, w: i128, sites: &SiteSet) -> Lemma32 {
    let n = sites.n() as i128;
    let kn: i128 = k.iter().map(|x| x.abs() as i128).sum();
    let mx = kn.max(w);
    let mut integer = q;
    for (b, &jb) in sites.sites().iter().enumerate() {
        integer += k[b] as i128 * (jb as i128) * (jb as i128);
    }
    if 100 * n * integer.abs() >= mx {
        return Lemma32::Inequality0;
    }
    let s = sites.sum_abs() as i128;
    for (b, &jb) in sites.sites().iter().enumerate() {
        let g = (2 * n - 1) * k[b] as i128 * jb as i128 + 2 * big_l;
        if 100 * n * s * g.abs() >= (2 * n - 1) * mx {
            return Lemma32::InequalityB(b + 1);
        }
    }
    Lemma32::None
}

/// Enumeration cutoffs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumRange {
    pub k_max: u32,
    pub mode_max: i32,
}

impl Default for EnumRange {
    fn default() -> Self {
        Self { k_max: 20, mode_max: 60 }
    }
}

/// Normal modes 0 < |j| ≤ mode_max off the sites.
pub fn normal_modes(sites: &SiteSet, mode_max: i32) -> Vec<i32> {
    (-mode_max..=mode_max).filter(|j| *j != 0 && !sites.sites().contains(j)).collect()
}

/// Every l with |l| ≤ 2 supported on `modes`, in a fixed order.
pub fn enumerate_l(modes: &[i32]) -> Vec<Vec<(i32, i64)>> {
    let mut out = vec![vec![]];
    for &j in modes {
        out.push(vec![(j, 1)]);
        out.push(vec![(j, -1)]);
        out.push(vec![(j, 2)]);
        out.push(vec![(j, -2)]);
    }
    for (a, &i) in modes.iter().enumerate() {
        for &j in &modes[a + 1..] {
            for (ci, cj) in [(1, 1), (-1, -1), (1, -1), (-1, 1)] {
                out.push(vec![(i, ci), (j, cj)]);
            }
        }
    }
    out
}

/// Distinct (Σl_j j, Σl_j j², Σ|j l_j|) with multiplicities: everything the
/// affine divisor and its weight depend on.
fn l_classes(modes: &[i32]) -> Vec<((i128, i128, i128), u64)> {
    let mut m: BTreeMap<(i128, i128, i128), u64> = BTreeMap::new();
    for l in enumerate_l(modes) {
        let (a, b) = l_sums(&l);
        let w: i128 = l.iter().map(|(j, c)| (*j as i128 * *c as i128).abs()).sum();
        *m.entry((a, b, w)).or_default() += 1;
    }
    m.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DichotomyReport {
    pub cases: u64,
    pub satisfied: u64,
    pub by_inequality: Vec<u64>,
    /// A few (k, Σl_j j, Σl_j j²) triples where all inequalities fail.
    pub failures: Vec<(Vec<i64>, i128, i128)>,
}

/// Runs [`lemma32`] over all |k| ≤ k_max and |l| ≤ 2 supported in |j| ≤ mode_max.
pub fn lemma32_exhaustive(sites: &SiteSet, range: EnumRange) -> DichotomyReport {
    let classes = l_classes(&normal_modes(sites, range.mode_max));
    let ks = modes_upto(sites.n(), range.k_max);
    let n = sites.n();
    let parts: Vec<(Vec<u64>, u64, Vec<(Vec<i64>, i128, i128)>)> = ks
        .par_iter()
        .map(|k| {
            let k: Vec<i64> = k.iter().map(|x| *x as i64).collect();
            let mut by = vec![0u64; n + 2];
            let mut fails = Vec::new();
            let mut total = 0;
            for &((a, b, w), mult) in &classes {
                total += mult;
                match lemma32_raw(&k, a, b, w, sites) {
                    Lemma32::Inequality0 => by[0] += mult,
                    Lemma32::InequalityB(i) => by[i] += mult,
                    Lemma32::None => {
                        by[n + 1] += mult;
                        if fails.len() < 4 {
                            fails.push((k.clone(), a, b));
                        }
                    }
                }
            }
            (by, total, fails)
        })
        .collect();
    let mut by = vec![0u64; n + 2];
    let mut cases = 0;
    let mut failures = Vec::new();
    for (b, t, f) in parts {
        for (x, y) in by.iter_mut().zip(b) {
            *x += y;
        }
        cases += t;
        if failures.len() < 16 {
            failures.extend(f);
        }
    }
    let unsat = by.pop().unwrap();
    DichotomyReport { cases, satisfied: cases - unsat, by_inequality: by, failures }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub assumption: String,
    pub detail: String,
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub m: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3_estimate: f64,
    pub m_claimed: f64,
    pub m1_claimed: f64,
    pub m2_claimed: f64,
    pub m3_claimed: f64,
    pub witnesses: Vec<Witness>,
}

/// Realised constants of (A), (B), (C) for the affine maps on the grid and
/// the enumerated range; witnesses list every §-value that fails.
pub fn audit_assumptions(sites: &SiteSet, grid: &ParameterGrid, range: EnumRange) -> Result<AuditReport> {
    if grid.is_empty() || range.mode_max < 1 {
        return Err(Error::EmptyRange("audit needs grid points and modes".into()));
    }
    if grid.pairs.is_empty() {
        return Err(Error::EmptyRange("audit needs parameter pairs".into()));
    }
    let fd = FrequencyData::new(sites);
    let n = sites.n();
    let nf = n as f64;
    let modes = normal_modes(sites, range.mode_max);
    let pts: Vec<FreqPoint> = grid.points.iter().map(|x| FreqPoint::affine(&fd, x)).collect();
    let mut witnesses = Vec::new();

    // (A): Ω_i − Ω_j over Z_* ∪ {0}
    let mut with0 = modes.clone();
    with0.push(0);
    let mut m = f64::INFINITY;
    for f in &pts {
        let om = |j: i32| if j == 0 { 0.0 } else { f.big_omega_small(j) };
        for &i in &with0 {
            for &j in &with0 {
                let d2 = (i as i64 * i as i64 - j as i64 * j as i64) as f64;
                if d2 == 0.0 {
                    continue;
                }
                m = m.min(((d2 + om(i) - om(j)) / d2).abs());
            }
        }
    }

    // (B): difference quotients in ℓ∞
    let (mut m1, mut m2): (f64, f64) = (0.0, 0.0);
    for &(a, b) in &grid.pairs {
        let d = grid.dist(a, b);
        let dw = pts[a].omega_small.iter().zip(&pts[b].omega_small).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        m1 = m1.max(dw / d);
        // Ω_j/j differences are j-independent for the affine maps; take the sup over modes anyway
        for &j in &modes {
            let dj = (pts[a].big_omega_small(j) - pts[b].big_omega_small(j)).abs() / j.abs() as f64;
            m2 = m2.max(dj / d);
        }
    }

    // (C) along the unit gradient direction
    let classes = l_classes(&modes);
    let ks = modes_upto(n, range.k_max);
    let xs = &grid.points;
    let best: Vec<(f64, String)> = ks
        .par_iter()
        .map(|k| {
            let k: Vec<i64> = k.iter().map(|x| *x as i64).collect();
            let mut best = (f64::INFINITY, String::new());
            let base: i128 = sites.sites().iter().zip(&k).map(|(j, kb)| *kb as i128 * (*j as i128).pow(2)).sum();
            for &((a, q, w), _) in &classes {
                let kn: i128 = k.iter().map(|x| x.abs() as i128).sum();
                let mx = kn.max(w);
                if mx == 0 {
                    continue;
                }
                let g: Vec<f64> =
                    sites.sites().iter().zip(&k).map(|(j, kb)| *kb as f64 * *j as f64 + a as f64 / (nf - 0.5)).collect();
                let integer = (base + q) as f64;
                let inf = xs
                    .iter()
                    .map(|x| (integer + g.iter().zip(x).map(|(g, x)| g * x).sum::<f64>()).abs())
                    .fold(f64::INFINITY, f64::min);
                let slope = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ratio = (inf + slope) / mx as f64;
                if ratio < best.0 {
                    best = (ratio, format!("k={k:?} Σl_j j={a} Σl_j j²={q}"));
                }
            }
            best
        })
        .collect();
    let (m3, m3_at) = best.into_iter().fold((f64::INFINITY, String::new()), |a, b| if b.0 < a.0 { b } else { a });

    let s = sites.sum_abs() as f64;
    let report = AuditReport {
        m,
        m1,
        m2,
        m3_estimate: m3,
        m_claimed: 0.5,
        m1_claimed: sites.c_j() as f64,
        m2_claimed: nf / (nf - 0.5),
        m3_claimed: 1.0 / (100.0 * nf * s),
        witnesses: vec![],
    };
    if report.m < report.m_claimed {
        witnesses.push(Witness { assumption: "A".into(), detail: "min |Ω_i−Ω_j|/|i²−j²|".into(), value: m, bound: 0.5 });
    }
    if report.m1 > report.m1_claimed * (1.0 + 1e-12) {
        witnesses.push(Witness { assumption: "B".into(), detail: "|ω|^lip".into(), value: m1, bound: report.m1_claimed });
    }
    if report.m2 > report.m2_claimed * (1.0 + 1e-12) {
        witnesses.push(Witness { assumption: "B".into(), detail: "|Ω|^lip_{-1}".into(), value: m2, bound: report.m2_claimed });
    }
    if report.m3_estimate < report.m3_claimed {
        witnesses.push(Witness { assumption: "C".into(), detail: m3_at, value: m3, bound: report.m3_claimed });
    }
    Ok(AuditReport { witnesses, ..report })
}

/// Threshold family of a zone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Θ¹: weight ⟨l⟩_∞, threshold α_1.
    General,
    /// Θ²: l = e_{−j} − e_j, weight |j|, threshold α_2.
    Pair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonanceZone {
    pub spec: DivisorSpec,
    pub family: Family,
    pub alpha: f64,
    pub tau: f64,
    pub threshold: f64,
    pub excluded_mask: Vec<bool>,
    pub min_abs: f64,
    pub analytic_measure: Option<f64>,
}

impl ResonanceZone {
    pub fn excluded_count(&self) -> usize {
        self.excluded_mask.iter().filter(|b| **b).count()
    }
}

pub fn family_of(spec: &DivisorSpec) -> Family {
    if spec.pair_mode().is_some() {
        Family::Pair
    } else {
        Family::General
    }
}

/// |D| < α·weight/⟨k⟩^τ at each grid point. With `freqs = None` the affine
/// maps are used and the exact slab ∩ box volume is filled in.
pub fn resonance_zone(
    spec: &DivisorSpec,
    alpha: f64,
    tau: f64,
    sites: &SiteSet,
    grid: &ParameterGrid,
    freqs: Option<&[FreqPoint]>,
) -> ResonanceZone {
    let family = family_of(spec);
    let weight = match family {
        Family::General => spec.bracket_l(),
        Family::Pair => spec.pair_mode().unwrap() as i64,
    } as f64;
    let threshold = alpha * weight / (spec.bracket_k() as f64).powf(tau);
    let aff = AffineDivisor::of(spec, sites);
    let vals: Vec<f64> = match freqs {
        Some(fs) => fs.iter().map(|f| divisor(spec, sites, f)).collect(),
        None => grid.points.iter().map(|x| aff.eval(x)).collect(),
    };
    let excluded_mask: Vec<bool> = vals.iter().map(|v| v.abs() < threshold).collect();
    let min_abs = vals.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let analytic_measure = match freqs {
        None => Some(slab_box_volume(aff.integer as f64, &aff.grad(), threshold, &grid.lo, &grid.hi)),
        Some(_) => None,
    };
    ResonanceZone { spec: spec.clone(), family, alpha, tau, threshold, excluded_mask, min_abs, analytic_measure }
}

/// Volume of {ξ ∈ Π[lo,hi] : g·ξ ≤ c}.
pub fn halfspace_box_volume(g: &[f64], c: f64, lo: &[f64], hi: &[f64]) -> f64 {
    // shift to [0,h] with all g_b ≥ 0
    let mut c = c;
    let mut gs = Vec::new();
    let mut hs = Vec::new();
    let mut flat = 1.0;
    for b in 0..g.len() {
        let h = hi[b] - lo[b];
        let gb = g[b];
        if gb == 0.0 {
            flat *= h;
            continue;
        }
        if gb > 0.0 {
            c -= gb * lo[b];
            gs.push(gb);
        } else {
            c -= gb * hi[b];
            gs.push(-gb);
        }
        hs.push(h);
    }
    let d = gs.len();
    if d == 0 {
        return if c >= 0.0 { flat } else { 0.0 };
    }
    let full: f64 = hs.iter().product();
    let top: f64 = gs.iter().zip(&hs).map(|(g, h)| g * h).sum();
    if c <= 0.0 {
        return 0.0;
    }
    if c >= top {
        return flat * full;
    }
    let fact: f64 = (1..=d).map(|i| i as f64).product();
    let gp: f64 = gs.iter().product();
    let mut acc = 0.0;
    for mask in 0u32..(1 << d) {
        let mut shift = 0.0;
        for b in 0..d {
            if mask & (1 << b) != 0 {
                shift += gs[b] * hs[b];
            }
        }
        let v = (c - shift).max(0.0).powi(d as i32);
        if mask.count_ones() % 2 == 0 {
            acc += v;
        } else {
            acc -= v;
        }
    }
    flat * (acc / (fact * gp)).clamp(0.0, full)
}

/// Volume of {ξ ∈ box : |I + g·ξ| < t}.
pub fn slab_box_volume(integer: f64, g: &[f64], t: f64, lo: &[f64], hi: &[f64]) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let up = halfspace_box_volume(g, t - integer, lo, hi);
    let down = halfspace_box_volume(g, -t - integer, lo, hi);
    (up - down).max(0.0)
}

/// Cells a single hyperplane can cross on the tensor grid.
pub fn cells_per_boundary(grid: &ParameterGrid) -> f64 {
    let n = grid.dim();
    let nmax = grid.counts.iter().copied().max().unwrap_or(1) as f64;
    n as f64 * nmax.powi(n as i32 - 1)
}

/// One recorded zone in the ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneRecord {
    pub step: usize,
    pub spec: DivisorSpec,
    pub family: Family,
    pub threshold: f64,
    pub min_abs: f64,
    pub excluded_points: usize,
    pub analytic_measure: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepExclusion {
    pub step: usize,
    pub theta1: Vec<bool>,
    pub theta2: Vec<bool>,
    /// Points removed by failed solver floors at this step.
    pub solver: Vec<bool>,
    pub analytic_theta1: f64,
    pub analytic_theta2: f64,
}

/// Record of everything removed from the parameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusionLedger {
    pub points: usize,
    pub cell_volume: f64,
    pub box_volume: f64,
    pub zones: Vec<ZoneRecord>,
    pub steps: Vec<StepExclusion>,
}

impl ExclusionLedger {
    pub fn new(grid: &ParameterGrid) -> Self {
        Self { points: grid.len(), cell_volume: grid.cell_volume(), box_volume: grid.box_volume(), zones: vec![], steps: vec![] }
    }

    fn step_mut(&mut self, step: usize) -> &mut StepExclusion {
        if let Some(i) = self.steps.iter().position(|s| s.step == step) {
            return &mut self.steps[i];
        }
        let p = self.points;
        self.steps.push(StepExclusion {
            step,
            theta1: vec![false; p],
            theta2: vec![false; p],
            solver: vec![false; p],
            ..Default::default()
        });
        self.steps.sort_by_key(|s| s.step);
        let i = self.steps.iter().position(|s| s.step == step).unwrap();
        &mut self.steps[i]
    }

    /// Adds a zone; zones with no excluded point and no analytic mass are not kept.
    pub fn record(&mut self, step: usize, z: &ResonanceZone) {
        let st = self.step_mut(step);
        let mask = match z.family {
            Family::General => &mut st.theta1,
            Family::Pair => &mut st.theta2,
        };
        for (m, e) in mask.iter_mut().zip(&z.excluded_mask) {
            *m |= *e;
        }
        let am = z.analytic_measure.unwrap_or(0.0);
        match z.family {
            Family::General => st.analytic_theta1 += am,
            Family::Pair => st.analytic_theta2 += am,
        }
        if z.excluded_count() > 0 || am > 0.0 {
            self.zones.push(ZoneRecord {
                step,
                spec: z.spec.clone(),
                family: z.family,
                threshold: z.threshold,
                min_abs: z.min_abs,
                excluded_points: z.excluded_count(),
                analytic_measure: z.analytic_measure,
            });
        }
    }

    pub fn record_solver(&mut self, step: usize, point: usize) {
        self.step_mut(step).solver[point] = true;
    }

    pub fn cumulative_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.points];
        for s in &self.steps {
            for i in 0..self.points {
                m[i] |= s.theta1[i] || s.theta2[i] || s.solver[i];
            }
        }
        m
    }

    pub fn family_mask(&self, family: Family) -> Vec<bool> {
        let mut m = vec![false; self.points];
        for s in &self.steps {
            let src = match family {
                Family::General => &s.theta1,
                Family::Pair => &s.theta2,
            };
            for i in 0..self.points {
                m[i] |= src[i];
            }
        }
        m
    }
}

/// Every (k, l) whose affine zone can be nonempty, by family, over the
/// enumerated range (k ≠ 0 for Θ¹; |j| ≤ pi_max for Θ²).
pub fn enumerate_specs(sites: &SiteSet, range: EnumRange, pi_max: i32) -> Vec<DivisorSpec> {
    let modes = normal_modes(sites, range.mode_max);
    let ls = enumerate_l(&modes);
    let mut out = Vec::new();
    for k in modes_upto(sites.n(), range.k_max) {
        let k: Vec<i64> = k.iter().map(|x| *x as i64).collect();
        let k0 = k.iter().all(|x| *x == 0);
        for l in &ls {
            let spec = DivisorSpec { k: k.clone(), l: l.clone() };
            match spec.pair_mode() {
                Some(j) => {
                    // one orientation per pair; the other is the same zone
                    if spec.l[0].1 == 1 && j <= pi_max {
                        out.push(spec);
                    }
                }
                None => {
                    if !k0 {
                        out.push(spec);
                    }
                }
            }
        }
    }
    out
}

/// Zones of one step at the given thresholds; only zones that touch the
/// grid or have positive analytic mass are returned.
pub fn step_zones(
    sites: &SiteSet,
    grid: &ParameterGrid,
    specs: &[DivisorSpec],
    alpha1: f64,
    alpha2: f64,
    tau: f64,
    freqs: Option<&[FreqPoint]>,
) -> Vec<ResonanceZone> {
    let lo = &grid.lo;
    let hi = &grid.hi;
    specs
        .par_iter()
        .filter_map(|s| {
            let alpha = if s.pair_mode().is_some() { alpha2 } else { alpha1 };
            if freqs.is_none() {
                // cheap reject: the affine divisor stays away from the slab on the whole box
                let a = AffineDivisor::of(s, sites);
                let g = a.grad();
                let (mut mn, mut mx) = (a.integer as f64, a.integer as f64);
                for b in 0..g.len() {
                    let (p, q) = (g[b] * lo[b], g[b] * hi[b]);
                    mn += p.min(q);
                    mx += p.max(q);
                }
                let w = if s.pair_mode().is_some() { s.pair_mode().unwrap() as f64 } else { s.bracket_l() as f64 };
                let t = alpha * w / (s.bracket_k() as f64).powf(tau);
                if mn >= t || mx <= -t {
                    return None;
                }
            }
            let z = resonance_zone(s, alpha, tau, sites, grid, freqs);
            if z.excluded_count() > 0 || z.analytic_measure.unwrap_or(0.0) > 0.0 {
                Some(z)
            } else {
                None
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub excluded_fraction: f64,
    pub theta1_fraction: f64,
    pub theta2_fraction: f64,
    /// Analytic (summed) totals per step and family.
    pub per_step_theta1: Vec<f64>,
    pub per_step_theta2: Vec<f64>,
    pub alpha: f64,
    pub rho: f64,
    /// Excluded measure / (ρ^{n−1} α): the realised Lemma 7.1/7.2 constant.
    pub realised_constant: f64,
}

pub fn measure_report(ledger: &ExclusionLedger, alpha: f64, rho: f64, n: usize) -> MeasureReport {
    let frac = |m: &[bool]| {
        if ledger.points == 0 {
            0.0
        } else {
            m.iter().filter(|b| **b).count() as f64 / ledger.points as f64
        }
    };
    let all = frac(&ledger.cumulative_mask());
    let scale = rho.powi(n as i32 - 1) * alpha;
    MeasureReport {
        excluded_fraction: all,
        theta1_fraction: frac(&ledger.family_mask(Family::General)),
        theta2_fraction: frac(&ledger.family_mask(Family::Pair)),
        per_step_theta1: ledger.steps.iter().map(|s| s.analytic_theta1).collect(),
        per_step_theta2: ledger.steps.iter().map(|s| s.analytic_theta2).collect(),
        alpha,
        rho,
        realised_constant: if scale > 0.0 { all * ledger.box_volume / scale } else { 0.0 },
    }
}

/// One point of an α sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    /// Σ of exact slab ∩ box volumes.
    pub analytic_sum: f64,
    /// Grid volume of the union of masks.
    pub grid_union: f64,
    /// Σ of per-zone grid volumes.
    pub grid_sum: f64,
    /// max over zones of |grid − analytic| / (boundaries · cells per boundary · cell volume).
    pub worst_cell_ratio: f64,
    pub zones: usize,
}

/// Affine zones at α (for both families) across the sweep.
pub fn alpha_sweep(
    sites: &SiteSet,
    grid: &ParameterGrid,
    specs: &[DivisorSpec],
    alphas: &[f64],
    tau: f64,
) -> Result<Vec<SweepPoint>> {
    if alphas.is_empty() {
        return Err(Error::EmptyRange("α sweep".into()));
    }
    Ok(alphas.iter().map(|&a| sweep_point(grid, a, &step_zones(sites, grid, specs, a, a, tau, None))).collect())
}

/// Totals of one sweep point from its affine zones.
pub fn sweep_point(grid: &ParameterGrid, alpha: f64, zones: &[ResonanceZone]) -> SweepPoint {
    let cell = grid.cell_volume();
    let per_boundary = cells_per_boundary(grid);
    let mut union = vec![false; grid.len()];
    let (mut asum, mut gsum, mut worst): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for z in zones {
        let a = z.analytic_measure.unwrap_or(0.0);
        let g = z.excluded_count() as f64 * cell;
        asum += a;
        gsum += g;
        worst = worst.max((g - a).abs() / (2.0 * per_boundary * cell));
        for (u, e) in union.iter_mut().zip(&z.excluded_mask) {
            *u |= *e;
        }
    }
    let gu = union.iter().filter(|b| **b).count() as f64 * cell;
    SweepPoint { alpha, analytic_sum: asum, grid_union: gu, grid_sum: gsum, worst_cell_ratio: worst, zones: zones.len() }
}

/// Affine Θ² mass at each step: pair zones with |j| ≤ min(Π_ν, mode_max)
/// at threshold α_{2,ν}. `steps` holds (α_{2,ν}, Π_ν).
pub fn pair_step_totals(
    sites: &SiteSet,
    grid: &ParameterGrid,
    range: EnumRange,
    steps: &[(f64, f64)],
    tau: f64,
) -> Vec<f64> {
    steps
        .iter()
        .map(|&(a2, pi)| {
            let pi_max = pi.min(range.mode_max as f64).floor() as i32;
            let specs: Vec<DivisorSpec> =
                enumerate_specs(sites, range, pi_max).into_iter().filter(|s| s.pair_mode().is_some()).collect();
            step_zones(sites, grid, &specs, 0.0, a2, tau, None)
                .iter()
                .map(|z| z.analytic_measure.unwrap_or(0.0))
                .sum()
        })
        .collect()
}

/// c ρ^{n−1} α / 2^ν with c = 4 Σ_{|k|≤k_max} ⟨k⟩^{−τ} / M_3: the per-step
/// ceiling on the Θ² mass when α_{2,ν} = α 2^{−ν}/Π_ν.
pub fn theta2_bound(alpha: f64, rho: f64, m3: f64, tau: f64, n: usize, k_max: u32, nu: usize) -> f64 {
    let lattice: f64 = modes_upto(n, k_max)
        .iter()
        .map(|k| (k.iter().map(|x| x.unsigned_abs() as f64).sum::<f64>().max(1.0)).powf(-tau))
        .sum();
    4.0 * rho.powi(n as i32 - 1) * alpha * lattice / (m3 * 2f64.powi(nu as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    /// Analytic total at 2α over the total at α, per consecutive pair
    /// (normalised to an exact doubling when the α step differs).
    pub doubling_ratios: Vec<f64>,
    pub linear_ok: bool,
    pub worst_cell_ratio: f64,
    pub cells_ok: bool,
    pub theta2_per_step: Vec<f64>,
    pub theta2_bounds: Vec<f64>,
    /// max_ν Θ²_ν / bound_ν.
    pub theta2_worst_ratio: f64,
    pub geometric_ok: bool,
    pub ok: bool,
}

/// Linear scaling per doubling within [1.5, 2.5], grid vs analytic within one
/// cell per boundary, and Θ² totals under a bound that halves every step.
pub fn scaling_report(sweep: &[SweepPoint], theta2_per_step: &[f64], theta2_bounds: &[f64]) -> ScalingReport {
    let doubling_ratios: Vec<f64> = sweep
        .windows(2)
        .map(|w| {
            let doublings = (w[1].alpha / w[0].alpha).log2();
            if w[0].analytic_sum > 0.0 && doublings > 0.0 {
                (w[1].analytic_sum / w[0].analytic_sum).powf(1.0 / doublings)
            } else {
                f64::NAN
            }
        })
        .collect();
    let linear_ok = !doubling_ratios.is_empty() && doubling_ratios.iter().all(|r| (1.5..=2.5).contains(r));
    let worst_cell_ratio = sweep.iter().map(|p| p.worst_cell_ratio).fold(0.0, f64::max);
    let cells_ok = !sweep.is_empty() && worst_cell_ratio <= 1.0;
    let halving = theta2_bounds.windows(2).all(|w| w[1] <= 0.5 * w[0] * (1.0 + 1e-12));
    let theta2_worst_ratio =
        theta2_per_step.iter().zip(theta2_bounds).map(|(t, b)| t / b).fold(0.0, f64::max);
    let geometric_ok = !theta2_per_step.is_empty()
        && theta2_per_step.len() == theta2_bounds.len()
        && halving
        && theta2_worst_ratio <= 1.0;
    ScalingReport {
        doubling_ratios,
        linear_ok,
        worst_cell_ratio,
        cells_ok,
        theta2_per_step: theta2_per_step.to_vec(),
        theta2_bounds: theta2_bounds.to_vec(),
        theta2_worst_ratio,
        geometric_ok,
        ok: linear_ok && cells_ok && geometric_ok,
    }
}

/// Modes of a spec, for reporting.
pub fn spec_modes(spec: &DivisorSpec) -> BTreeSet<i32> {
    spec.l.iter().map(|(j, _)| *j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counterexample_divisor() {
        let sites = SiteSet::new(&[-1, 1], 8).unwrap();
        let spec = DivisorSpec::new(&[4, -4], &[(3, 1), (-3, -1)]).unwrap();
        assert!(AffineDivisor::of(&spec, &sites).is_identically_zero());
        assert_eq!(lemma32(&spec, &sites), Lemma32::None);
    }

    #[test]
    fn divisor_examples() {
        let sites = SiteSet::new(&[-1, 2], 8).unwrap();
        let fd = FrequencyData::new(&sites);
        let f = FreqPoint::affine(&fd, &[0.0, 0.0]);
        let spec = DivisorSpec::new(&[0, 0], &[(5, 1), (4, -1)]).unwrap();
        assert_eq!(divisor(&spec, &sites, &f), 9.0);
        let zero = DivisorSpec::new(&[0, 0], &[]).unwrap();
        assert_eq!(divisor(&zero, &sites, &FreqPoint::affine(&fd, &[0.3, 0.2])), 0.0);
        let spec = DivisorSpec::new(&[4, -1], &[]).unwrap();
        assert_eq!(lemma32(&spec, &sites), Lemma32::InequalityB(1));
        let spec = DivisorSpec::new(&[0, 0], &[(7, 1)]).unwrap();
        assert_eq!(lemma32(&spec, &sites), Lemma32::Inequality0);
    }

    #[test]
    fn halfspace_volume_matches_counting() {
        let (lo, hi) = ([0.1, -0.2], [0.7, 0.5]);
        let g = [1.3, -0.4];
        let exact = halfspace_box_volume(&g, 0.2, &lo, &hi);
        let nn = 800;
        let mut cnt = 0;
        for a in 0..nn {
            for b in 0..nn {
                let x = lo[0] + (hi[0] - lo[0]) * (a as f64 + 0.5) / nn as f64;
                let y = lo[1] + (hi[1] - lo[1]) * (b as f64 + 0.5) / nn as f64;
                if g[0] * x + g[1] * y <= 0.2 {
                    cnt += 1;
                }
            }
        }
        let est = cnt as f64 * 0.6 * 0.7 / (nn * nn) as f64;
        assert!((est - exact).abs() < 2e-3, "{est} {exact}");
        assert_eq!(halfspace_box_volume(&[0.0, 0.0], 1.0, &lo, &hi), 0.6 * 0.7);
    }
}
