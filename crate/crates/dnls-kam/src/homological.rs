//! Homological equations of one KAM step.
//!
//! Every block of the truncated perturbation R = Σ_{deg≤2} is an equation
//!
//!   (⟨k,ω⟩ + λ) F̂_k + (μ * F)_k = p̂_k,   p = −iR,
//!
//! with λ = ⟨β−α, Ω̄⟩ and μ = ⟨β−α, Ω̃⟩ for the z-type blocks and λ = μ = 0 for
//! the x and y blocks. Divisors are carried as an exact integer part plus a
//! small real part; summing them naively in floating point loses the small part.

use crate::error::{Error, Result};
use crate::fourier::{l1, modes_upto, FourierFunction, Mode};
use crate::index::{MultiIndex, Powers};
use crate::linalg;
use crate::nonres::FreqPoint;
use crate::{Fourier, Real, Series, SiteSet, C};
use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use std::collections::{BTreeMap, HashMap};

/// Relative magnitude below which a mode of the coset closure is not retained.
pub const CLOSURE_CUTOFF: f64 = 1e-20;

/// Γ_K f and its tail.
pub fn truncate<T: Real>(f: &FourierFunction<T>, k: u32) -> (FourierFunction<T>, FourierFunction<T>) {
    f.truncate(k)
}

fn int_dot(k: &[i32], w: &[i64]) -> i64 {
    k.iter().zip(w).map(|(a, b)| *a as i64 * b).sum()
}

/// ⟨k,ω⟩ with ω = ω_int + ω_small.
pub fn omega_dot<T: Real>(k: &[i32], omega_int: &[i64], omega_small: &[T]) -> T {
    T::from_i64(int_dot(k, omega_int)).unwrap() + crate::fourier::dot(k, omega_small)
}

fn sgn(j: i32) -> f64 {
    if j < 0 {
        -1.0
    } else {
        1.0
    }
}

fn bracket_k<T: Real>(k: &[i32]) -> T {
    T::from_u32(l1(k).max(1)).unwrap()
}

/// F̂_k = R̂_k/(i⟨k,ω⟩), F̂_0 = 0.
///
/// With `floor = Some((α1, τ))` every divisor is checked against α1/⟨k⟩^τ.
pub fn solve_diagonal<T: Real>(
    rhs: &FourierFunction<T>,
    omega_int: &[i64],
    omega_small: &[T],
    remove_average: bool,
    floor: Option<(T, T)>,
) -> Result<FourierFunction<T>> {
    let mut f = FourierFunction::zero(rhs.sites(), rhs.tag);
    for (k, c) in rhs.iter() {
        if k.iter().all(|x| *x == 0) {
            if !remove_average && !c.is_zero() {
                return Err(Error::HypothesisFailure("right-hand side has nonzero average".into()));
            }
            continue;
        }
        let d = omega_dot(k, omega_int, omega_small);
        if let Some((a1, tau)) = floor {
            let fl = a1 / bracket_k::<T>(k).powf(tau);
            if !(d.abs() >= fl) {
                return Err(excluded(k, d, fl));
            }
        } else if d.is_zero() {
            return Err(excluded(k, d, T::zero()));
        }
        f.set(k, *c / C::new(T::zero(), d));
    }
    Ok(f)
}

fn excluded<T: Real>(k: &[i32], d: T, fl: T) -> Error {
    Error::ExcludedParameter {
        k: k.iter().map(|x| *x as i64).collect(),
        value: d.to_f64().unwrap_or(f64::NAN),
        floor: fl.to_f64().unwrap_or(f64::NAN),
    }
}

/// −i∂_ω u + λu + μ(x)u = p(x) and its truncated variant.
#[derive(Clone, Debug)]
pub struct HomologicalProblem<T: Real> {
    pub omega_int: Vec<i64>,
    pub omega_small: Vec<T>,
    pub lambda_int: i64,
    pub lambda_small: C<T>,
    pub mu: FourierFunction<T>,
    pub p: FourierFunction<T>,
    pub s: T,
    pub sigma: T,
    pub a_mom: T,
    pub tau: T,
    pub alpha1: T,
    pub alpha2: T,
    pub gamma_tilde: T,
    pub c_const: T,
    /// C_J = max|j_b|.
    pub c_j: T,
    pub k_trunc: u32,
    pub mode_cap: u32,
}

impl<T: Real> HomologicalProblem<T> {
    /// Plain problem with no integer split; hypothesis constants are left at 1.
    pub fn new(omega: &[T], lambda: C<T>, mu: FourierFunction<T>, p: FourierFunction<T>) -> Self {
        let n = omega.len();
        let one = T::one();
        Self {
            omega_int: vec![0; n],
            omega_small: omega.to_vec(),
            lambda_int: 0,
            lambda_small: lambda,
            mu,
            p,
            s: T::lit(0.5),
            sigma: T::lit(0.05),
            a_mom: T::zero(),
            tau: T::from_usize(n + 3).unwrap(),
            alpha1: one,
            alpha2: one,
            gamma_tilde: one,
            c_const: one,
            c_j: one,
            k_trunc: 0,
            mode_cap: 24,
        }
    }

    pub fn n(&self) -> usize {
        self.omega_int.len()
    }

    pub fn omega(&self, k: &[i32]) -> T {
        omega_dot(k, &self.omega_int, &self.omega_small)
    }

    /// ⟨k,ω⟩ + λ.
    pub fn divisor(&self, k: &[i32]) -> C<T> {
        let int = int_dot(k, &self.omega_int) + self.lambda_int;
        C::new(T::from_i64(int).unwrap() + crate::fourier::dot(k, &self.omega_small), T::zero()) + self.lambda_small
    }

    pub fn lambda(&self) -> C<T> {
        C::new(T::from_i64(self.lambda_int).unwrap(), T::zero()) + self.lambda_small
    }

    /// |ω| = max_b |ω_b|.
    pub fn omega_sup(&self) -> T {
        self.omega_int
            .iter()
            .zip(&self.omega_small)
            .map(|(a, b)| (T::from_i64(*a).unwrap() + *b).abs())
            .fold(T::zero(), T::max)
    }

    /// Residual (⟨k,ω⟩+λ)u + μu − p on every mode it touches, optionally
    /// restricted to |k| ≤ K.
    pub fn residual(&self, u: &FourierFunction<T>, restrict: Option<u32>) -> FourierFunction<T> {
        let mut r = u.mul(&self.mu);
        r.tag = self.p.tag;
        for (k, c) in u.iter() {
            r.add_at(k, *c * self.divisor(k));
        }
        let r = r.sub(&self.p);
        match restrict {
            Some(kk) => r.truncate(kk).0,
            None => r,
        }
    }
}

/// c(n,τ) = 4^{n+τ}(8e+8)^n(6e+6)^n(1+(3τ/e)^τ).
pub fn lemma41_constant<T: Real>(n: usize, tau: T) -> T {
    let e = T::E();
    let nn = T::from_usize(n).unwrap();
    let eight = T::lit(8.0);
    let six = T::lit(6.0);
    T::lit(4.0).powf(nn + tau)
        * (eight * e + eight).powf(nn)
        * (six * e + six).powf(nn)
        * (T::one() + (T::lit(3.0) * tau / e).powf(tau))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactBoundCheck {
    pub modes: usize,
    pub residual: f64,
    /// |μ|_{s,τ+1} against Cγ̃.
    pub mu_tau_norm: f64,
    pub mu_tau_bound: f64,
    pub mu_hypothesis: bool,
    /// 4𝐚C_J ≤ σ < min{1,s}.
    pub applicable: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruncBoundCheck {
    pub modes: usize,
    pub residual: f64,
    pub u_norm: f64,
    pub u_bound: f64,
    pub tail_norm: f64,
    pub tail_bound: f64,
    pub holds: bool,
}

fn to64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Modes of the coset closure supp p + Σ supp μ that can carry a coefficient
/// above `CLOSURE_CUTOFF` relative to the largest one, by the majorant of the
/// Neumann series u = D⁻¹(p − μ*u).
fn pruned_closure<T: Real>(prob: &HomologicalProblem<T>, cap: u32) -> Vec<Mode> {
    let weight = |k: &[i32]| {
        let d = prob.divisor(k).norm();
        if d.is_zero() {
            T::infinity()
        } else {
            T::one() / d
        }
    };
    let mut w: BTreeMap<Mode, T> = BTreeMap::new();
    for (k, c) in prob.p.iter() {
        if l1(k) <= cap {
            w.insert(k.clone(), c.norm() * weight(k));
        }
    }
    let top = w.values().fold(T::zero(), |a, b| a.max(*b));
    if top.is_zero() || prob.mu.is_empty() {
        return w.into_keys().collect();
    }
    let cut = top * T::lit(CLOSURE_CUTOFF);
    let mu: Vec<(Mode, T)> = prob.mu.iter().map(|(k, c)| (k.clone(), c.norm())).collect();
    let mut frontier: Vec<Mode> = w.keys().cloned().collect();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for m in &frontier {
            let wm = w[m];
            for (q, mq) in &mu {
                let k: Mode = m.iter().zip(q).map(|(a, b)| a + b).collect();
                if l1(&k) > cap {
                    continue;
                }
                let cand = wm * *mq * weight(&k);
                if !(cand > cut) {
                    continue;
                }
                let cur = w.get(&k).copied().unwrap_or_else(T::zero);
                // revisit only on a substantial increase so the sweep terminates
                if cand > cur * T::lit(2.0) {
                    w.insert(k.clone(), cand.max(cur));
                    next.push(k);
                }
            }
        }
        next.sort();
        next.dedup();
        frontier = next;
    }
    w.into_keys().collect()
}

/// Dense solve of (diag(⟨k,ω⟩+λ) + conv(μ)) û = p̂ over `modes`.
fn dense_solve<T: Real>(prob: &HomologicalProblem<T>, modes: &[Mode]) -> Result<FourierFunction<T>> {
    let m = modes.len();
    let mut u = FourierFunction::zero(prob.p.sites(), prob.p.tag);
    if m == 0 {
        return Ok(u);
    }
    let index: HashMap<&Mode, usize> = modes.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let mut a = vec![C::<T>::zero(); m * m];
    let mut b = vec![C::<T>::zero(); m];
    for (r, kr) in modes.iter().enumerate() {
        a[r * m + r] = prob.divisor(kr);
        b[r] = prob.p.get(kr);
        for (q, mq) in prob.mu.iter() {
            let kc: Mode = kr.iter().zip(q).map(|(x, y)| x - y).collect();
            if let Some(&c) = index.get(&kc) {
                a[r * m + c] = a[r * m + c] + *mq;
            }
        }
    }
    let sol = linalg::solve(a, m, b)?;
    for (k, c) in modes.iter().zip(sol) {
        u.set(k, c);
    }
    Ok(u)
}

fn relative_residual<T: Real>(r: &FourierFunction<T>, p: &FourierFunction<T>) -> f64 {
    let pn = to64(p.norm(T::zero(), T::zero()));
    let rn = to64(r.norm(T::zero(), T::zero()));
    if pn == 0.0 {
        rn
    } else {
        rn / pn
    }
}

/// Exact solver without raising on the |μ|_{s,τ+1} ≤ Cγ̃ hypothesis; divisor
/// hypotheses still raise `ExcludedParameter`.
pub fn solve_variable_exact_report<T: Real>(prob: &HomologicalProblem<T>) -> Result<(FourierFunction<T>, ExactBoundCheck)> {
    if !prob.mu.average().is_zero() {
        return Err(Error::HypothesisFailure("μ must have zero average".into()));
    }
    let modes = pruned_closure(prob, prob.mode_cap);
    // |⟨k,ω⟩| ≥ α1/|k|^τ on the retained data
    let mut seen: Vec<&Mode> = modes.iter().chain(prob.mu.iter().map(|(k, _)| k)).collect();
    seen.sort();
    seen.dedup();
    for k in &seen {
        if l1(k) == 0 {
            continue;
        }
        let d = prob.omega(k);
        let fl = prob.alpha1 / T::from_u32(l1(k)).unwrap().powf(prob.tau);
        if !(d.abs() >= fl) {
            return Err(excluded(k, d, fl));
        }
    }
    for k in &modes {
        let d = prob.divisor(k).norm();
        let fl = prob.alpha2 * prob.gamma_tilde / (T::one() + T::from_u32(l1(k)).unwrap().powf(prob.tau));
        if !(d >= fl) {
            return Err(excluded(k, d, fl));
        }
    }
    let mut check = ExactBoundCheck { modes: modes.len(), ..Default::default() };
    let mu_tau = prob.mu.norm_tau(prob.s, prob.tau + T::one());
    check.mu_tau_norm = to64(mu_tau);
    check.mu_tau_bound = to64(prob.c_const * prob.gamma_tilde);
    check.mu_hypothesis = mu_tau <= prob.c_const * prob.gamma_tilde;

    let u = dense_solve(prob, &modes)?;
    let r = prob.residual(&u, Some(prob.mode_cap));
    check.residual = relative_residual(&r, &prob.p);
    if !(check.residual <= 1e-9) {
        return Err(Error::SolveFailure(format!("relative residual {:e}", check.residual)));
    }

    let (s, sig) = (prob.s, prob.sigma);
    check.applicable = T::lit(4.0) * prob.a_mom * prob.c_j <= sig && sig < s.min(T::one()) && sig > T::zero();
    let n = prob.n();
    let lhs = u.norm(s - sig, prob.a_mom);
    let pow = T::from_usize(2 * n).unwrap() + prob.tau;
    let rhs = lemma41_constant::<T>(n, prob.tau) / (prob.alpha2 * prob.gamma_tilde * sig.powf(pow))
        * (T::lit(2.0) * prob.c_const * prob.gamma_tilde * s / prob.alpha1).exp()
        * prob.p.norm(s, prob.a_mom);
    check.lhs = to64(lhs);
    check.rhs = to64(rhs);
    check.holds = !(check.applicable && check.mu_hypothesis) || lhs <= rhs * T::lit(1.0 + 1e-12);
    Ok((u, check))
}

/// Unique solution of −i∂_ω u + λu + μu = p on the retained modes.
pub fn solve_variable_exact<T: Real>(prob: &HomologicalProblem<T>) -> Result<(FourierFunction<T>, ExactBoundCheck)> {
    let (u, check) = solve_variable_exact_report(prob)?;
    if !check.mu_hypothesis {
        return Err(Error::HypothesisFailure(format!(
            "|μ|_(s,τ+1) = {:e} exceeds Cγ̃ = {:e}",
            check.mu_tau_norm, check.mu_tau_bound
        )));
    }
    Ok((u, check))
}

/// Solution u = Γ_K u of −i∂_ω u + λu + Γ_K(μu) = Γ_K p, and the tail (1−Γ_K)(μu).
pub fn solve_variable_truncated<T: Real>(
    prob: &HomologicalProblem<T>,
) -> Result<(FourierFunction<T>, FourierFunction<T>, TruncBoundCheck)> {
    let lam = prob.lambda().norm();
    let kk = prob.k_trunc;
    if lam.is_zero() {
        return Err(Error::HypothesisFailure("λ = 0".into()));
    }
    if !(T::lit(2.0) * T::from_u32(kk).unwrap() * prob.omega_sup() <= lam) {
        return Err(Error::HypothesisFailure(format!("2K|ω| > |λ| with K = {kk}")));
    }
    let mu_sum = prob.mu.iter().fold(T::zero(), |acc, (k, c)| {
        let pi = T::from_i64((prob.mu.momentum(k) - prob.mu.tag).abs()).unwrap();
        acc + c.norm() * (T::from_u32(l1(k)).unwrap() * prob.s + prob.a_mom * pi).exp()
    });
    if !(mu_sum <= lam / T::lit(4.0)) {
        return Err(Error::HypothesisFailure(format!("Σ|μ̂_k|e^(|k|s+𝐚|π|) = {:e} > |λ|/4", to64(mu_sum))));
    }
    let sub = HomologicalProblem { p: prob.p.truncate(kk).0, ..prob.clone() };
    let modes = pruned_closure(&sub, kk);
    let u = dense_solve(&sub, &modes)?;
    let mu_u = {
        let mut f = u.mul(&prob.mu);
        f.tag = prob.p.tag;
        f
    };
    let tail = mu_u.truncate(kk).1;
    let r = prob.residual(&u, Some(kk));
    let mut check = TruncBoundCheck { modes: modes.len(), residual: relative_residual(&r, &sub.p), ..Default::default() };
    if !(check.residual <= 1e-9) {
        return Err(Error::SolveFailure(format!("relative residual {:e}", check.residual)));
    }
    let pn = prob.p.norm(prob.s, prob.a_mom);
    check.u_norm = to64(u.norm(prob.s, prob.a_mom));
    check.u_bound = to64(T::lit(4.0) / lam * pn);
    check.tail_norm = to64(tail.norm(prob.s - prob.sigma, prob.a_mom));
    check.tail_bound = to64((-T::from_u32(kk).unwrap() * prob.sigma).exp() * pn);
    let slack = 1.0 + 1e-12;
    check.holds = check.u_norm <= check.u_bound * slack && check.tail_norm <= check.tail_bound * slack;
    Ok((u, tail, check))
}

/// Constants of the current step that the dispatch needs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConstants {
    pub alpha1: f64,
    pub alpha2: f64,
    pub gamma0: f64,
    pub tau: f64,
    pub s: f64,
    pub sigma: f64,
    pub a_mom: f64,
    pub k_trunc: f64,
    pub pi: f64,
    /// C_0 = 2|ω|/m.
    pub c0: f64,
    pub fourier_max: u32,
}

/// Which block of R a term belongs to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    X,
    Y(usize),
    /// z^α z̄^β with |α|+|β| ∈ {1,2}, not diagonal.
    Z { alpha: Powers, beta: Powers },
    /// z_j z̄_j.
    Diag(i32),
}

impl BlockKind {
    pub fn of(m: &MultiIndex) -> Option<Self> {
        let yd = m.y_degree();
        let zd = m.z_degree();
        match (yd, zd) {
            (0, 0) => Some(Self::X),
            (1, 0) => m.i.iter().position(|e| *e == 1).map(Self::Y),
            (0, 1) | (0, 2) => {
                if m.alpha.len() == 1 && m.alpha == m.beta {
                    Some(Self::Diag(m.alpha[0].0))
                } else {
                    Some(Self::Z { alpha: m.alpha.clone(), beta: m.beta.clone() })
                }
            }
            _ => None,
        }
    }

    fn index(&self, n: usize) -> MultiIndex {
        let mut m = MultiIndex::zero(n);
        match self {
            Self::X => {}
            Self::Y(b) => m.i[*b] = 1,
            Self::Z { alpha, beta } => {
                m.alpha = alpha.clone();
                m.beta = beta.clone();
            }
            Self::Diag(j) => {
                m.alpha = SmallVec::from_slice(&[(*j, 1)]);
                m.beta = m.alpha.clone();
            }
        }
        m
    }

    /// Σ(α_j−β_j) j.
    pub fn tag(&self) -> i64 {
        match self {
            Self::Z { alpha, beta } => {
                alpha.iter().map(|(j, e)| *j as i64 * *e as i64).sum::<i64>()
                    - beta.iter().map(|(j, e)| *j as i64 * *e as i64).sum::<i64>()
            }
            _ => 0,
        }
    }

    /// l' = β − α.
    pub fn l(&self) -> Vec<(i32, i64)> {
        let mut acc: BTreeMap<i32, i64> = BTreeMap::new();
        if let Self::Z { alpha, beta } = self {
            for (j, e) in alpha {
                *acc.entry(*j).or_default() -= *e as i64;
            }
            for (j, e) in beta {
                *acc.entry(*j).or_default() += *e as i64;
            }
        }
        acc.into_iter().filter(|(_, c)| *c != 0).collect()
    }

    /// Some(j) for z_{−j} z̄_j.
    pub fn pair(&self) -> Option<i32> {
        match self {
            Self::Z { alpha, beta } if alpha.len() == 1 && beta.len() == 1 => {
                let (i, ei) = alpha[0];
                let (j, ej) = beta[0];
                (ei == 1 && ej == 1 && i == -j).then_some(j)
            }
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        let pw = |p: &Powers| p.iter().map(|(j, e)| format!("{j}^{e}")).collect::<Vec<_>>().join(".");
        match self {
            Self::X => "x".into(),
            Self::Y(b) => format!("y{b}"),
            Self::Z { alpha, beta } => format!("z[{}]zb[{}]", pw(alpha), pw(beta)),
            Self::Diag(j) => format!("diag{j}"),
        }
    }
}

/// Splits a series of weighted degree ≤ 2 into Fourier blocks.
pub fn split_blocks(r: &Series) -> BTreeMap<BlockKind, Fourier> {
    let js = r.sites().sites().to_vec();
    let mut out: BTreeMap<BlockKind, Fourier> = BTreeMap::new();
    for (m, c) in r.iter() {
        let Some(kind) = BlockKind::of(m) else { continue };
        let tag = kind.tag();
        let k: Vec<i32> = m.k.to_vec();
        out.entry(kind).or_insert_with(|| FourierFunction::zero(&js, tag)).add_at(&k, *c);
    }
    out
}

/// Inverse of [`split_blocks`].
pub fn assemble_blocks(template: &Series, blocks: &BTreeMap<BlockKind, Fourier>) -> Series {
    let n = template.sites().n();
    let mut out = template.empty_like();
    for (kind, f) in blocks {
        let base = kind.index(n);
        for (k, c) in f.iter() {
            let mut m = base.clone();
            m.k = k.clone();
            out.add_term(m, *c);
        }
    }
    out
}

/// Case of the dispatch for a z-type block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    Diagonal,
    /// max mode ≤ C_0K, exact solve.
    Exact,
    /// max mode > C_0K, truncated solve, tail into R̂.
    Truncated,
    /// i = −j, |j| ≤ Π, exact solve with α_2.
    PairExact,
    /// i = −j, |j| > Π, deferred to R̂.
    PairDeferred,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExclusionEvent {
    pub block: String,
    pub k: Vec<i64>,
    pub l: Vec<(i32, i64)>,
    pub value: f64,
    pub floor: f64,
    /// False for soft events that do not remove the point.
    pub excludes: bool,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockResidual {
    pub block: String,
    pub case: Option<Case>,
    pub modes: usize,
    pub residual: f64,
    pub bound_holds: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub diagonal: usize,
    pub exact: usize,
    pub truncated: usize,
    pub pair_exact: usize,
    pub deferred: usize,
    pub bound_failures: usize,
    pub max_residual: f64,
}

#[derive(Clone, Debug)]
pub struct HomologicalSolution {
    pub f: Series,
    pub r_hat: Series,
    /// ω̂_b = σ_b[R^y_b].
    pub omega_hat: Vec<f64>,
    /// Ω̂_j(x) = σ_j R_jj(x) + Σ_b σ_{j_b} ∂_{x_b}Ω̃_j F^y_b.
    pub big_omega_hat: BTreeMap<i32, Fourier>,
    pub events: Vec<ExclusionEvent>,
    pub residuals: Vec<BlockResidual>,
    pub stats: SolverStats,
}

impl HomologicalSolution {
    pub fn excluded(&self) -> bool {
        self.events.iter().any(|e| e.excludes)
    }

    /// N̂ = Σσ_bω̂_b y_b + Σσ_jΩ̂_j(x) z_jz̄_j as a series.
    pub fn n_hat(&self, template: &Series) -> Series {
        let n = template.sites().n();
        let sites = template.sites().clone();
        let mut out = template.empty_like();
        for (b, w) in self.omega_hat.iter().enumerate() {
            let mut m = MultiIndex::zero(n);
            m.i[b] = 1;
            out.add_term(m, C::new(sgn(sites.sites()[b]) * w, 0.0));
        }
        for (j, f) in &self.big_omega_hat {
            let base = BlockKind::Diag(*j).index(n);
            for (k, c) in f.iter() {
                let mut m = base.clone();
                m.k = k.clone();
                out.add_term(m, *c * sgn(*j));
            }
        }
        out
    }
}

/// Normal-form data at one parameter point.
#[derive(Clone, Debug)]
pub struct NormalData<'a> {
    pub sites: &'a SiteSet,
    pub freq: &'a FreqPoint,
    /// Zero-average x-dependent parts Ω̃_j.
    pub omega_tilde: &'a BTreeMap<i32, Fourier>,
}

impl NormalData<'_> {
    fn omega_int(&self) -> Vec<i64> {
        self.sites.sites().iter().map(|j| (*j as i64) * (*j as i64)).collect()
    }
}

fn langle_l(l: &[(i32, i64)]) -> f64 {
    l.iter().map(|(j, c)| (*j as i64 * c).abs()).max().unwrap_or(0).max(1) as f64
}

fn event_from(block: &BlockKind, l: &[(i32, i64)], e: Error) -> ExclusionEvent {
    let label = block.label();
    match e {
        Error::ExcludedParameter { k, value, floor } => ExclusionEvent {
            block: label,
            k,
            l: l.to_vec(),
            value,
            floor,
            excludes: true,
            reason: "divisor below floor".into(),
        },
        other => ExclusionEvent {
            block: label,
            k: vec![],
            l: l.to_vec(),
            value: f64::NAN,
            floor: f64::NAN,
            excludes: true,
            reason: other.to_string(),
        },
    }
}

enum BlockOutcome {
    Solved { f: Fourier, r_hat: Option<Fourier>, residual: BlockResidual, soft: Vec<ExclusionEvent> },
    Failed(ExclusionEvent),
}

/// Solves every block of R (weighted degree ≤ 2) at one parameter point.
pub fn dispatch_and_solve_all(r: &Series, nd: &NormalData<'_>, sc: &StepConstants) -> Result<HomologicalSolution> {
    let sites = nd.sites;
    let n = sites.n();
    let js = sites.sites().to_vec();
    let omega_int = nd.omega_int();
    let omega_small = nd.freq.omega_small.clone();
    let blocks = split_blocks(r);
    let cap = sc.fourier_max;
    let kt = if sc.k_trunc.is_finite() && sc.k_trunc < cap as f64 { sc.k_trunc.floor().max(0.0) as u32 } else { cap };
    let c_const = 2.0 * sc.alpha1 * sc.gamma0;
    let c_j = js.iter().map(|j| j.abs()).max().unwrap_or(1) as f64;
    let zero_mu = FourierFunction::zero(&js, 0);

    let work: Vec<(&BlockKind, &Fourier)> = blocks.iter().collect();
    let outcomes: Vec<(BlockKind, Option<Case>, BlockOutcome)> = work
        .par_iter()
        .filter(|(kind, _)| !matches!(kind, BlockKind::Diag(_)))
        .map(|(kind, rb)| {
            let kind = (*kind).clone();
            match &kind {
                BlockKind::X | BlockKind::Y(_) => {
                    let out = solve_diagonal(rb, &omega_int, &omega_small, true, Some((sc.alpha1, sc.tau)));
                    let o = match out {
                        Ok(f) => {
                            let (ff, _) = f.truncate(cap);
                            let res = ff.d_omega(&divisor_vector(&omega_int, &omega_small)).sub(&rb.without_average().truncate(cap).0);
                            let residual = relative_residual(&res, rb);
                            BlockOutcome::Solved {
                                f: ff,
                                r_hat: None,
                                residual: BlockResidual { block: kind.label(), case: None, modes: f.len(), residual, bound_holds: true },
                                soft: vec![],
                            }
                        }
                        Err(e) => BlockOutcome::Failed(event_from(&kind, &[], e)),
                    };
                    (kind, None, o)
                }
                BlockKind::Z { .. } => {
                    let l = kind.l();
                    let lam_int: i64 = l.iter().map(|(j, c)| c * (*j as i64) * (*j as i64)).sum();
                    let lam_small: f64 = l.iter().map(|(j, c)| *c as f64 * nd.freq.big_omega_small(*j)).sum();
                    let mut mu = zero_mu.clone();
                    for (j, c) in &l {
                        if let Some(t) = nd.omega_tilde.get(j) {
                            mu = mu.add(&t.scale(C::new(*c as f64, 0.0)));
                        }
                    }
                    let max_mode = l.iter().map(|(j, _)| j.abs()).max().unwrap_or(0) as f64;
                    let case = match kind.pair() {
                        Some(j) if (j.abs() as f64) <= sc.pi => Case::PairExact,
                        Some(_) => Case::PairDeferred,
                        None if max_mode <= sc.c0 * sc.k_trunc => Case::Exact,
                        None => Case::Truncated,
                    };
                    if case == Case::PairDeferred {
                        let res = BlockResidual { block: kind.label(), case: Some(case), modes: 0, residual: 0.0, bound_holds: true };
                        return (kind, Some(case), BlockOutcome::Solved { f: FourierFunction::zero(&js, rb.tag), r_hat: Some((*rb).clone()), residual: res, soft: vec![] });
                    }
                    let (alpha2, gamma_tilde) = match case {
                        Case::PairExact => (sc.alpha2, kind.pair().unwrap().abs() as f64),
                        _ => (sc.alpha1, langle_l(&l)),
                    };
                    let prob = HomologicalProblem {
                        omega_int: omega_int.clone(),
                        omega_small: omega_small.clone(),
                        lambda_int: lam_int,
                        lambda_small: C::new(lam_small, 0.0),
                        mu,
                        p: rb.scale(C::new(0.0, -1.0)),
                        s: sc.s,
                        sigma: sc.sigma,
                        a_mom: sc.a_mom,
                        tau: sc.tau,
                        alpha1: sc.alpha1,
                        alpha2,
                        gamma_tilde,
                        c_const,
                        c_j,
                        k_trunc: kt,
                        mode_cap: cap,
                    };
                    let o = solve_block(&kind, &l, &prob, case, sc);
                    (kind, Some(case), o)
                }
                BlockKind::Diag(_) => unreachable!(),
            }
        })
        .collect();

    let mut fblocks: BTreeMap<BlockKind, Fourier> = BTreeMap::new();
    let mut rblocks: BTreeMap<BlockKind, Fourier> = BTreeMap::new();
    let mut events = Vec::new();
    let mut residuals = Vec::new();
    let mut stats = SolverStats::default();
    for (kind, case, o) in outcomes {
        match case {
            Some(Case::Exact) => stats.exact += 1,
            Some(Case::Truncated) => stats.truncated += 1,
            Some(Case::PairExact) => stats.pair_exact += 1,
            Some(Case::PairDeferred) => stats.deferred += 1,
            _ => {}
        }
        match o {
            BlockOutcome::Solved { f, r_hat, residual, soft } => {
                if !residual.bound_holds {
                    stats.bound_failures += 1;
                }
                stats.max_residual = stats.max_residual.max(residual.residual);
                residuals.push(residual);
                events.extend(soft);
                if !f.is_empty() {
                    fblocks.insert(kind.clone(), f);
                }
                if let Some(rh) = r_hat.filter(|x| !x.is_empty()) {
                    rblocks.insert(kind, rh);
                }
            }
            BlockOutcome::Failed(e) => events.push(e),
        }
    }

    // normal-form update
    let mut omega_hat = vec![0.0; n];
    for (b, w) in omega_hat.iter_mut().enumerate() {
        if let Some(rb) = blocks.get(&BlockKind::Y(b)) {
            *w = sgn(js[b]) * rb.average().re;
        }
    }
    let mut big: BTreeMap<i32, Fourier> = BTreeMap::new();
    for (kind, rb) in &blocks {
        if let BlockKind::Diag(j) = kind {
            stats.diagonal += 1;
            big.insert(*j, rb.scale(C::new(sgn(*j), 0.0)));
        }
    }
    for (j, t) in nd.omega_tilde {
        let mut acc = FourierFunction::zero(&js, 0);
        for b in 0..n {
            let Some(fy) = fblocks.get(&BlockKind::Y(b)) else { continue };
            let mut dx = FourierFunction::zero(&js, 0);
            for (k, c) in t.iter() {
                dx.set(k, *c * C::new(0.0, k[b] as f64));
            }
            acc = acc.add(&dx.mul(fy).scale(C::new(sgn(js[b]), 0.0)));
        }
        if !acc.is_empty() {
            let e = big.entry(*j).or_insert_with(|| FourierFunction::zero(&js, 0));
            *e = e.add(&acc).truncate(cap).0;
        }
    }

    events.sort_by(|a, b| (&a.block, &a.k).partial_cmp(&(&b.block, &b.k)).unwrap());
    let f = assemble_blocks(r, &fblocks);
    let r_hat = assemble_blocks(r, &rblocks);
    Ok(HomologicalSolution { f, r_hat, omega_hat, big_omega_hat: big, events, residuals, stats })
}

fn divisor_vector(omega_int: &[i64], omega_small: &[f64]) -> Vec<f64> {
    omega_int.iter().zip(omega_small).map(|(a, b)| *a as f64 + b).collect()
}

/// Step floor of the dispatch on the modes the block solution occupies:
/// α1⟨l⟩_∞/⟨k⟩^τ for k ≠ 0 off the pair family, α2|j|/⟨k⟩^τ on it.
fn step_floor(prob: &HomologicalProblem<f64>, l: &[(i32, i64)], pair: Option<i32>, sc: &StepConstants, k: &[i32]) -> Option<Error> {
    let bk = (l1(k).max(1) as f64).powf(sc.tau);
    let fl = match pair {
        Some(j) => sc.alpha2 * j.abs() as f64 / bk,
        None if l1(k) == 0 => return None,
        None => sc.alpha1 * langle_l(l) / bk,
    };
    let d = prob.divisor(k).norm();
    (d < fl).then(|| excluded(k, d, fl))
}

fn solve_block(kind: &BlockKind, l: &[(i32, i64)], prob: &HomologicalProblem<f64>, case: Case, sc: &StepConstants) -> BlockOutcome {
    let pair = kind.pair();
    let label = kind.label();
    let mut soft = Vec::new();
    let run_exact = |soft: &mut Vec<ExclusionEvent>| -> Result<(Fourier, BlockResidual)> {
        let (u, chk) = solve_variable_exact_report(prob)?;
        if !chk.mu_hypothesis {
            soft.push(ExclusionEvent {
                block: label.clone(),
                k: vec![],
                l: l.to_vec(),
                value: chk.mu_tau_norm,
                floor: chk.mu_tau_bound,
                excludes: false,
                reason: "|μ|_(s,τ+1) above Cγ̃".into(),
            });
        }
        let res = BlockResidual { block: label.clone(), case: Some(case), modes: chk.modes, residual: chk.residual, bound_holds: chk.holds };
        Ok((u, res))
    };
    let outcome: Result<(Fourier, Option<Fourier>, BlockResidual)> = match case {
        Case::Exact | Case::PairExact => run_exact(&mut soft).map(|(u, r)| (u, None, r)),
        Case::Truncated => match solve_variable_truncated(prob) {
            Ok((u, tail, chk)) => {
                // R̂ = −i[(1−Γ_K)(μu) − (1−Γ_K)p] = (1−Γ_K)(−iμu + R)
                let p_tail = prob.p.truncate(prob.k_trunc).1;
                let rh = tail.sub(&p_tail).scale(C::new(0.0, -1.0));
                let res = BlockResidual { block: label.clone(), case: Some(case), modes: chk.modes, residual: chk.residual, bound_holds: chk.holds };
                Ok((u, Some(rh), res))
            }
            Err(Error::HypothesisFailure(msg)) => {
                soft.push(ExclusionEvent {
                    block: label.clone(),
                    k: vec![],
                    l: l.to_vec(),
                    value: f64::NAN,
                    floor: f64::NAN,
                    excludes: false,
                    reason: format!("truncated solver fell back to exact: {msg}"),
                });
                run_exact(&mut soft).map(|(u, r)| (u, None, r))
            }
            Err(e) => Err(e),
        },
        Case::Diagonal | Case::PairDeferred => unreachable!(),
    };
    match outcome {
        Ok((u, rh, res)) => {
            for k in u.iter().map(|(k, _)| k) {
                if let Some(e) = step_floor(prob, l, pair, sc, k) {
                    return BlockOutcome::Failed(event_from(kind, l, e));
                }
            }
            BlockOutcome::Solved { f: u, r_hat: rh, residual: res, soft }
        }
        Err(e) => BlockOutcome::Failed(event_from(kind, l, e)),
    }
}

/// Random instance of the truncated solver satisfying its hypotheses.
pub fn random_truncated_problem<R: rand::Rng>(rng: &mut R, js: &[i32], k_trunc: u32) -> HomologicalProblem<f64> {
    let n = js.len();
    let omega: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wsup = omega.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mag = (2.0 * k_trunc as f64 * wsup).max(0.1) * rng.gen_range(1.0..3.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let lambda = C::from_polar(mag, phase);
    let s = rng.gen_range(0.2..0.8);
    let a_mom = rng.gen_range(0.0..0.05);
    let tag = rng.gen_range(-5..=5);
    let mut mu = FourierFunction::zero(js, 0);
    for k in modes_upto(n, 2) {
        if l1(&k) > 0 {
            mu.set(&k, C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        }
    }
    let msum = mu.iter().fold(0.0, |acc, (k, c)| {
        acc + c.norm() * (l1(k) as f64 * s + a_mom * mu.momentum(k).abs() as f64).exp()
    });
    mu = mu.scale(C::new(mag / 4.0 / msum * rng.gen_range(0.05..0.99), 0.0));
    let mut p = FourierFunction::zero(js, tag);
    for k in modes_upto(n, k_trunc + 2) {
        if rng.gen_bool(0.6) {
            p.set(&k, C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        }
    }
    let mut prob = HomologicalProblem::new(&omega, lambda, mu, p);
    prob.s = s;
    prob.sigma = s * rng.gen_range(0.05..0.9);
    prob.a_mom = a_mom;
    prob.k_trunc = k_trunc;
    prob
}

/// Random instance of the exact solver: a Diophantine-looking ω, a
/// zero-average μ, constants chosen so that all three hypotheses hold.
pub fn random_exact_problem<R: rand::Rng>(rng: &mut R, js: &[i32], cap: u32) -> HomologicalProblem<f64> {
    let n = js.len();
    let omega: Vec<f64> = (0..n).map(|b| (b as f64 + 1.0) * rng.gen_range(0.5..1.5) + rng.gen_range(0.0..1.0) * 2f64.sqrt()).collect();
    let tau = (n + 3) as f64;
    let modes = modes_upto(n, cap);
    let mut a1 = f64::INFINITY;
    for k in &modes {
        if l1(k) > 0 {
            a1 = a1.min(crate::fourier::dot(k, &omega).abs() * (l1(k) as f64).powf(tau));
        }
    }
    let lambda = C::new(rng.gen_range(-3.0..3.0), rng.gen_range(-0.5..0.5));
    let mut a2g = f64::INFINITY;
    for k in &modes {
        let d = (C::new(crate::fourier::dot(k, &omega), 0.0) + lambda).norm();
        a2g = a2g.min(d * (1.0 + (l1(k) as f64).powf(tau)));
    }
    let s = rng.gen_range(0.2..0.6);
    let a_mom = rng.gen_range(0.0..0.01);
    let c_j = js.iter().map(|j| j.abs()).max().unwrap() as f64;
    let mut mu = FourierFunction::zero(js, 0);
    for k in modes_upto(n, 2) {
        if l1(&k) > 0 {
            mu.set(&k, C::new(rng.gen_range(-1.0..1.0), 0.0));
        }
    }
    let mut p = FourierFunction::zero(js, rng.gen_range(-3..=3));
    for k in modes_upto(n, 3) {
        p.set(&k, C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    }
    let gamma_tilde = 1.0;
    let alpha2 = 0.5 * a2g / gamma_tilde;
    let c_const = rng.gen_range(0.1..1.0);
    let mn = mu.norm_tau(s, tau + 1.0);
    mu = mu.scale(C::new(c_const * gamma_tilde / mn * rng.gen_range(0.01..0.9), 0.0));
    let mut prob = HomologicalProblem::new(&omega, lambda, mu, p);
    prob.s = s;
    prob.sigma = (4.0 * a_mom * c_j).max(0.01 * s) + rng.gen_range(0.0..0.5) * s;
    prob.sigma = prob.sigma.min(0.99 * s);
    prob.a_mom = a_mom;
    prob.tau = tau;
    prob.alpha1 = 0.5 * a1;
    prob.alpha2 = alpha2;
    prob.gamma_tilde = gamma_tilde;
    prob.c_const = c_const;
    prob.c_j = c_j;
    prob.mode_cap = cap;
    prob
}

/// Series built from per-block Fourier data, used by the step to rebuild N.
pub fn diag_series(template: &Series, big: &BTreeMap<i32, Fourier>) -> Series {
    let blocks: BTreeMap<BlockKind, Fourier> =
        big.iter().map(|(j, f)| (BlockKind::Diag(*j), f.scale(C::new(sgn(*j), 0.0)))).collect();
    assemble_blocks(template, &blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_mode_diagonal() {
        let js = [-1, 2];
        let mut r = Fourier::zero(&js, 0);
        r.set(&[1, 1], C::new(1.0, 0.0));
        r.set(&[0, 0], C::new(3.0, 0.0));
        let f = solve_diagonal(&r, &[1, 4], &[0.1, 0.2], true, None).unwrap();
        let d = 5.3;
        assert!((f.get(&[1, 1]) - C::new(0.0, -1.0 / d)).norm() < 1e-15);
        assert!(f.get(&[0, 0]).is_zero());
    }

    #[test]
    fn exact_trivial_cases() {
        let js = [-1, 2];
        let mut p = Fourier::zero(&js, 0);
        p.set(&[0, 0], C::new(1.0, 0.0));
        let prob = HomologicalProblem::new(&[0.7, 1.3], C::new(1.0, 0.0), Fourier::zero(&js, 0), p);
        let (u, _) = solve_variable_exact(&HomologicalProblem { alpha1: 1e-6, alpha2: 1e-6, ..prob }).unwrap();
        assert!((u.get(&[0, 0]) - C::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn truncated_k0() {
        let js = [-1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut prob = random_truncated_problem(&mut rng, &js, 0);
        prob.p = Fourier::constant(&js, C::new(2.0, 1.0));
        let (u, _, chk) = solve_variable_truncated(&prob).unwrap();
        assert!((u.get(&[0, 0]) - C::new(2.0, 1.0) / prob.lambda()).norm() < 1e-14);
        assert_eq!(u.len(), 1);
        assert!(chk.holds);
    }

    #[test]
    fn block_kinds() {
        let z = BlockKind::Z { alpha: SmallVec::from_slice(&[(-3, 1)]), beta: SmallVec::from_slice(&[(3, 1)]) };
        assert_eq!(z.pair(), Some(3));
        assert_eq!(z.tag(), -6);
        assert_eq!(z.l(), vec![(-3, -1), (3, 1)]);
        let c = lemma41_constant::<f64>(2, 5.0);
        assert!(c > 1e13 && c < 1e14);
    }
}
