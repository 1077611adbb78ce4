//! Parameter schedule, the KAM step and the iteration driver.
//!
//! Perturbations are kept in coordinates rescaled by the current radius
//! (y = r²Y, z = rZ, H ↦ H/r²) and as a normalised series times 10^L, since
//! at desk scale the sizes involved leave the range of `f64` after a step or
//! two. Passing from r_ν to r_{ν+1} = η_ν r_ν multiplies a monomial of
//! weighted degree d by η^{d−2}.

use crate::dnls::{action_angle_reduce, partial_birkhoff, build_dnls_hamiltonian, DnlsConfig, FrequencyData, ReduceOptions};
use crate::error::{Error, Result};
use crate::homological::{dispatch_and_solve_all, HomologicalSolution, NormalData, SolverStats, StepConstants};
use crate::nonres::{enumerate_specs, step_zones, EnumRange, ExclusionLedger, FreqPoint};
use crate::norms::{hamiltonian_vector_field, majorant_norm, NormWeights, ParameterGrid};
use crate::series::TruncationBudget;
use crate::{Fourier, Series, SiteSet, C};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Decades below the leading term at which Lie orders stop contributing.
const LIE_MARGIN: f64 = 60.0;
const LIE_MAX_ORDER: usize = 24;
/// Stand-in for log10 ε_0 when P_0 vanishes.
pub const EPS_ZERO_LOG10: f64 = -300.0;

/// Global constants of the iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamGlobals {
    pub n: usize,
    pub beta: f64,
    pub tau: f64,
    pub gamma0: f64,
    /// The c in B_σ = cσ^{−(4n+4τ+5)}.
    pub c: f64,
    pub s0: f64,
    pub r0: f64,
    pub alpha0: f64,
    pub m0: f64,
    pub e0: f64,
    pub m1_0: f64,
    pub m2_0: f64,
    pub m3_0: f64,
    /// C_J = max|j_b|.
    pub c_j: f64,
    pub p: f64,
    pub q: f64,
    /// Phase-space weight a of e^{a|j|}.
    pub a_exp: f64,
    pub fourier_max: u32,
    pub j_max: i64,
    /// γ of the advisory gate ε_0 ≤ (αγ)^{1+β}.
    pub gamma: f64,
    pub eps_floor_log10: f64,
    pub halt_at_horizon: bool,
}

impl KamGlobals {
    pub fn beta_prime(&self) -> f64 {
        0.5 * (self.beta / (1.0 + self.beta)).min(0.25)
    }

    pub fn kappa(&self) -> f64 {
        4.0 / 3.0 - self.beta_prime() / 3.0
    }

    /// β′/(800 max{C_{0,0}, C_J}) with C_{0,0} = 2E_0/m_0.
    pub fn default_gamma0(&self) -> f64 {
        let c00 = 2.0 * self.e0 / self.m0;
        self.beta_prime() / (800.0 * c00.max(self.c_j))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n < 2 {
            return bad("n ≥ 2 required");
        }
        if self.tau < self.n as f64 + 3.0 {
            return bad("τ ≥ n+3 required");
        }
        if (self.p - self.q - 1.0).abs() > 1e-12 {
            return bad("p − q = 1 required");
        }
        if !(self.s0 > 0.0 && self.s0 < 1.0 && self.r0 > 0.0 && self.r0 < 1.0) {
            return bad("s_0 and r_0 must lie in (0,1)");
        }
        if !(self.beta > 0.0 && self.alpha0 > 0.0 && self.gamma0 > 0.0 && self.c > 0.0) {
            return bad("β, α_0, γ_0 and c must be positive");
        }
        if !(self.m0 > 0.0 && self.e0 > 0.0 && self.m3_0 > 0.0) {
            return bad("m_0, E_0 and M_{3,0} must be positive");
        }
        Ok(())
    }
}

/// One row of the schedule. Quantities that leave the `f64` range are kept
/// as base-10 logarithms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub nu: usize,
    pub m: f64,
    pub e: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub j_log10: f64,
    pub s: f64,
    pub sigma: f64,
    pub a_mom: f64,
    pub b_log10: f64,
    pub eps_log10: f64,
    pub k_trunc: f64,
    pub pi: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda: f64,
    pub eta_log10: f64,
    pub r_log10: f64,
    /// C_{0,ν} = 2E_ν/m_ν.
    pub c0: f64,
}

/// Rows 0..=upto of the schedule started from log10 ε_0.
pub fn schedule_rows(g: &KamGlobals, eps0_log10: f64, upto: usize) -> Result<Vec<ScheduleRow>> {
    let bp = g.beta_prime();
    let kappa = g.kappa();
    let n = g.n as f64;
    let mut eps = eps0_log10;
    let mut r_log = g.r0.log10();
    let mut out = Vec::with_capacity(upto + 1);
    for nu in 0..=upto {
        if !(eps < 0.0) {
            return Err(Error::Schedule(format!("ε_{nu} = 10^{eps} ≥ 1")));
        }
        let h = 0.5f64.powi(nu as i32);
        let s = g.s0 * h;
        let sigma = s / 20.0;
        let a_mom = sigma / g.c_j;
        let b_log10 = g.c.log10() - (4.0 * n + 4.0 * g.tau + 5.0) * sigma.log10();
        let ln_eps = eps * std::f64::consts::LN_10;
        let k_trunc = 5.0 * ln_eps.abs() / (4.0 * sigma);
        let pi = 5.0 * ln_eps.abs() / (2.0 * a_mom);
        let alpha1 = g.alpha0 * (9.0 + h) / 10.0;
        let alpha2 = g.alpha0 * h / pi;
        let (m1, m2) = (g.m1_0 * (10.0 - h) / 9.0, g.m2_0 * (10.0 - h) / 9.0);
        let lambda = if nu == 0 { g.alpha0 / (g.m1_0 + g.m2_0) } else { alpha2 / (m1 + m2) };
        let j_log10 = if nu == 0 { f64::NEG_INFINITY } else { -kappa.powi(nu as i32 - 1) / (g.tau + 1.0) * g.gamma0.log10() };
        let eta_log10 = ((1.0 - bp) * eps + b_log10 - alpha2.log10()) / 3.0 - 2f64.log10();
        let (m, e) = (g.m0 * (9.0 + h) / 10.0, g.e0 * (10.0 - h) / 9.0);
        out.push(ScheduleRow {
            nu,
            m,
            e,
            m1,
            m2,
            m3: g.m3_0 * (9.0 + h) / 10.0,
            j_log10,
            s,
            sigma,
            a_mom,
            b_log10,
            eps_log10: eps,
            k_trunc,
            pi,
            alpha1,
            alpha2,
            lambda,
            eta_log10,
            r_log10: r_log,
            c0: 2.0 * e / m,
        });
        r_log += eta_log10;
        eps = (b_log10 - alpha2.log10()) / 3.0 + kappa * eps;
    }
    Ok(out)
}

/// Row ν of the schedule.
pub fn schedule(nu: usize, g: &KamGlobals, eps0_log10: f64) -> Result<ScheduleRow> {
    Ok(schedule_rows(g, eps0_log10, nu)?.pop().unwrap())
}

/// Both advisory smallness gates, as (lhs, rhs) in log10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallnessGate {
    pub eps0_log10: f64,
    /// (α_0γ_0/80)^{1/(1−2β′)} Π_μ (2^μ B_μ)^{−1/(3κ^{μ+1})}.
    pub lemma_bound_log10: f64,
    /// (α_0γ)^{1+β}.
    pub theorem_bound_log10: f64,
    pub lemma_ok: bool,
    pub theorem_ok: bool,
    /// α_0 ≤ min{m_0/10, M_{3,0}/2}.
    pub alpha0_ok: bool,
}

pub fn smallness_gate(g: &KamGlobals, eps0_log10: f64) -> SmallnessGate {
    let bp = g.beta_prime();
    let kappa = g.kappa();
    let n = g.n as f64;
    let mut acc = (g.alpha0 * g.gamma0 / 80.0).log10() / (1.0 - 2.0 * bp);
    for mu in 0..400 {
        let sigma = g.s0 * 0.5f64.powi(mu) / 20.0;
        let b = g.c.log10() - (4.0 * n + 4.0 * g.tau + 5.0) * sigma.log10();
        let term = (mu as f64 * 2f64.log10() + b) / (3.0 * kappa.powi(mu + 1));
        acc -= term;
        if term.abs() < 1e-17 {
            break;
        }
    }
    let thm = (1.0 + g.beta) * (g.alpha0 * g.gamma).log10();
    SmallnessGate {
        eps0_log10,
        lemma_bound_log10: acc,
        theorem_bound_log10: thm,
        lemma_ok: eps0_log10 <= acc,
        theorem_ok: eps0_log10 <= thm,
        alpha0_ok: g.alpha0 <= (g.m0 / 10.0).min(g.m3_0 / 2.0),
    }
}

/// Generator of one step at one point, F = 10^L F̂ in coordinates of radius r.
#[derive(Clone, Debug)]
pub struct Generator {
    pub nu: usize,
    pub log10_scale: f64,
    pub r_log10: f64,
    pub f: Series,
}

/// Per-point state: normal form N_ν and perturbation P_ν = 10^L P̂.
#[derive(Clone, Debug)]
pub struct PointState {
    pub index: usize,
    pub xi: Vec<f64>,
    pub freq: FreqPoint,
    pub omega_tilde: BTreeMap<i32, Fourier>,
    pub p: Series,
    pub p_log10: f64,
    pub active: bool,
    pub generators: Vec<Generator>,
}

impl PointState {
    /// log10 of the unweighted vector-field norm of P on the unit ball.
    fn norm_log10(&self, w: &NormWeights) -> f64 {
        if self.p.is_empty() {
            return f64::NEG_INFINITY;
        }
        majorant_norm(&hamiltonian_vector_field(&self.p), w).log10() + self.p_log10
    }
}

#[derive(Clone, Debug)]
pub struct KamState {
    pub nu: usize,
    pub globals: KamGlobals,
    pub sites: Arc<SiteSet>,
    pub grid: ParameterGrid,
    pub budget: TruncationBudget,
    pub points: Vec<PointState>,
    pub eps0_log10: f64,
    /// Measured ‖X_{P_ν}‖^{λ_ν}.
    pub measured_log10: f64,
    pub ledger: ExclusionLedger,
    pub enum_range: EnumRange,
}

impl KamState {
    pub fn mask(&self) -> Vec<bool> {
        self.points.iter().map(|p| p.active).collect()
    }

    pub fn row(&self, nu: usize) -> Result<ScheduleRow> {
        schedule(nu, &self.globals, self.eps0_log10)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KamStepReport {
    pub nu: usize,
    pub eps_log10: f64,
    pub eps_next_measured_log10: f64,
    pub eps_next_schedule_log10: f64,
    pub drift_omega_log10: f64,
    pub drift_big_omega_log10: f64,
    /// log10(B_ν ε_ν).
    pub drift_bound_log10: f64,
    pub drift_ok: bool,
    pub contraction_ok: bool,
    /// log ε_{ν+1}/log ε_ν from the measured values.
    pub contraction_ratio: f64,
    pub active_before: usize,
    pub active_after: usize,
    pub excluded_zone_points: usize,
    pub excluded_solver_points: usize,
    pub excluded_fraction_added: f64,
    pub solver: SolverStats,
    pub max_lie_order: usize,
    pub eta_log10: f64,
    pub r_next_log10: f64,
    /// K_ν > fourier_max or Π_ν > J_max.
    pub beyond_horizon: bool,
    /// Largest |Ω̃_j|_{s,τ+1} + |Ω̃_j|_{s,𝐚,0} over α_0γ_0|j| after the step (log10).
    pub omega_tilde_ratio_log10: f64,
}

/// log10(10^a + 10^b).
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (1.0 + 10f64.powf(lo - hi)).log10()
}

/// Normalises a series: returns (S/max|c|, log10 max|c|).
fn normalise(s: Series) -> (Series, f64) {
    let m = s.max_abs();
    if m == 0.0 {
        return (s.empty_like(), f64::NEG_INFINITY);
    }
    (s.scale(C::new(1.0 / m, 0.0)), m.log10())
}

/// 10^{log10}·s with the monomial weight η^{d−2}.
struct Piece {
    s: Series,
    log10: f64,
}

fn effective(p: &Piece, eta_log10: f64) -> f64 {
    p.s.iter()
        .map(|(m, c)| c.norm().log10() + (m.weighted_degree() as f64 - 2.0) * eta_log10)
        .fold(f64::NEG_INFINITY, f64::max)
        + p.log10
}

/// ad_F^k(x) w_k for k ≥ k0, F = 10^{f_log} F̂, until the contribution falls
/// `LIE_MARGIN` decades below `best`.
fn lie_pieces(
    x: &Series,
    x_log: f64,
    f: &Series,
    f_log: f64,
    k0: usize,
    weight: impl Fn(usize) -> f64,
    eta_log10: f64,
    best: &mut f64,
) -> Result<(Vec<Piece>, usize)> {
    let mut out = Vec::new();
    let mut t = x.clone();
    let mut log = x_log;
    let mut order = 0;
    for k in 0..=LIE_MAX_ORDER {
        if k > 0 {
            t = t.bracket(f)?;
            log += f_log;
            // renormalise to keep the iterates in range
            let (tn, l) = normalise(t);
            t = tn;
            log += l;
        }
        if t.is_empty() {
            break;
        }
        order = k;
        if k < k0 {
            continue;
        }
        let p = Piece { s: t.scale(C::new(weight(k), 0.0)), log10: log };
        let e = effective(&p, eta_log10);
        if e > *best {
            *best = e;
        }
        let stop = e < *best - LIE_MARGIN;
        out.push(p);
        if stop {
            break;
        }
    }
    Ok((out, order))
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Assembles Σ pieces in the coordinates of radius ηr, renormalised.
fn assemble(template: &Series, pieces: &[Piece], eta_log10: f64) -> (Series, f64) {
    let lref = pieces.iter().map(|p| effective(p, eta_log10)).fold(f64::NEG_INFINITY, f64::max);
    let mut out = template.empty_like();
    if lref == f64::NEG_INFINITY {
        return (out, f64::NEG_INFINITY);
    }
    for p in pieces {
        for (m, c) in p.s.iter() {
            let e = p.log10 + (m.weighted_degree() as f64 - 2.0) * eta_log10 - lref;
            if e < -330.0 {
                continue;
            }
            out.add_term(m.clone(), *c * 10f64.powf(e));
        }
    }
    let (s, l) = normalise(out);
    (s, l + lref)
}

/// Outcome of one step at one point.
struct PointStep {
    excluded: bool,
    sol: Option<HomologicalSolution>,
    p_next: Series,
    p_next_log10: f64,
    lie_order: usize,
    drift_omega_log10: f64,
    drift_big_log10: f64,
    omega_hat: Vec<f64>,
    big_hat: BTreeMap<i32, Fourier>,
    f: Series,
    f_log10: f64,
}

fn step_point(st: &KamState, ps: &PointState, row: &ScheduleRow, next: &ScheduleRow) -> Result<PointStep> {
    let g = &st.globals;
    let (r_hat_in, _) = ps.p.taylor_truncate_r();
    let rest = ps.p.filter(|m, _| m.weighted_degree() > 2);
    let sc = StepConstants {
        alpha1: row.alpha1,
        alpha2: row.alpha2,
        gamma0: g.gamma0,
        tau: g.tau,
        s: row.s,
        sigma: row.sigma,
        a_mom: row.a_mom,
        k_trunc: row.k_trunc,
        pi: row.pi,
        c0: row.c0,
        fourier_max: g.fourier_max,
    };
    let nd = NormalData { sites: &st.sites, freq: &ps.freq, omega_tilde: &ps.omega_tilde };
    let sol = dispatch_and_solve_all(&r_hat_in, &nd, &sc)?;
    let empty = ps.p.empty_like();
    if sol.excluded() {
        return Ok(PointStep {
            excluded: true,
            sol: Some(sol),
            p_next: empty.clone(),
            p_next_log10: f64::NEG_INFINITY,
            lie_order: 0,
            drift_omega_log10: f64::NEG_INFINITY,
            drift_big_log10: f64::NEG_INFINITY,
            omega_hat: vec![],
            big_hat: BTreeMap::new(),
            f: empty,
            f_log10: f64::NEG_INFINITY,
        });
    }
    let l = ps.p_log10;
    let eta = row.eta_log10;
    let n_hat = sol.n_hat(&ps.p);
    let f = sol.f.clone();
    let mut best = f64::NEG_INFINITY;
    let mut pieces = Vec::new();
    let mut max_order = 0;
    let (p_rhat, rhat_log) = normalise(sol.r_hat.clone());
    if !p_rhat.is_empty() {
        pieces.push(Piece { s: p_rhat, log10: rhat_log + l });
        best = best.max(effective(pieces.last().unwrap(), eta));
    }
    // (P − R)∘Φ = Σ ad^k(P−R)/k!
    let (pc, oc) = lie_pieces(&rest, l, &f, l, 0, |k| 1.0 / factorial(k), eta, &mut best)?;
    pieces.extend(pc);
    max_order = max_order.max(oc);
    // Σ_k≥1 [ad^k(N̂+R̂) + k ad^k R]/(k+1)!
    let nr = n_hat.add(&sol.r_hat)?;
    let (pa, oa) = lie_pieces(&nr, l, &f, l, 1, |k| 1.0 / factorial(k + 1), eta, &mut best)?;
    let (pb, ob) = lie_pieces(&r_hat_in, l, &f, l, 1, |k| k as f64 / factorial(k + 1), eta, &mut best)?;
    pieces.extend(pa);
    pieces.extend(pb);
    max_order = max_order.max(oa).max(ob);
    let (p_next, p_next_log10) = assemble(&ps.p, &pieces, eta);

    let scale = 10f64.powf(l);
    let omega_hat: Vec<f64> = sol.omega_hat.iter().map(|w| w * scale).collect();
    let big_hat: BTreeMap<i32, Fourier> =
        sol.big_omega_hat.iter().map(|(j, f)| (*j, f.scale(C::new(scale, 0.0)))).collect();
    let dw = sol.omega_hat.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let db = sol
        .big_omega_hat
        .iter()
        .map(|(j, f)| f.norm(next.s, row.a_mom) / j.abs() as f64)
        .fold(0.0f64, f64::max);
    Ok(PointStep {
        excluded: false,
        p_next,
        p_next_log10,
        lie_order: max_order,
        drift_omega_log10: dw.log10() + l,
        drift_big_log10: db.log10() + l,
        omega_hat,
        big_hat,
        f,
        f_log10: l,
        sol: Some(sol),
    })
}

/// λ‖X_P‖^lip over declared pairs of active points, log10.
fn lipschitz_log10(st: &KamState, w: &NormWeights, lambda: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &(a, b) in &st.grid.pairs {
        let (pa, pb) = (&st.points[a], &st.points[b]);
        if !(pa.active && pb.active) {
            continue;
        }
        let lm = pa.p_log10.max(pb.p_log10);
        if lm == f64::NEG_INFINITY {
            continue;
        }
        let fa = if pa.p_log10.is_finite() { 10f64.powf(pa.p_log10 - lm) } else { 0.0 };
        let fb = if pb.p_log10.is_finite() { 10f64.powf(pb.p_log10 - lm) } else { 0.0 };
        let mut d = pa.p.scale(C::new(fa, 0.0));
        if d.axpy(C::new(-fb, 0.0), &pb.p).is_err() {
            continue;
        }
        if d.is_empty() {
            continue;
        }
        let nrm = majorant_norm(&hamiltonian_vector_field(&d), w);
        let v = nrm.log10() + lm - st.grid.dist(a, b).log10();
        best = best.max(v);
    }
    if best == f64::NEG_INFINITY {
        best
    } else {
        best + lambda.log10()
    }
}

/// ‖X_P‖^λ = ‖X_P‖ + λ‖X_P‖^lip on the active points, log10.
pub fn measure_eps(st: &KamState, row: &ScheduleRow) -> Result<f64> {
    let g = &st.globals;
    let w = NormWeights::unit_radius(row.s, g.p, g.q, g.a_exp, row.a_mom)?;
    let sup = st
        .points
        .par_iter()
        .filter(|p| p.active)
        .map(|p| p.norm_log10(&w))
        .collect::<Vec<_>>()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(log_add(sup, lipschitz_log10(st, &w, row.lambda)))
}

/// Frequencies at every point, for the zone search.
fn freq_table(st: &KamState) -> Vec<FreqPoint> {
    st.points.iter().map(|p| p.freq.clone()).collect()
}

/// One KAM step: exclusion, homological equations, new N and P, measurement.
pub fn kam_step(st: &KamState) -> Result<(KamState, KamStepReport)> {
    let nu = st.nu;
    let rows = schedule_rows(&st.globals, st.eps0_log10, nu + 1)?;
    let (row, next) = (&rows[nu], &rows[nu + 1]);
    let g = &st.globals;
    let mut new = st.clone();
    let active_before = st.points.iter().filter(|p| p.active).count();
    let mut rep = KamStepReport {
        nu,
        eps_log10: row.eps_log10,
        eta_log10: row.eta_log10,
        r_next_log10: next.r_log10,
        eps_next_schedule_log10: next.eps_log10,
        active_before,
        beyond_horizon: row.k_trunc > g.fourier_max as f64 || row.pi > g.j_max as f64,
        ..Default::default()
    };

    // (e) resonance zones at the step thresholds
    let pi_max = row.pi.min(g.j_max as f64).floor() as i32;
    let specs = enumerate_specs(&st.sites, st.enum_range, pi_max);
    let freqs = freq_table(st);
    let zones = step_zones(&st.sites, &st.grid, &specs, row.alpha1, row.alpha2, g.tau, Some(&freqs));
    for z in &zones {
        new.ledger.record(nu, z);
    }
    let mut zone_hit = vec![false; st.points.len()];
    for z in &zones {
        for (h, e) in zone_hit.iter_mut().zip(&z.excluded_mask) {
            *h |= *e;
        }
    }

    let todo: Vec<usize> = (0..st.points.len()).filter(|i| st.points[*i].active && !zone_hit[*i]).collect();
    let results: Vec<(usize, Result<PointStep>)> = todo.par_iter().map(|&i| (i, step_point(st, &st.points[i], row, next))).collect();

    for (i, h) in zone_hit.iter().enumerate() {
        if *h && new.points[i].active {
            new.points[i].active = false;
            rep.excluded_zone_points += 1;
        }
    }
    let mut drift_w = f64::NEG_INFINITY;
    let mut drift_b = f64::NEG_INFINITY;
    for (i, res) in results {
        let out = res?;
        if let Some(sol) = &out.sol {
            merge_stats(&mut rep.solver, &sol.stats);
        }
        let ps = &mut new.points[i];
        if out.excluded {
            ps.active = false;
            new.ledger.record_solver(nu, i);
            rep.excluded_solver_points += 1;
            continue;
        }
        rep.max_lie_order = rep.max_lie_order.max(out.lie_order);
        drift_w = drift_w.max(out.drift_omega_log10);
        drift_b = drift_b.max(out.drift_big_log10);
        for (b, w) in out.omega_hat.iter().enumerate() {
            ps.freq.omega_small[b] += w;
        }
        for (j, f) in &out.big_hat {
            let avg = f.average().re;
            let cur = ps.freq.big_omega_small(*j);
            ps.freq.big_small.insert(*j, cur + avg);
            let t = f.without_average();
            if !t.is_empty() {
                let e = ps.omega_tilde.entry(*j).or_insert_with(|| Fourier::zero(st.sites.sites(), 0));
                *e = e.add(&t).truncate(g.fourier_max).0;
            }
        }
        ps.generators.push(Generator { nu, log10_scale: out.f_log10, r_log10: row.r_log10, f: out.f });
        ps.p = out.p_next;
        ps.p_log10 = out.p_next_log10;
    }
    // Lipschitz part of the drift over pairs
    let mut lip_w = f64::NEG_INFINITY;
    for &(a, b) in &st.grid.pairs {
        let (pa, pb) = (&new.points[a], &new.points[b]);
        if !(pa.active && pb.active) {
            continue;
        }
        let (qa, qb) = (&st.points[a], &st.points[b]);
        let d = (0..g.n)
            .map(|k| ((pa.freq.omega_small[k] - qa.freq.omega_small[k]) - (pb.freq.omega_small[k] - qb.freq.omega_small[k])).abs())
            .fold(0.0, f64::max);
        if d > 0.0 {
            lip_w = lip_w.max(d.log10() - st.grid.dist(a, b).log10() + row.lambda.log10());
        }
    }
    rep.drift_omega_log10 = log_add(drift_w, lip_w);
    rep.drift_big_omega_log10 = drift_b;
    rep.drift_bound_log10 = row.b_log10 + row.eps_log10;
    rep.drift_ok = rep.drift_omega_log10 <= rep.drift_bound_log10 && rep.drift_big_omega_log10 <= rep.drift_bound_log10;

    new.nu = nu + 1;
    rep.active_after = new.points.iter().filter(|p| p.active).count();
    rep.excluded_fraction_added = (active_before - rep.active_after) as f64 / st.points.len().max(1) as f64;
    let measured = measure_eps(&new, next)?;
    rep.eps_next_measured_log10 = measured;
    rep.contraction_ok = measured <= next.eps_log10;
    rep.contraction_ratio = if st.measured_log10.is_finite() && measured.is_finite() {
        measured / st.measured_log10
    } else {
        f64::INFINITY
    };
    new.measured_log10 = measured;
    rep.omega_tilde_ratio_log10 = new
        .points
        .iter()
        .filter(|p| p.active)
        .flat_map(|p| {
            p.omega_tilde.iter().map(|(j, f)| {
                let v = f.norm_tau(next.s, g.tau + 1.0) + f.norm(next.s, next.a_mom);
                v.log10() - (g.alpha0 * g.gamma0 * j.abs() as f64).log10()
            })
        })
        .fold(f64::NEG_INFINITY, f64::max);
    if rep.active_after == 0 {
        return Err(Error::AllExcluded);
    }
    Ok((new, rep))
}

fn merge_stats(a: &mut SolverStats, b: &SolverStats) {
    a.diagonal += b.diagonal;
    a.exact += b.exact;
    a.truncated += b.truncated;
    a.pair_exact += b.pair_exact;
    a.deferred += b.deferred;
    a.bound_failures += b.bound_failures;
    a.max_residual = a.max_residual.max(b.max_residual);
}

/// Inputs for building the initial state from the DNLS Hamiltonian.
#[derive(Clone, Debug)]
pub struct KamSetup {
    pub dnls: DnlsConfig,
    pub sites: Vec<i64>,
    pub grid: ParameterGrid,
    pub globals: KamGlobals,
    pub binomial_order: u32,
    pub enum_range: EnumRange,
}

/// Builds H, its Birkhoff normal form, and N_0 + P_0 at every grid point.
pub fn prepare(setup: &KamSetup) -> Result<KamState> {
    let g = &setup.globals;
    g.validate()?;
    let sites = Arc::new(SiteSet::new(&setup.sites, setup.dnls.mode_cutoff)?);
    let split = build_dnls_hamiltonian(&setup.dnls)?;
    let birk = partial_birkhoff(&split)?;
    let budget = TruncationBudget::new(setup.dnls.degree_max.min(4), g.fourier_max);
    let opts = ReduceOptions { budget, binomial_order: setup.binomial_order, r: g.r0 };
    let reduced: Vec<Result<Series>> = setup
        .grid
        .points
        .par_iter()
        .enumerate()
        .map(|(i, xi)| Ok(action_angle_reduce(&split, &birk.r, &sites, xi, i, &opts)?.p))
        .collect();
    let reduced = reduced.into_iter().collect::<Result<Vec<_>>>()?;
    KamState::new(g.clone(), sites, setup.grid.clone(), budget, reduced, setup.enum_range)
}

impl KamState {
    /// State at ν = 0 with N_0 given by the affine frequency maps and P_0 at
    /// each grid point given in unscaled coordinates on the ball of radius r_0.
    pub fn new(
        globals: KamGlobals,
        sites: Arc<SiteSet>,
        grid: ParameterGrid,
        budget: TruncationBudget,
        perturbations: Vec<Series>,
        enum_range: EnumRange,
    ) -> Result<Self> {
        let g = &globals;
        g.validate()?;
        if sites.n() != g.n {
            return Err(Error::SiteMismatch);
        }
        if perturbations.len() != grid.len() {
            return Err(Error::Config(format!("{} perturbations for {} grid points", perturbations.len(), grid.len())));
        }
        let fd = FrequencyData::new(&sites);
        let ln_r = g.r0.log10();
        let points: Vec<PointState> = perturbations
            .into_par_iter()
            .zip(grid.points.par_iter())
            .enumerate()
            .map(|(i, (raw, xi))| {
                // rescale to the unit ball, normalising on the fly
                let lref = raw
                    .iter()
                    .map(|(m, c)| c.norm().log10() + (m.weighted_degree() as f64 - 2.0) * ln_r)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut p = raw.empty_like();
                for (m, c) in raw.iter() {
                    let e = (m.weighted_degree() as f64 - 2.0) * ln_r - lref;
                    p.add_term(m.clone(), *c * 10f64.powf(e));
                }
                let (p, l) = normalise(p);
                PointState {
                    index: i,
                    xi: xi.clone(),
                    freq: FreqPoint::affine(&fd, xi),
                    omega_tilde: BTreeMap::new(),
                    p,
                    p_log10: l + if lref.is_finite() { lref } else { 0.0 },
                    active: true,
                    generators: vec![],
                }
            })
            .collect();
        let mut st = KamState {
            nu: 0,
            globals: globals.clone(),
            sites,
            ledger: ExclusionLedger::new(&grid),
            grid,
            budget,
            points,
            eps0_log10: 0.0,
            measured_log10: 0.0,
            enum_range,
        };
        // the norm weights of row 0 do not depend on ε_0
        let row0 = schedule_rows(g, -1.0, 0)?.remove(0);
        let eps0 = measure_eps(&st, &row0)?;
        // P_0 = 0 leaves ε_0 free; keep the schedule defined
        st.eps0_log10 = if eps0 == f64::NEG_INFINITY { EPS_ZERO_LOG10 } else { eps0 };
        st.measured_log10 = eps0;
        Ok(st)
    }
}

/// Final output of a run.
#[derive(Clone, Debug)]
pub struct TorusOutput {
    pub steps: usize,
    pub mask: Vec<bool>,
    pub points: Vec<TorusPoint>,
    /// First step whose K_ν or Π_ν exceeds the truncation.
    pub horizon: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TorusPoint {
    pub index: usize,
    pub xi: Vec<f64>,
    pub active: bool,
    /// φ(ξ) = ω_ν(ξ).
    pub omega: Vec<f64>,
    pub omega_small: Vec<f64>,
    /// Φ^ν = Φ_1 ∘ ⋯ ∘ Φ_ν as its generators, in order.
    pub generators: Vec<Generator>,
}

fn torus_output(st: &KamState, horizon: Option<usize>) -> TorusOutput {
    let js = st.sites.sites();
    TorusOutput {
        steps: st.nu,
        mask: st.mask(),
        horizon,
        points: st
            .points
            .iter()
            .map(|p| TorusPoint {
                index: p.index,
                xi: p.xi.clone(),
                active: p.active,
                omega: js.iter().zip(&p.freq.omega_small).map(|(j, w)| (j * j) as f64 + w).collect(),
                omega_small: p.freq.omega_small.clone(),
                generators: p.generators.clone(),
            })
            .collect(),
    }
}

/// Iterates [`kam_step`] up to `max_steps` times.
///
/// Stops early when the measured ε drops below the floor, or at the
/// truncation horizon when `halt_at_horizon` is set. A measured ε above the
/// schedule halts with `ContractionFailure`; the reports so far are returned
/// inside the error path through `on_report`.
pub fn run(
    mut st: KamState,
    max_steps: usize,
    mut on_report: impl FnMut(&KamStepReport),
) -> Result<(Vec<KamStepReport>, TorusOutput)> {
    let mut reports = Vec::new();
    let mut horizon = None;
    for _ in 0..max_steps {
        let row = st.row(st.nu)?;
        let beyond = row.k_trunc > st.globals.fourier_max as f64 || row.pi > st.globals.j_max as f64;
        if beyond && horizon.is_none() {
            horizon = Some(st.nu);
        }
        if beyond && st.globals.halt_at_horizon {
            break;
        }
        if st.measured_log10 < st.globals.eps_floor_log10 {
            break;
        }
        let (next, rep) = kam_step(&st)?;
        on_report(&rep);
        let failed = !rep.contraction_ok;
        let (step, measured, scheduled) = (rep.nu, rep.eps_next_measured_log10, rep.eps_next_schedule_log10);
        reports.push(rep);
        st = next;
        if failed {
            return Err(Error::ContractionFailure { step, measured_log10: measured, scheduled_log10: scheduled });
        }
    }
    let out = torus_output(&st, horizon);
    Ok((reports, out))
}

/// Result of [`verify_contraction`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionVerdict {
    pub ok: bool,
    pub failures: Vec<String>,
    pub strictly_decreasing: bool,
    pub min_ratio_from_step1: f64,
}

/// Every measured ε_{ν+1} within the schedule, drifts within B_νε_ν.
pub fn verify_contraction(reports: &[KamStepReport]) -> ContractionVerdict {
    let mut failures = Vec::new();
    let mut dec = true;
    let mut min_ratio = f64::INFINITY;
    for r in reports {
        if !(r.eps_next_measured_log10 <= r.eps_next_schedule_log10) {
            failures.push(format!("step {}: measured 1e{:.3} > scheduled 1e{:.3}", r.nu, r.eps_next_measured_log10, r.eps_next_schedule_log10));
        }
        if !r.drift_ok {
            failures.push(format!(
                "step {}: drift 1e{:.3}/1e{:.3} > B·ε 1e{:.3}",
                r.nu, r.drift_omega_log10, r.drift_big_omega_log10, r.drift_bound_log10
            ));
        }
    }
    for w in reports.windows(2) {
        if !(w[1].eps_next_measured_log10 < w[0].eps_next_measured_log10) {
            dec = false;
        }
    }
    for r in reports.iter().skip(1) {
        min_ratio = min_ratio.min(r.contraction_ratio);
    }
    ContractionVerdict { ok: failures.is_empty(), failures, strictly_decreasing: dec, min_ratio_from_step1: min_ratio }
}

/// Smallest c (log10) not above the configured one for which every measured
/// step inequality of the run holds with the schedule recomputed at that c.
pub fn c_min_log10(g: &KamGlobals, eps0_log10: f64, reports: &[KamStepReport]) -> Option<f64> {
    if reports.is_empty() {
        return None;
    }
    let holds = |lc: f64| -> bool {
        let mut gg = g.clone();
        gg.c = 10f64.powf(lc);
        let Ok(rows) = schedule_rows(&gg, eps0_log10, reports.len()) else { return false };
        reports.iter().all(|r| {
            let (row, next) = (&rows[r.nu], &rows[r.nu + 1]);
            r.eps_next_measured_log10 <= next.eps_log10
                && r.drift_omega_log10 <= row.b_log10 + row.eps_log10
                && r.drift_big_omega_log10 <= row.b_log10 + row.eps_log10
        })
    };
    // larger c only loosens every inequality, up to the point where the
    // schedule leaves (0,1); search below the configured value
    let (mut lo, mut hi) = (-600.0, g.c.log10());
    if !holds(hi) {
        return None;
    }
    if holds(lo) {
        return Some(lo);
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn globals() -> KamGlobals {
        KamGlobals {
            n: 2,
            beta: 1.0 / 13.0,
            tau: 5.0,
            gamma0: 1e-3,
            c: 1.0,
            s0: 0.4,
            r0: 0.1,
            alpha0: 1e-3,
            m0: 0.5,
            e0: 4.0,
            m1_0: 2.0,
            m2_0: 4.0 / 3.0,
            m3_0: 1e-3,
            c_j: 2.0,
            p: 2.0,
            q: 1.0,
            a_exp: 0.0,
            fourier_max: 24,
            j_max: 8,
            gamma: 1.0,
            eps_floor_log10: -30.0,
            halt_at_horizon: false,
        }
    }

    #[test]
    fn schedule_constants() {
        let g = globals();
        assert!((g.beta_prime() - 1.0 / 28.0).abs() < 1e-15);
        assert!((g.kappa() - 37.0 / 28.0).abs() < 1e-15);
        let rows = schedule_rows(&g, -300.0, 3).unwrap();
        assert!((rows[2].s - 0.1).abs() < 1e-15);
        assert!((rows[2].sigma - 0.005).abs() < 1e-15);
        for w in rows.windows(2) {
            let lhs = w[1].eps_log10 - g.kappa() * w[0].eps_log10;
            let rhs = (w[0].b_log10 - w[0].alpha2.log10()) / 3.0;
            assert!((lhs - rhs).abs() < 1e-9);
        }
        assert!(schedule_rows(&g, 0.5, 0).is_err());
    }

    #[test]
    fn log_add_basic() {
        assert!((log_add(0.0, 0.0) - 2f64.log10()).abs() < 1e-15);
        assert_eq!(log_add(f64::NEG_INFINITY, -3.0), -3.0);
    }
}
