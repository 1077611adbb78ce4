//! The subcommands. Each writes its files under the output directory and
//! returns a verdict together with the process exit code.

use crate::config::RunConfig;
use crate::output::{fmt_f64, JsonLines, OutDir};
use anyhow::{bail, Context};
use dnls_kam::appendix::{verify_appendix_bounds, AppendixReport};
use dnls_kam::dnls::{build_dnls_hamiltonian, partial_birkhoff, symplecticity_defect};
use dnls_kam::index::{admissible, Admissibility};
use dnls_kam::kam::{
    c_min_log10, prepare, run, schedule_rows, smallness_gate, verify_contraction, ContractionVerdict, KamStepReport,
    SmallnessGate, TorusOutput,
};
use dnls_kam::nonres::{
    audit_assumptions, enumerate_specs, pair_step_totals, scaling_report, step_zones, sweep_point, theta2_bound,
    AffineDivisor, AuditReport, Family, ScalingReport, SweepPoint,
};
use dnls_kam::norms::ParameterGrid;
use dnls_kam::{Error, Series};
use serde::Serialize;

/// Exit codes: success, a negative verdict, and a failed contraction or check.
pub const EXIT_OK: i32 = 0;
pub const EXIT_REJECTED: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

#[derive(Clone, Debug, Serialize)]
pub struct AdmissibleVerdict {
    pub sites: Vec<i64>,
    pub n: usize,
    pub admissible: bool,
    /// "divisibility" or "sign-condition" when rejected.
    pub reason: Option<String>,
}

pub fn cmd_admissible(cfg: &RunConfig, out: &OutDir) -> anyhow::Result<(AdmissibleVerdict, i32)> {
    let a = admissible(&cfg.sites.j)?;
    let reason = match a {
        Admissibility::Admissible => None,
        Admissibility::ViolatesDivisibility => Some("divisibility".to_string()),
        Admissibility::ViolatesSignCondition => Some("sign-condition".to_string()),
    };
    let v = AdmissibleVerdict { sites: cfg.sites.j.clone(), n: cfg.n(), admissible: reason.is_none(), reason };
    out.write_json("admissible.json", &v)?;
    let code = if v.admissible { EXIT_OK } else { EXIT_REJECTED };
    Ok((v, code))
}

fn require_admissible(cfg: &RunConfig) -> anyhow::Result<bool> {
    let ok = admissible(&cfg.sites.j)? == Admissibility::Admissible;
    if !ok && !cfg.sites.allow_inadmissible {
        bail!(Error::Config(format!(
            "sites {:?} are not admissible; set sites.allow_inadmissible to inspect them anyway",
            cfg.sites.j
        )));
    }
    Ok(ok)
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionsVerdict {
    pub sites: Vec<i64>,
    pub admissible: bool,
    pub audit: AuditReport,
    pub ok: bool,
}

pub fn cmd_assumptions(cfg: &RunConfig, out: &OutDir) -> anyhow::Result<(AssumptionsVerdict, i32)> {
    let adm = require_admissible(cfg)?;
    if cfg.enumeration.k_max == 0 {
        bail!(Error::EmptyRange("enumeration.k_max = 0 leaves no frequency vectors".into()));
    }
    let audit = audit_assumptions(&cfg.site_set()?, &cfg.grid()?, cfg.enum_range())?;
    let ok = audit.witnesses.is_empty();
    let v = AssumptionsVerdict { sites: cfg.sites.j.clone(), admissible: adm, audit, ok };
    out.write_json("assumptions.json", &v)?;
    Ok((v, if ok { EXIT_OK } else { EXIT_FAILED }))
}

#[derive(Clone, Debug, Serialize)]
pub struct PieceSummary {
    pub name: String,
    pub terms: usize,
    pub max_abs: f64,
    pub momentum_conserving: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalFormVerdict {
    pub mode_cutoff: i64,
    pub n_split: i64,
    pub pieces: Vec<PieceSummary>,
    pub delta1_residual: f64,
    pub zero_divisors: Vec<String>,
    pub lie_orders: usize,
    pub symplecticity_defect: f64,
    /// F_4 = 0, so the transform is the identity.
    pub identity: bool,
    pub ok: bool,
}

fn summary(name: &str, s: &Series) -> PieceSummary {
    PieceSummary { name: name.into(), terms: s.len(), max_abs: s.max_abs(), momentum_conserving: s.is_momentum_conserving() }
}

pub fn cmd_normal_form(cfg: &RunConfig, out: &OutDir) -> anyhow::Result<(NormalFormVerdict, i32)> {
    let dnls = cfg.dnls();
    let split = build_dnls_hamiltonian(&dnls)?;
    let birk = partial_birkhoff(&split)?;
    let modes: Vec<i32> = (1..=dnls.mode_cutoff as i32).flat_map(|j| [-j, j]).collect();
    let defect = if birk.f4.is_empty() { 0.0 } else { symplecticity_defect(&birk.f4, &modes)? };
    let dump = out.subdir("normal_form")?;
    let pieces = [
        ("lambda", &split.lambda),
        ("b", &split.b),
        ("q1", &split.q1),
        ("q2", &split.q2),
        ("k", &split.k),
        ("f4", &birk.f4),
        ("h_nf", &birk.h_nf),
        ("r", &birk.r),
    ];
    for (name, s) in pieces {
        dump.write_text(&format!("{name}.txt"), &s.to_text())?;
    }
    let pieces: Vec<PieceSummary> = pieces.iter().map(|(n, s)| summary(n, s)).collect();
    let momentum = pieces.iter().all(|p| p.momentum_conserving);
    let ok = birk.report.delta1_residual < 1e-12 && defect < 1e-10 && momentum;
    let v = NormalFormVerdict {
        mode_cutoff: dnls.mode_cutoff,
        n_split: dnls.n_split,
        pieces,
        delta1_residual: birk.report.delta1_residual,
        zero_divisors: birk.report.zero_divisors.clone(),
        lie_orders: birk.report.lie_orders,
        symplecticity_defect: defect,
        identity: birk.f4.is_empty(),
        ok,
    };
    out.write_json("normal_form.json", &v)?;
    Ok((v, if ok { EXIT_OK } else { EXIT_FAILED }))
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneratorSummary {
    pub nu: usize,
    pub log10_scale: f64,
    pub r_log10: f64,
    pub terms: usize,
    pub file: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct TorusPointSummary {
    pub index: usize,
    pub xi: Vec<f64>,
    pub active: bool,
    pub omega: Vec<f64>,
    pub omega_small: Vec<f64>,
    pub generators: Vec<GeneratorSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct KamVerdict {
    pub eps0_log10: f64,
    pub gate: SmallnessGate,
    pub steps: usize,
    pub horizon: Option<usize>,
    pub contraction: ContractionVerdict,
    pub c_min_log10: Option<f64>,
    pub active_points: usize,
    pub excluded_points: usize,
    /// Set when the run stopped on an error before `max_steps`.
    pub error: Option<String>,
}

fn torus_summary(t: &TorusOutput, out: &OutDir) -> anyhow::Result<Vec<TorusPointSummary>> {
    let dir = out.subdir("torus")?;
    let mut pts = Vec::new();
    for p in &t.points {
        let mut gens = Vec::new();
        for g in &p.generators {
            let file = format!("point{}_step{}.txt", p.index, g.nu);
            dir.write_text(&file, &g.f.to_text())?;
            gens.push(GeneratorSummary {
                nu: g.nu,
                log10_scale: g.log10_scale,
                r_log10: g.r_log10,
                terms: g.f.len(),
                file: format!("torus/{file}"),
            });
        }
        pts.push(TorusPointSummary {
            index: p.index,
            xi: p.xi.clone(),
            active: p.active,
            omega: p.omega.clone(),
            omega_small: p.omega_small.clone(),
            generators: gens,
        });
    }
    Ok(pts)
}

/// Runs the iteration, streaming one JSON line per step to `steps.jsonl`.
pub fn cmd_kam(cfg: &RunConfig, out: &OutDir) -> anyhow::Result<(KamVerdict, i32)> {
    require_admissible(cfg)?;
    let (setup, _audit) = cfg.kam_setup()?;
    let st = prepare(&setup)?;
    let g = st.globals.clone();
    let eps0 = st.eps0_log10;
    let gate = smallness_gate(&g, eps0);
    if !(gate.lemma_ok && gate.alpha0_ok) {
        if cfg.schedule.require_gate {
            bail!(Error::HypothesisFailure(format!(
                "ε_0 = 1e{eps0:.3} fails the smallness gate (bound 1e{:.3}, α_0 ok: {})",
                gate.lemma_bound_log10, gate.alpha0_ok
            )));
        }
        eprintln!(
            "warning: ε_0 = 1e{eps0:.3} is above the smallness bound 1e{:.3} (α_0 ok: {}); proceeding",
            gate.lemma_bound_log10, gate.alpha0_ok
        );
    }
    let mut log = JsonLines::create(&out.path("steps.jsonl"))?;
    let mut seen: Vec<KamStepReport> = Vec::new();
    let mut write_err = None;
    let res = run(st, cfg.schedule.max_steps, |r| {
        if let Err(e) = log.push(r) {
            write_err.get_or_insert(e);
        }
        seen.push(r.clone());
    });
    if let Some(e) = write_err {
        return Err(e.context("writing steps.jsonl"));
    }
    let (torus, error) = match res {
        Ok((_, t)) => (Some(t), None),
        Err(e @ Error::ContractionFailure { .. }) | Err(e @ Error::AllExcluded) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let contraction = verify_contraction(&seen);
    let c_min = c_min_log10(&g, eps0, &seen);
    let (active, excluded, horizon, steps) = match &torus {
        Some(t) => {
            let a = t.mask.iter().filter(|b| **b).count();
            (a, t.mask.len() - a, t.horizon, t.steps)
        }
        None => (0, 0, None, seen.len()),
    };
    if let Some(t) = &torus {
        let pts = torus_summary(t, out)?;
        out.write_json("torus.json", &pts)?;
    }
    let ok = error.is_none() && contraction.ok;
    let v = KamVerdict {
        eps0_log10: eps0,
        gate,
        steps,
        horizon,
        contraction,
        c_min_log10: c_min,
        active_points: active,
        excluded_points: excluded,
        error,
    };
    out.write_json("kam.json", &v)?;
    Ok((v, if ok { EXIT_OK } else { EXIT_FAILED }))
}

#[derive(Clone, Debug, Serialize)]
pub struct Theta2Row {
    pub nu: usize,
    pub alpha2: f64,
    pub pi: f64,
    pub total: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureVerdict {
    pub tau: f64,
    pub sweep: Vec<SweepPoint>,
    pub theta2: Vec<Theta2Row>,
    pub scaling: ScalingReport,
    /// Divisors that vanish identically on the affine maps.
    pub identically_zero: usize,
    /// Some α removes every grid point.
    pub full_exclusion: bool,
    pub ok: bool,
}

/// Zone tables over an α sweep and the linear-scaling report.
pub fn cmd_measure(cfg: &RunConfig, alphas: Option<&[f64]>, out: &OutDir) -> anyhow::Result<(MeasureVerdict, i32)> {
    require_admissible(cfg)?;
    let alphas = alphas.unwrap_or(&cfg.measure.alphas);
    if alphas.is_empty() {
        bail!(Error::EmptyRange("α sweep is empty".into()));
    }
    let sites = cfg.site_set()?;
    let grid = cfg.grid()?;
    let range = cfg.enum_range();
    let tau = cfg.measure_tau();
    let specs = enumerate_specs(&sites, range, range.mode_max);
    let identically_zero = specs.iter().filter(|s| AffineDivisor::of(s, &sites).is_identically_zero()).count();

    let mut w = csv::Writer::from_path(out.path("zones.csv"))?;
    w.write_record(["alpha", "family", "k", "l", "threshold", "min_abs", "excluded_points", "analytic_measure"])?;
    let mut sweep = Vec::new();
    for &a in alphas {
        let zones = step_zones(&sites, &grid, &specs, a, a, tau, None);
        sweep.push(sweep_point(&grid, a, &zones));
        for z in zones {
            let k: Vec<String> = z.spec.k.iter().map(|x| x.to_string()).collect();
            let l: Vec<String> = z.spec.l.iter().map(|(j, c)| format!("{j}:{c}")).collect();
            let fam = match z.family {
                Family::General => "theta1",
                Family::Pair => "theta2",
            };
            w.write_record([
                fmt_f64(a),
                fam.into(),
                k.join(" "),
                l.join(" "),
                fmt_f64(z.threshold),
                fmt_f64(z.min_abs),
                z.excluded_count().to_string(),
                z.analytic_measure.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.path("sweep.csv"))?;
    w.write_record(["alpha", "analytic_sum", "grid_union", "grid_sum", "worst_cell_ratio", "zones"])?;
    for p in &sweep {
        w.write_record([
            fmt_f64(p.alpha),
            fmt_f64(p.analytic_sum),
            fmt_f64(p.grid_union),
            fmt_f64(p.grid_sum),
            fmt_f64(p.worst_cell_ratio),
            p.zones.to_string(),
        ])?;
    }
    w.flush()?;
    let full_exclusion = sweep.iter().any(|p| p.grid_union >= grid.box_volume() * (1.0 - 1e-12));

    // Θ² along the schedule; undefined when M_3 = 0
    // the audited constants are affine in ξ, so a coarse grid on the same box suffices
    let coarse = ParameterGrid::boxed(&grid.lo, &grid.hi, &vec![4; cfg.n()])?;
    let audit = audit_assumptions(&sites, &coarse, range)?;
    let theta2 = if audit.m3_estimate > 0.0 { theta2_rows(cfg, &audit, &grid, tau)? } else { Vec::new() };
    let mut w = csv::Writer::from_path(out.path("theta2.csv"))?;
    w.write_record(["nu", "alpha2", "pi", "total", "bound"])?;
    for t in &theta2 {
        w.write_record([t.nu.to_string(), fmt_f64(t.alpha2), fmt_f64(t.pi), fmt_f64(t.total), fmt_f64(t.bound)])?;
    }
    w.flush()?;

    let totals: Vec<f64> = theta2.iter().map(|t| t.total).collect();
    let bounds: Vec<f64> = theta2.iter().map(|t| t.bound).collect();
    let scaling = scaling_report(&sweep, &totals, &bounds);
    let ok = scaling.ok;
    let v = MeasureVerdict { tau, sweep, theta2, scaling, identically_zero, full_exclusion, ok };
    out.write_json("measure.json", &v)?;
    Ok((v, if ok { EXIT_OK } else { EXIT_FAILED }))
}

fn theta2_rows(cfg: &RunConfig, audit: &AuditReport, grid: &ParameterGrid, tau: f64) -> anyhow::Result<Vec<Theta2Row>> {
    let sites = cfg.site_set()?;
    let range = cfg.enum_range();
    let g = cfg.kam_globals(audit, grid)?;
    let eps0 = match cfg.measure.eps0_log10 {
        Some(e) => e,
        None => {
            let (setup, _) = cfg.kam_setup()?;
            prepare(&setup)?.eps0_log10
        }
    };
    let steps = cfg.measure.steps.max(1);
    let rows = schedule_rows(&g, eps0, steps - 1).context("schedule for the Θ² totals")?;
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha2, r.pi)).collect();
    let totals = pair_step_totals(&sites, grid, range, &pairs, tau);
    Ok(rows
        .iter()
        .zip(&totals)
        .map(|(r, t)| Theta2Row {
            nu: r.nu,
            alpha2: r.alpha2,
            pi: r.pi,
            total: *t,
            bound: theta2_bound(g.alpha0, grid.diameter(), audit.m3_estimate, tau, cfg.n(), range.k_max, r.nu),
        })
        .collect())
}

pub fn cmd_verify_bounds(cfg: &RunConfig, out: &OutDir) -> anyhow::Result<(AppendixReport, i32)> {
    let rep = verify_appendix_bounds(cfg.verify.samples, cfg.seed);
    out.write_json("verify_bounds.json", &rep)?;
    let code = if rep.all_passed() { EXIT_OK } else { EXIT_FAILED };
    Ok((rep, code))
}
