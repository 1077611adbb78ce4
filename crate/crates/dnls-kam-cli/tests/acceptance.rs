//! One line per acceptance criterion. Runs without the libtest harness so
//! the lines print in order; the process fails if any criterion fails.

use dnls_kam::appendix::verify_appendix_bounds;
use dnls_kam::homological::{random_exact_problem, random_truncated_problem, solve_variable_exact, solve_variable_truncated};
use dnls_kam::kam::{kam_step, prepare, verify_contraction};
use dnls_kam::nonres::{audit_assumptions, divisor, lemma32_exhaustive, AffineDivisor, DivisorSpec, EnumRange, FreqPoint};
use dnls_kam::norms::ParameterGrid;
use dnls_kam::dnls::FrequencyData;
use dnls_kam::SiteSet;
use dnls_kam_cli::commands::*;
use dnls_kam_cli::output::OutDir;
use dnls_kam_cli::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::{Duration, Instant};

type Outcome = anyhow::Result<(bool, String)>;

fn config(name: &str) -> RunConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn scratch() -> anyhow::Result<(tempfile::TempDir, OutDir)> {
    let d = tempfile::tempdir()?;
    let o = OutDir::create(d.path())?;
    Ok((d, o))
}

fn within(t: Instant, limit: Option<Duration>) -> (bool, String) {
    let e = t.elapsed();
    match limit {
        Some(l) => (e <= l, format!("{:.1}s/{}s", e.as_secs_f64(), l.as_secs())),
        None => (true, format!("{:.1}s", e.as_secs_f64())),
    }
}

/// D·den·Πq_b at a rational ξ_b = p_b/q_b, in exact integers.
fn scaled_divisor(d: &AffineDivisor, p: &[i128], q: &[i128]) -> i128 {
    let qprod: i128 = q.iter().product();
    let mut acc = d.integer * d.den * qprod;
    for b in 0..p.len() {
        acc += d.grad_num[b] * p[b] * (qprod / q[b]);
    }
    acc
}

fn counterexample() -> Outcome {
    let sites = SiteSet::new(&[-1, 1], 8)?;
    let spec = DivisorSpec::new(&[4, -4], &[(3, 1), (-3, -1)])?;
    let aff = AffineDivisor::of(&spec, &sites);
    let fd = FrequencyData::new(&sites);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut exact_zero, mut worst_float) = (0, 0.0f64);
    let samples = 200;
    for _ in 0..samples {
        let q: Vec<i128> = (0..2).map(|_| rng.gen_range(1..1_000_000)).collect();
        let p: Vec<i128> = q.iter().map(|qb| rng.gen_range(0..*qb)).collect();
        if scaled_divisor(&aff, &p, &q) == 0 {
            exact_zero += 1;
        }
        let xi: Vec<f64> = p.iter().zip(&q).map(|(a, b)| *a as f64 / *b as f64).collect();
        worst_float = worst_float.max(divisor(&spec, &sites, &FreqPoint::affine(&fd, &xi)).abs());
    }
    let (_d, out) = scratch()?;
    let (v, code) = cmd_admissible(&config("counterexample.toml"), &out)?;
    let rejected = code == EXIT_REJECTED && v.reason.as_deref() == Some("divisibility");
    let ok = aff.is_identically_zero() && exact_zero == samples && rejected;
    Ok((ok, format!("exact zero at {exact_zero}/{samples} rational ξ, float |D| ≤ {worst_float:.1e}, admissible exit {code}")))
}

fn dichotomy() -> Outcome {
    let mut ok = true;
    let mut msg = Vec::new();
    for js in [vec![-1, 2], vec![-2, 1, 3]] {
        let rep = lemma32_exhaustive(&SiteSet::new(&js, 8)?, EnumRange { k_max: 20, mode_max: 60 });
        ok &= rep.cases > 0 && rep.cases == rep.satisfied;
        msg.push(format!("{js:?}: {}/{}", rep.satisfied, rep.cases));
    }
    Ok((ok, msg.join(", ")))
}

fn audit() -> Outcome {
    let sites = SiteSet::new(&[-1, 2], 8)?;
    let n = 2.0;
    let grid = ParameterGrid::boxed(&[0.01, 0.01], &[0.015, 0.015], &[4, 4])?;
    let a = audit_assumptions(&sites, &grid, EnumRange { k_max: 20, mode_max: 60 })?;
    let m2 = n / (n - 0.5);
    let m3 = 1.0 / (100.0 * n * 3.0);
    let ok = a.m >= 0.5 && (a.m2 - m2).abs() <= 1e-12 && a.m3_estimate >= m3 && a.m2_claimed == m2;
    Ok((ok, format!("m = {:.4}, M2 − n/(n−½) = {:.1e}, M3 = {:.4} ≥ {:.4}", a.m, a.m2 - m2, a.m3_estimate, m3)))
}

fn birkhoff() -> Outcome {
    let (_d, out) = scratch()?;
    let (v, _) = cmd_normal_form(&config("normal_form.toml"), &out)?;
    let momentum = v.pieces.iter().all(|p| p.momentum_conserving);
    let ok = v.mode_cutoff == 6 && v.delta1_residual < 1e-12 && v.symplecticity_defect < 1e-10 && momentum;
    Ok((
        ok,
        format!("J_max = {}, Δ1 residual {:.1e}, symplecticity {:.1e}, momentum {}", v.mode_cutoff, v.delta1_residual, v.symplecticity_defect, momentum),
    ))
}

fn solvers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut t_ok, mut worst_u, mut worst_tail, mut worst_res) = (0, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..1000 {
        let js: &[i32] = if i % 2 == 0 { &[-1, 2] } else { &[-2, 1, 3] };
        let kk = rng.gen_range(0..4);
        let (_, _, c) = solve_variable_truncated(&random_truncated_problem(&mut rng, js, kk))?;
        worst_u = worst_u.max(c.u_norm / c.u_bound);
        if c.tail_bound > 0.0 {
            worst_tail = worst_tail.max(c.tail_norm / c.tail_bound);
        }
        worst_res = worst_res.max(c.residual);
        if c.holds && c.residual < 1e-10 {
            t_ok += 1;
        }
    }
    let mut e_ok = 0;
    let mut worst_e = 0.0f64;
    for _ in 0..200 {
        let (_, c) = solve_variable_exact(&random_exact_problem(&mut rng, &[-1, 2], 8))?;
        worst_e = worst_e.max(c.lhs / c.rhs);
        worst_res = worst_res.max(c.residual);
        if c.applicable && c.holds && c.residual < 1e-10 {
            e_ok += 1;
        }
    }
    Ok((
        t_ok == 1000 && e_ok == 200,
        format!(
            "truncated {t_ok}/1000 (|u|/bound ≤ {worst_u:.3}, tail/bound ≤ {worst_tail:.3}), exact {e_ok}/200 (lhs/rhs ≤ {worst_e:.1e}), residual ≤ {worst_res:.1e}"
        ),
    ))
}

fn kam_contraction() -> Outcome {
    let cfg = config("desk.toml");
    let (setup, _) = cfg.kam_setup()?;
    let t = &cfg.truncation;
    let shape = cfg.sites.j == [-1, 2] && t.j_max == 8 && t.degree_max == 4 && t.fourier_max == 24
        && (cfg.schedule.beta - 1.0 / 13.0).abs() < 1e-15;
    let mut st = prepare(&setup)?;
    let kappa = st.globals.kappa();
    let mut reps = Vec::new();
    let mut nested = true;
    for _ in 0..cfg.schedule.max_steps {
        let before = st.mask();
        let (next, r) = kam_step(&st)?;
        nested &= next.mask().iter().zip(&before).all(|(b, a)| !*b || *a);
        reps.push(r);
        st = next;
    }
    let v = verify_contraction(&reps);
    let drift = reps.iter().all(|r| r.drift_ok);
    let ok = shape && (3..=4).contains(&reps.len()) && v.ok && v.strictly_decreasing && v.min_ratio_from_step1 >= 1.25 && drift && nested;
    let ratios: Vec<String> = reps.iter().map(|r| format!("{:.3}", r.contraction_ratio)).collect();
    Ok((
        ok,
        format!(
            "κ = {kappa:.4}, {} steps, log ratios [{}], drift within B·ε {drift}, nested {nested}, {} of {} points kept",
            reps.len(),
            ratios.join(", "),
            st.mask().iter().filter(|b| **b).count(),
            st.mask().len()
        ),
    ))
}

fn measure_scaling() -> Outcome {
    let (_d, out) = scratch()?;
    let cfg = config("measure.toml");
    let (v, _) = cmd_measure(&cfg, None, &out)?;
    let s = &v.scaling;
    let lo = s.doubling_ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = s.doubling_ratios.iter().cloned().fold(0.0, f64::max);
    let ok = v.tau == (cfg.n() + 3) as f64 && s.linear_ok && s.cells_ok && s.geometric_ok;
    Ok((
        ok,
        format!(
            "doubling ratios in [{lo:.3}, {hi:.3}], grid vs analytic {:.2} cells per boundary, Θ²/bound ≤ {:.1e} over {} steps",
            s.worst_cell_ratio,
            s.theta2_worst_ratio,
            s.theta2_per_step.len()
        ),
    ))
}

fn appendix() -> Outcome {
    let rep = verify_appendix_bounds(500, 3);
    let worst: Vec<String> = rep.lemmas.iter().map(|l| format!("{} {:.2}", l.lemma, l.worst_ratio)).collect();
    let ok = rep.all_passed() && rep.lemmas.iter().all(|l| l.samples == 500 && l.passed == 500);
    Ok((ok, format!("500 samples each; worst ratios: {}", worst.join(", "))))
}

fn determinism() -> Outcome {
    let cfg = config("desk.toml");
    let mut logs = Vec::new();
    for _ in 0..2 {
        let (d, out) = scratch()?;
        cmd_kam(&cfg, &out)?;
        logs.push(std::fs::read(d.path().join("steps.jsonl"))?);
    }
    let lines = logs[0].iter().filter(|b| **b == b'\n').count();
    Ok((logs[0] == logs[1] && lines > 0, format!("{lines} step lines, {} bytes, identical {}", logs[0].len(), logs[0] == logs[1])))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<u64>); 9] = [
        ("counterexample", counterexample, Some(1)),
        ("dichotomy", dichotomy, Some(120)),
        ("assumption-audit", audit, None),
        ("birkhoff", birkhoff, Some(60)),
        ("solver-bounds", solvers, Some(120)),
        ("kam-contraction", kam_contraction, Some(600)),
        ("measure-scaling", measure_scaling, Some(120)),
        ("appendix", appendix, Some(300)),
        ("determinism", determinism, None),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        let (in_time, time) = within(t, limit.map(Duration::from_secs));
        let pass = ok && in_time;
        if !pass {
            failed += 1;
        }
        println!("{} {} {name}: {detail} [{time}]", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
