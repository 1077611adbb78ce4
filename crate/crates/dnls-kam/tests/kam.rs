use dnls_kam::dnls::DnlsConfig;
use dnls_kam::kam::*;
use dnls_kam::nonres::{audit_assumptions, EnumRange};
use dnls_kam::norms::ParameterGrid;
use dnls_kam::index::momentum_scalar;
use dnls_kam::series::TruncationBudget;
use dnls_kam::{MultiIndex, Series, SiteSet, C};
use std::sync::Arc;

fn desk_setup(x_log10: f64, alpha0_rel: f64, c_log10: f64) -> KamSetup {
    let x = 10f64.powf(x_log10);
    let sites = [-1i64, 2];
    let grid = ParameterGrid::boxed(&[x, 0.8 * x], &[1.1 * x, 0.9 * x], &[3, 3]).unwrap();
    let ss = SiteSet::new(&sites, 8).unwrap();
    let range = EnumRange { k_max: 24, mode_max: 8 };
    let audit = audit_assumptions(&ss, &grid, range).unwrap();
    let mut dnls = DnlsConfig::new(8, 2);
    dnls.degree_max = 6;
    let mut g = KamGlobals {
        n: 2,
        beta: 1.0 / 13.0,
        tau: 5.0,
        gamma0: 0.0,
        c: 10f64.powf(c_log10),
        s0: 0.4,
        r0: 0.1 * x.sqrt(),
        alpha0: alpha0_rel * x,
        m0: audit.m.min(0.5),
        e0: 4.0,
        m1_0: audit.m1,
        m2_0: audit.m2,
        m3_0: audit.m3_estimate,
        c_j: 2.0,
        p: 2.0,
        q: 1.0,
        a_exp: 0.0,
        fourier_max: 24,
        j_max: 8,
        gamma: 1.0,
        eps_floor_log10: -1e6,
        halt_at_horizon: false,
    };
    g.gamma0 = g.default_gamma0();
    KamSetup { dnls, sites: sites.to_vec(), grid, globals: g, binomial_order: 4, enum_range: range }
}

#[test]
fn desk_scale_contracts() {
    let setup = desk_setup(-93.0, 0.5, -148.0);
    let st = prepare(&setup).unwrap();
    assert!(st.eps0_log10 < -90.0);
    let mut masks = vec![st.mask()];
    let mut reps = Vec::new();
    let mut cur = st.clone();
    for _ in 0..4 {
        let (next, r) = kam_step(&cur).unwrap();
        assert!(r.solver.max_residual < 1e-10);
        masks.push(next.mask());
        reps.push(r);
        cur = next;
    }
    let v = verify_contraction(&reps);
    assert!(v.ok, "{:?}", v.failures);
    assert!(v.strictly_decreasing);
    assert!(v.min_ratio_from_step1 >= 1.25, "{}", v.min_ratio_from_step1);
    for w in masks.windows(2) {
        assert!(w[1].iter().zip(&w[0]).all(|(b, a)| !*b || *a));
    }
    // the ledger agrees with the state
    let excluded = cur.ledger.cumulative_mask();
    for (p, e) in cur.points.iter().zip(&excluded) {
        assert_eq!(p.active, !*e);
    }
    // momentum is conserved without the quintic term
    for p in cur.points.iter().filter(|p| p.active) {
        assert!(p.p.iter().all(|(m, _)| momentum_scalar(m, &cur.sites) == 0));
        for g in &p.generators {
            assert!(g.f.iter().all(|(m, _)| momentum_scalar(m, &cur.sites) == 0));
        }
    }
    let c = c_min_log10(&st.globals, st.eps0_log10, &reps).unwrap();
    assert!(c <= st.globals.c.log10());

    // run() reproduces the manual loop
    let (reps2, out) = run(st, 4, |_| {}).unwrap();
    assert_eq!(reps2, reps);
    assert_eq!(out.steps, 4);
    assert_eq!(out.mask, cur.mask());
    assert_eq!(out.horizon, Some(0));
}

#[test]
fn schedule_contracts_geometrically() {
    let g = desk_setup(-93.0, 0.5, -148.0).globals;
    let rows = schedule_rows(&g, -93.0, 5).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].eps_log10 < w[0].eps_log10);
        assert!((w[1].s - w[0].s / 2.0).abs() < 1e-15);
        assert!(w[1].alpha1 < w[0].alpha1 && w[1].alpha1 > 0.9 * g.alpha0);
        assert!(w[1].r_log10 < w[0].r_log10);
    }
    let gate = smallness_gate(&g, -93.0);
    assert!(gate.alpha0_ok);
}

fn small_state(perturb: impl Fn(&Arc<SiteSet>) -> Series) -> KamState {
    let mut setup = desk_setup(-93.0, 0.5, -148.0);
    setup.globals.alpha0 = 1e-120;
    let sites = Arc::new(SiteSet::new(&setup.sites, 8).unwrap());
    let ps = setup.grid.points.iter().map(|_| perturb(&sites)).collect();
    KamState::new(setup.globals, sites, setup.grid, TruncationBudget::new(4, 24), ps, EnumRange { k_max: 4, mode_max: 8 }).unwrap()
}

#[test]
fn zero_perturbation_is_a_fixed_point() {
    let st = small_state(|s| Series::new(s.clone(), TruncationBudget::new(4, 24)));
    assert_eq!(st.measured_log10, f64::NEG_INFINITY);
    let (next, rep) = kam_step(&st).unwrap();
    assert!(next.points.iter().all(|p| p.p.is_empty() && p.active));
    for (a, b) in st.points.iter().zip(&next.points) {
        assert_eq!(a.freq, b.freq);
        assert!(b.generators[0].f.is_empty());
    }
    assert_eq!(rep.excluded_fraction_added, 0.0);
    assert!(verify_contraction(&[rep]).ok);

    // no steps: the trivial embedding
    let (reps, out) = run(st, 0, |_| {}).unwrap();
    assert!(reps.is_empty());
    assert_eq!(out.steps, 0);
    assert!(out.points.iter().all(|p| p.generators.is_empty() && p.active));
}

#[test]
fn diagonal_perturbation_is_absorbed() {
    let st = small_state(|s| {
        let mut p = Series::new(s.clone(), TruncationBudget::new(4, 24));
        // weighted degree 2: unchanged by the rescaling to the unit ball
        p.add_term(MultiIndex::new(&[0, 0], &[0, 0], &[(3, 1)], &[(3, 1)]), C::new(1e-95, 0.0));
        p.add_term(MultiIndex::new(&[0, 0], &[0, 0], &[(-4, 1)], &[(-4, 1)]), C::new(-2e-95, 0.0));
        p.add_term(MultiIndex::new(&[0, 0], &[1, 0], &[], &[]), C::new(3e-95, 0.0));
        p
    });
    let (next, _) = kam_step(&st).unwrap();
    for (a, b) in st.points.iter().zip(&next.points) {
        assert!(b.p.is_empty());
        // Ω_3 gains σ_3·1e-95, Ω_{−4} gains σ_{−4}·(−2e-95) = 2e-95
        let d3 = b.freq.big_omega_small(3) - a.freq.big_omega_small(3);
        let d4 = b.freq.big_omega_small(-4) - a.freq.big_omega_small(-4);
        assert!((d3 - 1e-95).abs() < 1e-108, "{d3:e}");
        assert!((d4 - 2e-95).abs() < 1e-108, "{d4:e}");
        // ω_1 for the site −1 gains σ_{−1}·3e-95
        let dw = b.freq.omega_small[0] - a.freq.omega_small[0];
        assert!((dw + 3e-95).abs() < 1e-108, "{dw:e}");
    }
}

#[test]
fn synthetic_stall_is_rejected() {
    let r = KamStepReport {
        nu: 0,
        eps_log10: -10.0,
        eps_next_measured_log10: -10.0,
        eps_next_schedule_log10: -12.0,
        drift_ok: true,
        ..Default::default()
    };
    assert!(!verify_contraction(&[r]).ok);
}
