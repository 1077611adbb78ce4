use dnls_kam::nonres::*;
use dnls_kam::norms::ParameterGrid;
use dnls_kam::SiteSet;

#[test]
fn dichotomy_holds_everywhere() {
    for js in [vec![-1, 2], vec![-2, 1, 3]] {
        let sites = SiteSet::new(&js, 8).unwrap();
        let t = std::time::Instant::now();
        let rep = lemma32_exhaustive(&sites, EnumRange::default());
        eprintln!("{js:?} {:?} {:?}", t.elapsed(), rep);
        assert_eq!(rep.cases, rep.satisfied, "{:?}", rep.failures);
    }
}

#[test]
fn audit_matches_constants() {
    let sites = SiteSet::new(&[-1, 2], 8).unwrap();
    let grid = ParameterGrid::boxed(&[0.01, 0.01], &[0.015, 0.015], &[4, 4]).unwrap();
    let t = std::time::Instant::now();
    let a = audit_assumptions(&sites, &grid, EnumRange::default()).unwrap();
    eprintln!("{:?} {:?}", t.elapsed(), a);
    assert!(a.m >= 0.5);
    assert!((a.m2 - 4.0 / 3.0).abs() < 1e-12);
    assert!(a.m3_estimate >= 1.0 / 600.0);
    assert!(a.witnesses.is_empty());
}

#[test]
fn measure_scales_linearly() {
    let sites = SiteSet::new(&[-1, 2], 8).unwrap();
    let grid = ParameterGrid::boxed(&[0.01, 0.01], &[0.02, 0.02], &[64, 64]).unwrap();
    let range = EnumRange { k_max: 20, mode_max: 20 };
    let tau = 5.0;
    let specs = enumerate_specs(&sites, range, range.mode_max);
    let alphas: Vec<f64> = (0..5).map(|i| 1e-4 * 2f64.powi(i)).collect();
    let sweep = alpha_sweep(&sites, &grid, &specs, &alphas, tau).unwrap();
    let alpha = 1e-3;
    let steps: Vec<(f64, f64)> = (0..4)
        .map(|nu| {
            let pi = 4.0 * 2f64.powi(nu);
            (alpha * 0.5f64.powi(nu) / pi, pi)
        })
        .collect();
    let th2 = pair_step_totals(&sites, &grid, range, &steps, tau);
    let audit = audit_assumptions(&sites, &grid, range).unwrap();
    let bounds: Vec<f64> =
        (0..4).map(|nu| theta2_bound(alpha, grid.diameter(), audit.m3_estimate, tau, 2, range.k_max, nu)).collect();
    let rep = scaling_report(&sweep, &th2, &bounds);
    assert!(rep.linear_ok, "{:?}", rep.doubling_ratios);
    assert!(rep.cells_ok, "{}", rep.worst_cell_ratio);
    assert!(rep.geometric_ok, "{:?} {:?}", rep.theta2_per_step, rep.theta2_bounds);
    assert!(rep.ok);

    assert!(alpha_sweep(&sites, &grid, &specs, &[], tau).is_err());
}

#[test]
fn inadmissible_sites_lose_everything() {
    // the identically vanishing divisor removes the whole box at any α
    let sites = SiteSet::new(&[-1, 1], 8).unwrap();
    let grid = ParameterGrid::boxed(&[0.01, 0.01], &[0.02, 0.02], &[8, 8]).unwrap();
    let specs = vec![DivisorSpec::new(&[4, -4], &[(3, 1), (-3, -1)]).unwrap()];
    let sweep = alpha_sweep(&sites, &grid, &specs, &[1e-9], 5.0).unwrap();
    assert_eq!(sweep[0].grid_union, grid.box_volume());
}
