use dnls_kam::dnls::*;
use dnls_kam::series::TruncationBudget;
use dnls_kam::SiteSet;
use std::sync::Arc;

#[test]
fn birkhoff_and_reduction() {
    let cfg = DnlsConfig::new(4, 2);
    let h = build_dnls_hamiltonian(&cfg).unwrap();
    let t = std::time::Instant::now();
    let b = partial_birkhoff(&h).unwrap();
    eprintln!("birkhoff {:?} q1={} f4={} hnf={} r={}", t.elapsed(), h.q1.len(), b.f4.len(), b.h_nf.len(), b.r.len());
    assert!(b.report.zero_divisors.is_empty());
    assert!(b.report.delta1_residual < 1e-12, "{}", b.report.delta1_residual);
    assert!(b.h_nf.is_momentum_conserving());
    let quartic = b.h_nf.degree_part(4);
    let want = h.b.add(&h.q2).unwrap();
    assert!(quartic.max_diff(&want) < 1e-12);
    let sites = Arc::new(SiteSet::new(&[-1, 2], 4).unwrap());
    let xi = [0.02, 0.015];
    let opts = ReduceOptions { budget: TruncationBudget::new(4, 40), binomial_order: 3, r: 0.05 };
    let red = action_angle_reduce(&h, &b.r, &sites, &xi, 0, &opts).unwrap();
    let fd = FrequencyData::new(&sites);
    let ws = fd.omega_small(&xi);
    for b in 0..2 {
        assert!((red.omega_small_read[b] - ws[b]).abs() < 1e-14, "{:?} {:?}", red.omega_small_read, ws);
    }
    for (j, v) in &red.big_omega_small_read {
        assert!((v - fd.big_omega_small(*j, &xi)).abs() < 1e-14, "{j} {v}");
    }
    eprintln!("P terms {} tail {:e}", red.p.len(), red.binomial_tail);
}

#[test]
fn appendix_checks_pass() {
    let rep = dnls_kam::appendix::verify_appendix_bounds(500, 3);
    for l in &rep.lemmas {
        eprintln!("{} {}/{} worst {:.3e}", l.lemma, l.passed, l.samples, l.worst_ratio);
        assert_eq!(l.failed, 0, "{l:?}");
    }
    assert!(rep.all_passed());
}
