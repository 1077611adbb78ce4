use dnls_kam::dnls::FrequencyData;
use dnls_kam::index::{admissible, momentum_scalar, momentum_vf, Admissibility};
use dnls_kam::nonres::*;
use dnls_kam::norms::{hamiltonian_vector_field, majorant_norm, sampled_sup_norm, NormWeights, ParameterGrid};
use dnls_kam::series::TruncationBudget;
use dnls_kam::{ComponentLabel, MultiIndex, Series, SiteSet, C};
use proptest::prelude::*;
use proptest::sample::select;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::{Arc, OnceLock};

const SITES: [i64; 2] = [-1, 2];

fn sites() -> Arc<SiteSet> {
    static S: OnceLock<Arc<SiteSet>> = OnceLock::new();
    S.get_or_init(|| Arc::new(SiteSet::new(&SITES, 4).unwrap())).clone()
}

fn budget() -> TruncationBudget {
    TruncationBudget::new(8, 12)
}

/// k ∈ [−2,2]², y-degree ≤ 1, at most one z and one z̄ factor.
fn monomials() -> &'static [MultiIndex] {
    static M: OnceLock<Vec<MultiIndex>> = OnceLock::new();
    M.get_or_init(|| {
        let ss = sites();
        let mut zs: Vec<Vec<(i32, u32)>> = vec![vec![]];
        zs.extend(ss.normal_modes().iter().map(|j| vec![(*j, 1)]));
        let mut out = Vec::new();
        for k0 in -2..=2 {
            for k1 in -2..=2 {
                for i in [[0, 0], [1, 0], [0, 1]] {
                    for a in &zs {
                        for b in &zs {
                            out.push(MultiIndex::new(&[k0, k1], &i, a, b));
                        }
                    }
                }
            }
        }
        out
    })
}

fn zero_momentum() -> &'static [MultiIndex] {
    static M: OnceLock<Vec<MultiIndex>> = OnceLock::new();
    M.get_or_init(|| monomials().iter().filter(|m| momentum_scalar(m, &sites()) == 0).cloned().collect())
}

fn series_from(pool: &'static [MultiIndex], max_terms: usize) -> impl Strategy<Value = Series> {
    prop::collection::vec((select(pool), -1.0..1.0f64, -1.0..1.0f64), 1..max_terms).prop_map(|ts| {
        let mut s = Series::new(sites(), budget());
        for (m, re, im) in ts {
            s.add_term(m, C::new(re, im));
        }
        s
    })
}

fn homogeneous(d: u32) -> impl Strategy<Value = Series> {
    static BY: OnceLock<Vec<Vec<MultiIndex>>> = OnceLock::new();
    let by = BY.get_or_init(|| {
        let mut v = vec![Vec::new(); 5];
        for m in monomials() {
            v[m.weighted_degree() as usize].push(m.clone());
        }
        v
    });
    series_from(&by[d as usize], 4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn momentum_is_additive(a in select(monomials()), b in select(monomials())) {
        let ss = sites();
        prop_assert_eq!(momentum_scalar(&a.mul(&b), &ss), momentum_scalar(&a, &ss) + momentum_scalar(&b, &ss));
        for &j in ss.normal_modes() {
            prop_assert_eq!(momentum_vf(&a, ComponentLabel::Z(j), &ss) + j as i64, momentum_scalar(&a, &ss));
            prop_assert_eq!(momentum_vf(&a, ComponentLabel::Zbar(j), &ss) - j as i64, momentum_scalar(&a, &ss));
        }
    }

    #[test]
    fn bracket_is_antisymmetric(h in series_from(monomials(), 6), f in series_from(monomials(), 6)) {
        let hf = h.bracket(&f).unwrap();
        let fh = f.bracket(&h).unwrap();
        prop_assert_eq!(hf.max_diff(&fh.neg()), 0.0);
    }

    #[test]
    fn jacobi_identity(
        h in series_from(monomials(), 4),
        f in series_from(monomials(), 4),
        g in series_from(monomials(), 4),
    ) {
        let a = h.bracket(&f).unwrap().bracket(&g).unwrap();
        let b = f.bracket(&g).unwrap().bracket(&h).unwrap();
        let c = g.bracket(&h).unwrap().bracket(&f).unwrap();
        let sum = a.add(&b).unwrap().add(&c).unwrap();
        let scale = a.max_abs().max(b.max_abs()).max(c.max_abs()).max(1.0);
        prop_assert!(sum.max_abs() <= 1e-10 * scale, "{} vs {}", sum.max_abs(), scale);
    }

    #[test]
    fn zero_momentum_is_closed(h in series_from(zero_momentum(), 6), f in series_from(zero_momentum(), 6)) {
        prop_assert!(h.bracket(&f).unwrap().is_momentum_conserving());
    }

    #[test]
    fn bracket_respects_grading(
        (d1, d2, h, f) in (1u32..=4, 1u32..=4).prop_flat_map(|(d1, d2)| (Just(d1), Just(d2), homogeneous(d1), homogeneous(d2)))
    ) {
        for (m, _) in h.bracket(&f).unwrap().iter() {
            prop_assert_eq!(m.weighted_degree() + 2, d1 + d2);
        }
    }

    #[test]
    fn majorant_norm_is_a_seminorm(
        h in series_from(zero_momentum(), 5),
        f in series_from(zero_momentum(), 5),
        re in -3.0..3.0f64,
        im in -3.0..3.0f64,
    ) {
        let w = NormWeights::new(0.3, 0.2, 2.0, 1.0, 0.0, 0.05).unwrap();
        let (xh, xf) = (hamiltonian_vector_field(&h), hamiltonian_vector_field(&f));
        let (nh, nf) = (majorant_norm(&xh, &w), majorant_norm(&xf, &w));
        let sum = majorant_norm(&xh.combine(C::new(1.0, 0.0), &xf, C::new(1.0, 0.0)).unwrap(), &w);
        prop_assert!(sum <= (nh + nf) * (1.0 + 1e-12));
        let c = C::new(re, im);
        let scaled = majorant_norm(&xh.scale(c), &w);
        prop_assert!((scaled - c.norm() * nh).abs() <= 1e-12 * (1.0 + scaled));
    }

    #[test]
    fn sampled_sup_stays_below_majorant(h in series_from(zero_momentum(), 5), seed in any::<u64>()) {
        let w = NormWeights::new(0.3, 0.2, 2.0, 1.0, 0.0, 0.05).unwrap();
        let x = hamiltonian_vector_field(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sup = sampled_sup_norm(&x, &w, 32, &mut rng);
        prop_assert!(sup <= majorant_norm(&x, &w) * (1.0 + 1e-12));
    }

    #[test]
    fn zone_masks_grow_with_alpha(
        k0 in -6i64..=6, k1 in -6i64..=6, a in select(vec![-7, -5, -4, -3, 1, 3, 4, 6]), b in select(vec![-6, -4, -3, 1, 3, 5, 7]),
        ca in select(vec![-1i64, 1]), cb in select(vec![-1i64, 1]),
        lo in 1e-4..1e-2f64, factor in 1.0..8.0f64,
    ) {
        let ss = SiteSet::new(&SITES, 8).unwrap();
        let grid = ParameterGrid::boxed(&[0.01, 0.01], &[0.03, 0.03], &[6, 6]).unwrap();
        let spec = DivisorSpec::new(&[k0, k1], &[(a, ca), (b, cb)]).unwrap();
        let small = resonance_zone(&spec, lo, 5.0, &ss, &grid, None);
        let big = resonance_zone(&spec, lo * factor, 5.0, &ss, &grid, None);
        for (s, g) in small.excluded_mask.iter().zip(&big.excluded_mask) {
            prop_assert!(!*s || *g);
        }
        prop_assert!(small.analytic_measure.unwrap() <= big.analytic_measure.unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn divisor_gradient_is_exact(
        k0 in -6i64..=6, k1 in -6i64..=6, a in select(vec![-7, -5, -4, -3, 1, 3, 4, 6]),
        ca in select(vec![-2i64, -1, 1, 2]), x0 in 0.0..0.1f64, x1 in 0.0..0.1f64,
    ) {
        let ss = SiteSet::new(&SITES, 8).unwrap();
        let fd = FrequencyData::new(&ss);
        let spec = DivisorSpec::new(&[k0, k1], &[(a, ca)]).unwrap();
        let aff = AffineDivisor::of(&spec, &ss);
        let big_l = (a as i64 * ca) as f64;
        let n = 2.0;
        for (b, kb) in [k0, k1].iter().enumerate() {
            let want = *kb as f64 * SITES[b] as f64 + big_l / (n - 0.5);
            prop_assert!((aff.grad()[b] - want).abs() < 1e-12);
            // the float divisor moves by the same slope
            let h = 1e-3;
            let mut xi = vec![x0, x1];
            let d0 = divisor(&spec, &ss, &FreqPoint::affine(&fd, &xi));
            xi[b] += h;
            let d1 = divisor(&spec, &ss, &FreqPoint::affine(&fd, &xi));
            prop_assert!(((d1 - d0) / h - want).abs() < 1e-6 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn families_partition_the_exclusion() {
    let ss = SiteSet::new(&SITES, 8).unwrap();
    let grid = ParameterGrid::boxed(&[0.0, 0.0], &[0.5, 0.5], &[16, 16]).unwrap();
    let range = EnumRange { k_max: 8, mode_max: 8 };
    let specs = enumerate_specs(&ss, range, 8);
    let mut ledger = ExclusionLedger::new(&grid);
    for z in step_zones(&ss, &grid, &specs, 0.3, 0.1, 1.0, None) {
        assert_eq!(z.family, family_of(&z.spec));
        assert_eq!(z.family == Family::Pair, z.spec.pair_mode().is_some());
        ledger.record(0, &z);
    }
    let t1 = ledger.family_mask(Family::General);
    let t2 = ledger.family_mask(Family::Pair);
    let all = ledger.cumulative_mask();
    assert!(all.iter().any(|b| *b));
    for i in 0..all.len() {
        assert_eq!(all[i], t1[i] || t2[i]);
    }
    for z in &ledger.zones {
        assert_eq!(z.family, family_of(&z.spec));
    }
}

#[test]
fn zero_divisors_only_for_inadmissible_sites() {
    let range = EnumRange { k_max: 16, mode_max: 10 };
    let mut sets: Vec<Vec<i64>> = Vec::new();
    for a in -4i64..=4 {
        for b in (a + 1)..=4 {
            if a != 0 && b != 0 {
                sets.push(vec![a, b]);
            }
        }
    }
    sets.extend([vec![-2, 1, 3], vec![1, 2, 3], vec![-1, 2, 4]]);
    let mut witnessed = Vec::new();
    for js in sets {
        let ss = SiteSet::new(&js, 10).unwrap();
        let zero = enumerate_specs(&ss, range, range.mode_max)
            .iter()
            .any(|s| AffineDivisor::of(s, &ss).is_identically_zero());
        let adm = admissible(&js).unwrap() == Admissibility::Admissible;
        assert!(!(zero && adm), "{js:?} is admissible but has a vanishing divisor");
        if zero {
            witnessed.push(js);
        }
    }
    // the divisibility family shows up at small |k|
    for js in [vec![-1, 1], vec![-2, 2], vec![-1, 4], vec![-1, 2, 4]] {
        assert!(witnessed.contains(&js), "{js:?}");
    }
}
