use proptest::prelude::*;

use tasep_ldp::lattice::{
    gradient_profile, integrate_occupation, locality_envelope, scale_profile, triangulate, HeightProfile, MacroField,
    OccupationField, UniformGrid,
};

fn walk(x_min: i64, steps: &[bool], start: i64) -> HeightProfile {
    let mut v = vec![start];
    for &s in steps {
        v.push(v.last().unwrap() + s as i64);
    }
    HeightProfile::from_fn(x_min, x_min + steps.len() as i64, |x| v[(x - x_min) as usize]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_round_trip(bits in prop::collection::vec(0u8..=1, 1..200), x_min in -50i64..50, anchor in -20i64..20) {
        let occ = OccupationField { x_min, bits };
        let h = integrate_occupation(&occ, anchor);
        prop_assert_eq!(gradient_profile(&h), occ);
        prop_assert_eq!(h.get(x_min), Some(anchor));
    }

    #[test]
    fn scaled_profiles_are_paths(steps in prop::collection::vec(any::<bool>(), 1..300), n in 1u64..500) {
        let h = walk(-(steps.len() as i64) / 2, &steps, 3);
        prop_assert!(scale_profile(&h, n).check_slopes(1e-12).is_ok());
    }

    #[test]
    fn envelope_monotone_in_profile(
        a in prop::collection::vec(any::<bool>(), 60),
        b in prop::collection::vec(any::<bool>(), 60),
        shift in 0i64..3,
        x0 in -20i64..20,
        level in 0i64..6,
    ) {
        let low = walk(-30, &a, 0);
        let other = walk(-30, &b, shift);
        let high = HeightProfile::from_fn(-30, 30, |x| low.get(x).unwrap().max(other.get(x).unwrap())).unwrap();
        let bar = low.get(x0).unwrap() + level;
        let e_high = locality_envelope(&high, bar, x0);
        let e_low = locality_envelope(&low, bar, x0);
        prop_assert!(e_high.is_subset_of(&e_low), "{:?} vs {:?}", e_high, e_low);
    }

    #[test]
    fn triangulation_satisfies_flux_relation(kappa in 0.01f64..0.25, rho in 0.05f64..0.95) {
        let g = MacroField::from_fn(UniformGrid::new(0.0, 0.25, 5), UniformGrid::new(-1.0, 0.25, 9), |t, x| kappa * t + rho * x);
        let tri = triangulate(&g, 0.5, 0.5, 1.0).unwrap();
        for t in &tri.triangles {
            prop_assert!(t.triplet.defect() <= 1e-12);
            prop_assert!((t.triplet.rho - rho).abs() < 1e-9 && (t.triplet.kappa - kappa).abs() < 1e-9);
        }
    }
}
