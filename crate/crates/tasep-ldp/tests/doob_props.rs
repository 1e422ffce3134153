use proptest::prelude::*;

use tasep_ldp::doob::{build_system, forward_pass, solve_q, DoobSystem, Envelopes};
use tasep_ldp::lattice::{locality_envelope, HeightProfile};

fn heights(steps: &[bool]) -> Vec<i64> {
    let mut v = vec![0];
    for &s in steps {
        v.push(v.last().unwrap() + s as i64);
    }
    v
}

fn tube(k: usize, h: &[i64], lo: &[Option<u8>], hi: &[Option<u8>]) -> Envelopes {
    let lower = (0..k).map(|i| lo[i].map(|d| h[i + 1] - 1 - d as i64)).collect();
    let upper = (0..k).map(|i| hi[i].map(|d| h[i + 1] + 1 + d as i64)).collect();
    Envelopes::constant(lower, upper)
}

fn system() -> impl Strategy<Value = (DoobSystem, f64)> {
    (1usize..=5)
        .prop_flat_map(|k| {
            (
                Just(k),
                prop::collection::vec(any::<bool>(), k + 1),
                prop::collection::vec(prop::option::of(0u8..2), k),
                prop::collection::vec(prop::option::of(0u8..3), k),
                0.3f64..1.5,
            )
        })
        .prop_filter_map("system too large", |(k, steps, lo, hi, t)| {
            let h = heights(&steps);
            let sys = build_system(k, &h, tube(k, &h, &lo, &hi), t).ok()?;
            (sys.state_count() <= 400).then_some((sys, t))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn q_is_a_probability_supported_in_the_tube((sys, t) in system()) {
        let q = solve_q(&sys).unwrap();
        for frac in [0.0, 0.3, 0.7, 1.0] {
            let s = frac * t;
            let v = q.at(s);
            let piece = sys.piece_at(s);
            for i in 0..sys.state_count() {
                prop_assert!((-1e-9..=1.0 + 1e-9).contains(&v[i]), "q = {}", v[i]);
                if !sys.inside(piece, i) {
                    prop_assert!(v[i].abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn height_martingale_identity((sys, _t) in system()) {
        let q = solve_q(&sys).unwrap();
        prop_assume!(q.q0() > 1e-9);
        let f = forward_pass(&sys, &q).unwrap();
        for (g, c) in f.height_gain.iter().zip(&f.compensator) {
            prop_assert!((g - c).abs() <= 1e-8, "{} vs {}", g, c);
        }
    }

    #[test]
    fn tube_probability_is_local(
        steps in prop::collection::vec(any::<bool>(), 8),
        x0 in 2usize..=5,
        rise in 1i64..=2,
        outside in prop::collection::vec(any::<bool>(), 8),
        t in 0.5f64..3.0,
    ) {
        // The tube only bounds the height at x0 from above; its probability depends on the
        // initial heights inside the locality envelope alone.
        let k = 7;
        let h = heights(&steps);
        let bar = h[x0] + rise;
        let profile = HeightProfile::from_fn(0, k as i64 + 1, |x| h[x as usize]).unwrap();
        let env = locality_envelope(&profile, bar, x0 as i64);
        let (lo, hi) = (env.lower.site as usize, env.upper.site as usize);
        prop_assume!(!env.lower.unbounded || !env.upper.unbounded);
        prop_assume!(env.lower.unbounded || lo > 0 || !env.upper.unbounded && hi <= k);
        let mut alt = h.clone();
        if !env.upper.unbounded {
            for i in hi + 1..=k + 1 {
                alt[i] = alt[i - 1] + outside[i - 1] as i64;
            }
        }
        if !env.lower.unbounded {
            for i in (0..lo).rev() {
                alt[i] = alt[i + 1] - outside[i] as i64;
            }
        }
        let mut upper = vec![None; k];
        upper[x0 - 1] = Some(bar);
        let q = |init: &[i64]| {
            let sys = build_system(k, init, Envelopes::constant(vec![None; k], upper.clone()), t).unwrap();
            solve_q(&sys).unwrap().q0()
        };
        let (a, b) = (q(&h), q(&alt));
        prop_assert!((a - b).abs() <= 1e-8, "{} vs {} (envelope [{}, {}])", a, b, lo, hi);
    }
}
