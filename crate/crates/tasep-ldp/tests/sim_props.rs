use proptest::prelude::*;

use tasep_ldp::lattice::HeightProfile;
use tasep_ldp::sim::{bernoulli_bits, height_at, run, run_coupled, simulate, torus, Observer, RunSpec};
use tasep_ldp::speed::{ConstantSpeed, SimpleSpeed, SpeedProfile};

/// Checks particle conservation and the gradient constraint after every event.
struct Invariants {
    particles: i64,
    bad: usize,
}

impl Observer for Invariants {
    fn on_event(&mut self, _t: f64, _x: i64, h: &HeightProfile) {
        let grads_ok = h.values().windows(2).all(|w| matches!(w[1] - w[0], 0 | 1));
        if !grads_ok || h.particles() != self.particles {
            self.bad += 1;
        }
    }
}

fn walk(x_min: i64, steps: &[bool], start: i64) -> HeightProfile {
    let mut v = vec![start];
    for &s in steps {
        v.push(v.last().unwrap() + s as i64);
    }
    HeightProfile::from_fn(x_min, x_min + steps.len() as i64, |x| v[(x - x_min) as usize]).unwrap()
}

fn two_speed() -> SimpleSpeed {
    SimpleSpeed::new(
        vec![0.0, 0.5, 1.0],
        vec![SpeedProfile { xi_breaks: vec![-0.2, 0.3], values: vec![1.0, 0.4, 1.7] }, SpeedProfile::constant(0.8)],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn torus_conserves_particles_and_gradients(width in 4usize..80, rho in 0.0f64..1.0, seed in any::<u64>()) {
        let h = torus(-(width as i64) / 2, &bernoulli_bits(width, rho, seed)).unwrap();
        let mut obs = Invariants { particles: h.particles(), bad: 0 };
        let speed = two_speed();
        simulate(&h, &RunSpec::new(&speed, 1.0, 40, seed), &mut obs).unwrap();
        prop_assert_eq!(obs.bad, 0);
    }

    #[test]
    fn reruns_are_identical(width in 4usize..60, seed in any::<u64>()) {
        let h = torus(0, &bernoulli_bits(width, 0.5, seed ^ 1)).unwrap();
        let speed = two_speed();
        prop_assert_eq!(run(&h, &speed, 1.0, 30, seed).unwrap(), run(&h, &speed, 1.0, 30, seed).unwrap());
    }

    #[test]
    fn coupling_preserves_order(
        a in prop::collection::vec(any::<bool>(), 80),
        b in prop::collection::vec(any::<bool>(), 80),
        lift in 0i64..3,
        seed in any::<u64>(),
    ) {
        let low = walk(-40, &a, 0);
        let other = walk(-40, &b, lift);
        let high = HeightProfile::from_fn(-40, 40, |x| low.get(x).unwrap().max(other.get(x).unwrap())).unwrap();
        let speed = two_speed();
        let recs = run_coupled(&[low, high], &speed, 1.0, 20, seed).unwrap();
        for t in [5.0, 10.0, 20.0] {
            let (l, h) = (height_at(&recs[0], t).unwrap(), height_at(&recs[1], t).unwrap());
            prop_assert!(l.values().iter().zip(h.values()).all(|(x, y)| x <= y), "order broken at t = {}", t);
        }
    }

    #[test]
    fn vertical_shift_commutes(steps in prop::collection::vec(any::<bool>(), 60), c in -5i64..5, seed in any::<u64>()) {
        let h = walk(-30, &steps, 0);
        let speed = ConstantSpeed(1.3);
        let recs = run_coupled(&[h.clone(), h.shifted(c)], &speed, 1.0, 15, seed).unwrap();
        prop_assert_eq!(&recs[0].events, &recs[1].events);
        let (a, b) = (height_at(&recs[0], 15.0).unwrap(), height_at(&recs[1], 15.0).unwrap());
        prop_assert_eq!(a.shifted(c), b);
    }
}
