use proptest::prelude::*;

use tasep_ldp::hopflax::{bound_violation, solve, SolveGrid};
use tasep_ldp::lattice::{MacroSlice, UniformGrid};
use tasep_ldp::speed::{SimpleSpeed, SpeedField, SpeedProfile};

const D: f64 = 0.05;

fn profile(cuts: &[(u8, f64)]) -> SpeedProfile {
    let mut breaks: Vec<f64> = cuts.iter().map(|(c, _)| -0.9 + D * (*c % 37) as f64).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut values: Vec<f64> = cuts.iter().map(|(_, v)| *v).collect();
    values.truncate(breaks.len());
    values.push(1.0);
    SpeedProfile { xi_breaks: breaks, values }
}

fn speed_strategy() -> impl Strategy<Value = SimpleSpeed> {
    let cuts = prop::collection::vec((any::<u8>(), 0.5f64..2.0), 0..6);
    (cuts.clone(), cuts)
        .prop_map(|(a, b)| SimpleSpeed::new(vec![0.0, 0.5, 1.0], vec![profile(&a), profile(&b)]).unwrap())
}

fn slice_strategy(nodes: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, nodes - 1)
}

fn grid_for(lambda_bar: f64) -> SolveGrid {
    let half = (SolveGrid::closure_half_width(0.5, 1.0, lambda_bar, D) / D - 1e-9).ceil() * D;
    SolveGrid { dt: D, dxi: D, t_end: 1.0, half_width: half, report_radius: 0.5 }
}

fn slice(half: f64, slopes: &[f64]) -> MacroSlice {
    let nodes = (2.0 * half / D).round() as usize + 1;
    let mut values = vec![0.0];
    for i in 1..nodes {
        values.push(values[i - 1] + D * slopes[i % slopes.len()]);
    }
    MacroSlice { xi: UniformGrid::new(-half, D, nodes), values }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn monotone_and_lipschitz(speed in speed_strategy(), slopes in slice_strategy(40)) {
        let grid = grid_for(speed.lambda_max());
        let f = solve(&speed, &slice(grid.half_width, &slopes), grid).unwrap();
        prop_assert!(bound_violation(&f, speed.lambda_max()) <= 1e-12);
    }

    #[test]
    fn contraction(speed in speed_strategy(), s1 in slice_strategy(40), s2 in slice_strategy(40), lift in -0.3f64..0.3) {
        let grid = grid_for(speed.lambda_max());
        let f1 = slice(grid.half_width, &s1);
        let mut f2 = slice(grid.half_width, &s2);
        f2.values.iter_mut().for_each(|v| *v += lift);
        let base = f1.values.iter().zip(&f2.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let a = solve(&speed, &f1, grid).unwrap();
        let b = solve(&speed, &f2, grid).unwrap();
        let gap = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= base + 2.0 * (D + D) + 1e-12, "{} > {}", gap, base);
    }

    #[test]
    fn cone_dependence(speed in speed_strategy(), outer in prop::collection::vec(0.0f64..1.0, 4), slopes in slice_strategy(30)) {
        // Changing the speed outside the backward cone of (T, 0) leaves the value there unchanged.
        let lam = speed.lambda_max();
        let edge = lam * 1.0 + 2.0 * D;
        let modified: Vec<SpeedProfile> = speed
            .profiles
            .iter()
            .enumerate()
            .map(|(row, p)| {
                let mut breaks = vec![-edge];
                breaks.extend(p.xi_breaks.iter().copied().filter(|b| b.abs() < edge));
                breaks.push(edge);
                let mut values = vec![0.5 + (lam - 0.5) * outer[2 * row]];
                values.extend(breaks[..breaks.len() - 1].iter().map(|b| p.at(b + 1e-9)));
                values.push(0.5 + (lam - 0.5) * outer[2 * row + 1]);
                SpeedProfile { xi_breaks: breaks, values }
            })
            .collect();
        let other = SimpleSpeed::new(speed.t_breaks.clone(), modified).unwrap();
        prop_assume!(other.lambda_max() <= lam);
        let grid = grid_for(lam);
        let f0 = slice(grid.half_width, &slopes);
        let a = solve(&speed, &f0, grid).unwrap();
        let b = solve(&other, &f0, grid).unwrap();
        let (i, j) = (a.t.len - 1, a.xi.len / 2);
        prop_assert!((a.get(i, j) - b.get(i, j)).abs() <= 2.0 * (D + D));
    }
}
