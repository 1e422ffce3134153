//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero on failure.
//!
//! Optional positional arguments select criteria by number, e.g. `-- 2 6`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tasep_ldp::doob::{build_system, entropy_exact, forward_pass, solve_q, Envelopes};
use tasep_ldp::hopflax::{
    check_explicit, closed_form, explicit_speed, solve_from, ExplicitCase, ExplicitParams, SolveGrid,
};
use tasep_ldp::lattice::{
    integrate_occupation, locality_envelope, triangulation_from_fn, HeightProfile, MacroField, OccupationField,
    TriangleKind, Triplet, UniformGrid,
};
use tasep_ldp::ratefn::{dyadic_time_functional, local_rate, poisson_rate_trunc, sup_representation, RateVariant};
use tasep_ldp::sim::{
    bernoulli_bits, height_at, run_coupled, run_spec, safety_margin, scaled_heights, simulate, torus, BlockWeight,
    OneBlock, RunSpec, WindowStats,
};
use tasep_ldp::speed::{ConstantSpeed, SpeedField};
use tasep_ldp::speedbuild::{build_regions, rasterize};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sup_diff(a: &MacroField, b: &MacroField) -> f64 {
    assert_eq!((a.t.len, a.xi.len), (b.t.len, b.xi.len));
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn aligned(x: f64, d: f64) -> f64 {
    (x / d - 1e-9).ceil() * d
}

fn hydrodynamic_limit() -> Outcome {
    let d = 1.0 / 400.0;
    let speed = ConstantSpeed(1.0);
    let wedge = |x: f64| x.max(0.0);
    let half = aligned(SolveGrid::closure_half_width(2.0, 1.0, 1.0, d), d);
    let grid = SolveGrid { dt: d, dxi: d, t_end: 1.0, half_width: half, report_radius: 2.0 };
    let reference = solve_from(&speed, &wedge, 0.0, grid).expect("hopf-lax solve");
    let mut means = Vec::new();
    for n in [250u64, 500, 1000, 2000] {
        let nn = n as i64;
        let margin = safety_margin(1.0, n, 1.0);
        let init = HeightProfile::from_fn(-2 * nn - margin, 2 * nn + margin, |x| x.max(0)).unwrap();
        let errs: Vec<f64> = (0..20u64)
            .into_par_iter()
            .map(|rep| {
                let spec = RunSpec::new(&speed, 1.0, n, 1000 * n + rep).observing(-2 * nn, 2 * nn);
                let rec = run_spec(&init, &spec).expect("simulation");
                assert!(!rec.margin_violation);
                let field = scaled_heights(&rec, reference.t, reference.xi).expect("scaled heights");
                sup_diff(&field, &reference)
            })
            .collect();
        means.push((n, errs.iter().sum::<f64>() / errs.len() as f64));
    }
    let decreasing = means.windows(2).all(|w| w[1].1 < w[0].1);
    let last = means.last().unwrap().1;
    let table: Vec<String> = means.iter().map(|(n, e)| format!("N={n}: {e:.4}")).collect();
    outcome(decreasing && last <= 0.03, format!("mean sup error {}; need decreasing and <= 0.03", table.join(", ")))
}

fn explicit_params(case: ExplicitCase, rng: &mut impl Rng) -> ExplicitParams {
    loop {
        let f = rng.random_range(-1.0..1.0);
        let minus = Triplet::from_lambda_rho(rng.random_range(0.5..2.0), rng.random_range(0.05..0.95));
        let p = match case {
            ExplicitCase::Constant => ExplicitParams::constant(minus, f),
            ExplicitCase::VerticalCut => {
                let plus = Triplet::from_kappa_rho(minus.kappa, rng.random_range(0.05..0.95));
                ExplicitParams { minus, plus, slope: 0.0, f_origin: f, s0: 0.0 }
            }
            ExplicitCase::DiagonalCut => {
                let s = rng.random_range(0.5..2.0);
                let rho = rng.random_range(0.05..0.95);
                let kappa = minus.kappa + s * (minus.rho - rho);
                if kappa <= 0.0 {
                    continue;
                }
                ExplicitParams { minus, plus: Triplet::from_kappa_rho(kappa, rho), slope: s, f_origin: f, s0: 0.0 }
            }
            ExplicitCase::Shock => {
                let r = rng.random_range(0.5..0.95);
                ExplicitParams {
                    minus: Triplet::from_lambda_rho(1.0, r),
                    plus: Triplet::from_lambda_rho(1.0, 1.0 - r),
                    slope: 0.0,
                    f_origin: f,
                    s0: 0.0,
                }
            }
        };
        if !(0.25..=4.0).contains(&p.plus.lambda) {
            continue;
        }
        if check_explicit(case, &p).is_ok() {
            return p;
        }
    }
}

/// Sup error against the closed form, and the grid tolerance `2(dt + dxi)`.
fn explicit_error(case: ExplicitCase, p: &ExplicitParams, d: f64, coarse: f64) -> (f64, f64) {
    let speed = explicit_speed(case, p, 1.0);
    // A slanted interface passes through grid nodes when dt = dxi / slope; the horizon is
    // rounded to the coarse step so both grids end at the same time.
    let (dt, t_end) = if case == ExplicitCase::DiagonalCut {
        let dc = coarse / p.slope;
        (d / p.slope, (1.0 / dc).round() * dc)
    } else {
        (d, 1.0)
    };
    let half = aligned(SolveGrid::closure_half_width(1.0, t_end, speed.lambda_max(), dt), d);
    let grid = SolveGrid { dt, dxi: d, t_end, half_width: half, report_radius: 1.0 };
    let f0 = |x: f64| closed_form(case, p, 0.0, x).unwrap();
    let field = solve_from(speed.as_ref(), &f0, 0.0, grid).expect("explicit solve");
    let mut err: f64 = 0.0;
    for i in 0..field.t.len {
        for j in 0..field.xi.len {
            let exact = closed_form(case, p, field.t.at(i), field.xi.at(j)).unwrap();
            err = err.max((field.get(i, j) - exact).abs());
        }
    }
    (err, 2.0 * (dt + d))
}

fn hopf_lax_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (coarse, fine) = (0.02, 0.01);
    let mut pass = true;
    let mut parts = Vec::new();
    for case in [ExplicitCase::Constant, ExplicitCase::VerticalCut, ExplicitCase::DiagonalCut, ExplicitCase::Shock] {
        let sets: Vec<ExplicitParams> = (0..25).map(|_| explicit_params(case, &mut rng)).collect();
        let res: Vec<((f64, f64), (f64, f64))> = sets
            .par_iter()
            .map(|p| (explicit_error(case, p, coarse, coarse), explicit_error(case, p, fine, coarse)))
            .collect();
        let mut worst: f64 = 0.0;
        let mut worst_ratio: f64 = 0.0;
        for ((ec, tc), (ef, tf)) in res {
            worst = worst.max(ec.max(ef));
            pass &= ec <= tc && ef <= tf;
            if ef > 1e-12 {
                worst_ratio = worst_ratio.max(ef / ec);
                pass &= ef <= 0.5 * ec * (1.0 + 1e-8);
            }
        }
        parts.push(format!("{case:?}: sup err {worst:.2e}, worst fine/coarse {worst_ratio:.6}"));
    }
    outcome(pass, parts.join("; "))
}

fn doob_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut states = 0;
    let start = Instant::now();
    while done < 20 {
        let k = rng.random_range(1..=6usize);
        let zeros = rng.random_range(1..=k);
        let mut h = vec![0i64];
        for i in 0..=k {
            let p = if i < zeros { 0.15 } else { 0.85 };
            h.push(h[i] + rng.random_bool(p) as i64);
        }
        let t_micro = rng.random_range(0.5..2.0);
        let jumps = rng.random_range(0..=2usize);
        let mut jump_times: Vec<f64> = (0..jumps).map(|_| rng.random_range(0.05..0.95) * t_micro).collect();
        jump_times.sort_by(f64::total_cmp);
        let (mut lower, mut upper) = (Vec::new(), Vec::new());
        for piece in 0..=jumps {
            let lo = (1..=k).map(|x| (!rng.random_bool(0.3)).then(|| h[x] - rng.random_range(1..3))).collect();
            let first = if piece == 0 { 1 } else { 0 };
            let hi = (1..=k).map(|x| (!rng.random_bool(0.3)).then(|| h[x] + rng.random_range(first..4))).collect();
            lower.push(lo);
            upper.push(hi);
        }
        let Ok(sys) = build_system(k, &h, Envelopes { jump_times, lower, upper }, t_micro) else {
            continue;
        };
        let q = solve_q(&sys).expect("backward equation");
        if !(q.q0() > 1e-12) {
            continue;
        }
        let fwd = forward_pass(&sys, &q).expect("forward pass");
        worst = worst.max((entropy_exact(&q) - fwd.entropy).abs());
        states = states.max(sys.state_count());
        done += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs <= 120.0,
        format!("20 systems (up to {states} states): max gap {worst:.2e} <= 1e-6 in {secs:.2}s"),
    )
}

fn tilted_flux_and_cost() -> Outcome {
    let (n, width) = (1000u64, 2000usize);
    let speed = ConstantSpeed(2.0);
    let samples: Vec<(f64, f64)> = (0..50u64)
        .into_par_iter()
        .map(|rep| {
            let h = torus(-(width as i64) / 2, &bernoulli_bits(width, 0.5, 500 + rep)).unwrap();
            let lo = h.x_min();
            let mut stats = WindowStats::new(&speed, n, lo, lo + width as i64 - 1, 0.0, 1.0);
            simulate(&h, &RunSpec::new(&speed, 1.0, n, rep), &mut stats).expect("simulation");
            (stats.flux(), stats.entropy_density() / (width as f64 / n as f64))
        })
        .collect();
    let flux = samples.iter().map(|s| s.0).sum::<f64>() / 50.0;
    let cost = samples.iter().map(|s| s.1).sum::<f64>() / 50.0;
    let target = 0.25 * (2.0 * 2f64.ln() - 1.0);
    let rel = (cost - target).abs() / target;
    outcome(
        (flux - 0.5).abs() <= 0.02 && rel <= 0.05,
        format!(
            "flux {flux:.4} (0.5 +- 0.02); entropy per unit length {cost:.5} vs {target:.5} (rel {rel:.3} <= 0.05)"
        ),
    )
}

/// Flux and entropy density over one reduced-triangle window of the intermittent speed.
fn intermittent_window(n_fine: usize, seed: u64) -> (f64, f64, f64) {
    let (tau, m, big_n) = (31.0, 8usize, 1000u64);
    let tri = triangulation_from_fn(tau, tau, 2.0 * tau, tau, |_, _, _| Triplet::from_lambda_rho(0.64, 0.5));
    let zp = build_regions(&tri, m, n_fine, tau, 2.0 * tau).expect("construction");
    let speed = rasterize(&zp, m, n_fine).expect("raster");
    let (tp, bp) = (tau / m as f64, tau / m as f64);
    // Column 2 has its left corner at 0: its reduced upper triangle contains [b', 2b'] for
    // t in [3 tau', 5 tau'].
    let nf = big_n as f64;
    let (lo, hi) = ((bp * nf).round() as i64, (2.0 * bp * nf).round() as i64 - 1);
    let horizon = 5.0 * tp;
    let margin = safety_margin(speed.lambda_max(), big_n, horizon);
    let bits = bernoulli_bits((hi - lo + 1 + 2 * margin) as usize, 0.5, seed);
    let init = integrate_occupation(&OccupationField { x_min: lo - margin, bits }, 0);
    let mut stats = WindowStats::new(&speed, big_n, lo, hi, 3.0 * tp, horizon);
    let spec = RunSpec::new(&speed, horizon, big_n, seed).observing(lo, hi);
    let summary = simulate(&init, &spec, &mut stats).expect("simulation");
    assert!(!summary.margin_violation);
    let stripe_share = {
        let t = 4.0 * tp;
        let (a, b) = (lo as f64 / nf, hi as f64 / nf);
        let slow: f64 = zp
            .slice(t)
            .iter()
            .filter(|(id, _, _)| zp.regions[*id].lambda < 1.0)
            .map(|(_, l, r)| (r.min(b) - l.max(a)).max(0.0))
            .sum();
        slow / (b - a)
    };
    (stats.flux(), stats.entropy_density(), stripe_share)
}

fn intermittent_construction() -> Outcome {
    let start = Instant::now();
    let (flux8, ent8, share8) = intermittent_window(8, 11);
    let (_, ent4, share4) = intermittent_window(4, 12);
    let ratio = ent8 / ent4;
    let ok = (flux8 - 0.16).abs() <= 0.01 && (0.35..=0.65).contains(&ratio);
    outcome(
        ok,
        format!(
            "n=8 flux {flux8:.4} (0.16 +- 0.01); entropy n=4 {ent4:.4e}, n=8 {ent8:.4e}, ratio {ratio:.3} in [0.35, 0.65]; slow share {share4:.3} -> {share8:.3}; {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn speed_fidelity() -> Outcome {
    let left = Triplet::from_lambda_rho(0.8, 0.5);
    let right = Triplet::from_kappa_rho(0.2, 0.25);
    let g = |t: f64, x: f64| 0.2 * t + if x < 0.0 { 0.5 * x } else { 0.25 * x };
    let tri = triangulation_from_fn(1.0, 1.0, 3.0, 1.0, |_, c, _: TriangleKind| if c < 3 { left } else { right });
    let mut errs = Vec::new();
    for (m, n) in [(8usize, 4usize), (16, 8)] {
        let zp = build_regions(&tri, m, n, 1.0, 3.0).expect("construction");
        let speed = rasterize(&zp, m, n).expect("raster");
        let (dt, dx) = (zp.fine_tau(), zp.fine_b() / 2.0);
        let half = aligned(SolveGrid::closure_half_width(1.0, 1.0, speed.lambda_max(), dt), dx);
        let grid = SolveGrid { dt, dxi: dx, t_end: 1.0, half_width: half, report_radius: 1.0 };
        let field = solve_from(&speed, &|x| g(0.0, x), 0.0, grid).expect("solve");
        let mut err: f64 = 0.0;
        for i in 0..field.t.len {
            for j in 0..field.xi.len {
                err = err.max((field.get(i, j) - g(field.t.at(i), field.xi.at(j))).abs());
            }
        }
        errs.push(err);
    }
    outcome(
        errs[1] < errs[0] && errs[1] <= 0.05,
        format!("sup error (8,4) {:.4}, (16,8) {:.4}; need decrease and <= 0.05", errs[0], errs[1]),
    )
}

fn random_walk_profile(rng: &mut impl Rng, x_min: i64, x_max: i64) -> Vec<i64> {
    let mut v = vec![0i64];
    let p = rng.random_range(0.2..0.8);
    for _ in x_min..x_max {
        v.push(v.last().unwrap() + rng.random_bool(p) as i64);
    }
    v
}

fn locality() -> Outcome {
    let (x_min, x_max, t_micro) = (-120i64, 120i64, 10.0);
    let speed = ConstantSpeed(1.0);
    let mut mismatches = 0;
    let mut modified = 0;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_walk_profile(&mut rng, x_min, x_max);
        let f = HeightProfile::from_fn(x_min, x_max, |x| base[(x - x_min) as usize]).unwrap();
        let x0 = rng.random_range(-10..=10);
        let b = f.get(x0).unwrap() + rng.random_range(1..=5);
        let env = locality_envelope(&f, b, x0);
        // Resample the increments outside the envelope.
        let mut alt = base.clone();
        let (k_lo, k_hi) = ((env.lower.site - x_min) as usize, (env.upper.site - x_min) as usize);
        let p = rng.random_range(0.0..1.0);
        if !env.upper.unbounded {
            for i in k_hi + 1..alt.len() {
                alt[i] = alt[i - 1] + rng.random_bool(p) as i64;
            }
        }
        if !env.lower.unbounded {
            for i in (0..k_lo).rev() {
                alt[i] = alt[i + 1] - rng.random_bool(p) as i64;
            }
        }
        modified += (alt != base) as usize;
        let g = HeightProfile::from_fn(x_min, x_max, |x| alt[(x - x_min) as usize]).unwrap();
        let recs = run_coupled(&[f, g], &speed, t_micro, 1, seed).expect("coupled run");
        let below: Vec<bool> = recs.iter().map(|r| height_at(r, t_micro).unwrap().get(x0).unwrap() < b).collect();
        mismatches += (below[0] != below[1]) as usize;
    }
    outcome(mismatches == 0, format!("500 seeds ({modified} with modified exteriors): {mismatches} mismatches"))
}

fn one_block_decay() -> Outcome {
    let n = 1000u64;
    let speed = ConstantSpeed(1.0);
    let value = |k: usize| -> f64 {
        let v: Vec<f64> = (0..20u64)
            .into_par_iter()
            .map(|rep| {
                let h = torus(0, &bernoulli_bits(n as usize, 0.5, 900 + rep)).unwrap();
                let mut ob = OneBlock::new(&h, n, k, BlockWeight::Constant(1.0)).unwrap();
                simulate(&h, &RunSpec::new(&speed, 1.0, n, rep), &mut ob).expect("simulation");
                ob.value.abs() / n as f64
            })
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (v4, v32) = (value(4), value(32));
    outcome(v32 < 0.5 * v4, format!("k=4: {v4:.3e}, k=32: {v32:.3e} (need < 0.5 x)"))
}

fn rate_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();
    let variants = [
        RateVariant::min(),
        RateVariant::product(),
        RateVariant::min().truncated(0.1).unwrap(),
        RateVariant::product().truncated(0.1).unwrap(),
    ];
    for v in variants {
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let (k1, k2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let (r1, r2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let (a, b) = (local_rate(k1, r1, v), local_rate(k2, r2, v));
            if !(a.is_finite() && b.is_finite()) {
                continue;
            }
            let mid = local_rate(0.5 * (k1 + k2), 0.5 * (r1 + r2), v);
            worst = worst.max(mid - 0.5 * (a + b));
        }
        if worst > 1e-12 {
            failures.push(format!("{:?} convexity excess {worst:.2e}", v.variant));
        }
    }
    let mut mono_bad = 0;
    for _ in 0..10_000 {
        let kappa = rng.random_range(0.0..2.0);
        let (x, y) = (rng.random_range(0.01..2.0), rng.random_range(0.01..2.0));
        let (lo, hi) = if x < y { (x, y) } else { (y, x) };
        let f = |xi: f64| xi * poisson_rate_trunc(kappa / xi);
        if f(hi) > f(lo) + 1e-12 {
            mono_bad += 1;
        }
    }
    if mono_bad > 0 {
        failures.push(format!("{mono_bad} monotonicity violations"));
    }
    let path =
        MacroField::from_fn(UniformGrid::new(0.0, 1.0 / 64.0, 65), UniformGrid::new(-1.0, 1.0 / 32.0, 65), |t, x| {
            t + 0.8 * t * t + 0.1 * (8.0 * t).sin() + 0.5 * x
        });
    let g: Vec<f64> = (0..6).map(|k| dyadic_time_functional(&path, k, 0.0).unwrap()).collect();
    if g.windows(2).any(|w| w[1] < w[0] - 1e-12) {
        failures.push(format!("dyadic functional not monotone: {g:?}"));
    }
    let mut sup_worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (kappa, phi) = (rng.random_range(0.0..2.0), rng.random_range(0.01..0.5));
        let direct = phi * poisson_rate_trunc(kappa / phi);
        sup_worst = sup_worst.max((sup_representation(kappa, phi) - direct).abs());
    }
    if sup_worst > 1e-9 {
        failures.push(format!("sup representation gap {sup_worst:.2e}"));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("convexity (4 variants x 1e4), monotonicity, dyadic monotone {g:.4?}, sup gap {sup_worst:.1e}")
        } else {
            failures.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("hydrodynamic limit", hydrodynamic_limit),
        ("hopf-lax oracle", hopf_lax_oracle),
        ("doob identity", doob_identity),
        ("tilted flux and cost", tilted_flux_and_cost),
        ("intermittent construction", intermittent_construction),
        ("speed-function fidelity", speed_fidelity),
        ("locality", locality),
        ("one-block decay", one_block_decay),
        ("rate-function properties", rate_properties),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id} ({name}): {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        failed += (!o.pass) as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
