use std::fmt::Display;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use tasep_ldp::doob::{build_system, entropy_exact, entropy_formula, forward_pass, solve_q, Envelopes};
use tasep_ldp::entropy::{entropy_bound, mc_report, mean_and_se, EntropyReport};
use tasep_ldp::hopflax::{
    bound_violation, check_explicit, closed_form, explicit_speed, extend_slice, solve_from, ExplicitCase,
    ExplicitParams, SolveGrid,
};
use tasep_ldp::lattice::{
    integrate_occupation, triangulate, triangulation_from_fn, MacroField, OccupationField, Triangulation, Triplet,
    UniformGrid,
};
use tasep_ldp::ratefn::{rate_functional, Mobility, RateVariant};
use tasep_ldp::sim::{
    bernoulli_bits, run_spec, safety_margin, scaled_heights, simulate, torus, BlockWeight, OneBlock, RunSpec,
    WindowStats,
};
use tasep_ldp::speed::{SimpleSpeed, SpeedField};
use tasep_ldp::speedbuild::{construct_regions, construction_lambda_bar, l1_gap, rasterize, upper_radius};

use crate::artifact::Artifacts;
use crate::config::{Context, InitialSpec, SpeedSpec};
use crate::{CliError, Command};

fn bad<E: Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn internal<E: Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

fn io(e: std::io::Error) -> CliError {
    CliError::Internal(e.to_string())
}

/// Smallest multiple of `d` not below `x`.
fn aligned(x: f64, d: f64) -> f64 {
    (x / d - 1e-9).ceil() * d
}

/// Seed of replica `rep` in stream `stream`, derived from the run seed.
fn rep_seed(base: u64, stream: u64, rep: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(1_000_003) ^ rep
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn read_field(ctx: &Context, path: &std::path::Path) -> Result<MacroField, CliError> {
    let p = ctx.resolve(path);
    let f = std::fs::File::open(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    MacroField::read_csv(f).map_err(bad)
}

pub fn run(cmd: Command, ctx: &Context) -> Result<Value, CliError> {
    match cmd {
        Command::Hydro => hydro(ctx),
        Command::Tilt => tilt(ctx),
        Command::Intermittent => intermittent(ctx),
        Command::SpeedBuild => speed_build(ctx),
        Command::Hopflax => hopflax(ctx),
        Command::DoobCheck => doob_check(ctx),
        Command::RateEval => rate_eval(ctx),
        Command::Oneblock => oneblock(ctx),
    }
}

// ---- hydro ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    dt: f64,
    dxi: f64,
    /// Reporting radius of the comparison.
    radius: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HydroConfig {
    #[serde(alias = "initial_spec")]
    initial: InitialSpec,
    #[serde(alias = "speed_spec")]
    speed: SpeedSpec,
    #[serde(alias = "N_list")]
    n_list: Vec<u64>,
    #[serde(alias = "T")]
    t: f64,
    grid: GridSpec,
    #[serde(default)]
    max_final_error: Option<f64>,
    /// Times at which the first replica of the largest N is written as scaled heights.
    #[serde(default)]
    snapshot_times: Vec<f64>,
}

fn sup_diff(a: &MacroField, b: &MacroField) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn hydro(ctx: &Context) -> Result<Value, CliError> {
    let cfg: HydroConfig = ctx.require()?;
    cfg.initial.validate()?;
    positive("t", cfg.t)?;
    positive("grid.dt", cfg.grid.dt)?;
    positive("grid.dxi", cfg.grid.dxi)?;
    positive("grid.radius", cfg.grid.radius)?;
    if cfg.n_list.is_empty() || cfg.n_list.contains(&0) {
        return Err(CliError::Config("n_list must be a nonempty list of positive integers".into()));
    }
    let speed = cfg.speed.build(cfg.t)?;
    let lam = speed.lambda_max();
    let g = &cfg.grid;
    let radius = aligned(g.radius, g.dxi);
    let half = aligned(SolveGrid::closure_half_width(radius, cfg.t, lam, g.dt), g.dxi);
    let grid = SolveGrid { dt: g.dt, dxi: g.dxi, t_end: cfg.t, half_width: half, report_radius: radius };
    let init_macro = cfg.initial;
    let reference = solve_from(&speed, &|x| init_macro.macro_value(x), 0.0, grid).map_err(bad)?;
    let reps = ctx.replicas_or(20);
    let arts = Artifacts::new(ctx)?;
    let mut rows = Vec::new();
    for &n in &cfg.n_list {
        let reach = (radius * n as f64).ceil() as i64;
        let margin = safety_margin(lam, n, cfg.t);
        let errs: Vec<f64> = (0..reps as u64)
            .into_par_iter()
            .map(|rep| -> Result<f64, CliError> {
                let init = cfg.initial.lattice(-reach - margin, reach + margin, rep_seed(ctx.seed, n, rep))?;
                let spec =
                    RunSpec::new(&speed, cfg.t, n, rep_seed(ctx.seed, n + (1 << 40), rep)).observing(-reach, reach);
                let rec = run_spec(&init, &spec).map_err(internal)?;
                if rec.margin_violation {
                    return Err(CliError::Internal(format!("frozen boundary reached the window at N = {n}")));
                }
                let field = scaled_heights(&rec, reference.t, reference.xi).map_err(internal)?;
                Ok(sup_diff(&field, &reference))
            })
            .collect::<Result<_, _>>()?;
        let (m, se) = mean_and_se(&errs);
        rows.push(vec![n as f64, m, se]);
    }
    arts.csv_rows("convergence.csv", &["n", "mean_sup_error", "std_error"], &rows)?;
    if !cfg.snapshot_times.is_empty() {
        if cfg.snapshot_times.iter().any(|&s| !(0.0..=cfg.t).contains(&s)) {
            return Err(CliError::Config(format!("snapshot times must lie in [0, {}]", cfg.t)));
        }
        let n = *cfg.n_list.iter().max().unwrap();
        let reach = (radius * n as f64).ceil() as i64;
        let margin = safety_margin(lam, n, cfg.t);
        let init = cfg.initial.lattice(-reach - margin, reach + margin, rep_seed(ctx.seed, n, 0))?;
        let spec = RunSpec::new(&speed, cfg.t, n, rep_seed(ctx.seed, n + (1 << 40), 0)).observing(-reach, reach);
        let rec = run_spec(&init, &spec).map_err(internal)?;
        let mut w = arts.csv("scaled_heights.csv")?;
        writeln!(w, "t,xi,value").map_err(io)?;
        for &s in &cfg.snapshot_times {
            let f = scaled_heights(&rec, UniformGrid::new(s, 1.0, 1), reference.xi).map_err(internal)?;
            for j in 0..f.xi.len {
                writeln!(w, "{},{},{}", s, f.xi.at(j), f.get(0, j)).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    let last = rows.last().map(|r| r[1]).unwrap_or(f64::NAN);
    let decreasing = rows.windows(2).all(|w| w[1][1] < w[0][1]);
    let summary = arts.json(
        "summary.json",
        json!({
            "command": "hydro",
            "replicas": reps,
            "n_list": cfg.n_list,
            "mean_sup_error": rows.iter().map(|r| r[1]).collect::<Vec<_>>(),
            "std_error": rows.iter().map(|r| r[2]).collect::<Vec<_>>(),
            "decreasing": decreasing,
            "final_error": last,
            "max_final_error": cfg.max_final_error,
        }),
    )?;
    if let Some(tol) = cfg.max_final_error {
        if !(last <= tol) {
            return Err(CliError::Acceptance(format!("final mean sup error {last} exceeds {tol}")));
        }
    }
    Ok(summary)
}

// ---- tilt ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TiltConfig {
    width: usize,
    n: u64,
    t: f64,
    rho: f64,
    speed: SpeedSpec,
    #[serde(default)]
    expected_entropy: Option<f64>,
    /// Relative tolerance on the entropy per unit length.
    #[serde(default = "default_rel_tol")]
    tolerance: f64,
    #[serde(default)]
    expected_flux: Option<f64>,
    /// Absolute tolerance on the flux.
    #[serde(default = "default_flux_tol")]
    flux_tolerance: f64,
}

fn default_rel_tol() -> f64 {
    0.05
}

fn default_flux_tol() -> f64 {
    0.02
}

/// Paired discrepancy of flux and compensator, in standard errors of the mean difference.
fn flux_discrepancy(flux: &[f64], comp: &[f64]) -> Option<f64> {
    let diff: Vec<f64> = flux.iter().zip(comp).map(|(a, b)| a - b).collect();
    let (m, se) = mean_and_se(&diff);
    if diff.len() < 2 {
        None
    } else if m == 0.0 {
        Some(0.0)
    } else {
        Some(m.abs() / se)
    }
}

fn tilt(ctx: &Context) -> Result<Value, CliError> {
    let cfg: TiltConfig = ctx.require()?;
    positive("t", cfg.t)?;
    if cfg.width < 2 || cfg.n == 0 {
        return Err(CliError::Config("width must be at least 2 and n positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(CliError::Config(format!("density {} outside [0, 1]", cfg.rho)));
    }
    let speed = cfg.speed.build(cfg.t)?;
    let reps = ctx.replicas_or(50);
    let width = cfg.width as i64;
    let samples: Vec<(f64, f64, f64)> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| -> Result<_, CliError> {
            let h =
                torus(-width / 2, &bernoulli_bits(cfg.width, cfg.rho, rep_seed(ctx.seed, 1, rep))).map_err(internal)?;
            let lo = h.x_min();
            let mut stats = WindowStats::new(&speed, cfg.n, lo, lo + width - 1, 0.0, cfg.t);
            simulate(&h, &RunSpec::new(&speed, cfg.t, cfg.n, rep_seed(ctx.seed, 2, rep)), &mut stats)
                .map_err(internal)?;
            Ok((stats.flux(), stats.flux_compensator(), stats.entropy_density()))
        })
        .collect::<Result<_, _>>()?;
    let length = cfg.width as f64 / cfg.n as f64;
    let flux: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let comp: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let ent: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let per_length: Vec<f64> = ent.iter().map(|e| e / length).collect();
    let report = mc_report(&ent);
    let (flux_m, flux_se) = mean_and_se(&flux);
    let (pl_m, pl_se) = mean_and_se(&per_length);
    let arts = Artifacts::new(ctx)?;
    let summary = arts.json(
        "summary.json",
        json!({
            "command": "tilt",
            "entropy": report,
            "entropy_per_unit_length": pl_m,
            "entropy_per_unit_length_se": pl_se,
            "flux": flux_m,
            "flux_se": flux_se,
            "flux_identity_discrepancy_se": flux_discrepancy(&flux, &comp),
            "expected_entropy": cfg.expected_entropy,
            "expected_flux": cfg.expected_flux,
        }),
    )?;
    let mut failures = Vec::new();
    if let Some(e) = cfg.expected_entropy {
        let rel = (pl_m - e).abs() / e.abs().max(f64::MIN_POSITIVE);
        if !(rel <= cfg.tolerance) {
            failures.push(format!("entropy per unit length {pl_m} vs {e} (relative error {rel})"));
        }
    }
    if let Some(f) = cfg.expected_flux {
        if !((flux_m - f).abs() <= cfg.flux_tolerance) {
            failures.push(format!("flux {flux_m} vs {f}"));
        }
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(CliError::Acceptance(failures.join("; ")))
    }
}

// ---- intermittent ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntermittentConfig {
    kappa: f64,
    rho_bar: f64,
    /// Triangle height and base of the coarse triangulation.
    tau: f64,
    m: usize,
    n_list: Vec<usize>,
    big_n: u64,
}

fn intermittent(ctx: &Context) -> Result<Value, CliError> {
    let cfg: IntermittentConfig = ctx.require()?;
    positive("kappa", cfg.kappa)?;
    positive("tau", cfg.tau)?;
    if !(cfg.rho_bar > 0.0 && cfg.rho_bar < 1.0) {
        return Err(CliError::Config(format!("rho_bar {} outside (0, 1)", cfg.rho_bar)));
    }
    if cfg.m == 0 || cfg.big_n == 0 || cfg.n_list.is_empty() || cfg.n_list.contains(&0) {
        return Err(CliError::Config("m, big_n and every entry of n_list must be positive".into()));
    }
    let trip = Triplet::from_kappa_rho(cfg.kappa, cfg.rho_bar);
    let tau = cfg.tau;
    let r_star = tau;
    let probe = triangulation_from_fn(tau, tau, r_star, tau, |_, _, _| trip);
    let r_upper = upper_radius(r_star, tau, construction_lambda_bar(&probe));
    let tri = triangulation_from_fn(tau, tau, r_upper, tau, |_, _, _| trip);
    let bound = entropy_bound(&tri, r_star, r_upper);
    let reps = ctx.replicas_or(1);
    let nf = cfg.big_n as f64;
    let tp = tau / cfg.m as f64;
    // Column with left corner at 0: its reduced upper triangle contains [b', 2b'] for t in [3 tau', 5 tau'].
    let (lo, hi) = ((tp * nf).round() as i64, (2.0 * tp * nf).round() as i64 - 1);
    if hi <= lo {
        return Err(CliError::Config("big_n tau / m is below two sites".into()));
    }
    let (t1, horizon) = (3.0 * tp, 5.0 * tp);
    let arts = Artifacts::new(ctx)?;
    let mut per_n = Vec::new();
    let mut rows = Vec::new();
    for (idx, &n) in cfg.n_list.iter().enumerate() {
        let zp = construct_regions(&tri, cfg.m, n, r_star, r_upper).map_err(bad)?;
        if !zp.report.violations.is_empty() {
            return Err(CliError::Acceptance(format!("construction fails for n = {n}: {}", zp.report.violations[0])));
        }
        let speed = rasterize(&zp, cfg.m, n).map_err(internal)?;
        let margin = safety_margin(speed.lambda_max(), cfg.big_n, horizon);
        let samples: Vec<(f64, f64, f64)> = (0..reps as u64)
            .into_par_iter()
            .map(|rep| -> Result<_, CliError> {
                let bits =
                    bernoulli_bits((hi - lo + 1 + 2 * margin) as usize, 0.5, rep_seed(ctx.seed, 10 + idx as u64, rep));
                let init = integrate_occupation(&OccupationField { x_min: lo - margin, bits }, 0);
                let mut stats = WindowStats::new(&speed, cfg.big_n, lo, hi, t1, horizon);
                let spec = RunSpec::new(&speed, horizon, cfg.big_n, rep_seed(ctx.seed, 20 + idx as u64, rep))
                    .observing(lo, hi);
                let s = simulate(&init, &spec, &mut stats).map_err(internal)?;
                if s.margin_violation {
                    return Err(CliError::Internal("frozen boundary reached the window".into()));
                }
                Ok((stats.flux(), stats.flux_compensator(), stats.entropy_density()))
            })
            .collect::<Result<_, _>>()?;
        let flux: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let comp: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let ent: Vec<f64> = samples.iter().map(|s| s.2).collect();
        let report = EntropyReport::merge(&mc_report(&ent), &bound);
        let (fm, fse) = mean_and_se(&flux);
        rows.push(vec![n as f64, fm, report.mc_estimate.unwrap_or(f64::NAN)]);
        per_n.push(json!({
            "n": n,
            "flux": fm,
            "flux_se": fse,
            "flux_identity_discrepancy_se": flux_discrepancy(&flux, &comp),
            "entropy": report,
        }));
    }
    arts.csv_rows("intermittent.csv", &["n", "flux", "entropy"], &rows)?;
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1][2] / w[0][2]).collect();
    arts.json(
        "summary.json",
        json!({
            "command": "intermittent",
            "window": {"lo": lo, "hi": hi, "t1": t1, "t2": horizon},
            "target_flux": cfg.kappa,
            "r_star": r_star,
            "r_upper": r_upper,
            "per_n": per_n,
            "entropy_ratios": ratios,
        }),
    )
}

// ---- speed-build ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeedBuildConfig {
    /// Piecewise-linear profile as a field CSV.
    g_csv: PathBuf,
    tau: f64,
    b: f64,
    r_star: f64,
    m: usize,
    n: usize,
}

/// Triangulation at the construction radius, widened until the radius is consistent with
/// the largest speed it contains.
fn triangulate_consistent(g: &MacroField, tau: f64, b: f64, r_star: f64) -> Result<(Triangulation, f64), CliError> {
    let t_end = g.t.end();
    let mut tri = triangulate(g, tau, b, r_star).map_err(bad)?;
    let mut r_up = upper_radius(r_star, t_end, construction_lambda_bar(&tri));
    for _ in 0..8 {
        tri = triangulate(g, tau, b, r_up).map_err(bad)?;
        let next = upper_radius(r_star, t_end, construction_lambda_bar(&tri));
        if next <= r_up + 1e-12 {
            return Ok((tri, r_up));
        }
        r_up = next;
    }
    Err(CliError::Config("the outer radius does not stabilize".into()))
}

fn speed_build(ctx: &Context) -> Result<Value, CliError> {
    let cfg: Option<SpeedBuildConfig> = ctx.parse()?;
    let (g, tau, b, r_star, m, n) = match &cfg {
        Some(c) => {
            positive("tau", c.tau)?;
            positive("b", c.b)?;
            positive("r_star", c.r_star)?;
            (read_field(ctx, &c.g_csv)?, c.tau, c.b, c.r_star, c.m, c.n)
        }
        None => {
            // Kinked profile: flux 0.2, density 1/2 on the left and 1/4 on the right.
            let g = MacroField::from_fn(UniformGrid::new(0.0, 1.0, 2), UniformGrid::new(-4.0, 1.0, 9), |t, x| {
                0.2 * t + if x < 0.0 { 0.5 * x } else { 0.25 * x }
            });
            (g, 1.0, 1.0, 1.0, 8, 4)
        }
    };
    if m == 0 || n == 0 {
        return Err(CliError::Config("m and n must be positive".into()));
    }
    let (tri, r_upper) = triangulate_consistent(&g, tau, b, r_star)?;
    let zp = construct_regions(&tri, m, n, r_star, r_upper).map_err(bad)?;
    let all_pass = zp.report.all_pass();
    let arts = Artifacts::new(ctx)?;
    let mut gap = None;
    if zp.report.violations.is_empty() {
        let speed = rasterize(&zp, m, n).map_err(internal)?;
        gap = Some(l1_gap(&speed, &tri));
        arts.json("speed.json", speed.to_json())?;
    }
    let report = arts.json(
        "report.json",
        json!({
            "command": "speed-build",
            "all_pass": all_pass,
            "r_star": r_star,
            "r_upper": r_upper,
            "m": m,
            "n": n,
            "regions": zp.regions.len(),
            "l1_gap": gap,
            "invariants": zp.report,
        }),
    )?;
    if !all_pass {
        return Err(CliError::Acceptance(format!(
            "{} invariant violations, {} fast buffers",
            zp.report.violations.len(),
            zp.report.buffer_speed_excess.len()
        )));
    }
    Ok(report)
}

// ---- hopflax ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleSpec {
    case: ExplicitCase,
    params: ExplicitParams,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HopflaxConfig {
    #[serde(default, alias = "speed_spec")]
    speed: Option<SpeedSpec>,
    /// Field CSV whose first time row is the initial profile.
    #[serde(default)]
    f0_csv: Option<PathBuf>,
    #[serde(default)]
    oracle: Option<OracleSpec>,
    #[serde(alias = "T")]
    t_end: f64,
    dt: f64,
    dxi: f64,
    #[serde(alias = "L")]
    report_radius: f64,
    #[serde(default)]
    half_width: Option<f64>,
}

fn hopflax(ctx: &Context) -> Result<Value, CliError> {
    let cfg: HopflaxConfig = ctx.require()?;
    positive("dt", cfg.dt)?;
    positive("dxi", cfg.dxi)?;
    positive("report_radius", cfg.report_radius)?;
    let (speed, f0, s0): (Box<dyn SpeedField>, Box<dyn Fn(f64) -> f64 + Sync>, f64) =
        match (&cfg.oracle, &cfg.speed, &cfg.f0_csv) {
            (Some(o), None, None) => {
                check_explicit(o.case, &o.params).map_err(bad)?;
                let (case, p) = (o.case, o.params);
                let s0 = p.s0;
                (
                    explicit_speed(case, &p, cfg.t_end),
                    Box::new(move |x| closed_form(case, &p, s0, x).unwrap_or(f64::NAN)),
                    s0,
                )
            }
            (None, Some(s), Some(path)) => {
                let field = read_field(ctx, path)?;
                let slice = field.slice(0);
                slice.check_slopes(1e-9).map_err(bad)?;
                let speed: SimpleSpeed = s.build(cfg.t_end)?;
                (Box::new(speed), Box::new(move |x| extend_slice(&slice)(x)), 0.0)
            }
            _ => return Err(CliError::Config("give either `oracle`, or both `speed` and `f0_csv`".into())),
        };
    let half = match cfg.half_width {
        Some(h) => h,
        None => aligned(
            SolveGrid::closure_half_width(cfg.report_radius, cfg.t_end - s0, speed.lambda_max(), cfg.dt),
            cfg.dxi,
        ),
    };
    let grid =
        SolveGrid { dt: cfg.dt, dxi: cfg.dxi, t_end: cfg.t_end, half_width: half, report_radius: cfg.report_radius };
    let field = solve_from(speed.as_ref(), f0.as_ref(), s0, grid).map_err(bad)?;
    let arts = Artifacts::new(ctx)?;
    let mut w = arts.csv("field.csv")?;
    field.write_csv(&mut w).map_err(internal)?;
    w.flush().map_err(io)?;
    let oracle_err = cfg.oracle.as_ref().map(|o| {
        let mut err: f64 = 0.0;
        for i in 0..field.t.len {
            for j in 0..field.xi.len {
                let exact = closed_form(o.case, &o.params, field.t.at(i), field.xi.at(j)).unwrap_or(f64::NAN);
                err = err.max((field.get(i, j) - exact).abs());
            }
        }
        err
    });
    let tol = 2.0 * (cfg.dt + cfg.dxi);
    let summary = arts.json(
        "summary.json",
        json!({
            "command": "hopflax",
            "half_width": half,
            "sup_error_vs_oracle": oracle_err,
            "oracle_tolerance": tol,
            "bound_violation": bound_violation(&field, speed.lambda_max()),
        }),
    )?;
    if let Some(e) = oracle_err {
        if !(e <= tol) {
            return Err(CliError::Acceptance(format!("sup error {e} exceeds 2(dt + dxi) = {tol}")));
        }
    }
    Ok(summary)
}

// ---- doob-check ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DoobConfig {
    k: usize,
    /// Heights on `0..=k+1`; the two ends stay fixed.
    initial: Vec<i64>,
    envelopes: Envelopes,
    #[serde(alias = "T")]
    t_micro: f64,
    #[serde(default = "default_gap_tol")]
    tolerance: f64,
}

fn default_gap_tol() -> f64 {
    1e-6
}

fn doob_check(ctx: &Context) -> Result<Value, CliError> {
    let cfg = match ctx.parse::<DoobConfig>()? {
        Some(c) => c,
        None => DoobConfig {
            k: 4,
            initial: vec![0, 0, 0, 1, 2, 2],
            envelopes: Envelopes::constant(vec![None; 4], vec![Some(2), Some(2), Some(3), Some(4)]),
            t_micro: 1.5,
            tolerance: default_gap_tol(),
        },
    };
    let sys = build_system(cfg.k, &cfg.initial, cfg.envelopes, cfg.t_micro).map_err(bad)?;
    let q = solve_q(&sys).map_err(internal)?;
    if !(q.q0() > 0.0) {
        return Err(CliError::Config("the conditioning event has probability zero".into()));
    }
    let fwd = forward_pass(&sys, &q).map_err(internal)?;
    let exact = entropy_exact(&q);
    let formula = entropy_formula(&sys, &q).map_err(internal)?;
    let gap = (exact - fwd.entropy).abs();
    let martingale = fwd.height_gain.iter().zip(&fwd.compensator).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let arts = Artifacts::new(ctx)?;
    let summary = arts.json(
        "summary.json",
        json!({
            "command": "doob-check",
            "states": sys.state_count(),
            "q0": q.q0(),
            "entropy_exact": exact,
            "entropy_forward": fwd.entropy,
            "entropy_formula": formula,
            "gap": gap,
            "martingale_gap": martingale,
            "mass_drift": fwd.mass_drift,
        }),
    )?;
    if !(gap <= cfg.tolerance) {
        return Err(CliError::Acceptance(format!("entropy gap {gap} exceeds {}", cfg.tolerance)));
    }
    Ok(summary)
}

// ---- rate-eval ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateEvalConfig {
    field_csv: PathBuf,
    variant: Mobility,
    #[serde(default)]
    truncation_a: Option<f64>,
    r: f64,
    cells: usize,
}

fn rate_eval(ctx: &Context) -> Result<Value, CliError> {
    let cfg: RateEvalConfig = ctx.require()?;
    let field = read_field(ctx, &cfg.field_csv)?;
    let v = RateVariant { variant: cfg.variant, truncation_a: cfg.truncation_a };
    let value = rate_functional(&field, v, cfg.r, cfg.cells).map_err(bad)?;
    Artifacts::new(ctx)?.json(
        "rate.json",
        json!({
            "command": "rate-eval",
            "variant": v,
            "r": cfg.r,
            "cells": cfg.cells,
            "value": value,
        }),
    )
}

// ---- oneblock ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OneBlockConfig {
    n: u64,
    /// Torus width in sites; defaults to `n`.
    #[serde(default)]
    width: Option<usize>,
    rho: f64,
    t: f64,
    k_list: Vec<usize>,
    /// Constant weight of the statistic.
    #[serde(default = "default_weight")]
    weight: f64,
    #[serde(default)]
    speed: Option<SpeedSpec>,
}

fn default_weight() -> f64 {
    1.0
}

fn oneblock(ctx: &Context) -> Result<Value, CliError> {
    let cfg: OneBlockConfig = ctx.require()?;
    positive("t", cfg.t)?;
    if cfg.n == 0 || cfg.k_list.is_empty() {
        return Err(CliError::Config("n must be positive and k_list nonempty".into()));
    }
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(CliError::Config(format!("density {} outside [0, 1]", cfg.rho)));
    }
    let width = cfg.width.unwrap_or(cfg.n as usize);
    let speed = cfg.speed.as_ref().unwrap_or(&SpeedSpec::Constant(1.0)).build(cfg.t)?;
    let reps = ctx.replicas_or(20);
    let mut rows = Vec::new();
    for &k in &cfg.k_list {
        let vals: Vec<f64> = (0..reps as u64)
            .into_par_iter()
            .map(|rep| -> Result<f64, CliError> {
                let h = torus(0, &bernoulli_bits(width, cfg.rho, rep_seed(ctx.seed, 3, rep))).map_err(internal)?;
                let mut ob = OneBlock::new(&h, cfg.n, k, BlockWeight::Constant(cfg.weight)).map_err(bad)?;
                simulate(&h, &RunSpec::new(&speed, cfg.t, cfg.n, rep_seed(ctx.seed, 4, rep)), &mut ob)
                    .map_err(internal)?;
                Ok(ob.value.abs() / cfg.n as f64)
            })
            .collect::<Result<_, _>>()?;
        let (m, se) = mean_and_se(&vals);
        rows.push(vec![k as f64, m, se]);
    }
    let arts = Artifacts::new(ctx)?;
    arts.csv_rows("oneblock.csv", &["k", "mean_abs_value", "std_error"], &rows)?;
    arts.json(
        "summary.json",
        json!({
            "command": "oneblock",
            "replicas": reps,
            "k_list": cfg.k_list,
            "mean_abs_value": rows.iter().map(|r| r[1]).collect::<Vec<_>>(),
            "std_error": rows.iter().map(|r| r[2]).collect::<Vec<_>>(),
        }),
    )
}
