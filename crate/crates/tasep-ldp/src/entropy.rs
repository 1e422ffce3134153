//! Change-of-measure bookkeeping along trajectories: log-likelihood ratios against the
//! unit-speed process, Monte Carlo relative entropy, and the triangle-sum entropy bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::Triangulation;
use crate::ratefn::poisson_rate_trunc;
use crate::sim::{check_window, replay, SimError, TrajectoryRecord, WindowStats};
use crate::speed::SpeedField;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("no replicas supplied")]
    NoReplicas,
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Split of the entropy bound into the central strip and the tail band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub inner: f64,
    pub tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub mc_estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub replicas: usize,
    pub theoretical_bound: Option<f64>,
    pub breakdown: Option<Breakdown>,
}

impl EntropyReport {
    /// Combines the Monte Carlo fields of `mc` with the bound fields of `bound`.
    pub fn merge(mc: &EntropyReport, bound: &EntropyReport) -> Self {
        Self {
            mc_estimate: mc.mc_estimate,
            std_error: mc.std_error,
            replicas: mc.replicas,
            theoretical_bound: bound.theoretical_bound,
            breakdown: bound.breakdown,
        }
    }
}

/// Replica mean and its standard error (one sample per replica).
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// A site window and macroscopic time range over which trajectory functionals are taken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub lo: i64,
    pub hi: i64,
    pub t1: f64,
    pub t2: f64,
}

impl Window {
    /// Every lattice site of the record, over the full horizon.
    pub fn whole(rec: &TrajectoryRecord) -> Self {
        let lo = rec.initial.x_min();
        Self { lo, hi: lo + rec.initial.sites() as i64 - 1, t1: 0.0, t2: rec.t_macro }
    }
}

/// Replays `rec` and accumulates jump and mobility integrals inside `w`.
pub fn window_stats<'a>(rec: &TrajectoryRecord, speed: &'a dyn SpeedField, w: Window) -> WindowStats<'a> {
    let mut stats = WindowStats::new(speed, rec.n, w.lo, w.hi, w.t1, w.t2);
    replay(rec, &mut stats);
    stats
}

/// `log dQ/dP` of the whole trajectory, where `Q` runs at `speed` and `P` at unit speed.
///
/// A realized jump where the speed vanishes yields `-inf`.
pub fn rn_logdensity(rec: &TrajectoryRecord, speed: &dyn SpeedField) -> f64 {
    window_stats(rec, speed, Window::whole(rec)).log_density()
}

/// Same as [`rn_logdensity`] restricted to a window.
pub fn rn_logdensity_window(rec: &TrajectoryRecord, speed: &dyn SpeedField, w: Window) -> Result<f64, EntropyError> {
    check_range(rec, w)?;
    Ok(window_stats(rec, speed, w).log_density())
}

fn check_range(rec: &TrajectoryRecord, w: Window) -> Result<(), EntropyError> {
    if !(w.t1 >= 0.0 && w.t1 < w.t2 && w.t2 <= rec.t_macro + 1e-12) {
        return Err(EntropyError::Domain(format!("need 0 <= t1 < t2 <= T, got [{}, {}]", w.t1, w.t2)));
    }
    if w.lo > w.hi {
        return Err(EntropyError::Domain(format!("empty site window [{}, {}]", w.lo, w.hi)));
    }
    Ok(())
}

/// `(1/N) Σ_x ∫ mobility · ϖ(speed) dt` over the whole record, averaged over replicas.
pub fn entropy_mc(recs: &[TrajectoryRecord], speed: &dyn SpeedField) -> Result<EntropyReport, EntropyError> {
    let first = recs.first().ok_or(EntropyError::NoReplicas)?;
    let w = Window::whole(first);
    entropy_mc_window(recs, speed, w, 1.0)
}

/// Windowed entropy estimate, divided by `per_length` (e.g. the macroscopic window width
/// to report a density per unit length).
pub fn entropy_mc_window(
    recs: &[TrajectoryRecord],
    speed: &dyn SpeedField,
    w: Window,
    per_length: f64,
) -> Result<EntropyReport, EntropyError> {
    if recs.is_empty() {
        return Err(EntropyError::NoReplicas);
    }
    if !(per_length > 0.0) {
        return Err(EntropyError::Domain(format!("per-length divisor must be positive, got {per_length}")));
    }
    for r in recs {
        check_range(r, w)?;
    }
    let samples: Vec<f64> = recs.par_iter().map(|r| window_stats(r, speed, w).entropy_density() / per_length).collect();
    Ok(mc_report(&samples))
}

/// Report from per-replica entropy samples, e.g. from streaming [`WindowStats`] observers.
pub fn mc_report(samples: &[f64]) -> EntropyReport {
    let (m, se) = mean_and_se(samples);
    EntropyReport {
        mc_estimate: Some(m),
        std_error: Some(se),
        replicas: samples.len(),
        theoretical_bound: None,
        breakdown: None,
    }
}

/// Triangle sums: `|△| ρ(1-ρ) ϖ̄(λ)` inside `[-r_star, r_star]`, plus `|△| ϖ̄(λ)` on the
/// band out to `r_upper`.
pub fn entropy_bound(tri: &Triangulation, r_star: f64, r_upper: f64) -> EntropyReport {
    let tol = 1e-9 * (1.0 + r_upper.abs());
    let area = tri.area();
    let mut inner = 0.0;
    let mut tail = 0.0;
    for t in &tri.triangles {
        let a = tri.column_left(t.column);
        let b = a + tri.b;
        let cost = poisson_rate_trunc(t.triplet.lambda);
        if cost == 0.0 {
            continue;
        }
        if a >= -r_star - tol && b <= r_star + tol {
            inner += area * t.triplet.rho * (1.0 - t.triplet.rho) * cost;
        } else if a >= -r_upper - tol && b <= r_upper + tol {
            tail += area * cost;
        }
    }
    EntropyReport {
        mc_estimate: None,
        std_error: None,
        replicas: 0,
        theoretical_bound: Some(inner + tail),
        breakdown: Some(Breakdown { inner, tail }),
    }
}

/// Discrepancy, in units of the pooled standard error, between the replica means of the
/// height increase and of its compensator `∫ speed · mobility dt` over a window.
pub fn flux_identity_check(
    recs: &[TrajectoryRecord],
    speed: &dyn SpeedField,
    window: (i64, i64),
    t1: f64,
    t2: f64,
) -> Result<f64, EntropyError> {
    if recs.is_empty() {
        return Err(EntropyError::NoReplicas);
    }
    let w = Window { lo: window.0, hi: window.1, t1, t2 };
    for r in recs {
        check_window(r, window)?;
        check_range(r, w)?;
    }
    let pairs: Vec<(f64, f64)> = recs
        .par_iter()
        .map(|r| {
            let s = window_stats(r, speed, w);
            (s.flux(), s.flux_compensator())
        })
        .collect();
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (ma, sa) = mean_and_se(&a);
    let (mb, sb) = mean_and_se(&b);
    let diff = (ma - mb).abs();
    let se = (sa * sa + sb * sb).sqrt();
    if diff == 0.0 {
        return Ok(0.0);
    }
    Ok(if se > 0.0 { diff / se } else { f64::INFINITY })
}
