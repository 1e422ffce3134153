//! Variational solver for `h_t = speed * h_xi (1 - h_xi)`: the action of a path, a
//! semi-Lagrangian dynamic program over a space-time grid, explicit piecewise-linear
//! solutions and backward light cones.

use rayon::prelude::*;
use thiserror::Error;

use crate::lattice::{LatticeError, MacroField, MacroSlice, Triplet, UniformGrid};
use crate::ratefn::kernel_hlf;
use crate::speed::{SpeedError, SpeedField, SpeedProfile};

#[derive(Debug, Error, PartialEq)]
pub enum HopfLaxError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Speed(#[from] SpeedError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Piecewise-linear path through knots `(t, xi)` with strictly increasing `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    knots: Vec<(f64, f64)>,
}

impl Polyline {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, HopfLaxError> {
        if knots.len() < 2 {
            return Err(HopfLaxError::Domain("a path needs at least two knots".into()));
        }
        if knots.windows(2).any(|w| !(w[0].0 < w[1].0)) || knots.iter().any(|k| !k.0.is_finite() || !k.1.is_finite()) {
            return Err(HopfLaxError::Domain("knot times must increase strictly".into()));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn start(&self) -> f64 {
        self.knots[0].0
    }

    pub fn end(&self) -> f64 {
        self.knots[self.knots.len() - 1].0
    }

    pub fn at(&self, t: f64) -> Option<f64> {
        if t < self.start() || t > self.end() {
            return None;
        }
        let i = self.knots.partition_point(|k| k.0 <= t).clamp(1, self.knots.len() - 1);
        let ((ta, xa), (tb, xb)) = (self.knots[i - 1], self.knots[i]);
        Some(xa + (xb - xa) * (t - ta) / (tb - ta))
    }
}

/// Backward light cone `{t <= t0, |xi - xi0| <= slope (t0 - t)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightCone {
    pub apex_t: f64,
    pub apex_xi: f64,
    pub slope: f64,
}

impl LightCone {
    pub fn contains(&self, t: f64, xi: f64) -> bool {
        let tol = 1e-12 * (1.0 + self.apex_xi.abs() + self.slope * self.apex_t.abs());
        t <= self.apex_t && (xi - self.apex_xi).abs() <= self.slope * (self.apex_t - t) + tol
    }

    /// The cone truncated below at time `s0`.
    pub fn contains_after(&self, s0: f64, t: f64, xi: f64) -> bool {
        t >= s0 && self.contains(t, xi)
    }

    /// Half-width of the cone's section at time `t`.
    pub fn radius_at(&self, t: f64) -> f64 {
        self.slope * (self.apex_t - t).max(0.0)
    }
}

pub fn light_cone(t0: f64, xi0: f64, lambda_max: f64) -> LightCone {
    debug_assert!(lambda_max > 0.0);
    LightCone { apex_t: t0, apex_xi: xi0, slope: lambda_max }
}

/// `∫ speed(s, w(s)) hlf(w'(s) / speed(s, w(s))) ds` over `[t1, t2]`, split at every time
/// break and every spatial break of the speed crossed by the path.
pub fn action_functional(w: &Polyline, speed: &dyn SpeedField, t1: f64, t2: f64) -> Result<f64, HopfLaxError> {
    if t1 < w.start() - 1e-12 || t2 > w.end() + 1e-12 || t2 < t1 {
        return Err(HopfLaxError::Domain(format!(
            "path is defined on [{}, {}], not on [{t1}, {t2}]",
            w.start(),
            w.end()
        )));
    }
    let tbreaks = speed.time_breaks();
    let mut total = 0.0;
    for seg in w.knots.windows(2) {
        let ((ka, xa), (kb, xb)) = (seg[0], seg[1]);
        let (ta, tb) = (ka.max(t1), kb.min(t2));
        if tb <= ta {
            continue;
        }
        let v = (xb - xa) / (kb - ka);
        let pos = |t: f64| xa + v * (t - ka);
        let mut cuts = vec![ta, tb];
        cuts.extend(tbreaks.iter().copied().filter(|&s| s > ta && s < tb));
        cuts.sort_by(f64::total_cmp);
        for row in cuts.windows(2) {
            let (ra, rb) = (row[0], row[1]);
            let prof = speed.profile(0.5 * (ra + rb));
            let mut sub = vec![ra, rb];
            if v != 0.0 {
                let (lo, hi) = {
                    let (p, q) = (pos(ra), pos(rb));
                    (p.min(q), p.max(q))
                };
                for &p in prof.xi_breaks.iter().filter(|&&p| p > lo && p < hi) {
                    sub.push(ka + (p - xa) / v);
                }
                sub.sort_by(f64::total_cmp);
            }
            for piece in sub.windows(2) {
                let dt = piece[1] - piece[0];
                if dt <= 0.0 {
                    continue;
                }
                let lam = prof.at(pos(0.5 * (piece[0] + piece[1])));
                if !(lam > 0.0) {
                    return Err(HopfLaxError::Domain(format!("speed {lam} is not positive along the path")));
                }
                total += dt * lam * kernel_hlf(v / lam);
            }
        }
    }
    Ok(total)
}

/// Grid and domain of a dynamic-programming solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveGrid {
    pub dt: f64,
    pub dxi: f64,
    /// Final time.
    pub t_end: f64,
    /// The computation runs on `[-half_width, half_width]`.
    pub half_width: f64,
    /// Output is reported on `[-report_radius, report_radius]`.
    pub report_radius: f64,
}

impl SolveGrid {
    /// Smallest admissible computational half-width for the given reporting radius.
    pub fn closure_half_width(report_radius: f64, horizon: f64, lambda_bar: f64, dt: f64) -> f64 {
        report_radius + horizon * lambda_bar + lambda_bar * dt
    }

    fn validate(&self, s0: f64, speed: &dyn SpeedField) -> Result<(usize, usize, usize), HopfLaxError> {
        let bad = |m: String| Err(HopfLaxError::Config(m));
        if !(self.dt > 0.0 && self.dxi > 0.0) {
            return bad("grid steps must be positive".into());
        }
        if !(self.t_end > s0) {
            return bad(format!("final time {} must exceed the start time {s0}", self.t_end));
        }
        let steps = (self.t_end - s0) / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return bad(format!("time step {} does not divide [{s0}, {}]", self.dt, self.t_end));
        }
        let cells = self.half_width / self.dxi;
        let rcells = self.report_radius / self.dxi;
        if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0)
            || (rcells - rcells.round()).abs() > 1e-9 * rcells.max(1.0)
        {
            return bad("both radii must be multiples of the space step".into());
        }
        let lam = speed.lambda_max();
        let need = SolveGrid::closure_half_width(self.report_radius, self.t_end - s0, lam, self.dt);
        if self.half_width < need - 1e-9 * need {
            return bad(format!(
                "half-width {} is below the light-cone closure bound {need} (report radius {}, speed bound {lam})",
                self.half_width, self.report_radius
            ));
        }
        for tb in speed.time_breaks() {
            if tb <= s0 || tb >= self.t_end {
                continue;
            }
            let k = (tb - s0) / self.dt;
            if (k - k.round()).abs() > 1e-7 {
                return bad(format!("time step {} is not aligned with the speed break at t = {tb}", self.dt));
            }
        }
        Ok((steps.round() as usize, 2 * cells.round() as usize + 1, rcells.round() as usize))
    }
}

/// Extends a slice beyond its grid with its end slopes clamped to `[0, 1]`.
pub fn extend_slice(f0: &MacroSlice) -> impl Fn(f64) -> f64 + '_ {
    let n = f0.values.len();
    let (lo, hi) = (f0.xi.start, f0.xi.end());
    let (sl, sr) = if n >= 2 {
        (
            ((f0.values[1] - f0.values[0]) / f0.xi.step).clamp(0.0, 1.0),
            ((f0.values[n - 1] - f0.values[n - 2]) / f0.xi.step).clamp(0.0, 1.0),
        )
    } else {
        (0.0, 0.0)
    };
    move |x: f64| {
        if x < lo {
            f0.values[0] + sl * (x - lo)
        } else if x > hi {
            f0.values[n - 1] + sr * (x - hi)
        } else {
            f0.at(x).expect("inside the grid")
        }
    }
}

/// Dynamic-programming solution from `f0` at time 0.
pub fn solve(speed: &dyn SpeedField, f0: &MacroSlice, grid: SolveGrid) -> Result<MacroField, HopfLaxError> {
    solve_from(speed, &extend_slice(f0), 0.0, grid)
}

/// Restarted solve on `[s0, T]` from the profile `boundary` at time `s0`.
pub fn solve_localized(
    speed: &dyn SpeedField,
    boundary: &MacroSlice,
    s0: f64,
    grid: SolveGrid,
) -> Result<MacroField, HopfLaxError> {
    solve_from(speed, &extend_slice(boundary), s0, grid)
}

/// Dynamic-programming solution from an initial function given in closed form.
pub fn solve_from(
    speed: &dyn SpeedField,
    f0: &(dyn Fn(f64) -> f64 + Sync),
    s0: f64,
    grid: SolveGrid,
) -> Result<MacroField, HopfLaxError> {
    let (steps, nx, rcells) = grid.validate(s0, speed)?;
    let lam_bar = speed.lambda_max();
    let dx = grid.dxi;
    let x0 = -grid.half_width;
    let reach = lam_bar * grid.dt;
    // Ghost nodes on each side carry the clamped-slope extension used inside the cone.
    let ghost = (reach / dx).ceil() as usize + 1;
    let total = nx + 2 * ghost;
    let xg0 = x0 - ghost as f64 * dx;

    let mut prev: Vec<f64> = (0..nx).map(|j| f0(x0 + j as f64 * dx)).collect();
    let first = nx / 2 - rcells;
    let mut out = Vec::with_capacity((steps + 1) * (2 * rcells + 1));
    out.extend_from_slice(&prev[first..first + 2 * rcells + 1]);
    let mut ext = vec![0.0; total];
    for k in 0..steps {
        let tm = s0 + (k as f64 + 0.5) * grid.dt;
        let prof = speed.profile(tm);
        let sl = ((prev[1] - prev[0]) / dx).clamp(0.0, 1.0);
        let sr = ((prev[nx - 1] - prev[nx - 2]) / dx).clamp(0.0, 1.0);
        for g in 0..ghost {
            ext[g] = prev[0] - sl * (ghost - g) as f64 * dx;
            ext[ghost + nx + g] = prev[nx - 1] + sr * (g + 1) as f64 * dx;
        }
        ext[ghost..ghost + nx].copy_from_slice(&prev);
        let ext_ref = &ext;
        let prof_ref = &prof;
        prev.par_iter_mut().enumerate().for_each(|(j, slot)| {
            let x = x0 + j as f64 * dx;
            *slot = dp_node(ext_ref, xg0, dx, x, reach, grid.dt, prof_ref);
        });
        out.extend_from_slice(&prev[first..first + 2 * rcells + 1]);
    }
    Ok(MacroField {
        t: UniformGrid::new(s0, grid.dt, steps + 1),
        xi: UniformGrid::new(-(rcells as f64) * dx, dx, 2 * rcells + 1),
        values: out,
    })
}

/// `min` over `|x - y| <= reach` of `prev(y) + c hlf((x - y)/c)`, `c = dt * speed((x + y)/2)`,
/// with `prev` the linear interpolant of the extended layer.
fn dp_node(ext: &[f64], xg0: f64, dx: f64, x: f64, reach: f64, dt: f64, prof: &SpeedProfile) -> f64 {
    let (ylo, yhi) = (x - reach, x + reach);
    let mut cuts: Vec<f64> = Vec::with_capacity(16);
    cuts.push(ylo);
    let i_lo = ((ylo - xg0) / dx).floor() as usize + 1;
    let mut i = i_lo;
    loop {
        let y = xg0 + i as f64 * dx;
        if y >= yhi {
            break;
        }
        cuts.push(y);
        i += 1;
    }
    let (mlo, mhi) = (0.5 * (x + ylo), 0.5 * (x + yhi));
    let b = &prof.xi_breaks;
    let start = b.partition_point(|&p| p <= mlo);
    let mut extra = false;
    for &p in &b[start..] {
        if p >= mhi {
            break;
        }
        cuts.push(2.0 * p - x);
        extra = true;
    }
    cuts.push(yhi);
    if extra {
        cuts.sort_by(f64::total_cmp);
    }
    let mut best = f64::INFINITY;
    for w in cuts.windows(2) {
        let (a, e) = (w[0], w[1]);
        if e - a <= 1e-15 * (1.0 + x.abs()) {
            continue;
        }
        let cell = ((0.5 * (a + e) - xg0) / dx).floor() as usize;
        let (ya, yb) = (xg0 + cell as f64 * dx, xg0 + (cell + 1) as f64 * dx);
        let q = (ext[cell + 1] - ext[cell]) / (yb - ya);
        let val_a = ext[cell] + q * (a - ya);
        let mid = 0.5 * (x + 0.5 * (a + e));
        let lam = prof.at(mid);
        let c = dt * lam;
        let (v_lo, v_hi) = ((x - e) / c, (x - a) / c);
        let v = if q < 0.0 {
            v_lo
        } else if q > 1.0 {
            v_hi
        } else {
            (2.0 * q - 1.0).clamp(v_lo, v_hi)
        };
        let y = x - c * v;
        let val = val_a + q * (y - a) + c * kernel_hlf(v);
        if val < best {
            best = val;
        }
    }
    best
}

/// Largest violation of the discrete monotonicity and Lipschitz bounds of a solve output:
/// `0 <= h(t+dt, xi) - h(t, xi) <= lambda_bar dt / 4 + dxi` and `0 <= h(t, xi+dxi) - h(t, xi) <= dxi`.
pub fn bound_violation(field: &MacroField, lambda_bar: f64) -> f64 {
    let (nt, nx) = (field.t.len, field.xi.len);
    let (dt, dx) = (field.t.step, field.xi.step);
    let mut worst: f64 = 0.0;
    for i in 0..nt {
        for j in 0..nx {
            let h = field.get(i, j);
            if j + 1 < nx {
                let d = field.get(i, j + 1) - h;
                worst = worst.max(-d).max(d - dx);
            }
            if i + 1 < nt {
                let d = field.get(i + 1, j) - h;
                worst = worst.max(-d).max(d - lambda_bar * dt / 4.0 - dx);
            }
        }
    }
    worst
}

/// The four configurations with explicit piecewise-linear solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplicitCase {
    /// One gradient everywhere.
    Constant,
    /// Two gradients separated by the line `xi = 0`.
    VerticalCut,
    /// Two gradients separated by the line `xi = slope (t - s0)`.
    DiagonalCut,
    /// Unit speed, densities `rho_minus + rho_plus = 1` with `rho_minus >= rho_plus`.
    Shock,
}

/// Data of an explicit solution. `minus` holds left of the cut, `plus` right of it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitParams {
    pub minus: Triplet,
    pub plus: Triplet,
    /// Slope of the diagonal cut; unused otherwise.
    pub slope: f64,
    /// Value at the origin at the start time.
    pub f_origin: f64,
    #[serde(default)]
    pub s0: f64,
}

impl ExplicitParams {
    pub fn constant(t: Triplet, f_origin: f64) -> Self {
        Self { minus: t, plus: t, slope: 0.0, f_origin, s0: 0.0 }
    }
}

const ID_TOL: f64 = 1e-9;

/// Checks the identities required by `case`, naming the first one that fails.
pub fn check_explicit(case: ExplicitCase, p: &ExplicitParams) -> Result<(), HopfLaxError> {
    let fail = |m: &str| Err(HopfLaxError::Precondition(m.into()));
    for t in [p.minus, p.plus] {
        if !(t.rho >= 0.0 && t.rho <= 1.0 && t.lambda > 0.0) || t.defect() > ID_TOL {
            return fail("kappa = lambda rho (1 - rho) with rho in [0, 1] and lambda > 0");
        }
    }
    match case {
        ExplicitCase::Constant => Ok(()),
        ExplicitCase::VerticalCut => {
            if (p.minus.kappa - p.plus.kappa).abs() > ID_TOL {
                return fail("equal flux across the vertical cut");
            }
            if !(2.0 * p.minus.rho - 1.0 >= -ID_TOL || 2.0 * p.plus.rho - 1.0 <= ID_TOL) {
                return fail("2 rho_minus - 1 >= 0 or 2 rho_plus - 1 <= 0 (no diverging characteristics)");
            }
            Ok(())
        }
        ExplicitCase::DiagonalCut => {
            let s = p.slope;
            if !(s > 0.0) {
                return fail("positive slope of the diagonal cut");
            }
            if ((p.minus.kappa + s * p.minus.rho) - (p.plus.kappa + s * p.plus.rho)).abs() > ID_TOL {
                return fail("kappa + slope * rho equal across the diagonal cut");
            }
            if !(p.minus.velocity() >= s - ID_TOL || p.plus.velocity() <= s + ID_TOL) {
                return fail("characteristic speeds do not straddle the diagonal slope");
            }
            Ok(())
        }
        ExplicitCase::Shock => {
            if (p.minus.lambda - 1.0).abs() > ID_TOL || (p.plus.lambda - 1.0).abs() > ID_TOL {
                return fail("unit speed on both sides of the shock");
            }
            if (p.minus.rho + p.plus.rho - 1.0).abs() > ID_TOL {
                return fail("rho_minus + rho_plus = 1");
            }
            if p.minus.rho < p.plus.rho - ID_TOL {
                return fail("rho_minus >= rho_plus (entropy condition)");
            }
            Ok(())
        }
    }
}

/// The explicit piecewise-linear solution at `(t, xi)`.
pub fn closed_form(case: ExplicitCase, p: &ExplicitParams, t: f64, xi: f64) -> Result<f64, HopfLaxError> {
    check_explicit(case, p)?;
    if t < p.s0 {
        return Err(HopfLaxError::Domain(format!("time {t} precedes the start time {}", p.s0)));
    }
    let dt = t - p.s0;
    let left = match case {
        ExplicitCase::Constant => true,
        ExplicitCase::VerticalCut | ExplicitCase::Shock => xi < 0.0,
        ExplicitCase::DiagonalCut => xi < p.slope * dt,
    };
    let g = if left { p.minus } else { p.plus };
    Ok(p.f_origin + g.kappa * dt + g.rho * xi)
}

/// Speed associated with an explicit case.
pub fn explicit_speed(case: ExplicitCase, p: &ExplicitParams, horizon: f64) -> Box<dyn SpeedField> {
    use crate::speed::{ConstantSpeed, SimpleSpeed};
    match case {
        ExplicitCase::Constant => Box::new(ConstantSpeed(p.minus.lambda)),
        ExplicitCase::Shock => Box::new(ConstantSpeed(1.0)),
        ExplicitCase::VerticalCut => Box::new(SimpleSpeed {
            t_breaks: vec![0.0, horizon],
            profiles: vec![
                SpeedProfile { xi_breaks: vec![0.0], values: vec![p.minus.lambda, p.plus.lambda] }.compress()
            ],
        }),
        ExplicitCase::DiagonalCut => Box::new(TwoPhaseSpeed {
            lambda_minus: p.minus.lambda,
            lambda_plus: p.plus.lambda,
            slope: p.slope,
            xi0: 0.0,
            t0: p.s0,
        }),
    }
}

/// Two speeds separated by the moving line `xi = xi0 + slope (t - t0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPhaseSpeed {
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub slope: f64,
    pub xi0: f64,
    pub t0: f64,
}

impl TwoPhaseSpeed {
    fn line(&self, t: f64) -> f64 {
        self.xi0 + self.slope * (t - self.t0)
    }
}

impl SpeedField for TwoPhaseSpeed {
    fn value(&self, t: f64, xi: f64) -> f64 {
        self.profile(t).at(xi)
    }
    fn lambda_max(&self) -> f64 {
        self.lambda_minus.max(self.lambda_plus)
    }
    fn lambda_min(&self) -> f64 {
        self.lambda_minus.min(self.lambda_plus)
    }
    fn time_breaks(&self) -> Vec<f64> {
        Vec::new()
    }
    fn profile(&self, t: f64) -> SpeedProfile {
        SpeedProfile { xi_breaks: vec![self.line(t)], values: vec![self.lambda_minus, self.lambda_plus] }
    }
    fn label(&self) -> String {
        format!("two-phase speed {} | {} along slope {}", self.lambda_minus, self.lambda_plus, self.slope)
    }
    fn integrate_time(&self, xi: f64, ta: f64, tb: f64, g: &dyn Fn(f64) -> f64) -> f64 {
        if tb <= ta {
            return 0.0;
        }
        // The point is right of the line before the crossing time and left of it after.
        let cross = if self.slope == 0.0 {
            if xi > self.xi0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }
        } else {
            self.t0 + (xi - self.xi0) / self.slope
        };
        let c = cross.clamp(ta, tb);
        (c - ta) * g(self.lambda_plus) + (tb - c) * g(self.lambda_minus)
    }
}
