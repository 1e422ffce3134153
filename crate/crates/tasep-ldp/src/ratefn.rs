//! Poisson rate functions, mobility bounds, local and global rate functionals,
//! the dyadic time functional and the Hopf–Lax kernel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{LatticeError, MacroField};

#[derive(Debug, Error, PartialEq)]
pub enum RateError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("path rejected: {0}")]
    Path(#[from] LatticeError),
}

/// `x log x` with the analytic limit 0 at 0.
#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Rate function of a Poisson variable with mean `u`, evaluated at `lambda`.
pub fn poisson_rate(lambda: f64, u: f64) -> Result<f64, RateError> {
    if !(u > 0.0) || !u.is_finite() {
        return Err(RateError::Domain(format!("reference rate must be positive, got {u}")));
    }
    if !(lambda >= 0.0) {
        return Err(RateError::Domain(format!("rate must be nonnegative, got {lambda}")));
    }
    if lambda.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(unit_rate(lambda / u) * u)
}

/// `lambda log lambda - lambda + 1` for `lambda >= 0`.
#[inline]
pub fn unit_rate(lambda: f64) -> f64 {
    if lambda == 1.0 {
        return 0.0;
    }
    (xlogx(lambda) - lambda + 1.0).max(0.0)
}

/// The unit-rate function truncated below one: zero on `[0,1]`.
#[inline]
pub fn poisson_rate_trunc(lambda: f64) -> f64 {
    if lambda <= 1.0 {
        0.0
    } else if lambda.is_infinite() {
        f64::INFINITY
    } else {
        unit_rate(lambda)
    }
}

/// Which mobility bound enters the local rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Mobility {
    /// `rho ∧ (1 - rho)`.
    Min,
    /// `rho (1 - rho)`.
    Product,
}

impl TryFrom<u8> for Mobility {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Mobility::Min),
            2 => Ok(Mobility::Product),
            _ => Err(format!("variant must be 1 or 2, got {v}")),
        }
    }
}

impl From<Mobility> for u8 {
    fn from(m: Mobility) -> u8 {
        match m {
            Mobility::Min => 1,
            Mobility::Product => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateVariant {
    pub variant: Mobility,
    #[serde(default)]
    pub truncation_a: Option<f64>,
}

impl RateVariant {
    pub fn min() -> Self {
        Self { variant: Mobility::Min, truncation_a: None }
    }

    pub fn product() -> Self {
        Self { variant: Mobility::Product, truncation_a: None }
    }

    pub fn truncated(self, a: f64) -> Result<Self, RateError> {
        if !(a > 0.0 && a < 0.5) {
            return Err(RateError::Domain(format!("truncation level must lie in (0, 1/2), got {a}")));
        }
        Ok(Self { truncation_a: Some(a), ..self })
    }

    pub fn validate(&self) -> Result<(), RateError> {
        match self.truncation_a {
            Some(a) if !(a > 0.0 && a < 0.5) => {
                Err(RateError::Domain(format!("truncation level must lie in (0, 1/2), got {a}")))
            }
            _ => Ok(()),
        }
    }
}

/// The mobility bound `Phi(rho)` selected by `v`, truncated when `v` carries a level.
pub fn mobility_bound(rho: f64, v: RateVariant) -> f64 {
    match (v.variant, v.truncation_a) {
        (Mobility::Min, None) => rho.min(1.0 - rho),
        (Mobility::Product, None) => rho * (1.0 - rho),
        (Mobility::Min, Some(a)) => (1.0 - a * a) * rho.min(1.0 - rho) + a * a,
        (Mobility::Product, Some(a)) => {
            if rho < a {
                a * (1.0 - a) + (1.0 - 2.0 * a) * (rho - a)
            } else if rho > 1.0 - a {
                a * (1.0 - a) + (2.0 * a - 1.0) * (rho - (1.0 - a))
            } else {
                rho * (1.0 - rho)
            }
        }
    }
}

/// `phi * trunc_rate(kappa / phi)`, with the conventions at `phi = 0`.
#[inline]
pub fn scaled_rate(kappa: f64, phi: f64) -> f64 {
    if phi <= 0.0 {
        return if kappa > 0.0 { f64::INFINITY } else { 0.0 };
    }
    if kappa <= phi {
        return 0.0;
    }
    // phi * (x log x - x + 1) with x = kappa/phi, written to avoid cancellation for small phi.
    kappa * (kappa / phi).ln() - kappa + phi
}

/// Local rate `Phi(rho) * trunc_rate(kappa / Phi(rho))`.
pub fn local_rate(kappa: f64, rho: f64, v: RateVariant) -> f64 {
    scaled_rate(kappa, mobility_bound(rho, v))
}

/// `sup_{alpha >= 0} { kappa alpha - phi (e^alpha - 1) }`, evaluated at its maximiser.
pub fn sup_representation(kappa: f64, phi: f64) -> f64 {
    let alpha = (kappa / phi).max(1.0).ln();
    kappa * alpha - phi * alpha.exp_m1()
}

/// Hopf–Lax kernel: `0` for `v <= -1`, `(v+1)^2/4` on `(-1,1)`, `v` for `v >= 1`.
#[inline]
pub fn kernel_hlf(v: f64) -> f64 {
    if v <= -1.0 {
        0.0
    } else if v >= 1.0 {
        v
    } else {
        0.25 * (v + 1.0) * (v + 1.0)
    }
}

/// Exact integral over `[a, b]` of the piecewise-linear interpolant of `row` on a uniform grid.
pub(crate) fn integrate_interp(start: f64, step: f64, row: &[f64], a: f64, b: f64) -> f64 {
    let n = row.len();
    let value = |x: f64| -> f64 {
        let r = ((x - start) / step).clamp(0.0, (n - 1) as f64);
        let i = (r.floor() as usize).min(n.saturating_sub(2));
        if n == 1 {
            return row[0];
        }
        let w = r - i as f64;
        row[i] * (1.0 - w) + row[i + 1] * w
    };
    let ia = ((a - start) / step).floor().max(0.0) as usize + 1;
    let mut pts = vec![a];
    let mut i = ia;
    while i < n && start + i as f64 * step < b {
        let x = start + i as f64 * step;
        if x > a {
            pts.push(x);
        }
        i += 1;
    }
    pts.push(b);
    pts.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (value(w[0]) + value(w[1]))).sum()
}

fn interp_row(f: &MacroField, t: f64) -> Vec<f64> {
    let r = ((t - f.t.start) / f.t.step).clamp(0.0, (f.t.len - 1) as f64);
    if f.t.len == 1 {
        return f.row(0).to_vec();
    }
    let i = (r.floor() as usize).min(f.t.len - 2);
    let w = r - i as f64;
    f.row(i).iter().zip(f.row(i + 1)).map(|(a, b)| a * (1.0 - w) + b * w).collect()
}

fn interp_column(f: &MacroField, xi: f64) -> Vec<f64> {
    (0..f.t.len)
        .map(|i| {
            let s = f.slice(i);
            s.at(xi).unwrap_or(f64::NAN)
        })
        .collect()
}

/// Sum over an `ell x 2 ell` partition of `[0,T] x [-r,r]` of `|cell| * J(avg h_t, avg h_xi)`.
///
/// Cell averages of the derivatives are computed exactly for the bilinear interpolant.
pub fn rate_functional(path: &MacroField, v: RateVariant, r: f64, cells: usize) -> Result<f64, RateError> {
    v.validate()?;
    if cells == 0 {
        return Err(RateError::Domain("cells must be positive".into()));
    }
    path.check_path(1e-9)?;
    if path.xi.start > -r + 1e-9 || path.xi.end() < r - 1e-9 {
        return Err(RateError::Domain(format!("field does not cover [-{r}, {r}]")));
    }
    let t0 = path.t.start;
    let big_t = path.t.end() - t0;
    let dt = big_t / cells as f64;
    let dx = r / cells as f64;
    let rows: Vec<Vec<f64>> = (0..=cells).map(|i| interp_row(path, t0 + i as f64 * dt)).collect();
    let cols: Vec<Vec<f64>> = (0..=2 * cells).map(|j| interp_column(path, -r + j as f64 * dx)).collect();
    let mut total = 0.0;
    for i in 0..cells {
        let (ta, tb) = (t0 + i as f64 * dt, t0 + (i + 1) as f64 * dt);
        for j in 0..2 * cells {
            let (xa, xb) = (-r + j as f64 * dx, -r + (j + 1) as f64 * dx);
            let top = integrate_interp(path.xi.start, path.xi.step, &rows[i + 1], xa, xb);
            let bot = integrate_interp(path.xi.start, path.xi.step, &rows[i], xa, xb);
            let right = integrate_interp(path.t.start, path.t.step, &cols[j + 1], ta, tb);
            let left = integrate_interp(path.t.start, path.t.step, &cols[j], ta, tb);
            let area = dt * dx;
            let kappa = ((top - bot) / area).max(0.0);
            let rho = ((right - left) / area).clamp(0.0, 1.0);
            let j_val = local_rate(kappa, rho, v);
            if j_val.is_infinite() {
                return Ok(f64::INFINITY);
            }
            total += area * j_val;
        }
    }
    Ok(total)
}

/// `sum_i (T/2^n) trunc_rate((h(s_i, xi) - h(s_{i-1}, xi)) / (T/2^n))` on the dyadic times `s_i`.
pub fn dyadic_time_functional(path: &MacroField, n: u32, xi: f64) -> Result<f64, RateError> {
    let parts = 1usize << n;
    let cells = path.t.len - 1;
    if cells % parts != 0 {
        return Err(RateError::Domain(format!("2^{n} does not divide the {cells} time cells")));
    }
    let stride = cells / parts;
    let step = (path.t.end() - path.t.start) / parts as f64;
    let col = interp_column(path, xi);
    if col[0].is_nan() {
        return Err(RateError::Domain(format!("xi = {xi} is outside the field")));
    }
    Ok((1..=parts).map(|i| step * poisson_rate_trunc((col[i * stride] - col[(i - 1) * stride]) / step)).sum())
}

/// Trapezoidal integral over the field's `xi` nodes in `[-r, r]` of the dyadic functional.
pub fn dyadic_functional_integral(path: &MacroField, n: u32, r: f64) -> Result<f64, RateError> {
    let mut vals = Vec::new();
    for j in 0..path.xi.len {
        let x = path.xi.at(j);
        if x.abs() <= r + 1e-12 {
            vals.push(dyadic_time_functional(path, n, x)?);
        }
    }
    Ok(vals.windows(2).map(|w| 0.5 * path.xi.step * (w[0] + w[1])).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::UniformGrid;

    const C2: f64 = 0.386_294_361_119_890_6; // 2 ln 2 - 1

    #[test]
    fn poisson_examples() {
        assert_eq!(poisson_rate(1.0, 1.0).unwrap(), 0.0);
        assert!((poisson_rate(2.0, 1.0).unwrap() - C2).abs() < 1e-15);
        assert_eq!(poisson_rate(0.0, 1.0).unwrap(), 1.0);
        assert!(poisson_rate(1.0, 0.0).is_err());
        assert_eq!(poisson_rate_trunc(0.5), 0.0);
        assert_eq!(poisson_rate_trunc(1.0), 0.0);
        assert!((poisson_rate_trunc(2.0) - C2).abs() < 1e-15);
    }

    #[test]
    fn mobility_examples() {
        assert_eq!(mobility_bound(0.5, RateVariant::product()), 0.25);
        let v1 = RateVariant::min().truncated(0.1).unwrap();
        assert!((mobility_bound(0.0, v1) - 0.01).abs() < 1e-15);
        let v2 = RateVariant::product().truncated(0.1).unwrap();
        assert!((mobility_bound(0.05, v2) - 0.05).abs() < 1e-15);
        assert!(RateVariant::product().truncated(0.5).is_err());
    }

    #[test]
    fn local_rate_examples() {
        assert_eq!(local_rate(0.25, 0.5, RateVariant::product()), 0.0);
        assert!((local_rate(0.5, 0.5, RateVariant::product()) - 0.25 * C2).abs() < 1e-15);
        assert_eq!(local_rate(0.1, 0.0, RateVariant::min()), f64::INFINITY);
        assert_eq!(local_rate(0.0, 1.0, RateVariant::min()), 0.0);
        assert!(local_rate(0.1, 0.0, RateVariant::min().truncated(0.1).unwrap()).is_finite());
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(kernel_hlf(-1.0), 0.0);
        assert_eq!(kernel_hlf(0.0), 0.25);
        assert_eq!(kernel_hlf(1.0), 1.0);
        assert_eq!(kernel_hlf(-3.0), 0.0);
        assert_eq!(kernel_hlf(2.5), 2.5);
    }

    fn field(f: impl Fn(f64, f64) -> f64) -> MacroField {
        MacroField::from_fn(UniformGrid::spanning(0.0, 1.0, 0.125), UniformGrid::spanning(-1.0, 1.0, 0.125), f)
    }

    #[test]
    fn rate_functional_examples() {
        let zero = field(|t, x| 0.25 * t + 0.5 * x);
        assert_eq!(rate_functional(&zero, RateVariant::product(), 1.0, 4).unwrap(), 0.0);
        let tilted = field(|t, x| 0.5 * t + 0.5 * x);
        let a = rate_functional(&tilted, RateVariant::product(), 1.0, 4).unwrap();
        assert!((a - 2.0 * 0.25 * C2).abs() < 1e-12);
        let b = rate_functional(&tilted, RateVariant::product(), 1.0, 8).unwrap();
        assert!((a - b).abs() < 1e-6);
        let bad = field(|t, x| 0.5 * t + 1.5 * x);
        assert!(rate_functional(&bad, RateVariant::product(), 1.0, 4).is_err());
    }

    #[test]
    fn dyadic_examples() {
        let slow = field(|t, _| 0.7 * t);
        for n in 0..4 {
            assert_eq!(dyadic_time_functional(&slow, n, 0.3).unwrap(), 0.0);
        }
        let fast = field(|t, _| 2.0 * t);
        for n in 0..4 {
            assert!((dyadic_time_functional(&fast, n, 0.0).unwrap() - C2).abs() < 1e-12);
        }
        assert!(dyadic_time_functional(&fast, 4, 0.0).is_err());
    }

    #[test]
    fn sup_form_matches() {
        for &(k, p) in &[(0.5, 0.25), (0.1, 0.25), (2.0, 0.01), (0.3, 0.3)] {
            assert!((sup_representation(k, p) - scaled_rate(k, p)).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_integral_partial_cells() {
        let row = [0.0, 1.0, 1.0, 3.0];
        let v = integrate_interp(0.0, 1.0, &row, 0.5, 2.5);
        // pieces: [0.5,1]: avg 0.75 -> 0.375; [1,2]: 1; [2,2.5]: avg (1+2)/2 -> 0.75
        assert!((v - 2.125).abs() < 1e-14);
    }
}
