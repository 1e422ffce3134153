//! Speed functions: positive, piecewise-constant modulations of the clock rates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpeedError {
    #[error("time {t} outside [0, {horizon})")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("malformed speed function: {0}")]
    Malformed(String),
}

/// Relative tolerance used to decide that a point sits on a discontinuity.
pub const EDGE_TOL: f64 = 1e-12;

/// A piecewise-constant profile in `xi`: `values[i]` holds on `(breaks[i-1], breaks[i])`,
/// with `values[0]` and `values[len-1]` on the two tails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedProfile {
    pub xi_breaks: Vec<f64>,
    pub values: Vec<f64>,
}

impl SpeedProfile {
    pub fn constant(v: f64) -> Self {
        Self { xi_breaks: Vec::new(), values: vec![v] }
    }

    pub fn validate(&self) -> Result<(), SpeedError> {
        if self.values.len() != self.xi_breaks.len() + 1 {
            return Err(SpeedError::Malformed(format!(
                "{} values for {} breaks",
                self.values.len(),
                self.xi_breaks.len()
            )));
        }
        if self.xi_breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SpeedError::Malformed("xi breaks must increase strictly".into()));
        }
        if self.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(SpeedError::Malformed("speed values must be positive and finite".into()));
        }
        Ok(())
    }

    /// Lower-semicontinuous lookup: on a break the smaller one-sided value is returned.
    pub fn at(&self, xi: f64) -> f64 {
        let b = &self.xi_breaks;
        let i = b.partition_point(|&p| p < xi);
        let tol = EDGE_TOL * (1.0 + xi.abs());
        let mut v = self.values[i];
        if i < b.len() && (b[i] - xi).abs() <= tol {
            v = v.min(self.values[i + 1]);
        }
        if i > 0 && (xi - b[i - 1]).abs() <= tol {
            v = v.min(self.values[i - 1]);
        }
        v
    }

    /// Merges equal neighbouring values.
    pub fn compress(mut self) -> Self {
        let mut breaks = Vec::with_capacity(self.xi_breaks.len());
        let mut values = vec![self.values[0]];
        for (i, &p) in self.xi_breaks.iter().enumerate() {
            let v = self.values[i + 1];
            if v != *values.last().unwrap() {
                breaks.push(p);
                values.push(v);
            }
        }
        self.xi_breaks = breaks;
        self.values = values;
        self
    }
}

/// Interface shared by the simulator, the Hopf–Lax solver and the entropy estimators.
pub trait SpeedField: Send + Sync {
    /// Value at macroscopic `(t, xi)`; lower semicontinuous in `xi`, right-continuous in `t`.
    fn value(&self, t: f64, xi: f64) -> f64;
    fn lambda_max(&self) -> f64;
    fn lambda_min(&self) -> f64;
    /// Times in `(0, horizon)` where the spatial profile may change.
    fn time_breaks(&self) -> Vec<f64>;
    /// Spatial profile at time `t`.
    fn profile(&self, t: f64) -> SpeedProfile;
    fn label(&self) -> String;

    /// `∫_{ta}^{tb} g(speed(t, xi)) dt`, exact for profiles that are constant between time breaks.
    fn integrate_time(&self, xi: f64, ta: f64, tb: f64, g: &dyn Fn(f64) -> f64) -> f64 {
        if tb <= ta {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut a = ta;
        for tbk in self.time_breaks() {
            if tbk <= a {
                continue;
            }
            if tbk >= tb {
                break;
            }
            acc += (tbk - a) * g(self.value(a, xi));
            a = tbk;
        }
        acc + (tb - a) * g(self.value(a, xi))
    }
}

/// A homogeneous speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantSpeed(pub f64);

impl SpeedField for ConstantSpeed {
    fn value(&self, _t: f64, _xi: f64) -> f64 {
        self.0
    }
    fn lambda_max(&self) -> f64 {
        self.0
    }
    fn lambda_min(&self) -> f64 {
        self.0
    }
    fn time_breaks(&self) -> Vec<f64> {
        Vec::new()
    }
    fn profile(&self, _t: f64) -> SpeedProfile {
        SpeedProfile::constant(self.0)
    }
    fn label(&self) -> String {
        format!("constant {}", self.0)
    }
    fn integrate_time(&self, _xi: f64, ta: f64, tb: f64, g: &dyn Fn(f64) -> f64) -> f64 {
        (tb - ta).max(0.0) * g(self.0)
    }
}

/// Piecewise constant in time, with a finitely-discontinuous spatial profile on each time row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimpleSpeed {
    /// `0 = t_0 < ... < t_q = T`.
    pub t_breaks: Vec<f64>,
    /// One profile per time row `[t_i, t_{i+1})`.
    pub profiles: Vec<SpeedProfile>,
}

impl SimpleSpeed {
    pub fn new(t_breaks: Vec<f64>, profiles: Vec<SpeedProfile>) -> Result<Self, SpeedError> {
        let s = Self { t_breaks, profiles };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(lambda: f64, horizon: f64) -> Self {
        Self { t_breaks: vec![0.0, horizon], profiles: vec![SpeedProfile::constant(lambda)] }
    }

    pub fn validate(&self) -> Result<(), SpeedError> {
        if self.t_breaks.len() != self.profiles.len() + 1 || self.profiles.is_empty() {
            return Err(SpeedError::Malformed("need one profile per time row".into()));
        }
        if self.t_breaks[0] != 0.0 || self.t_breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SpeedError::Malformed("time breaks must start at 0 and increase".into()));
        }
        self.profiles.iter().try_for_each(SpeedProfile::validate)
    }

    pub fn horizon(&self) -> f64 {
        *self.t_breaks.last().unwrap()
    }

    fn row(&self, t: f64) -> usize {
        let i = self.t_breaks.partition_point(|&b| b <= t);
        i.saturating_sub(1).min(self.profiles.len() - 1)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("speed serializes")
    }
}

impl SpeedField for SimpleSpeed {
    fn value(&self, t: f64, xi: f64) -> f64 {
        self.profiles[self.row(t)].at(xi)
    }
    fn lambda_max(&self) -> f64 {
        self.profiles.iter().flat_map(|p| p.values.iter().copied()).fold(0.0, f64::max)
    }
    fn lambda_min(&self) -> f64 {
        self.profiles.iter().flat_map(|p| p.values.iter().copied()).fold(f64::INFINITY, f64::min)
    }
    fn time_breaks(&self) -> Vec<f64> {
        self.t_breaks[1..self.t_breaks.len() - 1].to_vec()
    }
    fn profile(&self, t: f64) -> SpeedProfile {
        self.profiles[self.row(t)].clone()
    }
    fn label(&self) -> String {
        format!("simple speed with {} time rows", self.profiles.len())
    }
    fn integrate_time(&self, xi: f64, ta: f64, tb: f64, g: &dyn Fn(f64) -> f64) -> f64 {
        if tb <= ta {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut r = self.row(ta);
        let mut a = ta;
        loop {
            let end = if r + 1 < self.profiles.len() { self.t_breaks[r + 1].min(tb) } else { tb };
            acc += (end - a) * g(self.profiles[r].at(xi));
            if end >= tb {
                return acc;
            }
            a = end;
            r += 1;
        }
    }
}

/// Lookup with the domain check of the public contract: `t` must lie in `[0, T)`.
pub fn evaluate(s: &SimpleSpeed, t: f64, xi: f64) -> Result<f64, SpeedError> {
    if !(t >= 0.0 && t < s.horizon()) {
        return Err(SpeedError::TimeOutOfRange { t, horizon: s.horizon() });
    }
    Ok(s.value(t, xi))
}
