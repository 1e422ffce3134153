//! Lattice height profiles, occupation fields, macroscopic fields, metrics,
//! moduli of continuity, locality envelopes and triangulations of
//! piecewise-linear deviations.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("gradient {diff} at site {x} is outside {{0,1}}")]
    Gradient { x: i64, diff: i64 },
    #[error("window must contain at least {min} sites, got {got}")]
    WindowTooSmall { min: usize, got: usize },
    #[error("site {x} needs neighbours inside the window [{lo}, {hi}]: insufficient margin")]
    OutOfWindow { x: i64, lo: i64, hi: i64 },
    #[error("torus profile has negative particle count {0}")]
    TorusCount(i64),
    #[error("grids are incompatible: {0}")]
    Resample(String),
    #[error("field violates the path-space constraints: {0}")]
    NotAPath(String),
    #[error("triangulation: {0}")]
    Triangulation(String),
    #[error("triangle {id} is degenerate: {reason}")]
    Degenerate { id: usize, reason: String },
    #[error("field is not piecewise linear on triangle {id} (deviation {dev:e})")]
    NotPiecewiseLinear { id: usize, dev: f64 },
    #[error("io: {0}")]
    Io(String),
}

/// Boundary behaviour of a finite height window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// The window `[x_min, x_max]` is a period; `h(x_max) - h(x_min)` is the particle count.
    Torus,
    /// Sites beyond the window are frozen; the densities describe the frozen continuation.
    Frozen { left_density: f64, right_density: f64 },
}

/// Integer heights on `[x_min, x_max]` with increments in {0,1}.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightProfile {
    x_min: i64,
    values: Vec<i64>,
    boundary: Boundary,
}

impl HeightProfile {
    pub fn new(x_min: i64, values: Vec<i64>, boundary: Boundary) -> Result<Self, LatticeError> {
        let min = if matches!(boundary, Boundary::Torus) { 3 } else { 1 };
        if values.len() < min {
            return Err(LatticeError::WindowTooSmall { min, got: values.len() });
        }
        for (i, w) in values.windows(2).enumerate() {
            let diff = w[1] - w[0];
            if diff != 0 && diff != 1 {
                return Err(LatticeError::Gradient { x: x_min + i as i64, diff });
            }
        }
        Ok(Self { x_min, values, boundary })
    }

    /// Frozen profile from a closure, with boundary densities read off the end increments.
    pub fn from_fn(x_min: i64, x_max: i64, f: impl Fn(i64) -> i64) -> Result<Self, LatticeError> {
        let values: Vec<i64> = (x_min..=x_max).map(&f).collect();
        let (l, r) = end_densities(&values);
        Self::new(x_min, values, Boundary::Frozen { left_density: l, right_density: r })
    }

    /// Torus of `period` sites starting at `x_min`, built from occupations of the
    /// half-integer sites `x_min + 1/2, ...`.
    pub fn torus_from_bits(x_min: i64, bits: &[u8], anchor: i64) -> Result<Self, LatticeError> {
        let mut values = Vec::with_capacity(bits.len() + 1);
        let mut h = anchor;
        values.push(h);
        for &b in bits {
            h += b as i64;
            values.push(h);
        }
        Self::new(x_min, values, Boundary::Torus)
    }

    pub fn x_min(&self) -> i64 {
        self.x_min
    }
    pub fn x_max(&self) -> i64 {
        self.x_min + self.values.len() as i64 - 1
    }
    pub fn values(&self) -> &[i64] {
        &self.values
    }
    pub fn boundary(&self) -> Boundary {
        self.boundary
    }
    pub fn is_torus(&self) -> bool {
        matches!(self.boundary, Boundary::Torus)
    }

    /// Number of distinct sites: the period on a torus, the window length otherwise.
    pub fn sites(&self) -> usize {
        if self.is_torus() {
            self.values.len() - 1
        } else {
            self.values.len()
        }
    }

    /// Particle count per period (torus) or inside the window (frozen).
    pub fn particles(&self) -> i64 {
        self.values[self.values.len() - 1] - self.values[0]
    }

    /// Height at `x`; wraps on the torus, `None` outside a frozen window.
    pub fn get(&self, x: i64) -> Option<i64> {
        let off = x - self.x_min;
        if self.is_torus() {
            let w = (self.values.len() - 1) as i64;
            let q = self.particles();
            Some(self.values[off.rem_euclid(w) as usize] + off.div_euclid(w) * q)
        } else if off >= 0 && (off as usize) < self.values.len() {
            Some(self.values[off as usize])
        } else {
            None
        }
    }

    /// Height at `x`, continuing a frozen window with its boundary densities.
    pub fn extended(&self, x: i64) -> i64 {
        if let Some(v) = self.get(x) {
            return v;
        }
        let Boundary::Frozen { left_density, right_density } = self.boundary else {
            unreachable!("torus heights are defined everywhere")
        };
        if x < self.x_min {
            let d = (self.x_min - x) as f64;
            self.values[0] - (left_density * d).ceil() as i64
        } else {
            let d = (x - self.x_max()) as f64;
            self.values[self.values.len() - 1] + (right_density * d).floor() as i64
        }
    }

    /// Adds one unit at `x` (and at its periodic image on the torus).
    pub(crate) fn grow(&mut self, x: i64) {
        let off = x - self.x_min;
        if self.is_torus() {
            let w = (self.values.len() - 1) as i64;
            let i = off.rem_euclid(w) as usize;
            self.values[i] += 1;
            if i == 0 {
                self.values[w as usize] += 1;
            }
        } else {
            self.values[off as usize] += 1;
        }
    }

    /// Same profile shifted vertically by `c`.
    pub fn shifted(&self, c: i64) -> Self {
        Self { x_min: self.x_min, values: self.values.iter().map(|v| v + c).collect(), boundary: self.boundary }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let boundary = match self.boundary {
            Boundary::Torus => serde_json::json!("torus"),
            Boundary::Frozen { .. } => serde_json::json!("frozen"),
        };
        let mut v = serde_json::json!({
            "window": [self.x_min, self.x_max()],
            "values": self.values,
            "boundary": boundary,
        });
        if let Boundary::Frozen { left_density, right_density } = self.boundary {
            v["left_density"] = serde_json::json!(left_density);
            v["right_density"] = serde_json::json!(right_density);
        }
        v
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, LatticeError> {
        let doc: HeightProfileDoc = serde_json::from_value(v.clone()).map_err(|e| LatticeError::Io(e.to_string()))?;
        doc.into_profile()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightProfileDoc {
    pub window: [i64; 2],
    pub values: Vec<i64>,
    pub boundary: String,
    #[serde(default)]
    pub left_density: Option<f64>,
    #[serde(default)]
    pub right_density: Option<f64>,
}

impl HeightProfileDoc {
    pub fn into_profile(self) -> Result<HeightProfile, LatticeError> {
        let len = (self.window[1] - self.window[0] + 1).max(0) as usize;
        if len != self.values.len() {
            return Err(LatticeError::Io(format!(
                "window [{}, {}] has {len} sites but {} values were given",
                self.window[0],
                self.window[1],
                self.values.len()
            )));
        }
        let boundary = match self.boundary.as_str() {
            "torus" => Boundary::Torus,
            "frozen" => {
                let (l, r) = end_densities(&self.values);
                Boundary::Frozen {
                    left_density: self.left_density.unwrap_or(l),
                    right_density: self.right_density.unwrap_or(r),
                }
            }
            other => return Err(LatticeError::Io(format!("unknown boundary {other:?}"))),
        };
        HeightProfile::new(self.window[0], self.values, boundary)
    }
}

fn end_densities(values: &[i64]) -> (f64, f64) {
    if values.len() < 2 {
        return (0.0, 0.0);
    }
    let l = (values[1] - values[0]) as f64;
    let r = (values[values.len() - 1] - values[values.len() - 2]) as f64;
    (l, r)
}

/// Occupations of the half-integer sites `x_min + 1/2, x_min + 3/2, ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupationField {
    /// Integer part of the first half-integer site.
    pub x_min: i64,
    pub bits: Vec<u8>,
}

impl OccupationField {
    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64
    }
}

/// `bits(y) = h(y + 1/2) - h(y - 1/2)` on every half-integer site of the window.
pub fn gradient_profile(h: &HeightProfile) -> OccupationField {
    let bits = h.values.windows(2).map(|w| (w[1] - w[0]) as u8).collect();
    OccupationField { x_min: h.x_min, bits }
}

/// Inverse of [`gradient_profile`]: integrates occupations from `anchor` at the left end.
pub fn integrate_occupation(bits: &OccupationField, anchor: i64) -> HeightProfile {
    let mut values = Vec::with_capacity(bits.bits.len() + 1);
    let mut h = anchor;
    values.push(h);
    for &b in &bits.bits {
        h += (b != 0) as i64;
        values.push(h);
    }
    let (l, r) = end_densities(&values);
    HeightProfile { x_min: bits.x_min, values, boundary: Boundary::Frozen { left_density: l, right_density: r } }
}

/// Indicator that a growth at `x` is admissible: up-step to the right, flat to the left.
pub fn mobility(h: &HeightProfile, x: i64) -> Result<u8, LatticeError> {
    if !h.is_torus() && (x <= h.x_min || x >= h.x_max()) {
        return Err(LatticeError::OutOfWindow { x, lo: h.x_min, hi: h.x_max() });
    }
    let (l, c, r) = (h.get(x - 1).unwrap(), h.get(x).unwrap(), h.get(x + 1).unwrap());
    Ok((r - c == 1 && c - l == 0) as u8)
}

/// Uniform one-dimensional grid `start + i * step`, `i = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl UniformGrid {
    pub fn new(start: f64, step: f64, len: usize) -> Self {
        Self { start, step, len }
    }

    /// Grid spanning `[a, b]` with the given step (rounded to an integer number of cells).
    pub fn spanning(a: f64, b: f64, step: f64) -> Self {
        let cells = ((b - a) / step).round() as usize;
        Self { start: a, step: (b - a) / cells.max(1) as f64, len: cells + 1 }
    }

    pub fn at(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }
    pub fn end(&self) -> f64 {
        self.at(self.len - 1)
    }

    /// Index of the node equal to `x` within `tol` cells.
    pub fn index_of(&self, x: f64, tol: f64) -> Option<usize> {
        let r = (x - self.start) / self.step;
        let i = r.round();
        if (r - i).abs() <= tol && i >= 0.0 && (i as usize) < self.len {
            Some(i as usize)
        } else {
            None
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(move |i| self.at(i))
    }
}

/// A real function of `xi` sampled on a uniform grid, linearly interpolated between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroSlice {
    pub xi: UniformGrid,
    pub values: Vec<f64>,
}

impl MacroSlice {
    pub fn from_fn(xi: UniformGrid, f: impl Fn(f64) -> f64) -> Self {
        Self { values: xi.nodes().map(f).collect(), xi }
    }

    /// Linear interpolation; constant continuation outside the grid is not provided.
    pub fn at(&self, x: f64) -> Option<f64> {
        let r = (x - self.xi.start) / self.xi.step;
        let n = self.xi.len;
        if r < -1e-9 || r > (n - 1) as f64 + 1e-9 {
            return None;
        }
        let r = r.clamp(0.0, (n - 1) as f64);
        let i = (r.floor() as usize).min(n.saturating_sub(2));
        if n == 1 {
            return Some(self.values[0]);
        }
        let w = r - i as f64;
        Some(self.values[i] * (1.0 - w) + self.values[i + 1] * w)
    }

    /// Checks `0 <= slope <= 1` between consecutive nodes (within `tol`).
    pub fn check_slopes(&self, tol: f64) -> Result<(), LatticeError> {
        for (i, w) in self.values.windows(2).enumerate() {
            let s = (w[1] - w[0]) / self.xi.step;
            if s < -tol || s > 1.0 + tol {
                return Err(LatticeError::NotAPath(format!("slope {s} at xi = {}", self.xi.at(i))));
            }
        }
        Ok(())
    }
}

/// Real values on a uniform `(t, xi)` grid, row-major in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroField {
    pub t: UniformGrid,
    pub xi: UniformGrid,
    pub values: Vec<f64>,
}

impl MacroField {
    pub fn from_fn(t: UniformGrid, xi: UniformGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(t.len * xi.len);
        for i in 0..t.len {
            let ti = t.at(i);
            for j in 0..xi.len {
                values.push(f(ti, xi.at(j)));
            }
        }
        Self { t, xi, values }
    }

    pub fn from_slices(t: UniformGrid, slices: &[MacroSlice]) -> Result<Self, LatticeError> {
        if slices.len() != t.len || slices.is_empty() {
            return Err(LatticeError::Resample("slice count does not match the time grid".into()));
        }
        let xi = slices[0].xi;
        let mut values = Vec::with_capacity(t.len * xi.len);
        for s in slices {
            if s.xi != xi {
                return Err(LatticeError::Resample("slices use different xi grids".into()));
            }
            values.extend_from_slice(&s.values);
        }
        Ok(Self { t, xi, values })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.xi.len + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.xi.len..(i + 1) * self.xi.len]
    }

    pub fn slice(&self, i: usize) -> MacroSlice {
        MacroSlice { xi: self.xi, values: self.row(i).to_vec() }
    }

    /// Bilinear interpolation inside the grid.
    pub fn at(&self, t: f64, x: f64) -> Option<f64> {
        let r = (t - self.t.start) / self.t.step;
        if r < -1e-9 || r > (self.t.len - 1) as f64 + 1e-9 {
            return None;
        }
        let r = r.clamp(0.0, (self.t.len - 1) as f64);
        if self.t.len == 1 {
            return self.slice(0).at(x);
        }
        let i = (r.floor() as usize).min(self.t.len - 2);
        let w = r - i as f64;
        let a = MacroSlice { xi: self.xi, values: self.row(i).to_vec() }.at(x)?;
        let b = MacroSlice { xi: self.xi, values: self.row(i + 1).to_vec() }.at(x)?;
        Some(a * (1.0 - w) + b * w)
    }

    /// Slope bounds in `xi` and monotonicity in `t`, node by node.
    pub fn check_path(&self, tol: f64) -> Result<(), LatticeError> {
        for i in 0..self.t.len {
            self.slice(i).check_slopes(tol).map_err(|e| match e {
                LatticeError::NotAPath(m) => LatticeError::NotAPath(format!("{m}, t = {}", self.t.at(i))),
                e => e,
            })?;
        }
        for i in 1..self.t.len {
            for j in 0..self.xi.len {
                if self.get(i, j) < self.get(i - 1, j) - tol {
                    return Err(LatticeError::NotAPath(format!(
                        "decreasing in t at (t, xi) = ({}, {})",
                        self.t.at(i),
                        self.xi.at(j)
                    )));
                }
            }
        }
        Ok(())
    }

    /// CSV with header `t,xi,value`, rows ordered by `t` then `xi`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), LatticeError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "xi", "value"]).map_err(io_err)?;
        for i in 0..self.t.len {
            for j in 0..self.xi.len {
                wr.write_record(&[
                    format!("{}", self.t.at(i)),
                    format!("{}", self.xi.at(j)),
                    format!("{}", self.get(i, j)),
                ])
                .map_err(io_err)?;
            }
        }
        wr.flush().map_err(|e| LatticeError::Io(e.to_string()))
    }

    /// Reads the format of [`Self::write_csv`]; lines starting with `#` are skipped.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, LatticeError> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let headers = rd.headers().map_err(io_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "xi", "value"] {
            return Err(LatticeError::Io("expected header t,xi,value".into()));
        }
        let mut rows: Vec<(f64, f64, f64)> = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(io_err)?;
            let p = |k: usize| -> Result<f64, LatticeError> {
                rec.get(k)
                    .ok_or_else(|| LatticeError::Io("short record".into()))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| LatticeError::Io(e.to_string()))
            };
            rows.push((p(0)?, p(1)?, p(2)?));
        }
        if rows.is_empty() {
            return Err(LatticeError::Io("empty field".into()));
        }
        let t0 = rows[0].0;
        let nx = rows.iter().take_while(|r| r.0 == t0).count();
        if rows.len() % nx != 0 {
            return Err(LatticeError::Io("rows do not form a rectangular grid".into()));
        }
        let nt = rows.len() / nx;
        let step = |a: f64, b: f64, n: usize| if n > 1 { (b - a) / (n - 1) as f64 } else { 1.0 };
        let xi = UniformGrid::new(rows[0].1, step(rows[0].1, rows[nx - 1].1, nx), nx);
        let t = UniformGrid::new(t0, step(t0, rows[rows.len() - 1].0, nt), nt);
        for (k, r) in rows.iter().enumerate() {
            let (i, j) = (k / nx, k % nx);
            let tol = 1e-6 * (t.step.abs() + xi.step.abs());
            if (r.0 - t.at(i)).abs() > tol || (r.1 - xi.at(j)).abs() > tol {
                return Err(LatticeError::Io(format!("row {k} is off the uniform grid")));
            }
        }
        Ok(Self { t, xi, values: rows.into_iter().map(|r| r.2).collect() })
    }
}

fn io_err(e: csv::Error) -> LatticeError {
    LatticeError::Io(e.to_string())
}

/// `h_N(xi) = h(N xi) / N` at the lattice points of the window.
pub fn scale_profile(h: &HeightProfile, n: u64) -> MacroSlice {
    let nf = n as f64;
    let xi = UniformGrid::new(h.x_min as f64 / nf, 1.0 / nf, h.values.len());
    MacroSlice { xi, values: h.values.iter().map(|&v| v as f64 / nf).collect() }
}

/// Truncated metric `sum_{k=1..k_max} 2^-k (sup_{[-k,k]} |f-g| ∧ 1)` over shared grid nodes.
pub fn metric_dist(f: &MacroSlice, g: &MacroSlice, k_max: u32) -> Result<f64, LatticeError> {
    let same_step = (f.xi.step - g.xi.step).abs() <= 1e-12 * f.xi.step.abs();
    let offset = (g.xi.start - f.xi.start) / f.xi.step;
    if !same_step || (offset - offset.round()).abs() > 1e-9 {
        return Err(LatticeError::Resample("grids are not aligned".into()));
    }
    let k = k_max as f64;
    for s in [f, g] {
        if s.xi.start > -k + 1e-9 || s.xi.end() < k - 1e-9 {
            return Err(LatticeError::Resample(format!("grid does not cover [-{k_max}, {k_max}]")));
        }
    }
    let off = offset.round() as i64;
    let mut sup = vec![0.0f64; k_max as usize];
    for (i, &fv) in f.values.iter().enumerate() {
        let j = i as i64 - off;
        if j < 0 || j as usize >= g.values.len() {
            continue;
        }
        let x = f.xi.at(i);
        let d = (fv - g.values[j as usize]).abs();
        for (kk, s) in sup.iter_mut().enumerate() {
            if x.abs() <= (kk + 1) as f64 + 1e-12 {
                *s = s.max(d);
            }
        }
    }
    Ok(sup.iter().enumerate().map(|(kk, s)| 0.5f64.powi(kk as i32 + 1) * s.min(1.0)).sum())
}

/// `max_i sup_{[-r,r]} |h(iT/n) - h((i-1)T/n)|`.
pub fn modulus_w_prime(path: &MacroField, n: usize, r: f64) -> Result<f64, LatticeError> {
    let cells = path.t.len - 1;
    if n == 0 || cells % n != 0 {
        return Err(LatticeError::Resample(format!("{n} does not divide the {cells} time cells")));
    }
    let stride = cells / n;
    let mut w: f64 = 0.0;
    for i in 1..=n {
        let (a, b) = ((i - 1) * stride, i * stride);
        for j in 0..path.xi.len {
            if path.xi.at(j).abs() <= r + 1e-12 {
                w = w.max((path.get(b, j) - path.get(a, j)).abs());
            }
        }
    }
    Ok(w)
}

/// One end of a locality envelope; `unbounded` marks an empty defining set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvelopeEnd {
    pub site: i64,
    pub unbounded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub lower: EnvelopeEnd,
    pub upper: EnvelopeEnd,
}

impl Envelope {
    pub fn contains(&self, x: i64) -> bool {
        (self.lower.unbounded || x >= self.lower.site) && (self.upper.unbounded || x <= self.upper.site)
    }

    pub fn is_subset_of(&self, other: &Envelope) -> bool {
        let lo_ok = other.lower.unbounded || (!self.lower.unbounded && self.lower.site >= other.lower.site);
        let hi_ok = other.upper.unbounded || (!self.upper.unbounded && self.upper.site <= other.upper.site);
        lo_ok && hi_ok
    }
}

/// `[k-, k+]` with `k+ = inf{x >= x0 : f(x) >= b}` and `k- = sup{x <= x0 : f(x) - x >= b - x0}`.
///
/// On a torus the search follows the periodic continuation; on a frozen window an end
/// that is not attained inside the window is reported as unbounded at the window edge.
pub fn locality_envelope(f: &HeightProfile, b: i64, x0: i64) -> Envelope {
    let (search_lo, search_hi) = if f.is_torus() {
        let w = f.sites() as i64;
        let q = f.particles().max(1);
        let h0 = f.get(x0).unwrap();
        let periods = ((b - h0).abs() / q + 2) * w;
        (x0 - periods - w, x0 + periods + w)
    } else {
        (f.x_min, f.x_max())
    };
    let value = |x: i64| f.get(x).unwrap();
    let mut upper = EnvelopeEnd { site: search_hi, unbounded: true };
    let mut x = x0.max(search_lo);
    while x <= search_hi {
        if value(x) >= b {
            upper = EnvelopeEnd { site: x, unbounded: false };
            break;
        }
        x += 1;
    }
    let mut lower = EnvelopeEnd { site: search_lo, unbounded: true };
    let mut x = x0.min(search_hi);
    while x >= search_lo {
        if value(x) - x >= b - x0 {
            lower = EnvelopeEnd { site: x, unbounded: false };
            break;
        }
        x -= 1;
    }
    Envelope { lower, upper }
}

/// Gradient data `(kappa, rho, lambda)` of a region with `kappa = lambda rho (1 - rho)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub kappa: f64,
    pub rho: f64,
    pub lambda: f64,
}

impl Triplet {
    /// Triplet from `(kappa, rho)`, with `lambda = kappa / (rho (1 - rho))`.
    pub fn from_kappa_rho(kappa: f64, rho: f64) -> Self {
        Self { kappa, rho, lambda: kappa / (rho * (1.0 - rho)) }
    }

    pub fn from_lambda_rho(lambda: f64, rho: f64) -> Self {
        Self { kappa: lambda * rho * (1.0 - rho), rho, lambda }
    }

    /// Relative defect of `kappa = lambda rho (1 - rho)`.
    pub fn defect(&self) -> f64 {
        let lhs = self.lambda * self.rho * (1.0 - self.rho);
        (self.kappa - lhs).abs() / self.kappa.abs().max(f64::MIN_POSITIVE)
    }

    /// Characteristic velocity `lambda (2 rho - 1)`.
    pub fn velocity(&self) -> f64 {
        self.lambda * (2.0 * self.rho - 1.0)
    }
}

/// Orientation of a triangle inside its `tau x b` rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriangleKind {
    /// Left of the diagonal: vertical edge on the left, horizontal edge on top.
    Upper,
    /// Right of the diagonal: vertical edge on the right, horizontal edge at the bottom.
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    /// Time layer, `0..T/tau`.
    pub layer: usize,
    /// Column, `0..2 r/b`; column `c` spans `[-r + c b, -r + (c+1) b]`.
    pub column: usize,
    pub kind: TriangleKind,
    pub triplet: Triplet,
}

/// The triangulation obtained by cutting every `tau x b` rectangle along the diagonal
/// from its bottom-left to its top-right corner.
#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    pub tau: f64,
    pub b: f64,
    pub half_width: f64,
    pub t_end: f64,
    pub layers: usize,
    pub columns: usize,
    pub triangles: Vec<Triangle>,
}

impl Triangulation {
    /// Diagonal slope `b / tau`.
    pub fn slope(&self) -> f64 {
        self.b / self.tau
    }

    pub fn area(&self) -> f64 {
        0.5 * self.tau * self.b
    }

    pub fn index(&self, layer: usize, column: usize, kind: TriangleKind) -> usize {
        2 * (layer * self.columns + column) + (kind == TriangleKind::Lower) as usize
    }

    pub fn get(&self, layer: usize, column: usize, kind: TriangleKind) -> &Triangle {
        &self.triangles[self.index(layer, column, kind)]
    }

    pub fn column_left(&self, column: usize) -> f64 {
        -self.half_width + column as f64 * self.b
    }

    pub fn layer_start(&self, layer: usize) -> f64 {
        layer as f64 * self.tau
    }

    /// Triangle containing `(t, xi)`; points on a diagonal belong to the upper triangle.
    pub fn locate(&self, t: f64, xi: f64) -> Option<&Triangle> {
        if !(0.0..=self.t_end).contains(&t) || xi.abs() > self.half_width {
            return None;
        }
        let layer = ((t / self.tau).floor() as usize).min(self.layers - 1);
        let column = (((xi + self.half_width) / self.b).floor() as usize).min(self.columns - 1);
        let diag = self.column_left(column) + self.slope() * (t - self.layer_start(layer));
        let kind = if xi <= diag { TriangleKind::Upper } else { TriangleKind::Lower };
        Some(self.get(layer, column, kind))
    }

    pub fn lambda_min(&self) -> f64 {
        self.triangles.iter().map(|t| t.triplet.lambda).fold(f64::INFINITY, f64::min)
    }

    pub fn lambda_max(&self) -> f64 {
        self.triangles.iter().map(|t| t.triplet.lambda).fold(0.0, f64::max)
    }

    /// Checks equal `kappa` across vertical edges and equal `kappa + (b/tau) rho` across
    /// diagonal edges; returns the largest defect.
    pub fn edge_defect(&self) -> f64 {
        let s = self.slope();
        let mut worst: f64 = 0.0;
        for l in 0..self.layers {
            for c in 0..self.columns {
                let u = self.get(l, c, TriangleKind::Upper).triplet;
                let d = self.get(l, c, TriangleKind::Lower).triplet;
                worst = worst.max(((u.kappa + s * u.rho) - (d.kappa + s * d.rho)).abs());
                if c + 1 < self.columns {
                    let right = self.get(l, c + 1, TriangleKind::Upper).triplet;
                    worst = worst.max((d.kappa - right.kappa).abs());
                }
            }
        }
        worst
    }
}

/// Reads off per-triangle gradients of a piecewise-linear `g` on `[0,T] x [-r, r]`.
pub fn triangulate(g: &MacroField, tau: f64, b: f64, half_width: f64) -> Result<Triangulation, LatticeError> {
    let t_end = g.t.end();
    let layers_f = t_end / tau;
    let cols_f = 2.0 * half_width / b;
    if tau <= 0.0 || b <= 0.0 || (layers_f - layers_f.round()).abs() > 1e-9 || layers_f.round() < 1.0 {
        return Err(LatticeError::Triangulation(format!("T/tau = {layers_f} is not a positive integer")));
    }
    if (half_width / b - (half_width / b).round()).abs() > 1e-9 || (half_width / b).round() < 1.0 {
        return Err(LatticeError::Triangulation(format!("r/b = {} is not a positive integer", half_width / b)));
    }
    let layers = layers_f.round() as usize;
    let columns = cols_f.round() as usize;
    let ti = |t: f64| g.t.index_of(t, 1e-6);
    let xj = |x: f64| g.xi.index_of(x, 1e-6);
    let per_t = tau / g.t.step;
    let per_x = b / g.xi.step;
    if (per_t - per_t.round()).abs() > 1e-6 || (per_x - per_x.round()).abs() > 1e-6 {
        return Err(LatticeError::Resample("triangle vertices are not grid nodes".into()));
    }
    let (per_t, per_x) = (per_t.round() as usize, per_x.round() as usize);
    let mut triangles = Vec::with_capacity(2 * layers * columns);
    let tol = 1e-9;
    for l in 0..layers {
        let t0 = l as f64 * tau;
        let i0 = ti(t0).ok_or_else(|| LatticeError::Resample(format!("t = {t0} is not a node")))?;
        for c in 0..columns {
            let x0 = -half_width + c as f64 * b;
            let j0 = xj(x0).ok_or_else(|| LatticeError::Resample(format!("xi = {x0} is not a node")))?;
            let (i1, j1) = (i0 + per_t, j0 + per_x);
            if i1 >= g.t.len || j1 >= g.xi.len {
                return Err(LatticeError::Resample("field does not cover the triangulated domain".into()));
            }
            let g00 = g.get(i0, j0);
            let g10 = g.get(i1, j0);
            let g11 = g.get(i1, j1);
            let g01 = g.get(i0, j1);
            let up = ((g10 - g00) / tau, (g11 - g10) / b);
            let lo = ((g11 - g01) / tau, (g01 - g00) / b);
            for (kind, (kappa, rho)) in [(TriangleKind::Upper, up), (TriangleKind::Lower, lo)] {
                let id = triangles.len();
                // Every grid node of the closed triangle must lie on the affine interpolant.
                let mut dev: f64 = 0.0;
                for di in 0..=per_t {
                    for dj in 0..=per_x {
                        let upper_side = dj * per_t <= di * per_x;
                        let lower_side = dj * per_t >= di * per_x;
                        let inside = match kind {
                            TriangleKind::Upper => upper_side,
                            TriangleKind::Lower => lower_side,
                        };
                        if !inside {
                            continue;
                        }
                        let affine = g00 + kappa * di as f64 * g.t.step + rho * dj as f64 * g.xi.step;
                        dev = dev.max((g.get(i0 + di, j0 + dj) - affine).abs());
                    }
                }
                if dev > tol * (tau + b).max(1.0) {
                    return Err(LatticeError::NotPiecewiseLinear { id, dev });
                }
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(LatticeError::Degenerate { id, reason: format!("density {rho} outside (0,1)") });
                }
                if kappa <= 0.0 {
                    return Err(LatticeError::Degenerate { id, reason: format!("flux {kappa} is not positive") });
                }
                let triplet = Triplet::from_kappa_rho(kappa, rho);
                triangles.push(Triangle { layer: l, column: c, kind, triplet });
            }
        }
    }
    let tri = Triangulation { tau, b, half_width, t_end, layers, columns, triangles };
    let defect = tri.edge_defect();
    if defect > 1e-9 * (1.0 + tri.slope()) {
        return Err(LatticeError::Triangulation(format!("edge identities fail by {defect:e}")));
    }
    Ok(tri)
}

/// Triangulation from a gradient assignment, for fixtures defined triangle by triangle.
pub fn triangulation_from_fn(
    tau: f64,
    b: f64,
    half_width: f64,
    t_end: f64,
    f: impl Fn(usize, usize, TriangleKind) -> Triplet,
) -> Triangulation {
    let layers = (t_end / tau).round() as usize;
    let columns = (2.0 * half_width / b).round() as usize;
    let mut triangles = Vec::with_capacity(2 * layers * columns);
    for l in 0..layers {
        for c in 0..columns {
            for kind in [TriangleKind::Upper, TriangleKind::Lower] {
                triangles.push(Triangle { layer: l, column: c, kind, triplet: f(l, c, kind) });
            }
        }
    }
    Triangulation { tau, b, half_width, t_end, layers, columns, triangles }
}
