//! Construction of tilting speed functions from a triangulated piecewise-linear target:
//! zone geometry, region triplets, invariant checks, rasterization onto a simple speed
//! function and the L¹ gap to the coarse speed.

use serde::Serialize;
use thiserror::Error;

use crate::lattice::{TriangleKind, Triangulation, Triplet};
pub use crate::speed::{evaluate, SimpleSpeed, SpeedProfile};

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("partition violates {} invariant(s); first: {}", .0.violations.len(), .0.violations.first().map(|v| v.to_string()).unwrap_or_default())]
    Invariant(InvariantReport),
}

/// Geometric tolerance for zone boundaries, relative to the triangle width.
const GEO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    TransitionZone,
    VerticalBuffer,
    DiagonalBuffer,
    ReducedTriangle,
    Stripe,
    TerminalStripe,
    ResidualHigh,
    ResidualLow,
}

/// A line `xi = x0 + slope (t - t0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Line {
    pub x0: f64,
    pub t0: f64,
    pub slope: f64,
}

impl Line {
    pub fn vertical(x: f64) -> Self {
        Self { x0: x, t0: 0.0, slope: 0.0 }
    }
    pub fn slanted(x0: f64, t0: f64, slope: f64) -> Self {
        Self { x0, t0, slope }
    }
    #[inline]
    pub fn at(&self, t: f64) -> f64 {
        self.x0 + self.slope * (t - self.t0)
    }
}

/// A trapezoid `{t_lo <= t <= t_hi, left(t) <= xi <= right(t)}` with its speed data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Region {
    pub kind: RegionKind,
    pub t_lo: f64,
    pub t_hi: f64,
    pub left: Line,
    pub right: Line,
    pub lambda: f64,
    /// Absent for transition zones, where only the speed is prescribed.
    pub triplet: Option<Triplet>,
    /// Index of the parent triangle in the triangulation.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub t: f64,
    pub xi: f64,
    pub left_region: usize,
    pub right_region: usize,
    pub identity: String,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} fails on the edge between regions {} and {} at (t, xi) = ({:.6}, {:.6}): {}",
            self.identity, self.left_region, self.right_region, self.t, self.xi, self.detail
        )
    }
}

/// Outcome of the partition checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct InvariantReport {
    pub tiling_checks: usize,
    pub edge_checks: usize,
    pub violations: Vec<Violation>,
    /// Vertical buffers whose speed `4 kappa` exceeds the largest triangle speed.
    pub buffer_speed_excess: Vec<usize>,
}

impl InvariantReport {
    pub fn all_pass(&self) -> bool {
        self.violations.is_empty() && self.buffer_speed_excess.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TimePiece {
    t_lo: f64,
    t_hi: f64,
    regions: Vec<usize>,
}

/// Partition of `[0,T] x [-r^*, r^*]` into speed regions.
#[derive(Debug, Clone, PartialEq)]
pub struct ZonedPartition {
    pub tau: f64,
    pub b: f64,
    pub m: usize,
    pub n: usize,
    pub r_star: f64,
    pub r_upper_star: f64,
    pub t_end: f64,
    pub regions: Vec<Region>,
    pub report: InvariantReport,
    pieces: Vec<TimePiece>,
}

impl ZonedPartition {
    pub fn slope(&self) -> f64 {
        self.b / self.tau
    }
    pub fn fine_tau(&self) -> f64 {
        self.tau / (self.m * self.n * self.n) as f64
    }
    pub fn fine_b(&self) -> f64 {
        self.b / (self.m * self.n * self.n) as f64
    }

    fn piece_at(&self, t: f64) -> Option<&TimePiece> {
        let i = self.pieces.partition_point(|p| p.t_hi <= t);
        self.pieces.get(i).filter(|p| p.t_lo <= t)
    }

    /// Regions active at `t`, ordered left to right, with their extent at `t`.
    pub fn slice(&self, t: f64) -> Vec<(usize, f64, f64)> {
        let Some(p) = self.piece_at(t) else { return Vec::new() };
        let mut v: Vec<(usize, f64, f64)> =
            p.regions.iter().map(|&k| (k, self.regions[k].left.at(t), self.regions[k].right.at(t))).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)));
        v
    }

    /// Region containing `(t, xi)`, if any (interior points are unambiguous).
    pub fn locate(&self, t: f64, xi: f64) -> Option<&Region> {
        self.slice(t).into_iter().find(|&(_, a, b)| a <= xi && xi <= b).map(|(k, _, _)| &self.regions[k])
    }

    pub fn count(&self, kind: RegionKind) -> usize {
        self.regions.iter().filter(|r| r.kind == kind).count()
    }
}

/// Unique triplet on a diagonal buffer between `left` and `right` across an edge of slope `slope`.
pub fn solve_diagonal_triplet(left: Triplet, right: Triplet, slope: f64) -> Result<Triplet, BuildError> {
    let alpha = left.kappa + slope * left.rho;
    let alpha_r = right.kappa + slope * right.rho;
    if (alpha - alpha_r).abs() > 1e-9 * (1.0 + alpha.abs()) {
        return Err(BuildError::Consistency(format!(
            "kappa + slope * rho differs across the diagonal: {alpha} vs {alpha_r}"
        )));
    }
    let diverging = left.velocity() < slope && slope < right.velocity();
    if !diverging {
        return Ok(left);
    }
    // kappa = lambda rho (1-rho), (2 rho - 1) lambda = slope and kappa + slope rho = alpha
    // reduce to slope rho^2 - 2 alpha rho + alpha = 0.
    let disc = alpha * alpha - slope * alpha;
    if !(disc >= 0.0) {
        return Err(BuildError::Internal(format!("no real density solves the buffer equations (alpha = {alpha})")));
    }
    let big = (alpha + disc.sqrt()) / slope;
    let small = (alpha / slope) / big;
    let rho = [small, big]
        .into_iter()
        .find(|r| *r > 0.5 && *r < 1.0)
        .ok_or_else(|| BuildError::Internal(format!("no buffer density in (1/2, 1); roots {small}, {big}")))?;
    let lambda = slope / (2.0 * rho - 1.0);
    Ok(Triplet { kappa: lambda * rho * (1.0 - rho), rho, lambda })
}

/// Densities `rho1 > rho2` with `rho (1 - rho) = kappa` and widths fractions with mean `rho_bar`.
pub fn residual_split(kappa: f64, rho_bar: f64) -> Result<(f64, f64, f64, f64), BuildError> {
    if !(kappa > 0.0 && kappa < 0.25) {
        return Err(BuildError::Domain(format!("flux {kappa} must lie in (0, 1/4)")));
    }
    let root = (1.0 - 4.0 * kappa).sqrt();
    let rho1 = 0.5 * (1.0 + root);
    let rho2 = 1.0 - rho1;
    if !(rho_bar >= rho2 && rho_bar <= rho1) {
        return Err(BuildError::Domain(format!("density {rho_bar} outside [{rho2}, {rho1}]")));
    }
    let w1 = (rho_bar - rho2) / (rho1 - rho2);
    Ok((rho1, rho2, w1, 1.0 - w1))
}

/// `r_* + r_* ceil(T lambda_bar / r_*)`.
pub fn upper_radius(r_star: f64, t_end: f64, lambda_bar: f64) -> f64 {
    r_star + r_star * (t_end * lambda_bar / r_star - 1e-12).ceil()
}

/// Largest speed used by the construction: the triangle speeds and the unit speed.
pub fn construction_lambda_bar(tri: &Triangulation) -> f64 {
    tri.lambda_max().max(1.0)
}

/// Builds the zoned partition and checks every invariant; violations are returned as errors.
pub fn build_regions(
    tri: &Triangulation,
    m: usize,
    n: usize,
    r_star: f64,
    r_upper_star: f64,
) -> Result<ZonedPartition, BuildError> {
    let zp = construct_regions(tri, m, n, r_star, r_upper_star)?;
    if zp.report.violations.is_empty() {
        Ok(zp)
    } else {
        Err(BuildError::Invariant(zp.report))
    }
}

/// Builds the zoned partition and attaches the invariant report without failing on it.
pub fn construct_regions(
    tri: &Triangulation,
    m: usize,
    n: usize,
    r_star: f64,
    r_upper_star: f64,
) -> Result<ZonedPartition, BuildError> {
    if m < 8 {
        return Err(BuildError::InvalidParameters(format!("m = {m} is too small; slabs need m >= 8")));
    }
    if n < 2 {
        return Err(BuildError::InvalidParameters(format!("n = {n} must be at least 2")));
    }
    let expect = upper_radius(r_star, tri.t_end, construction_lambda_bar(tri));
    if (r_upper_star - expect).abs() > GEO_TOL * expect.max(1.0) {
        return Err(BuildError::InvalidParameters(format!(
            "outer radius {r_upper_star} differs from r_* + r_* ceil(T lambda_bar / r_*) = {expect}"
        )));
    }
    if (tri.half_width - r_upper_star).abs() > GEO_TOL * r_upper_star {
        return Err(BuildError::InvalidParameters(format!(
            "triangulation covers [-{}, {}] but the outer radius is {r_upper_star}",
            tri.half_width, tri.half_width
        )));
    }
    let ratio = r_star / tri.b;
    if (ratio - ratio.round()).abs() > GEO_TOL || ratio.round() < 1.0 {
        return Err(BuildError::InvalidParameters(format!("r_*/b = {ratio} is not a positive integer")));
    }

    let (tau, b) = (tri.tau, tri.b);
    let s = b / tau;
    let tp = tau / m as f64;
    let bp = b / m as f64;
    let bpp = bp / (n * n) as f64;
    let t_end = tri.t_end;
    let r = r_upper_star;
    let mut regions = Vec::new();

    let push_tz = |regions: &mut Vec<Region>, lo: f64, hi: f64| {
        let (lo, hi) = (lo.max(0.0), hi.min(t_end));
        if hi > lo {
            regions.push(Region {
                kind: RegionKind::TransitionZone,
                t_lo: lo,
                t_hi: hi,
                left: Line::vertical(-r),
                right: Line::vertical(r),
                lambda: 1.0,
                triplet: None,
                parent: None,
            });
        }
    };

    for i in 0..=tri.layers {
        let c = i as f64 * tau;
        push_tz(&mut regions, c - 3.0 * tp, c + 3.0 * tp);
    }

    for i in 0..tri.layers {
        let t0 = i as f64 * tau;
        let (s_lo, s_hi) = (t0 + 3.0 * tp, t0 + tau - 3.0 * tp);

        for j in 0..=tri.columns {
            let x = -r + j as f64 * b;
            let left = (j > 0).then(|| tri.index(i, j - 1, TriangleKind::Lower));
            let right = (j < tri.columns).then(|| tri.index(i, j, TriangleKind::Upper));
            let kl = left.map(|k| tri.triangles[k].triplet.kappa);
            let kr = right.map(|k| tri.triangles[k].triplet.kappa);
            if let (Some(a), Some(bb)) = (kl, kr) {
                if (a - bb).abs() > 1e-9 * (1.0 + a.abs()) {
                    return Err(BuildError::Consistency(format!("kappa jumps across the vertical edge xi = {x}")));
                }
            }
            let kappa = kl.or(kr).expect("every edge has a neighbour");
            regions.push(Region {
                kind: RegionKind::VerticalBuffer,
                t_lo: s_lo,
                t_hi: s_hi,
                left: Line::vertical((x - bp).max(-r)),
                right: Line::vertical((x + bp).min(r)),
                lambda: 4.0 * kappa,
                triplet: Some(Triplet { kappa, rho: 0.5, lambda: 4.0 * kappa }),
                parent: left.or(right),
            });
        }

        for col in 0..tri.columns {
            let xc = -r + col as f64 * b;
            let iu = tri.index(i, col, TriangleKind::Upper);
            let il = tri.index(i, col, TriangleKind::Lower);
            let up = tri.triangles[iu].triplet;
            let lo = tri.triangles[il].triplet;
            let diag = |off: f64| Line::slanted(xc + off, t0, s);
            let e = solve_diagonal_triplet(up, lo, s)?;
            regions.push(Region {
                kind: RegionKind::DiagonalBuffer,
                t_lo: s_lo,
                t_hi: s_hi,
                left: diag(-bp),
                right: diag(bp),
                lambda: e.lambda,
                triplet: Some(e),
                parent: Some(iu),
            });

            // Upper (left) reduced triangle.
            let u_left = Line::vertical(xc + bp);
            let u_right = diag(-bp);
            if up.lambda >= 1.0 {
                regions.push(reduced(s_lo, s_hi, u_left, u_right, up, iu));
            } else {
                let (rho1, rho2, w1, _) = residual_split(up.kappa, up.rho)?;
                for ip in 4..=m - 3 {
                    let ta = t0 + (ip - 1) as f64 * tp;
                    let tb = t0 + ip as f64 * tp;
                    let avail = u_right.at(ta) - u_left.x0;
                    let periods = (avail / (n as f64 * bpp) + 1e-9).floor().max(0.0) as usize;
                    for k in 0..periods {
                        let base = u_left.x0 + (k * n) as f64 * bpp;
                        intermittent_period(&mut regions, ta, tb, base, bpp, n, w1, up, rho1, rho2, iu);
                    }
                    let star_left = Line::vertical(u_left.x0 + (periods * n) as f64 * bpp);
                    regions.push(Region {
                        kind: RegionKind::TerminalStripe,
                        t_lo: ta,
                        t_hi: tb,
                        left: star_left,
                        right: u_right,
                        lambda: up.lambda,
                        triplet: Some(up),
                        parent: Some(iu),
                    });
                }
            }

            // Lower (right) reduced triangle.
            let d_left = diag(bp);
            let d_right = Line::vertical(xc + b - bp);
            if lo.lambda >= 1.0 {
                regions.push(reduced(s_lo, s_hi, d_left, d_right, lo, il));
            } else {
                let (rho1, rho2, w1, _) = residual_split(lo.kappa, lo.rho)?;
                for ip in 4..=m - 3 {
                    let ta = t0 + (ip - 1) as f64 * tp;
                    let tb = t0 + ip as f64 * tp;
                    let avail = d_right.x0 - d_left.at(tb);
                    let periods = (avail / (n as f64 * bpp) + 1e-9).floor().max(0.0) as usize;
                    for k in 0..periods {
                        let base = d_right.x0 - ((k + 1) * n) as f64 * bpp;
                        // Mirror image: residual first, stripe against the right end of the period.
                        let res = base;
                        let split = res + w1 * (n - 1) as f64 * bpp;
                        let stripe = base + (n - 1) as f64 * bpp;
                        push_residuals(&mut regions, ta, tb, res, split, stripe, lo, rho1, rho2, il);
                        push_stripe(&mut regions, ta, tb, stripe, stripe + bpp, lo, il);
                    }
                    let star_right = Line::vertical(d_right.x0 - (periods * n) as f64 * bpp);
                    regions.push(Region {
                        kind: RegionKind::TerminalStripe,
                        t_lo: ta,
                        t_hi: tb,
                        left: d_left,
                        right: star_right,
                        lambda: lo.lambda,
                        triplet: Some(lo),
                        parent: Some(il),
                    });
                }
            }
        }
    }

    let pieces = time_pieces(&regions, t_end);
    let mut zp = ZonedPartition {
        tau,
        b,
        m,
        n,
        r_star,
        r_upper_star,
        t_end,
        regions,
        report: InvariantReport::default(),
        pieces,
    };
    zp.report = validate_partition(&zp, tri);
    Ok(zp)
}

fn reduced(t_lo: f64, t_hi: f64, left: Line, right: Line, tr: Triplet, parent: usize) -> Region {
    Region {
        kind: RegionKind::ReducedTriangle,
        t_lo,
        t_hi,
        left,
        right,
        lambda: tr.lambda,
        triplet: Some(tr),
        parent: Some(parent),
    }
}

fn push_stripe(regions: &mut Vec<Region>, ta: f64, tb: f64, a: f64, b: f64, tr: Triplet, parent: usize) {
    regions.push(Region {
        kind: RegionKind::Stripe,
        t_lo: ta,
        t_hi: tb,
        left: Line::vertical(a),
        right: Line::vertical(b),
        lambda: tr.lambda,
        triplet: Some(tr),
        parent: Some(parent),
    });
}

#[allow(clippy::too_many_arguments)]
fn push_residuals(
    regions: &mut Vec<Region>,
    ta: f64,
    tb: f64,
    a: f64,
    split: f64,
    b: f64,
    tr: Triplet,
    rho1: f64,
    rho2: f64,
    parent: usize,
) {
    for (kind, lo, hi, rho) in [(RegionKind::ResidualHigh, a, split, rho1), (RegionKind::ResidualLow, split, b, rho2)] {
        if hi - lo <= 0.0 {
            continue;
        }
        regions.push(Region {
            kind,
            t_lo: ta,
            t_hi: tb,
            left: Line::vertical(lo),
            right: Line::vertical(hi),
            lambda: 1.0,
            triplet: Some(Triplet { kappa: tr.kappa, rho, lambda: 1.0 }),
            parent: Some(parent),
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn intermittent_period(
    regions: &mut Vec<Region>,
    ta: f64,
    tb: f64,
    base: f64,
    bpp: f64,
    n: usize,
    w1: f64,
    tr: Triplet,
    rho1: f64,
    rho2: f64,
    parent: usize,
) {
    push_stripe(regions, ta, tb, base, base + bpp, tr, parent);
    let res = base + bpp;
    let split = res + w1 * (n - 1) as f64 * bpp;
    push_residuals(regions, ta, tb, res, split, base + n as f64 * bpp, tr, rho1, rho2, parent);
}

fn time_pieces(regions: &[Region], t_end: f64) -> Vec<TimePiece> {
    let mut cuts: Vec<f64> = regions.iter().flat_map(|r| [r.t_lo, r.t_hi]).collect();
    cuts.push(0.0);
    cuts.push(t_end);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * t_end.max(1.0));
    let mut pieces: Vec<TimePiece> =
        cuts.windows(2).map(|w| TimePiece { t_lo: w[0], t_hi: w[1], regions: Vec::new() }).collect();
    for (k, r) in regions.iter().enumerate() {
        let tol = 1e-12 * t_end.max(1.0);
        let first = pieces.partition_point(|p| p.t_lo < r.t_lo - tol);
        for p in pieces[first..].iter_mut() {
            if p.t_hi > r.t_hi + tol {
                break;
            }
            p.regions.push(k);
        }
    }
    pieces
}

/// Checks tiling and the edge identities on every time piece.
pub fn validate_partition(zp: &ZonedPartition, tri: &Triangulation) -> InvariantReport {
    let mut rep = InvariantReport::default();
    let tol = GEO_TOL * zp.b.max(1.0);
    let s = zp.slope();
    let r = zp.r_upper_star;
    let mut seen = std::collections::HashSet::new();
    for p in &zp.pieces {
        for f in [0.25, 0.5, 0.75] {
            let t = p.t_lo + f * (p.t_hi - p.t_lo);
            let sl = zp.slice(t);
            rep.tiling_checks += 1;
            let mut cursor = -r;
            for &(k, a, b) in &sl {
                if (a - cursor).abs() > tol || b < a - tol {
                    rep.violations.push(Violation {
                        t,
                        xi: a,
                        left_region: k,
                        right_region: k,
                        identity: "tiling".into(),
                        detail: format!("region starts at {a} but coverage reached {cursor}"),
                    });
                }
                cursor = b;
            }
            if (cursor - r).abs() > tol {
                rep.violations.push(Violation {
                    t,
                    xi: cursor,
                    left_region: sl.last().map(|x| x.0).unwrap_or(0),
                    right_region: 0,
                    identity: "tiling".into(),
                    detail: format!("coverage ends at {cursor}, expected {r}"),
                });
            }
            for w in sl.windows(2) {
                let (kl, kr) = (w[0].0, w[1].0);
                let (rl, rr) = (&zp.regions[kl], &zp.regions[kr]);
                let (Some(a), Some(bb)) = (rl.triplet, rr.triplet) else { continue };
                if !seen.insert((kl, kr)) {
                    continue;
                }
                rep.edge_checks += 1;
                let xi = w[0].2;
                let slope = rl.right.slope;
                let mut fail = |identity: &str, detail: String| {
                    rep.violations.push(Violation {
                        t,
                        xi,
                        left_region: kl,
                        right_region: kr,
                        identity: identity.into(),
                        detail,
                    })
                };
                if slope.abs() <= 1e-12 {
                    if (a.kappa - bb.kappa).abs() > 1e-9 * (1.0 + a.kappa) {
                        fail("equal flux across a vertical edge", format!("{} vs {}", a.kappa, bb.kappa));
                    }
                    if !(2.0 * a.rho - 1.0 >= -1e-12 || 2.0 * bb.rho - 1.0 <= 1e-12) {
                        fail(
                            "no diverging characteristics across a vertical edge",
                            format!("left density {} < 1/2 < right density {}", a.rho, bb.rho),
                        );
                    }
                } else {
                    let (al, ar) = (a.kappa + s * a.rho, bb.kappa + s * bb.rho);
                    if (al - ar).abs() > 1e-9 * (1.0 + al.abs()) {
                        fail("equal flux plus slope times density across a diagonal edge", format!("{al} vs {ar}"));
                    }
                    if !(a.velocity() >= s - 1e-12 || bb.velocity() <= s + 1e-12) {
                        fail(
                            "no diverging characteristics across a diagonal edge",
                            format!("velocities {} < {s} < {}", a.velocity(), bb.velocity()),
                        );
                    }
                }
            }
        }
    }
    let lam_max = tri.lambda_max();
    for (k, reg) in zp.regions.iter().enumerate() {
        if reg.kind == RegionKind::VerticalBuffer && reg.lambda > lam_max * (1.0 + 1e-12) {
            rep.buffer_speed_excess.push(k);
        }
        if let Some(tr) = reg.triplet {
            if tr.defect() > 1e-12 {
                rep.violations.push(Violation {
                    t: reg.t_lo,
                    xi: reg.left.at(reg.t_lo),
                    left_region: k,
                    right_region: k,
                    identity: "kappa = lambda rho (1 - rho)".into(),
                    detail: format!("relative defect {:e}", tr.defect()),
                });
            }
        }
    }
    rep
}

/// Simple speed function on the fine grid: each fine rectangle takes its region's speed,
/// the minimum of the two sides when cut by a skeleton edge, and 1 outside `[-r^*, r^*]`.
pub fn rasterize(zp: &ZonedPartition, m: usize, n: usize) -> Result<SimpleSpeed, BuildError> {
    if m != zp.m || n != zp.n {
        return Err(BuildError::InvalidParameters(format!(
            "partition was built with (m, n) = ({}, {}), not ({m}, {n})",
            zp.m, zp.n
        )));
    }
    let dt = zp.fine_tau();
    let dx = zp.fine_b();
    let x0 = -zp.r_upper_star;
    let nx = (2.0 * zp.r_upper_star / dx).round() as usize;
    let nt = (zp.t_end / dt).round() as usize;
    let mut t_breaks = vec![0.0];
    let mut profiles: Vec<SpeedProfile> = Vec::new();
    let mut cell = vec![0.0f64; nx];
    let mut partial: Vec<Vec<usize>> = vec![Vec::new(); nx];
    for row in 0..nt {
        let tc = (row as f64 + 0.5) * dt;
        let sl = zp.slice(tc);
        cell.iter_mut().for_each(|c| *c = f64::NAN);
        partial.iter_mut().for_each(Vec::clear);
        for &(k, a, b) in &sl {
            if b - a <= GEO_TOL * dx {
                continue;
            }
            let lam = zp.regions[k].lambda;
            let (ca, cb) = ((a - x0) / dx, (b - x0) / dx);
            let (ra, rb) = (ca.round(), cb.round());
            let clean_a = (ca - ra).abs() < 1e-7;
            let clean_b = (cb - rb).abs() < 1e-7;
            let first = if clean_a { ra as i64 } else { ca.floor() as i64 + 1 };
            let last = if clean_b { rb as i64 } else { cb.floor() as i64 };
            for c in first.max(0)..last.min(nx as i64) {
                cell[c as usize] = lam;
            }
            if !clean_a {
                let c = ca.floor() as i64;
                if (0..nx as i64).contains(&c) {
                    partial[c as usize].push(k);
                }
            }
            if !clean_b {
                let c = cb.floor() as i64;
                if (0..nx as i64).contains(&c) && (clean_a || c != ca.floor() as i64) {
                    partial[c as usize].push(k);
                }
            }
        }
        for c in 0..nx {
            if !partial[c].is_empty() {
                let mut ids = partial[c].clone();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() > 2 {
                    return Err(BuildError::Internal(format!(
                        "fine rectangle at (t, xi) = ({tc}, {}) meets {} regions",
                        x0 + (c as f64 + 0.5) * dx,
                        ids.len()
                    )));
                }
                let v = ids.iter().map(|&k| zp.regions[k].lambda).fold(f64::INFINITY, f64::min);
                cell[c] = if cell[c].is_nan() { v } else { cell[c].min(v) };
            }
            if cell[c].is_nan() {
                return Err(BuildError::Internal(format!(
                    "fine rectangle at (t, xi) = ({tc}, {}) is not covered",
                    x0 + (c as f64 + 0.5) * dx
                )));
            }
        }
        let mut breaks = vec![x0];
        let mut values = vec![1.0, cell[0]];
        for c in 1..nx {
            if cell[c] != cell[c - 1] {
                breaks.push(x0 + c as f64 * dx);
                values.push(cell[c]);
            }
        }
        breaks.push(zp.r_upper_star);
        values.push(1.0);
        let prof = SpeedProfile { xi_breaks: breaks, values }.compress();
        if profiles.last() == Some(&prof) {
            continue;
        }
        if row > 0 {
            t_breaks.push(row as f64 * dt);
        }
        profiles.push(prof);
    }
    t_breaks.push(zp.t_end);
    SimpleSpeed::new(t_breaks, profiles).map_err(|e| BuildError::Internal(e.to_string()))
}

/// `Σ_△ ∫_△ |s − (λ_△ ∨ 1)|`, integrated exactly for the piecewise-constant `s`.
pub fn l1_gap(s: &SimpleSpeed, tri: &Triangulation) -> f64 {
    let slope = tri.slope();
    let mut total = 0.0;
    for (row, prof) in s.profiles.iter().enumerate() {
        let (ra, rb) = (s.t_breaks[row], s.t_breaks[row + 1].min(tri.t_end));
        if rb <= ra {
            continue;
        }
        for layer in 0..tri.layers {
            let t0 = tri.layer_start(layer);
            let (ta, tb) = (ra.max(t0), rb.min(t0 + tri.tau));
            if tb <= ta {
                continue;
            }
            for col in 0..tri.columns {
                let xl = tri.column_left(col);
                let xr = xl + tri.b;
                let diag = |t: f64| xl + slope * (t - t0);
                let lu = tri.get(layer, col, TriangleKind::Upper).triplet.lambda.max(1.0);
                let ld = tri.get(layer, col, TriangleKind::Lower).triplet.lambda.max(1.0);
                let mut edges = vec![f64::NEG_INFINITY];
                edges.extend(prof.xi_breaks.iter().copied());
                edges.push(f64::INFINITY);
                for (k, &v) in prof.values.iter().enumerate() {
                    let (pa, pb) = (edges[k].max(xl), edges[k + 1].min(xr));
                    if pb <= pa {
                        continue;
                    }
                    // Length of [pa, pb] ∩ [xl, diag(t)] is piecewise linear in t.
                    let up_len = |t: f64| (pb.min(diag(t)) - pa).max(0.0);
                    let mut cuts = vec![ta, tb];
                    for p in [pa, pb] {
                        let tc = t0 + (p - xl) / slope;
                        if tc > ta && tc < tb {
                            cuts.push(tc);
                        }
                    }
                    cuts.sort_by(f64::total_cmp);
                    let up_area: f64 =
                        cuts.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (up_len(w[0]) + up_len(w[1]))).sum();
                    let area = (pb - pa) * (tb - ta);
                    total += up_area * (v - lu).abs() + (area - up_area) * (v - ld).abs();
                }
            }
        }
    }
    total
}
