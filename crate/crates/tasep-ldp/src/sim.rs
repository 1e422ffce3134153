//! Event-driven simulation of (in)homogeneous TASEP with basic coupling, plus local
//! densities, the one-block statistic and empirical Young measures.
//!
//! Sites jump-in-height at integer `x`; a growth at `x` moves the particle at `x + 1/2`
//! to `x - 1/2`. Times inside the engine are microscopic; the speed is read at
//! `(t / N, x / N)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::lattice::{mobility, Boundary, HeightProfile, LatticeError, MacroField, UniformGrid};
use crate::ratefn::unit_rate;
use crate::speed::SpeedField;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("window [{lo}, {hi}] is not inside the safe region")]
    UnsafeWindow { lo: i64, hi: i64 },
    #[error("operation requires a torus profile")]
    NotTorus,
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// A single growth event at microscopic time `t` and site `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: f64,
    pub x: i64,
}

/// A realized trajectory: initial profile, ordered events and the data needed to replay
/// or re-derive the driving clocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub initial: HeightProfile,
    pub n: u64,
    /// Macroscopic horizon; the run covers microscopic times `[0, n * t_macro]`.
    pub t_macro: f64,
    pub events: Vec<Event>,
    pub seed: u64,
    pub speed_label: String,
    pub lambda_max: f64,
    /// Sites whose heights are guaranteed unaffected by the frozen ends.
    pub observe: Option<(i64, i64)>,
    /// Set when the influence of a frozen end may have reached the observation window.
    pub margin_violation: bool,
}

impl TrajectoryRecord {
    pub fn t_micro(&self) -> f64 {
        self.n as f64 * self.t_macro
    }
}

/// Callbacks from the event loop. Times are microscopic.
pub trait Observer {
    /// Called with the configuration just before the event at `t` is applied.
    fn pre_event(&mut self, _t: f64, _h: &HeightProfile) {}
    /// Called after the growth at `x` has been applied.
    fn on_event(&mut self, _t: f64, _x: i64, _h: &HeightProfile) {}
    /// Site `x` was mobile throughout `[start, end)`.
    fn on_mobile_interval(&mut self, _x: i64, _start: f64, _end: f64) {}
    /// Called once at the horizon with the final configuration.
    fn finish(&mut self, _t_end: f64, _h: &HeightProfile) {}
}

impl Observer for () {}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn pre_event(&mut self, t: f64, h: &HeightProfile) {
        self.0.pre_event(t, h);
        self.1.pre_event(t, h);
    }
    fn on_event(&mut self, t: f64, x: i64, h: &HeightProfile) {
        self.0.on_event(t, x, h);
        self.1.on_event(t, x, h);
    }
    fn on_mobile_interval(&mut self, x: i64, s: f64, e: f64) {
        self.0.on_mobile_interval(x, s, e);
        self.1.on_mobile_interval(x, s, e);
    }
    fn finish(&mut self, t: f64, h: &HeightProfile) {
        self.0.finish(t, h);
        self.1.finish(t, h);
    }
}

impl<O: Observer + ?Sized> Observer for &mut O {
    fn pre_event(&mut self, t: f64, h: &HeightProfile) {
        (**self).pre_event(t, h)
    }
    fn on_event(&mut self, t: f64, x: i64, h: &HeightProfile) {
        (**self).on_event(t, x, h)
    }
    fn on_mobile_interval(&mut self, x: i64, s: f64, e: f64) {
        (**self).on_mobile_interval(x, s, e)
    }
    fn finish(&mut self, t: f64, h: &HeightProfile) {
        (**self).finish(t, h)
    }
}

/// Stores every event.
#[derive(Debug, Default)]
pub struct EventLog(pub Vec<Event>);

impl Observer for EventLog {
    fn on_event(&mut self, t: f64, x: i64, _h: &HeightProfile) {
        self.0.push(Event { t, x });
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Candidate clock rings per site: a Poisson process of rate `rate` with an acceptance
/// uniform attached to every ring, generated in independent time blocks so any time can be
/// reached without generating the past.
#[derive(Debug, Clone, Copy)]
pub struct CandidateStreams {
    seed: u64,
    rate: f64,
    block_len: f64,
}

impl CandidateStreams {
    pub fn new(seed: u64, rate: f64) -> Self {
        Self { seed, rate, block_len: 4.0 / rate }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    fn block_index(&self, t: f64) -> u64 {
        (t / self.block_len).floor().max(0.0) as u64
    }

    fn fill_block(&self, site: i64, j: u64, out: &mut Vec<(f64, f64)>) {
        let key = splitmix(self.seed ^ splitmix(site as u64 ^ 0x5851_F42D_4C95_7F2D).wrapping_add(splitmix(j)));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let start = j as f64 * self.block_len;
        let end = start + self.block_len;
        out.clear();
        let mut t = start;
        loop {
            let g: f64 = Exp1.sample(&mut rng);
            t += g / self.rate;
            if t >= end {
                break;
            }
            out.push((t, rng.random::<f64>()));
        }
    }

    /// First ring strictly after `s` at `site`, with its uniform.
    pub fn next_after(&self, site: i64, s: f64) -> (f64, f64) {
        let mut buf = Vec::new();
        let mut j = self.block_index(s);
        loop {
            self.fill_block(site, j, &mut buf);
            if let Some(&c) = buf.iter().find(|c| c.0 > s) {
                return c;
            }
            j += 1;
        }
    }
}

#[derive(Debug, Default, Clone)]
struct SiteCursor {
    block: u64,
    filled: bool,
    cands: Vec<(f64, f64)>,
    idx: usize,
}

impl SiteCursor {
    fn next_after(&mut self, streams: &CandidateStreams, site: i64, s: f64) -> (f64, f64) {
        let target = streams.block_index(s);
        if !self.filled || self.block < target {
            self.block = target;
            streams.fill_block(site, target, &mut self.cands);
            self.idx = 0;
            self.filled = true;
        }
        loop {
            while self.idx < self.cands.len() && self.cands[self.idx].0 <= s {
                self.idx += 1;
            }
            if self.idx < self.cands.len() {
                return self.cands[self.idx];
            }
            self.block += 1;
            streams.fill_block(site, self.block, &mut self.cands);
            self.idx = 0;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    t: f64,
    u: f64,
    idx: u32,
    ver: u32,
}

impl PartialEq for Pending {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Pending {
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t).then_with(|| o.idx.cmp(&self.idx))
    }
}

/// Index bookkeeping shared by the engine and by replays.
struct Sites {
    x_min: i64,
    count: usize,
    torus: bool,
}

impl Sites {
    fn of(h: &HeightProfile) -> Self {
        Self { x_min: h.x_min(), count: h.sites(), torus: h.is_torus() }
    }
    fn site(&self, idx: usize) -> i64 {
        self.x_min + idx as i64
    }
    fn index(&self, x: i64) -> Option<usize> {
        let off = x - self.x_min;
        if self.torus {
            Some(off.rem_euclid(self.count as i64) as usize)
        } else if off >= 1 && off < self.count as i64 - 1 {
            Some(off as usize)
        } else {
            None
        }
    }
    fn eligible(&self) -> std::ops::Range<usize> {
        if self.torus {
            0..self.count
        } else {
            1..self.count.saturating_sub(1).max(1)
        }
    }
}

/// Tracks when each site became mobile and reports closed mobility intervals.
struct MobilityTracker {
    since: Vec<f64>,
}

impl MobilityTracker {
    fn new(n: usize) -> Self {
        Self { since: vec![f64::NAN; n] }
    }

    /// Returns `Some(true)` if the site just became mobile, `Some(false)` if it stopped.
    fn update(&mut self, sites: &Sites, h: &HeightProfile, idx: usize, t: f64, obs: &mut dyn Observer) -> Option<bool> {
        let x = sites.site(idx);
        let m = mobility(h, x).unwrap_or(0) == 1;
        let was = !self.since[idx].is_nan();
        if m && !was {
            self.since[idx] = t;
            Some(true)
        } else if !m && was {
            obs.on_mobile_interval(x, self.since[idx], t);
            self.since[idx] = f64::NAN;
            Some(false)
        } else {
            None
        }
    }

    fn close_all(&mut self, sites: &Sites, t: f64, obs: &mut dyn Observer) {
        for (idx, s) in self.since.iter_mut().enumerate() {
            if !s.is_nan() {
                obs.on_mobile_interval(sites.site(idx), *s, t);
                *s = f64::NAN;
            }
        }
    }
}

/// Summary of a streamed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub events: u64,
    pub final_profile: HeightProfile,
    pub margin_violation: bool,
}

/// Parameters of a run.
#[derive(Clone, Copy)]
pub struct RunSpec<'a> {
    pub speed: &'a dyn SpeedField,
    pub t_macro: f64,
    pub n: u64,
    pub seed: u64,
    /// Observation window for the frozen-end influence check.
    pub observe: Option<(i64, i64)>,
}

impl<'a> RunSpec<'a> {
    pub fn new(speed: &'a dyn SpeedField, t_macro: f64, n: u64, seed: u64) -> Self {
        Self { speed, t_macro, n, seed, observe: None }
    }

    pub fn observing(mut self, lo: i64, hi: i64) -> Self {
        self.observe = Some((lo, hi));
        self
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.t_macro > 0.0) || self.n == 0 {
            return Err(SimError::InvalidParameters("T and N must be positive".into()));
        }
        if !(self.speed.lambda_max() > 0.0) || !self.speed.lambda_max().is_finite() {
            return Err(SimError::InvalidParameters("speed must be bounded and positive".into()));
        }
        Ok(())
    }
}

/// Runs the dynamics from `initial`, streaming callbacks to `obs`.
pub fn simulate(initial: &HeightProfile, spec: &RunSpec<'_>, obs: &mut dyn Observer) -> Result<RunSummary, SimError> {
    spec.validate()?;
    let mut h = initial.clone();
    let sites = Sites::of(&h);
    let nf = spec.n as f64;
    let t_end = nf * spec.t_macro;
    let lam_bar = spec.speed.lambda_max();
    let streams = CandidateStreams::new(spec.seed, lam_bar);
    let mut cursors: Vec<SiteCursor> = vec![SiteCursor::default(); sites.count];
    let mut version = vec![0u32; sites.count];
    let mut tracker = MobilityTracker::new(sites.count);
    let mut heap = BinaryHeap::new();

    let schedule = |idx: usize, s: f64, cursors: &mut [SiteCursor], heap: &mut BinaryHeap<Pending>, ver: u32| {
        let (t, u) = cursors[idx].next_after(&streams, sites.site(idx), s);
        heap.push(Pending { t, u, idx: idx as u32, ver });
    };

    for idx in sites.eligible() {
        if tracker.update(&sites, &h, idx, 0.0, obs) == Some(true) {
            schedule(idx, 0.0, &mut cursors, &mut heap, version[idx]);
        }
    }

    let mut events = 0u64;
    while let Some(p) = heap.pop() {
        let idx = p.idx as usize;
        if p.ver != version[idx] {
            continue;
        }
        if p.t >= t_end {
            break;
        }
        let x = sites.site(idx);
        let lam = spec.speed.value(p.t / nf, x as f64 / nf);
        if p.u * lam_bar < lam {
            obs.pre_event(p.t, &h);
            h.grow(x);
            events += 1;
            obs.on_event(p.t, x, &h);
            for y in [x - 1, x, x + 1] {
                if let Some(j) = sites.index(y) {
                    if let Some(now) = tracker.update(&sites, &h, j, p.t, obs) {
                        version[j] = version[j].wrapping_add(1);
                        if now {
                            schedule(j, p.t, &mut cursors, &mut heap, version[j]);
                        }
                    }
                }
            }
        } else {
            schedule(idx, p.t, &mut cursors, &mut heap, p.ver);
        }
    }
    tracker.close_all(&sites, t_end, obs);
    obs.finish(t_end, &h);

    let margin_violation = match (h.boundary(), spec.observe) {
        (Boundary::Frozen { .. }, Some((lo, hi))) => influence_reaches(initial, spec, &streams, lo, hi),
        _ => false,
    };
    Ok(RunSummary { events, final_profile: h, margin_violation })
}

/// Walks the two fronts of possible influence of the frozen ends: a front at `L` advances
/// to `L + 1` at the first accepted ring of site `L + 1` (symmetrically on the right).
fn influence_reaches(
    initial: &HeightProfile,
    spec: &RunSpec<'_>,
    streams: &CandidateStreams,
    lo: i64,
    hi: i64,
) -> bool {
    let nf = spec.n as f64;
    let t_end = nf * spec.t_macro;
    let lam_bar = streams.rate();
    let first_accept = |site: i64, mut s: f64| -> f64 {
        loop {
            let (t, u) = streams.next_after(site, s);
            if t >= t_end {
                return t_end;
            }
            if u * lam_bar < spec.speed.value(t / nf, site as f64 / nf) {
                return t;
            }
            s = t;
        }
    };
    let (mut l, mut tl) = (initial.x_min(), 0.0);
    while l < lo {
        tl = first_accept(l + 1, tl);
        if tl >= t_end {
            break;
        }
        l += 1;
    }
    if l >= lo {
        return true;
    }
    let (mut r, mut tr) = (initial.x_max(), 0.0);
    while r > hi {
        tr = first_accept(r - 1, tr);
        if tr >= t_end {
            break;
        }
        r -= 1;
    }
    r <= hi
}

/// Frozen-end safety margin `ceil(lam_bar N T + 6 sqrt(lam_bar N T))`.
pub fn safety_margin(lambda_max: f64, n: u64, t_macro: f64) -> i64 {
    let m = lambda_max * n as f64 * t_macro;
    (m + 6.0 * m.sqrt()).ceil() as i64
}

/// Runs and stores every event.
pub fn run(
    initial: &HeightProfile,
    speed: &dyn SpeedField,
    t_macro: f64,
    n: u64,
    seed: u64,
) -> Result<TrajectoryRecord, SimError> {
    run_spec(initial, &RunSpec::new(speed, t_macro, n, seed))
}

pub fn run_spec(initial: &HeightProfile, spec: &RunSpec<'_>) -> Result<TrajectoryRecord, SimError> {
    let mut log = EventLog::default();
    let summary = simulate(initial, spec, &mut log)?;
    Ok(TrajectoryRecord {
        initial: initial.clone(),
        n: spec.n,
        t_macro: spec.t_macro,
        events: log.0,
        seed: spec.seed,
        speed_label: spec.speed.label(),
        lambda_max: spec.speed.lambda_max(),
        observe: spec.observe,
        margin_violation: summary.margin_violation,
    })
}

/// Runs several initial conditions on the same clock and uniform streams.
pub fn run_coupled(
    initials: &[HeightProfile],
    speed: &dyn SpeedField,
    t_macro: f64,
    n: u64,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>, SimError> {
    if let Some(first) = initials.first() {
        for h in initials {
            if h.x_min() != first.x_min() || h.x_max() != first.x_max() || h.is_torus() != first.is_torus() {
                return Err(SimError::InvalidParameters("coupled copies need identical windows and modes".into()));
            }
        }
    }
    initials.iter().map(|h| run(h, speed, t_macro, n, seed)).collect()
}

/// Re-emits the callbacks of the run that produced `rec`.
pub fn replay(rec: &TrajectoryRecord, obs: &mut dyn Observer) {
    let mut h = rec.initial.clone();
    let sites = Sites::of(&h);
    let mut tracker = MobilityTracker::new(sites.count);
    for idx in sites.eligible() {
        tracker.update(&sites, &h, idx, 0.0, obs);
    }
    for e in &rec.events {
        obs.pre_event(e.t, &h);
        h.grow(e.x);
        obs.on_event(e.t, e.x, &h);
        for y in [e.x - 1, e.x, e.x + 1] {
            if let Some(j) = sites.index(y) {
                tracker.update(&sites, &h, j, e.t, obs);
            }
        }
    }
    let t_end = rec.t_micro();
    tracker.close_all(&sites, t_end, obs);
    obs.finish(t_end, &h);
}

/// Profile at microscopic time `t` (events at times `<= t` applied).
pub fn height_at(rec: &TrajectoryRecord, t: f64) -> Result<HeightProfile, SimError> {
    let t_end = rec.t_micro();
    if !(0.0..=t_end).contains(&t) {
        return Err(SimError::TimeOutOfRange { t, horizon: t_end });
    }
    let mut h = rec.initial.clone();
    for e in rec.events.iter().take_while(|e| e.t <= t) {
        h.grow(e.x);
    }
    Ok(h)
}

/// Calls `f(i, h)` with the configuration at each of the increasing microscopic `times`.
pub struct Snapshots<F: FnMut(usize, &HeightProfile)> {
    times: Vec<f64>,
    next: usize,
    f: F,
}

impl<F: FnMut(usize, &HeightProfile)> Snapshots<F> {
    pub fn new(times: Vec<f64>, f: F) -> Self {
        Self { times, next: 0, f }
    }
}

impl<F: FnMut(usize, &HeightProfile)> Observer for Snapshots<F> {
    fn pre_event(&mut self, t: f64, h: &HeightProfile) {
        while self.next < self.times.len() && self.times[self.next] < t {
            (self.f)(self.next, h);
            self.next += 1;
        }
    }
    fn finish(&mut self, _t: f64, h: &HeightProfile) {
        while self.next < self.times.len() {
            (self.f)(self.next, h);
            self.next += 1;
        }
    }
}

/// Scaled heights `h(N t, N xi) / N` on a macroscopic grid, linear in `xi` between sites.
pub fn scaled_heights(rec: &TrajectoryRecord, t: UniformGrid, xi: UniformGrid) -> Result<MacroField, SimError> {
    let nf = rec.n as f64;
    let mut values = vec![0.0; t.len * xi.len];
    let times: Vec<f64> = t.nodes().map(|s| s * nf).collect();
    let mut snap = Snapshots::new(times, |i, h: &HeightProfile| {
        for j in 0..xi.len {
            values[i * xi.len + j] = scaled_value(h, xi.at(j), nf);
        }
    });
    replay(rec, &mut snap);
    Ok(MacroField { t, xi, values })
}

/// `h(N xi) / N` with linear interpolation between neighbouring sites.
pub fn scaled_value(h: &HeightProfile, xi: f64, nf: f64) -> f64 {
    let y = xi * nf;
    let x0 = y.floor();
    let w = y - x0;
    let a = h.extended(x0 as i64) as f64;
    if w == 0.0 {
        return a / nf;
    }
    let b = h.extended(x0 as i64 + 1) as f64;
    (a * (1.0 - w) + b * w) / nf
}

/// Accumulates, over sites in a window and a microscopic time range, the jumps and
/// time integrals of functions of the speed along mobility intervals.
pub struct WindowStats<'a> {
    speed: &'a dyn SpeedField,
    nf: f64,
    lo: i64,
    hi: i64,
    t1: f64,
    t2: f64,
    /// Number of growths.
    pub jumps: u64,
    /// `Σ log speed` over growths.
    pub log_speed: f64,
    /// `∫ mobility · speed dt`.
    pub int_speed: f64,
    /// `∫ mobility dt`.
    pub int_mobility: f64,
    /// `∫ mobility · (speed - 1) dt`, exactly zero at unit speed.
    pub int_excess: f64,
    /// `∫ mobility · (x log x - x + 1)(speed) dt`.
    pub int_entropy: f64,
}

impl<'a> WindowStats<'a> {
    /// Window of sites `[lo, hi]`, macroscopic times `[t1, t2]`.
    pub fn new(speed: &'a dyn SpeedField, n: u64, lo: i64, hi: i64, t1: f64, t2: f64) -> Self {
        let nf = n as f64;
        Self {
            speed,
            nf,
            lo,
            hi,
            t1: t1 * nf,
            t2: t2 * nf,
            jumps: 0,
            log_speed: 0.0,
            int_speed: 0.0,
            int_mobility: 0.0,
            int_excess: 0.0,
            int_entropy: 0.0,
        }
    }

    pub fn sites(&self) -> f64 {
        (self.hi - self.lo + 1) as f64
    }

    /// Normaliser turning micro totals into macroscopic per-site rates.
    pub fn rate_scale(&self) -> f64 {
        1.0 / (self.sites() * (self.t2 - self.t1))
    }

    /// Mean height increase per site per unit macroscopic time.
    pub fn flux(&self) -> f64 {
        self.jumps as f64 * self.rate_scale()
    }

    /// `∫ speed · mobility dt`, on the same scale as [`Self::flux`].
    pub fn flux_compensator(&self) -> f64 {
        self.int_speed * self.rate_scale()
    }

    /// `(1/N) Σ_x ∫ mobility · ϖ(speed) dt_macro`.
    pub fn entropy_density(&self) -> f64 {
        self.int_entropy / (self.nf * self.nf)
    }

    /// `Σ log speed − ∫ mobility · (speed − 1) dt` in microscopic units.
    pub fn log_density(&self) -> f64 {
        self.log_speed - self.int_excess
    }
}

impl Observer for WindowStats<'_> {
    fn on_event(&mut self, t: f64, x: i64, _h: &HeightProfile) {
        if x >= self.lo && x <= self.hi && t > self.t1 && t <= self.t2 {
            self.jumps += 1;
            self.log_speed += self.speed.value(t / self.nf, x as f64 / self.nf).ln();
        }
    }

    fn on_mobile_interval(&mut self, x: i64, s: f64, e: f64) {
        if x < self.lo || x > self.hi {
            return;
        }
        let (a, b) = (s.max(self.t1), e.min(self.t2));
        if b <= a {
            return;
        }
        let nf = self.nf;
        let xi = x as f64 / nf;
        let (ma, mb) = (a / nf, b / nf);
        self.int_mobility += b - a;
        self.int_speed += nf * self.speed.integrate_time(xi, ma, mb, &|l| l);
        self.int_excess += nf * self.speed.integrate_time(xi, ma, mb, &|l| l - 1.0);
        self.int_entropy += nf * self.speed.integrate_time(xi, ma, mb, &unit_rate);
    }
}

/// Mean height increase per site per unit macroscopic time over a site window.
pub fn empirical_flux(rec: &TrajectoryRecord, window: (i64, i64), t1: f64, t2: f64) -> Result<f64, SimError> {
    check_window(rec, window)?;
    if !(t1 < t2) || t1 < 0.0 || t2 > rec.t_macro + 1e-12 {
        return Err(SimError::Domain(format!("need 0 <= t1 < t2 <= T, got [{t1}, {t2}]")));
    }
    let nf = rec.n as f64;
    let (a, b) = (t1 * nf, t2 * nf);
    let jumps = rec.events.iter().filter(|e| e.x >= window.0 && e.x <= window.1 && e.t > a && e.t <= b).count();
    Ok(jumps as f64 / ((window.1 - window.0 + 1) as f64 * (b - a)))
}

pub(crate) fn check_window(rec: &TrajectoryRecord, window: (i64, i64)) -> Result<(), SimError> {
    let unsafe_window = SimError::UnsafeWindow { lo: window.0, hi: window.1 };
    if window.0 > window.1 || rec.margin_violation {
        return Err(unsafe_window);
    }
    if !rec.initial.is_torus() {
        let (lo, hi) = rec.observe.unwrap_or((rec.initial.x_min() + 1, rec.initial.x_max() - 1));
        if window.0 < lo || window.1 > hi {
            return Err(unsafe_window);
        }
    }
    Ok(())
}

/// Block average over the `k` half-integer sites centred at `x`.
pub fn block_count(h: &HeightProfile, x: i64, k: usize) -> Option<i64> {
    let start = x - (k / 2) as i64;
    Some(h.get(start + k as i64)? - h.get(start)?)
}

/// Local densities at site `x` for every site whose block lies in the window.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub x_min: i64,
    pub values: Vec<f64>,
}

/// `η̄_k(x)` at macroscopic time `t`.
pub fn local_density(rec: &TrajectoryRecord, t: f64, k: usize) -> Result<DensityField, SimError> {
    if k == 0 {
        return Err(SimError::Domain("block width must be positive".into()));
    }
    let h = height_at(rec, t * rec.n as f64)?;
    Ok(density_field(&h, k))
}

pub fn density_field(h: &HeightProfile, k: usize) -> DensityField {
    let kf = k as f64;
    if h.is_torus() {
        let values = (0..h.sites() as i64).map(|i| block_count(h, h.x_min() + i, k).unwrap() as f64 / kf).collect();
        return DensityField { x_min: h.x_min(), values };
    }
    let first = h.x_min() + (k / 2) as i64;
    let mut values = Vec::new();
    let mut x = first;
    while let Some(c) = block_count(h, x, k) {
        values.push(c as f64 / kf);
        x += 1;
    }
    DensityField { x_min: first, values }
}

/// Weight `G(t, xi)` of the one-block statistic.
pub enum BlockWeight<'a> {
    Constant(f64),
    Function(&'a (dyn Fn(f64, f64) -> f64 + Sync)),
}

#[inline]
fn phi2(rho: f64) -> f64 {
    rho * (1.0 - rho)
}

/// Online one-block statistic `∫ Σ_x G (mobility − Φ(η̄_k)) dt_macro` on a torus.
pub struct OneBlock<'a> {
    k: usize,
    nf: f64,
    weight: BlockWeight<'a>,
    counts: Vec<i64>,
    mob: Vec<u8>,
    mob_total: i64,
    phi_total: f64,
    last_t: f64,
    x_min: i64,
    width: usize,
    pub value: f64,
}

impl<'a> OneBlock<'a> {
    pub fn new(initial: &HeightProfile, n: u64, k: usize, weight: BlockWeight<'a>) -> Result<Self, SimError> {
        if !initial.is_torus() {
            return Err(SimError::NotTorus);
        }
        if k == 0 || k > initial.sites() {
            return Err(SimError::Domain(format!("block width {k} must lie in [1, {}]", initial.sites())));
        }
        let width = initial.sites();
        let x_min = initial.x_min();
        let counts: Vec<i64> = (0..width as i64).map(|i| block_count(initial, x_min + i, k).unwrap()).collect();
        let mob: Vec<u8> = (0..width as i64).map(|i| mobility(initial, x_min + i).unwrap()).collect();
        let kf = k as f64;
        Ok(Self {
            k,
            nf: n as f64,
            weight,
            mob_total: mob.iter().map(|&m| m as i64).sum(),
            phi_total: counts.iter().map(|&c| phi2(c as f64 / kf)).sum(),
            counts,
            mob,
            last_t: 0.0,
            x_min,
            width,
            value: 0.0,
        })
    }

    fn idx(&self, x: i64) -> usize {
        (x - self.x_min).rem_euclid(self.width as i64) as usize
    }

    fn advance(&mut self, t: f64) {
        let dt = t - self.last_t;
        if dt <= 0.0 {
            return;
        }
        match self.weight {
            BlockWeight::Constant(g) => {
                self.value += g * (self.mob_total as f64 - self.phi_total) * dt / self.nf;
            }
            BlockWeight::Function(g) => {
                let tm = 0.5 * (t + self.last_t) / self.nf;
                let kf = self.k as f64;
                let mut s = 0.0;
                for i in 0..self.width {
                    let xi = (self.x_min + i as i64) as f64 / self.nf;
                    s += g(tm, xi) * (self.mob[i] as f64 - phi2(self.counts[i] as f64 / kf));
                }
                self.value += s * dt / self.nf;
            }
        }
        self.last_t = t;
    }
}

impl Observer for OneBlock<'_> {
    fn pre_event(&mut self, t: f64, _h: &HeightProfile) {
        self.advance(t);
    }

    fn on_event(&mut self, _t: f64, x: i64, h: &HeightProfile) {
        let kf = self.k as f64;
        let half = (self.k / 2) as i64;
        // The particle moved from x + 1/2 to x - 1/2: the block starting at x loses it,
        // the block ending at x - 1/2 gains it.
        let loser = x + half;
        let gainer = x + half - self.k as i64;
        for (y, d) in [(loser, -1), (gainer, 1)] {
            let i = self.idx(y);
            self.phi_total -= phi2(self.counts[i] as f64 / kf);
            self.counts[i] += d;
            self.phi_total += phi2(self.counts[i] as f64 / kf);
        }
        for y in [x - 1, x, x + 1] {
            let i = self.idx(y);
            let m = mobility(h, y).unwrap();
            self.mob_total += m as i64 - self.mob[i] as i64;
            self.mob[i] = m;
        }
    }

    fn finish(&mut self, t: f64, _h: &HeightProfile) {
        self.advance(t);
    }
}

/// One-block statistic of a stored torus trajectory.
pub fn one_block_stat(rec: &TrajectoryRecord, g: BlockWeight<'_>, k: usize) -> Result<f64, SimError> {
    let mut ob = OneBlock::new(&rec.initial, rec.n, k, g)?;
    replay(rec, &mut ob);
    Ok(ob.value)
}

/// Finitely supported probability measure on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    pub atoms: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn dirac(rho: f64) -> Self {
        Self { atoms: vec![rho], weights: vec![1.0] }
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| w * f(*a)).sum()
    }
}

/// Two-point measure on `{rho1, rho2}` with mean `rho_bar`.
pub fn two_point_measure(rho1: f64, rho2: f64, rho_bar: f64) -> Result<DiscreteMeasure, SimError> {
    if !(rho1 > rho2) || !(rho2 <= rho_bar && rho_bar <= rho1) || rho2 < 0.0 || rho1 > 1.0 {
        return Err(SimError::Domain(format!(
            "need 0 <= ρ₂ <= ρ̄ <= ρ₁ <= 1 with ρ₁ > ρ₂, got ({rho1}, {rho2}, {rho_bar})"
        )));
    }
    let w1 = (rho_bar - rho2) / (rho1 - rho2);
    Ok(DiscreteMeasure { atoms: vec![rho1, rho2], weights: vec![w1, 1.0 - w1] })
}

/// Per-cell measures over a `(t, xi)` cell grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalYoungMeasure {
    /// Left edges and width of the time cells.
    pub t_cells: UniformGrid,
    /// Left edges and width of the space cells.
    pub xi_cells: UniformGrid,
    pub k: usize,
    /// Row-major in time.
    pub cells: Vec<DiscreteMeasure>,
}

impl EmpiricalYoungMeasure {
    pub fn uniform(t_cells: UniformGrid, xi_cells: UniformGrid, nu: DiscreteMeasure) -> Self {
        Self { t_cells, xi_cells, k: 0, cells: vec![nu; t_cells.len * xi_cells.len] }
    }

    pub fn cell(&self, i: usize, j: usize) -> &DiscreteMeasure {
        &self.cells[i * self.xi_cells.len + j]
    }

    /// Measure of the cell containing `(t, xi)`.
    pub fn at(&self, t: f64, xi: f64) -> Option<&DiscreteMeasure> {
        let i = ((t - self.t_cells.start) / self.t_cells.step).floor();
        let j = ((xi - self.xi_cells.start) / self.xi_cells.step).floor();
        if i < 0.0 || j < 0.0 || i as usize >= self.t_cells.len || j as usize >= self.xi_cells.len {
            return None;
        }
        Some(self.cell(i as usize, j as usize))
    }
}

/// Time-weighted histograms of `η̄_k` over space-time cells of a torus trajectory.
struct YoungAccumulator {
    k: usize,
    nf: f64,
    x_min: i64,
    width: usize,
    nt: usize,
    nx: usize,
    t_end: f64,
    counts: Vec<i64>,
    cell_of: Vec<usize>,
    bins: Vec<Vec<i64>>,
    last: Vec<f64>,
    acc: Vec<Vec<f64>>,
}

impl YoungAccumulator {
    fn new(h: &HeightProfile, n: u64, t_macro: f64, k: usize, nt: usize, nx: usize) -> Self {
        let width = h.sites();
        let counts: Vec<i64> = (0..width as i64).map(|i| block_count(h, h.x_min() + i, k).unwrap()).collect();
        let cell_of: Vec<usize> = (0..width).map(|i| i * nx / width).collect();
        let mut bins = vec![vec![0i64; k + 1]; nx];
        for (i, &c) in counts.iter().enumerate() {
            bins[cell_of[i]][c as usize] += 1;
        }
        Self {
            k,
            nf: n as f64,
            x_min: h.x_min(),
            width,
            nt,
            nx,
            t_end: n as f64 * t_macro,
            counts,
            cell_of,
            bins,
            last: vec![0.0; nx],
            acc: vec![vec![0.0; k + 1]; nt * nx],
        }
    }

    fn flush(&mut self, j: usize, t: f64) {
        let dt_cell = self.t_end / self.nt as f64;
        let mut a = self.last[j];
        while a < t {
            let i = ((a / dt_cell).floor() as usize).min(self.nt - 1);
            let b = t.min((i + 1) as f64 * dt_cell);
            let b = if i + 1 == self.nt { t } else { b };
            let row = &mut self.acc[i * self.nx + j];
            for (bin, &c) in self.bins[j].iter().enumerate() {
                if c != 0 {
                    row[bin] += c as f64 * (b - a);
                }
            }
            a = b;
        }
        self.last[j] = t;
    }

    fn finish_measure(mut self) -> EmpiricalYoungMeasure {
        for j in 0..self.nx {
            self.flush(j, self.t_end);
        }
        let kf = self.k as f64;
        let atoms: Vec<f64> = (0..=self.k).map(|b| b as f64 / kf).collect();
        let cells = self
            .acc
            .iter()
            .map(|row| {
                let tot: f64 = row.iter().sum();
                DiscreteMeasure { atoms: atoms.clone(), weights: row.iter().map(|w| w / tot).collect() }
            })
            .collect();
        let t_macro = self.t_end / self.nf;
        EmpiricalYoungMeasure {
            t_cells: UniformGrid::new(0.0, t_macro / self.nt as f64, self.nt),
            xi_cells: UniformGrid::new(
                self.x_min as f64 / self.nf,
                self.width as f64 / (self.nf * self.nx as f64),
                self.nx,
            ),
            k: self.k,
            cells,
        }
    }
}

impl Observer for YoungAccumulator {
    fn on_event(&mut self, t: f64, x: i64, _h: &HeightProfile) {
        let half = (self.k / 2) as i64;
        for (y, d) in [(x + half, -1i64), (x + half - self.k as i64, 1)] {
            let i = (y - self.x_min).rem_euclid(self.width as i64) as usize;
            let j = self.cell_of[i];
            self.flush(j, t);
            self.bins[j][self.counts[i] as usize] -= 1;
            self.counts[i] += d;
            self.bins[j][self.counts[i] as usize] += 1;
        }
    }
}

/// Histograms of `η̄_k` on an `nt x nx` grid of cells, time-weighted on the event skeleton.
pub fn young_histogram(
    rec: &TrajectoryRecord,
    k: usize,
    cells: (usize, usize),
) -> Result<EmpiricalYoungMeasure, SimError> {
    if !rec.initial.is_torus() {
        return Err(SimError::NotTorus);
    }
    let (nt, nx) = cells;
    if k == 0 || k > rec.initial.sites() || nt == 0 || nx == 0 || nx > rec.initial.sites() {
        return Err(SimError::Domain("invalid block width or cell grid".into()));
    }
    let mut acc = YoungAccumulator::new(&rec.initial, rec.n, rec.t_macro, k, nt, nx);
    replay(rec, &mut acc);
    Ok(acc.finish_measure())
}

/// `max_z |∫∫ z (h_t − ∫ Φ dν) dt dxi|` over the cells of `h`'s grid that lie under `nu`.
pub fn mv_residual(h: &MacroField, nu: &EmpiricalYoungMeasure, test_fns: &[&dyn Fn(f64, f64) -> f64]) -> f64 {
    let (dt, dx) = (h.t.step, h.xi.step);
    let mut best: f64 = 0.0;
    for z in test_fns {
        let mut s = 0.0;
        for i in 0..h.t.len.saturating_sub(1) {
            let tc = h.t.at(i) + 0.5 * dt;
            for j in 0..h.xi.len.saturating_sub(1) {
                let xc = h.xi.at(j) + 0.5 * dx;
                let Some(m) = nu.at(tc, xc) else { continue };
                let ht = (h.get(i + 1, j) + h.get(i + 1, j + 1) - h.get(i, j) - h.get(i, j + 1)) / (2.0 * dt);
                s += z(tc, xc) * (ht - m.integrate(phi2)) * dt * dx;
            }
        }
        best = best.max(s.abs());
    }
    best
}

/// Torus profile of period `width` holding the given occupations.
pub fn torus(x_min: i64, bits: &[u8]) -> Result<HeightProfile, SimError> {
    Ok(HeightProfile::torus_from_bits(x_min, bits, 0)?)
}

/// I.i.d. Bernoulli(`rho`) occupations drawn from `seed`.
pub fn bernoulli_bits(width: usize, rho: f64, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xB5AD_4ECE_DA1C_E2A9));
    (0..width).map(|_| (rng.random::<f64>() < rho) as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speed::ConstantSpeed;

    fn alternating(width: usize) -> Vec<u8> {
        (0..width).map(|i| (i % 2 == 0) as u8).collect()
    }

    #[test]
    fn empty_system_has_no_events() {
        let h = HeightProfile::from_fn(-50, 50, |_| 3).unwrap();
        let rec = run(&h, &ConstantSpeed(1.0), 1.0, 20, 7).unwrap();
        assert!(rec.events.is_empty());
    }

    #[test]
    fn deterministic_and_valid() {
        let h = torus(0, &bernoulli_bits(64, 0.5, 3)).unwrap();
        let a = run(&h, &ConstantSpeed(1.0), 1.0, 32, 11).unwrap();
        let b = run(&h, &ConstantSpeed(1.0), 1.0, 32, 11).unwrap();
        assert_eq!(a, b);
        assert!(!a.events.is_empty());
        assert!(a.events.windows(2).all(|w| w[0].t < w[1].t));
        let mut g = h.clone();
        for e in &a.events {
            assert_eq!(mobility(&g, e.x).unwrap(), 1);
            g.grow(e.x);
        }
        assert_eq!(g.particles(), h.particles());
    }

    #[test]
    fn replay_reports_intervals_consistently() {
        let h = torus(0, &bernoulli_bits(40, 0.5, 5)).unwrap();
        let speed = ConstantSpeed(1.0);
        let mut live = WindowStats::new(&speed, 20, 0, 39, 0.0, 1.0);
        let spec = RunSpec::new(&speed, 1.0, 20, 9);
        let mut log = EventLog::default();
        let mut pair = (&mut live, &mut log);
        simulate(&h, &spec, &mut pair).unwrap();
        let rec = run(&h, &speed, 1.0, 20, 9).unwrap();
        let mut again = WindowStats::new(&speed, 20, 0, 39, 0.0, 1.0);
        replay(&rec, &mut again);
        assert_eq!(live.jumps, again.jumps);
        assert!((live.int_mobility - again.int_mobility).abs() < 1e-9);
    }

    #[test]
    fn height_at_edges() {
        let h = torus(0, &bernoulli_bits(32, 0.5, 1)).unwrap();
        let rec = run(&h, &ConstantSpeed(1.0), 1.0, 16, 2).unwrap();
        assert_eq!(height_at(&rec, 0.0).unwrap(), h);
        let end = height_at(&rec, rec.t_micro()).unwrap();
        let mut g = h.clone();
        for e in &rec.events {
            g.grow(e.x);
        }
        assert_eq!(end, g);
        assert!(height_at(&rec, rec.t_micro() + 1.0).is_err());
    }

    #[test]
    fn local_density_examples() {
        let h = torus(0, &alternating(20)).unwrap();
        let rec = run(&h, &ConstantSpeed(1.0), 0.0001, 1, 0).unwrap();
        let d = density_field(&rec.initial, 4);
        assert!(d.values.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let full = torus(0, &[1; 10]).unwrap();
        assert!(density_field(&full, 3).values.iter().all(|&v| v == 1.0));
        let h = torus(0, &bernoulli_bits(50, 0.3, 4)).unwrap();
        let d = density_field(&h, 5);
        let mean = d.values.iter().sum::<f64>() / d.values.len() as f64;
        assert!((mean - h.particles() as f64 / 50.0).abs() < 1e-12);
    }

    #[test]
    fn one_block_trivial_cases() {
        let h = torus(0, &bernoulli_bits(40, 0.5, 6)).unwrap();
        let rec = run(&h, &ConstantSpeed(1.0), 1.0, 20, 1).unwrap();
        assert_eq!(one_block_stat(&rec, BlockWeight::Constant(0.0), 4).unwrap(), 0.0);
        let full = torus(0, &[1; 16]).unwrap();
        let rec = run(&full, &ConstantSpeed(1.0), 1.0, 8, 1).unwrap();
        assert!(rec.events.is_empty());
        assert_eq!(one_block_stat(&rec, BlockWeight::Constant(1.0), 4).unwrap(), 0.0);
        let frozen = HeightProfile::from_fn(0, 10, |x| x / 2).unwrap();
        let rec = run(&frozen, &ConstantSpeed(1.0), 1.0, 8, 1).unwrap();
        assert_eq!(one_block_stat(&rec, BlockWeight::Constant(1.0), 2), Err(SimError::NotTorus));
    }

    #[test]
    fn one_block_function_weight_matches_constant() {
        let h = torus(0, &bernoulli_bits(30, 0.5, 8)).unwrap();
        let rec = run(&h, &ConstantSpeed(1.0), 1.0, 15, 4).unwrap();
        let g = |_t: f64, _x: f64| 1.0;
        let a = one_block_stat(&rec, BlockWeight::Constant(1.0), 4).unwrap();
        let b = one_block_stat(&rec, BlockWeight::Function(&g), 4).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn two_point_examples() {
        let m = two_point_measure(0.8, 0.2, 0.5).unwrap();
        assert!(m.weights.iter().all(|w| (w - 0.5).abs() < 1e-15));
        assert!((m.mean() - 0.5).abs() < 1e-15);
        assert!((m.integrate(phi2) - 0.16).abs() < 1e-15);
        let p = two_point_measure(0.8, 0.2, 0.8).unwrap();
        assert_eq!(p.weights, vec![1.0, 0.0]);
        assert!(two_point_measure(0.8, 0.2, 0.9).is_err());
    }

    #[test]
    fn young_histogram_examples() {
        let h = torus(0, &alternating(40)).unwrap();
        let mut rec = run(&h, &ConstantSpeed(1.0), 1.0, 40, 0).unwrap();
        rec.events.clear();
        let y = young_histogram(&rec, 4, (2, 4)).unwrap();
        for c in &y.cells {
            assert!((c.integrate(|r| (r == 0.5) as u8 as f64) - 1.0).abs() < 1e-12);
        }
        let mut bits = vec![0u8; 100];
        for (i, b) in bits.iter_mut().enumerate() {
            let dense = i < 50;
            *b = if dense { (i % 5 != 0) as u8 } else { (i % 5 == 0) as u8 };
        }
        let h = torus(0, &bits).unwrap();
        let mut rec = run(&h, &ConstantSpeed(1.0), 1.0, 100, 0).unwrap();
        rec.events.clear();
        let y = young_histogram(&rec, 5, (1, 1)).unwrap();
        let c = y.cell(0, 0);
        let at =
            |r: f64| c.atoms.iter().zip(&c.weights).filter(|(a, _)| (**a - r).abs() < 1e-12).map(|p| *p.1).sum::<f64>();
        assert!(at(0.8) > 0.4 && at(0.2) > 0.4);
    }

    #[test]
    fn young_means_match_density_average() {
        let h = torus(0, &bernoulli_bits(60, 0.5, 12)).unwrap();
        let rec = run(&h, &ConstantSpeed(1.0), 1.0, 30, 5).unwrap();
        let k = 6;
        let y = young_histogram(&rec, k, (3, 2)).unwrap();
        // Independent oracle: integrate the block density exactly between events.
        let t_end = rec.t_micro();
        let mut sums = vec![0.0; 6];
        let mut g = rec.initial.clone();
        let mut last = 0.0;
        let add = |g: &HeightProfile, a: f64, b: f64, sums: &mut Vec<f64>| {
            let d = density_field(g, k);
            for i in 0..3 {
                let (ta, tb) = (i as f64 * t_end / 3.0, (i + 1) as f64 * t_end / 3.0);
                let ov = (b.min(tb) - a.max(ta)).max(0.0);
                for (x, v) in d.values.iter().enumerate() {
                    sums[i * 2 + x * 2 / 60] += ov * v;
                }
            }
        };
        for e in &rec.events {
            add(&g, last, e.t, &mut sums);
            g.grow(e.x);
            last = e.t;
        }
        add(&g, last, t_end, &mut sums);
        for (c, s) in y.cells.iter().zip(&sums) {
            assert!((c.total() - 1.0).abs() < 1e-12);
            assert!((c.mean() - s / (30.0 * t_end / 3.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn mv_residual_examples() {
        let t = UniformGrid::spanning(0.0, 1.0, 0.1);
        let x = UniformGrid::spanning(-1.0, 1.0, 0.1);
        let h = MacroField::from_fn(t, x, |t, x| 0.21 * t + 0.3 * x);
        let nu = EmpiricalYoungMeasure::uniform(
            UniformGrid::new(0.0, 0.5, 2),
            UniformGrid::new(-1.0, 0.5, 4),
            DiscreteMeasure::dirac(0.3),
        );
        let z = |t: f64, x: f64| (t * 3.0).sin() + x;
        assert!(mv_residual(&h, &nu, &[&z]) < 1e-12);
        let h = MacroField::from_fn(t, x, |t, x| 0.16 * t + 0.5 * x);
        let nu2 = EmpiricalYoungMeasure::uniform(
            UniformGrid::new(0.0, 0.5, 2),
            UniformGrid::new(-1.0, 0.5, 4),
            two_point_measure(0.8, 0.2, 0.5).unwrap(),
        );
        assert!(mv_residual(&h, &nu2, &[&z]) < 1e-12);
        let zero = |_: f64, _: f64| 0.0;
        assert_eq!(mv_residual(&h, &nu, &[&zero]), 0.0);
    }

    #[test]
    fn margin_check_flags_tiny_margins() {
        let h = HeightProfile::from_fn(-40, 40, |x| if x > 0 { (x + 1) / 2 } else { 0 }).unwrap();
        let speed = ConstantSpeed(1.0);
        let tight = run_spec(&h, &RunSpec::new(&speed, 1.0, 40, 3).observing(-38, 38)).unwrap();
        assert!(tight.margin_violation);
        let loose = run_spec(&h, &RunSpec::new(&speed, 0.05, 40, 3).observing(-20, 20)).unwrap();
        assert!(!loose.margin_violation);
        assert!(empirical_flux(&tight, (-10, 10), 0.0, 1.0).is_err());
    }
}
