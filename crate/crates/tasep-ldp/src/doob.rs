//! Exact conditioning of a small frozen-boundary growth system on a tube of heights:
//! the conditioning function, the perturbed rates and two computations of the relative
//! entropy of the conditioned law.

use std::collections::{HashMap, VecDeque};

use gauss_quad::legendre::GaussLegendre;
use nalgebra::DVector;
use ode_solvers::continuous_output_model::ContinuousOutputModel;
use ode_solvers::dopri5::Dopri5;
use ode_solvers::System;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DoobError {
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("state space has more than {limit} states (reached {count})")]
    StateExplosion { count: usize, limit: usize },
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("state {state} has zero conditioning weight at t = {t}")]
    OutsideSupport { state: usize, t: f64 },
}

pub const STATE_LIMIT: usize = 2_000_000;
/// Absolute and relative tolerance of the ODE integrations.
pub const ODE_TOL: f64 = 1e-10;

/// Piecewise-constant integer bounds on the interior heights. Piece `s` holds on
/// `[jump_times[s-1], jump_times[s])` (right-continuous), with `None` for no bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelopes {
    #[serde(default)]
    pub jump_times: Vec<f64>,
    pub lower: Vec<Vec<Option<i64>>>,
    pub upper: Vec<Vec<Option<i64>>>,
}

impl Envelopes {
    /// No constraint at all on `k` sites.
    pub fn free(k: usize) -> Self {
        Self { jump_times: Vec::new(), lower: vec![vec![None; k]], upper: vec![vec![None; k]] }
    }

    /// Time-independent bounds.
    pub fn constant(lower: Vec<Option<i64>>, upper: Vec<Option<i64>>) -> Self {
        Self { jump_times: Vec::new(), lower: vec![lower], upper: vec![upper] }
    }

    pub fn pieces(&self) -> usize {
        self.lower.len()
    }

    /// Strict containment of the interior heights in piece `s`.
    pub fn admits(&self, s: usize, interior: &[i64]) -> bool {
        interior
            .iter()
            .enumerate()
            .all(|(i, &h)| self.lower[s][i].is_none_or(|b| h > b) && self.upper[s][i].is_none_or(|b| h < b))
    }

    fn loosest_admits(&self, interior: &[i64]) -> bool {
        interior.iter().enumerate().all(|(i, &h)| {
            let lo = self.lower.iter().map(|l| l[i]).try_fold(i64::MAX, |m, b| b.map(|b| m.min(b)));
            let hi = self.upper.iter().map(|u| u[i]).try_fold(i64::MIN, |m, b| b.map(|b| m.max(b)));
            lo.is_none_or(|b| h > b) && hi.is_none_or(|b| h < b)
        })
    }

    /// Pointwise intersection with a tighter family on the same jump times.
    pub fn tightened(&self, lower_shift: i64, upper_shift: i64) -> Self {
        let shift = |v: &Vec<Vec<Option<i64>>>, d: i64| -> Vec<Vec<Option<i64>>> {
            v.iter().map(|p| p.iter().map(|b| b.map(|b| b + d)).collect()).collect()
        };
        Self {
            jump_times: self.jump_times.clone(),
            lower: shift(&self.lower, lower_shift),
            upper: shift(&self.upper, -upper_shift),
        }
    }
}

/// A window of `k` interior sites `1..=k` between two frozen boundary heights, with the
/// reachable states enumerated and their growth transitions.
#[derive(Debug, Clone)]
pub struct DoobSystem {
    pub k: usize,
    pub initial: Vec<i64>,
    pub envelopes: Envelopes,
    pub t_end: f64,
    states: Vec<Vec<i64>>,
    /// Per state: `(site, target)` for every mobile interior site; `None` when the target
    /// lies outside every tube section.
    moves: Vec<Vec<(usize, Option<usize>)>>,
    /// Per piece and state: membership in the tube section.
    inside: Vec<Vec<bool>>,
}

/// Enumerates the states reachable from `initial` by growth inside the loosest envelope.
pub fn build_system(k: usize, initial: &[i64], envelopes: Envelopes, t_micro: f64) -> Result<DoobSystem, DoobError> {
    let bad = |m: String| Err(DoobError::InvalidSystem(m));
    if k == 0 || initial.len() != k + 2 {
        return bad(format!("need {} heights (k interior sites and two frozen ends), got {}", k + 2, initial.len()));
    }
    if initial.windows(2).any(|w| !matches!(w[1] - w[0], 0 | 1)) {
        return bad("height increments must be 0 or 1".into());
    }
    if !(t_micro > 0.0 && t_micro.is_finite()) {
        return bad(format!("time horizon {t_micro} must be positive"));
    }
    let pieces = envelopes.pieces();
    if pieces == 0 || envelopes.upper.len() != pieces || envelopes.jump_times.len() + 1 != pieces {
        return bad("need one lower and one upper bound vector per piece, pieces = jump times + 1".into());
    }
    if envelopes.lower.iter().chain(&envelopes.upper).any(|v| v.len() != k) {
        return bad(format!("every bound vector needs {k} entries"));
    }
    let jt = &envelopes.jump_times;
    if jt.windows(2).any(|w| !(w[0] < w[1])) || jt.iter().any(|&t| !(t > 0.0 && t < t_micro)) {
        return bad("jump times must increase strictly inside (0, T)".into());
    }
    if !envelopes.admits(0, &initial[1..=k]) {
        return bad("the initial state is not strictly inside the tube at t = 0".into());
    }

    let mut states = vec![initial.to_vec()];
    let mut index: HashMap<Vec<i64>, usize> = HashMap::new();
    index.insert(initial.to_vec(), 0);
    let mut moves: Vec<Vec<(usize, Option<usize>)>> = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let mut out = Vec::new();
        for x in 1..=k {
            let h = &states[i];
            if h[x + 1] - h[x] == 1 && h[x] - h[x - 1] == 0 {
                let mut g = h.clone();
                g[x] += 1;
                let target = if let Some(&j) = index.get(&g) {
                    Some(j)
                } else if envelopes.loosest_admits(&g[1..=k]) {
                    let j = states.len();
                    if j >= STATE_LIMIT {
                        return Err(DoobError::StateExplosion { count: j + 1, limit: STATE_LIMIT });
                    }
                    index.insert(g.clone(), j);
                    states.push(g);
                    queue.push_back(j);
                    Some(j)
                } else {
                    None
                };
                out.push((x, target));
            }
        }
        if moves.len() <= i {
            moves.resize(i + 1, Vec::new());
        }
        moves[i] = out;
    }
    moves.resize(states.len(), Vec::new());
    let inside = (0..pieces).map(|s| states.iter().map(|h| envelopes.admits(s, &h[1..=k])).collect()).collect();
    Ok(DoobSystem { k, initial: initial.to_vec(), envelopes, t_end: t_micro, states, moves, inside })
}

impl DoobSystem {
    pub fn state_count(&self) -> usize {
        self.states.len()
    }
    pub fn state(&self, i: usize) -> &[i64] {
        &self.states[i]
    }
    /// Mobile sites of state `i` with the index of the grown state, if enumerated.
    pub fn moves(&self, i: usize) -> &[(usize, Option<usize>)] {
        &self.moves[i]
    }
    pub fn initial_index(&self) -> usize {
        0
    }
    /// Piece boundaries `0 = t_0 < ... < t_P = T`.
    pub fn piece_bounds(&self) -> Vec<f64> {
        let mut v = vec![0.0];
        v.extend_from_slice(&self.envelopes.jump_times);
        v.push(self.t_end);
        v
    }
    pub fn piece_at(&self, t: f64) -> usize {
        self.envelopes.jump_times.partition_point(|&s| s <= t)
    }
    pub fn inside(&self, piece: usize, state: usize) -> bool {
        self.inside[piece][state]
    }
}

/// Backward equation on one piece, in reversed time `sigma = t_b - t`.
struct Backward<'a> {
    sys: &'a DoobSystem,
    piece: usize,
}

impl System<f64, DVector<f64>> for Backward<'_> {
    fn system(&self, _s: f64, q: &DVector<f64>, dq: &mut DVector<f64>) {
        let inside = &self.sys.inside[self.piece];
        for (i, mv) in self.sys.moves.iter().enumerate() {
            if !inside[i] {
                dq[i] = 0.0;
                continue;
            }
            let mut acc = 0.0;
            for &(_, j) in mv {
                let qj = j.filter(|&j| inside[j]).map_or(0.0, |j| q[j]);
                acc += qj - q[i];
            }
            dq[i] = acc;
        }
    }
}

/// Forward equation of the killed process on one piece.
struct Forward<'a> {
    sys: &'a DoobSystem,
    piece: usize,
}

impl System<f64, DVector<f64>> for Forward<'_> {
    fn system(&self, _t: f64, p: &DVector<f64>, dp: &mut DVector<f64>) {
        let inside = &self.sys.inside[self.piece];
        dp.fill(0.0);
        for (i, mv) in self.sys.moves.iter().enumerate() {
            if !inside[i] {
                continue;
            }
            dp[i] -= mv.len() as f64 * p[i];
            for &(_, j) in mv {
                if let Some(j) = j.filter(|&j| inside[j]) {
                    dp[j] += p[i];
                }
            }
        }
    }
}

fn integrate<F: System<f64, DVector<f64>>>(
    f: F,
    len: f64,
    y0: DVector<f64>,
) -> Result<ContinuousOutputModel<f64, DVector<f64>>, DoobError> {
    let mut model = ContinuousOutputModel::default();
    if len <= 0.0 {
        return Err(DoobError::Integration("empty time interval".into()));
    }
    let mut solver = Dopri5::new(f, 0.0, len, len, y0, ODE_TOL, ODE_TOL);
    solver.integrate_with_continuous_output_model(&mut model).map_err(|e| DoobError::Integration(e.to_string()))?;
    Ok(model)
}

fn eval(model: &ContinuousOutputModel<f64, DVector<f64>>, s: f64) -> DVector<f64> {
    let (lo, hi) = model.bounds();
    model.evaluate(s.clamp(lo, hi)).expect("inside the model range")
}

/// Conditioning function `q(t, f)`: the probability of staying in the tube on `[t, T]`.
pub struct QTable {
    bounds: Vec<f64>,
    /// Per piece, the solution in reversed time from the piece's right end.
    models: Vec<ContinuousOutputModel<f64, DVector<f64>>>,
    terminal: DVector<f64>,
}

impl QTable {
    /// Values at time `t` (right-continuous at jump times).
    pub fn at(&self, t: f64) -> DVector<f64> {
        let t_end = *self.bounds.last().unwrap();
        if t >= t_end {
            return self.terminal.clone();
        }
        let s = self.bounds[1..].partition_point(|&b| b <= t);
        eval(&self.models[s], self.bounds[s + 1] - t)
    }

    /// Values just before the right end of piece `s`, approached from inside the piece.
    fn in_piece(&self, s: usize, t: f64) -> DVector<f64> {
        eval(&self.models[s], self.bounds[s + 1] - t)
    }

    pub fn q0(&self) -> f64 {
        self.at(0.0)[0]
    }
}

/// Integrates the backward equation piece by piece, masking at each jump time.
pub fn solve_q(sys: &DoobSystem) -> Result<QTable, DoobError> {
    let bounds = sys.piece_bounds();
    let pieces = sys.envelopes.pieces();
    let n = sys.state_count();
    let last = pieces - 1;
    let terminal = DVector::from_iterator(n, (0..n).map(|i| if sys.inside[last][i] { 1.0 } else { 0.0 }));
    let mut models: Vec<Option<ContinuousOutputModel<f64, DVector<f64>>>> = (0..pieces).map(|_| None).collect();
    let mut right = terminal.clone();
    for s in (0..pieces).rev() {
        // Entering piece s from its right end: states outside its section are dead.
        let y0 = DVector::from_iterator(n, (0..n).map(|i| if sys.inside[s][i] { right[i] } else { 0.0 }));
        let len = bounds[s + 1] - bounds[s];
        let model = integrate(Backward { sys, piece: s }, len, y0)?;
        right = eval(&model, len);
        models[s] = Some(model);
    }
    let table = QTable { bounds, models: models.into_iter().map(Option::unwrap).collect(), terminal };
    let q = table.at(0.0);
    if q.iter().any(|&v| v < -1e-8 || v > 1.0 + 1e-8) {
        return Err(DoobError::Integration("conditioning function left [0, 1]".into()));
    }
    Ok(table)
}

/// Perturbed rate `q(t, f^x) / q(t, f)` of a growth at `x` from state `state`.
pub fn conditioned_rate(sys: &DoobSystem, q: &QTable, t: f64, state: usize, x: usize) -> Result<f64, DoobError> {
    let qt = q.at(t);
    if !(qt[state] > 0.0) {
        return Err(DoobError::OutsideSupport { state, t });
    }
    let Some(&(_, target)) = sys.moves[state].iter().find(|m| m.0 == x) else {
        return Ok(0.0);
    };
    let num = target.filter(|&j| sys.inside[sys.piece_at(t)][j]).map_or(0.0, |j| qt[j].max(0.0));
    Ok(num / qt[state])
}

/// `-log q(0, initial)`, infinite for a tube of probability zero.
pub fn entropy_exact(q: &QTable) -> f64 {
    let q0 = q.q0();
    if q0 > 0.0 {
        -q0.ln()
    } else {
        f64::INFINITY
    }
}

/// Output of the forward pass under the conditioned law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForwardReport {
    /// `E ∫ Σ_x mobility ϖ(rate) dt` under the conditioned law.
    pub entropy: f64,
    /// Per interior site: `E h(T,x) - E h(0,x)` and `E ∫ rate mobility dt` under the conditioned law.
    pub height_gain: Vec<f64>,
    pub compensator: Vec<f64>,
    /// Largest deviation of `Σ_f p q` from `q(0, initial)` at the quadrature nodes.
    pub mass_drift: f64,
}

/// Quadrature nodes per piece for the forward integrals.
pub const QUAD_NODES: usize = 48;

/// Relative entropy from the perturbed rates, integrated forward in time.
///
/// With `p` the law of the unconditioned process killed on leaving the tube, the
/// conditioned marginal is `p q / q0`, and the integrand `Σ_f u Σ_x mob ϖ(q(f^x)/q(f))`
/// becomes `(1/q0) Σ_f p Σ_x mob (q' log(q'/q) - q' + q)` with `q' = q(f^x)`.
/// Each piece is mapped from `θ ∈ [0,1]` by `t = t_a + L (1 - (1-θ)^4)`, which smooths
/// the logarithmic endpoint behaviour where `q` vanishes at the next jump time.
pub fn forward_pass(sys: &DoobSystem, q: &QTable) -> Result<ForwardReport, DoobError> {
    let q0 = q.q0();
    if !(q0 > 0.0) {
        return Err(DoobError::OutsideSupport { state: 0, t: 0.0 });
    }
    let n = sys.state_count();
    let bounds = sys.piece_bounds();
    let rule = GaussLegendre::new(QUAD_NODES).map_err(|e| DoobError::Integration(e.to_string()))?;
    let mut p = DVector::from_iterator(n, (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }));
    let mut entropy = 0.0;
    let mut compensator = vec![0.0; sys.k];
    let mut mass_drift: f64 = 0.0;
    let initial_mean: Vec<f64> = sys.initial[1..=sys.k].iter().map(|&h| h as f64).collect();
    for s in 0..sys.envelopes.pieces() {
        let inside = &sys.inside[s];
        p.iter_mut().enumerate().for_each(|(i, v)| {
            if !inside[i] {
                *v = 0.0
            }
        });
        let (ta, tb) = (bounds[s], bounds[s + 1]);
        let len = tb - ta;
        let model = integrate(Forward { sys, piece: s }, len, p.clone())?;
        for &(node, weight) in rule.as_node_weight_pairs() {
            let theta = 0.5 * (node + 1.0);
            let w = 0.5 * weight;
            let one = 1.0 - theta;
            let t = ta + len * (1.0 - one.powi(4));
            let jac = 4.0 * len * one.powi(3);
            let pt = eval(&model, t - ta);
            let qt = q.in_piece(s, t);
            let mut ent = 0.0;
            let mut mass = 0.0;
            for i in 0..n {
                if !inside[i] {
                    continue;
                }
                let (pi, qi) = (pt[i].max(0.0), qt[i].max(0.0));
                mass += pi * qi;
                for &(x, j) in &sys.moves[i] {
                    let qj = j.filter(|&j| inside[j]).map_or(0.0, |j| qt[j].max(0.0));
                    let c = if qj == 0.0 {
                        qi
                    } else if qi == 0.0 {
                        0.0
                    } else {
                        qj * (qj / qi).ln() - qj + qi
                    };
                    ent += pi * c;
                    compensator[x - 1] += w * jac * pi * qj / q0;
                }
            }
            entropy += w * jac * ent / q0;
            mass_drift = mass_drift.max((mass - q0).abs());
        }
        p = eval(&model, len);
    }
    // Terminal conditioned mean heights: u(T) = p q(T) / q0.
    let mut height_gain = vec![0.0; sys.k];
    for i in 0..n {
        let u = p[i].max(0.0) * q.terminal[i] / q0;
        for (x, g) in height_gain.iter_mut().enumerate() {
            *g += u * sys.states[i][x + 1] as f64;
        }
    }
    height_gain.iter_mut().zip(&initial_mean).for_each(|(g, h0)| *g -= h0);
    Ok(ForwardReport { entropy, height_gain, compensator, mass_drift })
}

/// Relative entropy computed from the perturbed rates.
pub fn entropy_formula(sys: &DoobSystem, q: &QTable) -> Result<f64, DoobError> {
    if !(q.q0() > 0.0) {
        return Ok(f64::INFINITY);
    }
    Ok(forward_pass(sys, q)?.entropy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocked_single() -> DoobSystem {
        // Site 1 is mobile (0, 0, 1) and may not grow.
        build_system(1, &[0, 0, 1], Envelopes::constant(vec![None], vec![Some(1)]), 1.0).unwrap()
    }

    #[test]
    fn free_single_site_chain() {
        let sys = build_system(1, &[0, 0, 1], Envelopes::free(1), 1.0).unwrap();
        assert_eq!(sys.state_count(), 2);
        let q = solve_q(&sys).unwrap();
        assert!((q.q0() - 1.0).abs() < 1e-12);
        assert!(entropy_exact(&q).abs() < 1e-12);
        assert!(entropy_formula(&sys, &q).unwrap().abs() < 1e-10);
        assert!((conditioned_rate(&sys, &q, 0.3, 0, 1).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn tight_envelope_keeps_initial_only() {
        let h = [0, 0, 1, 1, 2, 2];
        let lo = h[1..5].iter().map(|&v| Some(v - 1)).collect();
        let hi = h[1..5].iter().map(|&v| Some(v + 1)).collect();
        let sys = build_system(4, &h, Envelopes::constant(lo, hi), 1.0).unwrap();
        assert_eq!(sys.state_count(), 1);
    }

    #[test]
    fn blocked_site_examples() {
        let sys = blocked_single();
        let q = solve_q(&sys).unwrap();
        assert!((q.q0() - (-1.0f64).exp()).abs() < 1e-9);
        assert!((entropy_exact(&q) - 1.0).abs() < 1e-8);
        assert!((entropy_formula(&sys, &q).unwrap() - 1.0).abs() < 1e-8);
        assert_eq!(conditioned_rate(&sys, &q, 0.5, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_system(1, &[0, 0, 2], Envelopes::free(1), 1.0).is_err());
        let env = Envelopes::constant(vec![Some(0)], vec![None]);
        assert!(build_system(1, &[0, 0, 1], env, 1.0).is_err());
        let env = Envelopes { jump_times: vec![2.0], lower: vec![vec![None]; 2], upper: vec![vec![None]; 2] };
        assert!(build_system(1, &[0, 0, 1], env, 1.0).is_err());
    }

    #[test]
    fn jump_time_masks_states() {
        // Growth allowed before t = 0.5 and forbidden afterwards for a height that grew.
        let env =
            Envelopes { jump_times: vec![0.5], lower: vec![vec![None]; 2], upper: vec![vec![None], vec![Some(1)]] };
        let sys = build_system(1, &[0, 0, 1], env, 1.0).unwrap();
        let q = solve_q(&sys).unwrap();
        // Stay un-grown over the whole interval: e^{-1}.
        assert!((q.q0() - (-1.0f64).exp()).abs() < 1e-9);
        let f = forward_pass(&sys, &q).unwrap();
        assert!((f.entropy - entropy_exact(&q)).abs() < 1e-8);
        assert!(f.mass_drift < 1e-8);
    }
}
