//! Trap-aware high-level controller.
//!
//! [`Tampc`] switches between exploiting the goal cost (mixed with an
//! annealed trap-set penalty) and a bandit-selected recovery cost. The free
//! functions here are the individual tests and costs it is built from.

mod adapters;
mod record;
pub(crate) mod tampc;

pub use adapters::{GoalCost, MixedModel, RecoveryCost, TrapGoalCost};
pub use record::{ArmSnapshot, Controller, StepRecord};
pub use tampc::{Tampc, TampcSetup, Variant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::GpError;
use crate::mppi::MppiError;
use crate::repr::NominalModel;
use crate::sim::{state_distance, similarity, Action, PlanarState, Transition, Vec2, STATE_DIM};
use crate::stats::percentile;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Mppi(#[from] MppiError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("recovery target set is empty")]
    EmptyTargetSet,
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Nominal,
    NonNominal,
    Recovery,
}

impl Mode {
    /// Whether a step may move the controller from `self` to `to`.
    pub fn can_become(self, to: Mode) -> bool {
        use Mode::*;
        !matches!((self, to), (Nominal, Recovery))
    }

    pub fn index(self) -> usize {
        match self {
            Mode::Nominal => 0,
            Mode::NonNominal => 1,
            Mode::Recovery => 2,
        }
    }
}

/// Nominal error tolerance used by the peg environment in the original tuning.
pub const TABLE_EPSILON: f64 = 12.3;

/// Speed assumed before any nominal movement has been measured.
pub fn cold_start_speed(action_bound: f64) -> f64 {
    action_bound * std::f64::consts::SQRT_2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TampcParams {
    /// Trap-cost annealing rate per nominal step.
    pub gamma: f64,
    /// Recovery cost weight.
    pub omega: f64,
    /// Fixed nominal tolerance; `None` calibrates it on held-out data.
    pub epsilon: Option<f64>,
    pub epsilon_percentile: f64,
    /// Tolerated slowdown in non-nominal dynamics.
    pub upsilon: f64,
    pub n_d: usize,
    pub n_n: usize,
    pub n_mab: usize,
    pub n_arms: usize,
    pub n_recov_max: usize,
    pub n_local: usize,
    /// Converged threshold as a fraction of `upsilon`.
    pub converged_fraction: f64,
    pub move_threshold: f64,
    pub n_fastest: usize,
    pub n_nom_buffer: usize,
    pub trap_distance_floor: f64,
    pub spread_floor: f64,
    pub initial_spread: f64,
    pub recovery_horizon: usize,
    pub recovery_terminal_multiplier: f64,
}

impl Default for TampcParams {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            omega: 1.0,
            epsilon: None,
            epsilon_percentile: 99.9,
            upsilon: 0.6,
            n_d: 5,
            n_n: 3,
            n_mab: 3,
            n_arms: 100,
            n_recov_max: 20,
            n_local: 50,
            converged_fraction: 0.05,
            move_threshold: 1.0,
            n_fastest: 5,
            n_nom_buffer: 5,
            trap_distance_floor: 1e-3,
            spread_floor: 1e-9,
            initial_spread: 1.0,
            recovery_horizon: 5,
            recovery_terminal_multiplier: 1.0,
        }
    }
}

impl TampcParams {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::Invalid(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.upsilon > 0.0 && self.upsilon <= 1.0) {
            return bad("upsilon must lie in (0, 1]");
        }
        let counts = [
            self.n_d,
            self.n_n,
            self.n_mab,
            self.n_arms,
            self.n_recov_max,
            self.n_local,
            self.n_fastest,
            self.n_nom_buffer,
            self.recovery_horizon,
        ];
        if counts.contains(&0) {
            return bad("all counts must be at least 1");
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return bad("epsilon must be positive");
            }
        }
        if !(self.omega > 0.0 && self.initial_spread > 0.0 && self.trap_distance_floor > 0.0) {
            return bad("omega, initial_spread and trap_distance_floor must be positive");
        }
        if !(0.0..=100.0).contains(&self.epsilon_percentile) {
            return bad("epsilon_percentile must lie in [0, 100]");
        }
        Ok(())
    }
}

/// Smallest per-dimension error scale; keeps the normalized score finite for
/// dimensions the model reproduces exactly.
pub const ERROR_SCALE_FLOOR: f64 = 1e-9;

/// Per-dimension RMSE of `model` on `transitions`.
pub fn error_scale(model: &dyn NominalModel, transitions: &[Transition]) -> [f64; STATE_DIM] {
    let mut sq = [0.0; STATE_DIM];
    if transitions.is_empty() {
        return [1.0; STATE_DIM];
    }
    let (xs, us) = stack(transitions);
    let pred = model.predict_batch(&xs, &us);
    for (i, t) in transitions.iter().enumerate() {
        for d in 0..STATE_DIM {
            let e = t.dx[d] - pred[i * STATE_DIM + d];
            sq[d] += e * e;
        }
    }
    sq.map(|s| (s / transitions.len() as f64).sqrt().max(ERROR_SCALE_FLOOR))
}

fn stack(transitions: &[Transition]) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(transitions.len() * STATE_DIM);
    let mut us = Vec::with_capacity(transitions.len() * 2);
    for t in transitions {
        xs.extend_from_slice(&t.state.to_array());
        us.extend_from_slice(&t.action.to_array());
    }
    (xs, us)
}

/// `||(dx - prediction) / E||_2`.
pub fn nominal_score(predicted: &[f64; STATE_DIM], dx: &[f64; STATE_DIM], scale: &[f64; STATE_DIM]) -> f64 {
    (0..STATE_DIM)
        .map(|d| ((dx[d] - predicted[d]) / scale[d]).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn is_nominal(
    x: &PlanarState,
    u: &Action,
    dx: &[f64; STATE_DIM],
    model: &dyn NominalModel,
    scale: &[f64; STATE_DIM],
    epsilon: f64,
) -> bool {
    let pred = model.predict(&x.to_array(), &u.to_array());
    nominal_score(&pred, dx, scale) <= epsilon
}

/// Error scale and tolerance of the nominal-dynamics test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalCheck {
    pub scale: [f64; STATE_DIM],
    pub epsilon: f64,
}

impl NominalCheck {
    /// Scale from `train`; tolerance either fixed or the given percentile of
    /// scores on `held_out`.
    pub fn calibrate(
        model: &dyn NominalModel,
        train: &[Transition],
        held_out: &[Transition],
        params: &TampcParams,
    ) -> Self {
        let scale = error_scale(model, train);
        let epsilon = match params.epsilon {
            Some(e) => e,
            None => {
                let (xs, us) = stack(held_out);
                let pred = model.predict_batch(&xs, &us);
                let scores: Vec<f64> = held_out
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let p = [pred[i * 4], pred[i * 4 + 1], pred[i * 4 + 2], pred[i * 4 + 3]];
                        nominal_score(&p, &t.dx, &scale)
                    })
                    .collect();
                percentile(&scores, params.epsilon_percentile).unwrap_or(TABLE_EPSILON)
            }
        };
        Self { scale, epsilon }
    }

    pub fn score(&self, model: &dyn NominalModel, t: &Transition) -> f64 {
        let pred = model.predict(&t.state.to_array(), &t.action.to_array());
        nominal_score(&pred, &t.dx, &self.scale)
    }
}

/// Slow-progress test over the states `x_{t0} ..= x_t`: true when some window
/// start `a <= t - n_d` has `d(x_t, x_a) / (t - a) < upsilon * vbar`.
pub fn entering_trap(states: &[PlanarState], vbar: f64, n_d: usize, upsilon: f64) -> bool {
    if states.is_empty() {
        return false;
    }
    let t = states.len() - 1;
    if t < n_d {
        return false;
    }
    let xt = &states[t];
    (0..=t - n_d).any(|a| state_distance(xt, &states[a]) / ((t - a) as f64) < upsilon * vbar)
}

/// Recovery exit test over the states since recovery started.
pub fn recovered(states: &[PlanarState], vbar: f64, params: &TampcParams) -> bool {
    if states.is_empty() {
        return false;
    }
    let t = states.len() - 1;
    if t < params.n_d {
        return false;
    }
    if t > params.n_recov_max {
        return true;
    }
    let converged = state_distance(&states[t], &states[t - params.n_d]) / (params.n_d as f64)
        < params.converged_fraction * params.upsilon * vbar;
    let away = state_distance(&states[t], &states[0]) > params.move_threshold * vbar;
    converged && away
}

/// Index `b` of the transition with the lowest ratio of actual to predicted
/// movement; `states[a] -> states[a + 1]` was predicted to reach
/// `predicted[a]`. Ties keep the earliest; if no transition was expected to
/// move, the most recent one is chosen.
pub fn trap_argmin(states: &[PlanarState], predicted: &[PlanarState]) -> Option<usize> {
    let n = predicted.len().min(states.len().saturating_sub(1));
    if n == 0 {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for a in 0..n {
        let expected = state_distance(&states[a], &predicted[a]);
        if expected <= 0.0 {
            continue;
        }
        let ratio = state_distance(&states[a], &states[a + 1]) / expected;
        if best.is_none_or(|(_, r)| ratio < r) {
            best = Some((a, ratio));
        }
    }
    Some(best.map_or(n - 1, |(a, _)| a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapEntry {
    pub state: PlanarState,
    pub action: Action,
}

/// `sum sigma(u, u') / max(d(x, x'), floor)^2` over the trap set.
pub fn trap_cost(trap: &[TrapEntry], x: &PlanarState, u: &Action, floor: f64) -> f64 {
    trap_cost_at(trap, &x.pos, &u.to_array(), floor)
}

pub(crate) fn trap_cost_at(trap: &[TrapEntry], pos: &Vec2, u: &[f64], floor: f64) -> f64 {
    trap.iter()
        .map(|e| {
            let s = similarity(u, &e.action.to_array());
            if s == 0.0 {
                return 0.0;
            }
            let d = (pos - e.state.pos).norm().max(floor);
            s / (d * d)
        })
        .sum()
}

/// `min_{x' in set} d(x, x')^2`.
pub fn recovery_cost(x: &PlanarState, set: &[PlanarState]) -> Result<f64, ControllerError> {
    if set.is_empty() {
        return Err(ControllerError::EmptyTargetSet);
    }
    Ok(min_sq_distance(&x.pos, set.iter().map(|s| s.pos)))
}

pub(crate) fn min_sq_distance(p: &Vec2, set: impl IntoIterator<Item = Vec2>) -> f64 {
    set.into_iter()
        .map(|q| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
}
