//! Model and cost views handed to MPPI. MPPI works on controls normalized to
//! `[-1, 1]`; everything here multiplies by the action bound before touching
//! physical quantities.

use super::{min_sq_distance, trap_cost_at, TrapEntry};
use crate::gp::LocalGp;
use crate::mppi::{RolloutModel, StageCost};
use crate::repr::NominalModel;
use crate::sim::{Vec2, CONTROL_DIM, STATE_DIM};

/// `x + f_nom(x, u) + g(x, u)`, with the GP term optional.
pub struct MixedModel<'a> {
    pub nominal: &'a dyn NominalModel,
    pub gp: Option<&'a LocalGp>,
    pub bound: f64,
}

impl MixedModel<'_> {
    fn physical(&self, controls: &[f64]) -> Vec<f64> {
        controls.iter().map(|u| u * self.bound).collect()
    }

    /// Predicted next state for one physical control.
    pub fn next_state(&self, x: &[f64; STATE_DIM], u_phys: &[f64; CONTROL_DIM]) -> [f64; STATE_DIM] {
        let dx = self.delta(x, u_phys);
        [x[0] + dx[0], x[1] + dx[1], x[2] + dx[2], x[3] + dx[3]]
    }

    fn delta(&self, states: &[f64], controls_phys: &[f64]) -> Vec<f64> {
        let mut dx = self.nominal.predict_batch(states, controls_phys);
        if let Some(gp) = self.gp {
            let g = gp.predict_mean_batch(states, controls_phys);
            dx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        dx
    }
}

impl RolloutModel for MixedModel<'_> {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn step_batch(&self, states: &[f64], controls: &[f64], _rollout: usize) -> Vec<f64> {
        let dx = self.delta(states, &self.physical(controls));
        states.iter().zip(dx).map(|(x, d)| x + d).collect()
    }
}

/// Quadratic goal cost on position and physical control.
pub struct GoalCost {
    pub goal: Vec2,
    pub bound: f64,
}

impl StageCost for GoalCost {
    fn state_cost(&self, x: &[f64]) -> f64 {
        (x[0] - self.goal.x).powi(2) + (x[1] - self.goal.y).powi(2)
    }

    fn action_cost(&self, _x: &[f64], u: &[f64]) -> f64 {
        u.iter().map(|v| (v * self.bound).powi(2)).sum()
    }
}

/// Goal cost plus `spread * c_T`.
pub struct TrapGoalCost<'a> {
    pub goal: GoalCost,
    pub spread: f64,
    pub trap: &'a [TrapEntry],
    pub floor: f64,
}

impl StageCost for TrapGoalCost<'_> {
    fn state_cost(&self, x: &[f64]) -> f64 {
        self.goal.state_cost(x)
    }

    fn action_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let base = self.goal.action_cost(x, u);
        if self.trap.is_empty() {
            return base;
        }
        base + self.spread * trap_cost_at(self.trap, &Vec2::new(x[0], x[1]), u, self.floor)
    }
}

/// `omega * (w1 c_rec(X_nom) + w2 c_rec(X_fastest))`.
pub struct RecoveryCost<'a> {
    pub omega: f64,
    pub weights: [f64; 2],
    pub nominal_states: &'a [Vec2],
    pub fastest_states: &'a [Vec2],
}

impl StageCost for RecoveryCost<'_> {
    fn state_cost(&self, x: &[f64]) -> f64 {
        let p = Vec2::new(x[0], x[1]);
        let a = min_sq_distance(&p, self.nominal_states.iter().copied());
        let b = min_sq_distance(&p, self.fastest_states.iter().copied());
        self.omega * (self.weights[0] * a + self.weights[1] * b)
    }

    fn action_cost(&self, _x: &[f64], _u: &[f64]) -> f64 {
        0.0
    }
}
