use serde::{Deserialize, Serialize};

use super::{ControllerError, Mode};
use crate::sim::{Action, PlanarState, CONTROL_DIM, STATE_DIM};

/// Posterior summary logged whenever an arm is pulled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSnapshot {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One line of a run log. `x` is the observation the controller acted on and
/// `u` the physical action it returned; `dx` and `score` describe the
/// transition that led to `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub mode: Mode,
    pub x: [f64; STATE_DIM],
    pub u: [f64; CONTROL_DIM],
    pub dx: Option<[f64; STATE_DIM]>,
    pub score: Option<f64>,
    pub nominal: Option<bool>,
    pub spread: f64,
    pub vbar: f64,
    pub trap_size: usize,
    pub arm: Option<usize>,
    pub arm_weights: [f64; 2],
    pub reward: Option<f64>,
    pub min_cost: Option<f64>,
    pub annealed: bool,
    pub trap_added: bool,
    pub renormalized: bool,
    pub arm_snapshot: Option<ArmSnapshot>,
}

impl StepRecord {
    pub fn new(t: usize, mode: Mode, x: &PlanarState) -> Self {
        Self {
            t,
            mode,
            x: x.to_array(),
            u: [0.0; CONTROL_DIM],
            dx: None,
            score: None,
            nominal: None,
            spread: 0.0,
            vbar: 0.0,
            trap_size: 0,
            arm: None,
            arm_weights: [0.0; 2],
            reward: None,
            min_cost: None,
            annealed: false,
            trap_added: false,
            renormalized: false,
            arm_snapshot: None,
        }
    }

    pub fn action(&self) -> Action {
        Action::new(self.u[0], self.u[1])
    }
}

/// A closed-loop policy fed one observation per step.
pub trait Controller {
    fn step(&mut self, observation: &PlanarState) -> Result<StepRecord, ControllerError>;
}
