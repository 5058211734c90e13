//! Comparison controllers and the controller registry.

use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::tampc::{stream, STREAM_MPPI, STREAM_RANDOM_ACTIONS};
use crate::controller::{
    cold_start_speed, entering_trap, Controller, ControllerError, GoalCost, MixedModel, Mode, StepRecord, Tampc,
    TampcSetup, Variant,
};
use crate::error::ConfigError;
use crate::mppi::{mppi_plan, plan_shift, ControlPlan, MppiParams};
use crate::repr::NominalModel;
use crate::sim::{state_distance, Action, PlanarState, Vec2, CONTROL_DIM, STATE_DIM};

pub const CONTROLLER_KEYS: [&str; 6] = [
    "tampc",
    "tampc-e0",
    "tampc-randrec",
    "nonadaptive",
    "adaptive-mpcpp",
    "apf-vo",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Tampc,
    TampcE0,
    TampcRandrec,
    Nonadaptive,
    AdaptiveMpcpp,
    ApfVo,
}

impl ControllerKind {
    pub fn key(self) -> &'static str {
        match self {
            ControllerKind::Tampc => "tampc",
            ControllerKind::TampcE0 => "tampc-e0",
            ControllerKind::TampcRandrec => "tampc-randrec",
            ControllerKind::Nonadaptive => "nonadaptive",
            ControllerKind::AdaptiveMpcpp => "adaptive-mpcpp",
            ControllerKind::ApfVo => "apf-vo",
        }
    }
}

impl FromStr for ControllerKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "tampc" => ControllerKind::Tampc,
            "tampc-e0" => ControllerKind::TampcE0,
            "tampc-randrec" => ControllerKind::TampcRandrec,
            "nonadaptive" => ControllerKind::Nonadaptive,
            "adaptive-mpcpp" => ControllerKind::AdaptiveMpcpp,
            "apf-vo" => ControllerKind::ApfVo,
            other => return Err(ConfigError::UnknownController(other.to_string())),
        })
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// MPPI on the nominal model with the plain goal cost.
pub struct Nonadaptive {
    model: Arc<dyn NominalModel>,
    params: MppiParams,
    goal: Vec2,
    bound: f64,
    plan: ControlPlan,
    rng: ChaCha8Rng,
    t: usize,
}

impl Nonadaptive {
    pub fn new(model: Arc<dyn NominalModel>, params: MppiParams, goal: Vec2, bound: f64, seed: u64) -> Result<Self, ControllerError> {
        params.validate()?;
        Ok(Self {
            model,
            plan: params.initial_plan(),
            params,
            goal,
            bound,
            rng: stream(seed, STREAM_MPPI),
            t: 0,
        })
    }
}

impl Controller for Nonadaptive {
    fn step(&mut self, observation: &PlanarState) -> Result<StepRecord, ControllerError> {
        let model = MixedModel {
            nominal: &*self.model,
            gp: None,
            bound: self.bound,
        };
        let cost = GoalCost {
            goal: self.goal,
            bound: self.bound,
        };
        let plan = mppi_plan(&model, &cost, &observation.to_array(), &self.plan, &self.params, &mut self.rng)?;
        let mut rec = StepRecord::new(self.t, Mode::Nominal, observation);
        rec.u = [plan.first()[0] * self.bound, plan.first()[1] * self.bound];
        rec.min_cost = Some(plan.diagnostics.min_cost);
        self.plan = plan_shift(&plan, &self.params.u_nominal);
        self.t += 1;
        Ok(rec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApfVoParams {
    pub n_samples: usize,
    pub radius: f64,
    pub gain: f64,
    pub distance_floor: f64,
    pub n_d: usize,
    pub upsilon: f64,
}

impl Default for ApfVoParams {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            radius: 0.05,
            gain: 1.0,
            distance_floor: 1e-3,
            n_d: 5,
            upsilon: 0.6,
        }
    }
}

impl ApfVoParams {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.n_samples == 0 || self.n_d == 0 || !(self.radius > 0.0 && self.gain > 0.0 && self.distance_floor > 0.0) {
            return Err(ControllerError::Invalid("APF-VO needs positive samples, window, radius, gain and floor".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualObstacle {
    pub center: Vec2,
    pub radius: f64,
    pub gain: f64,
}

/// Potential at position `p`: goal distance squared plus one repulsive term
/// per virtual obstacle.
pub fn apf_potential(p: &Vec2, goal: &Vec2, balls: &[VirtualObstacle], floor: f64) -> f64 {
    let mut u = (p - goal).norm_squared();
    for b in balls {
        let d = ((p - b.center).norm() - b.radius).max(floor);
        u += b.gain / (d * d);
    }
    u
}

/// Greedy one-step descent on a potential field through the nominal model,
/// adding a virtual obstacle at every detected local minimum.
pub struct ApfVo {
    params: ApfVoParams,
    model: Arc<dyn NominalModel>,
    goal: Vec2,
    bound: f64,
    balls: Vec<VirtualObstacle>,
    states: Vec<PlanarState>,
    t0: usize,
    vbar_measured: f64,
    rng: ChaCha8Rng,
}

impl ApfVo {
    pub fn new(model: Arc<dyn NominalModel>, params: ApfVoParams, goal: Vec2, bound: f64, seed: u64) -> Result<Self, ControllerError> {
        params.validate()?;
        Ok(Self {
            params,
            model,
            goal,
            bound,
            balls: Vec::new(),
            states: Vec::new(),
            t0: 0,
            vbar_measured: 0.0,
            rng: stream(seed, STREAM_RANDOM_ACTIONS),
        })
    }

    pub fn obstacles(&self) -> &[VirtualObstacle] {
        &self.balls
    }

    pub fn add_obstacle(&mut self, center: Vec2) {
        self.balls.push(VirtualObstacle {
            center,
            radius: self.params.radius,
            gain: self.params.gain,
        });
    }

    fn vbar(&self) -> f64 {
        if self.vbar_measured > 0.0 {
            self.vbar_measured
        } else {
            cold_start_speed(self.bound)
        }
    }

    /// Best of the sampled actions at `x` and its predicted potential.
    pub fn choose(&mut self, x: &PlanarState) -> (Action, f64) {
        let n = self.params.n_samples;
        let mut controls = Vec::with_capacity(n * CONTROL_DIM);
        for _ in 0..n * CONTROL_DIM {
            controls.push(self.rng.random_range(-self.bound..=self.bound));
        }
        let xa = x.to_array();
        let states: Vec<f64> = xa.iter().copied().cycle().take(n * STATE_DIM).collect();
        let dx = self.model.predict_batch(&states, &controls);
        let mut best = (0, f64::INFINITY);
        for k in 0..n {
            let p = Vec2::new(xa[0] + dx[k * STATE_DIM], xa[1] + dx[k * STATE_DIM + 1]);
            let u = apf_potential(&p, &self.goal, &self.balls, self.params.distance_floor);
            if u < best.1 {
                best = (k, u);
            }
        }
        let k = best.0;
        (Action::new(controls[k * 2], controls[k * 2 + 1]), best.1)
    }
}

impl Controller for ApfVo {
    fn step(&mut self, observation: &PlanarState) -> Result<StepRecord, ControllerError> {
        let t = self.states.len();
        self.states.push(*observation);
        let mut rec = StepRecord::new(t, Mode::Nominal, observation);
        let n_d = self.params.n_d;
        if t >= n_d {
            let v = state_distance(&self.states[t - n_d], observation) / n_d as f64;
            self.vbar_measured = self.vbar_measured.max(v);
        }
        if entering_trap(&self.states[self.t0..], self.vbar(), n_d, self.params.upsilon) {
            self.add_obstacle(observation.pos);
            self.t0 = t;
            rec.trap_added = true;
        }
        let (u, potential) = self.choose(observation);
        rec.u = u.to_array();
        rec.min_cost = Some(potential);
        rec.vbar = self.vbar();
        rec.trap_size = self.balls.len();
        Ok(rec)
    }
}

/// Builds the controller named by `kind`.
pub fn build_controller(
    kind: ControllerKind,
    model: Arc<dyn NominalModel>,
    setup: TampcSetup,
    apf: &ApfVoParams,
) -> Result<Box<dyn Controller>, ControllerError> {
    let variant = match kind {
        ControllerKind::Tampc => Variant::Full,
        ControllerKind::TampcE0 => Variant::ZeroError,
        ControllerKind::TampcRandrec => Variant::RandomRecovery,
        ControllerKind::AdaptiveMpcpp => Variant::PinnedNonNominal,
        ControllerKind::Nonadaptive => {
            return Ok(Box::new(Nonadaptive::new(model, setup.mppi, setup.goal, setup.bound, setup.seed)?));
        }
        ControllerKind::ApfVo => {
            return Ok(Box::new(ApfVo::new(model, apf.clone(), setup.goal, setup.bound, setup.seed)?));
        }
    };
    Ok(Box::new(Tampc::new(variant, model, setup)?))
}
