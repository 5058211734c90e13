use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    cold_start_speed, entering_trap, recovered, trap_argmin, trap_cost, ArmSnapshot, Controller, ControllerError,
    GoalCost, MixedModel, Mode, NominalCheck, RecoveryCost, StepRecord, TampcParams, TrapEntry, TrapGoalCost,
};
use crate::bandit::{ArmSet, BanditConfig};
use crate::gp::{GpConfig, InputScaler, LocalGp};
use crate::mppi::{mppi_plan, plan_shift, ControlPlan, MppiParams};
use crate::repr::NominalModel;
use crate::sim::{state_distance, Action, PlanarState, Transition, Vec2};

/// Random stream tags; every consumer of randomness draws from its own stream
/// so variants stay paired on the streams they share.
pub(crate) const STREAM_MPPI: u64 = 0;
pub(crate) const STREAM_BANDIT: u64 = 1;
pub(crate) const STREAM_RANDOM_ACTIONS: u64 = 2;

pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// No error-dynamics estimate: the GP term is always zero.
    ZeroError,
    /// Uniform random actions in recovery until dynamics is nominal again.
    RandomRecovery,
    /// Mode pinned to non-nominal: always adapts, never recovers or records traps.
    PinnedNonNominal,
}

pub struct Tampc {
    variant: Variant,
    params: TampcParams,
    mppi: MppiParams,
    recovery_mppi: MppiParams,
    check: NominalCheck,
    model: Arc<dyn NominalModel>,
    goal: Vec2,
    bound: f64,

    mode: Mode,
    t0: usize,
    segment_start: usize,
    vbar_measured: f64,
    spread: f64,
    trap: Vec<TrapEntry>,
    nominal_states: VecDeque<PlanarState>,
    fastest: Vec<(f64, PlanarState)>,
    gp: LocalGp,
    arms: ArmSet,
    arm: Option<usize>,
    arm_weights: [f64; 2],
    last_pull: usize,
    recovery_start: usize,

    states: Vec<PlanarState>,
    actions: Vec<Action>,
    predicted: Vec<PlanarState>,
    flags: Vec<bool>,

    plan: ControlPlan,
    mppi_rng: ChaCha8Rng,
    bandit_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
}

/// Everything a [`Tampc`] needs besides the nominal model.
#[derive(Clone, Debug)]
pub struct TampcSetup {
    pub params: TampcParams,
    pub mppi: MppiParams,
    pub gp: GpConfig,
    pub bandit: BanditConfig,
    pub scaler: InputScaler,
    pub check: NominalCheck,
    pub goal: Vec2,
    pub bound: f64,
    pub seed: u64,
}

impl Tampc {
    pub fn new(variant: Variant, model: Arc<dyn NominalModel>, setup: TampcSetup) -> Result<Self, ControllerError> {
        setup.params.validate()?;
        setup.mppi.validate()?;
        let params = setup.params;
        let recovery_mppi = MppiParams {
            horizon: params.recovery_horizon,
            terminal_multiplier: params.recovery_terminal_multiplier,
            ..setup.mppi.clone()
        };
        let gp = LocalGp::new(GpConfig { window: params.n_local, ..setup.gp }, setup.scaler);
        let mut bandit_rng = stream(setup.seed, STREAM_BANDIT);
        let arms = ArmSet::new(&BanditConfig { n_arms: params.n_arms, ..setup.bandit }, &mut bandit_rng);
        let mode = if variant == Variant::PinnedNonNominal {
            Mode::NonNominal
        } else {
            Mode::Nominal
        };
        Ok(Self {
            variant,
            plan: setup.mppi.initial_plan(),
            mppi: setup.mppi,
            recovery_mppi,
            check: setup.check,
            model,
            goal: setup.goal,
            bound: setup.bound,
            mode,
            t0: 0,
            segment_start: 0,
            vbar_measured: 0.0,
            spread: params.initial_spread,
            trap: Vec::new(),
            nominal_states: VecDeque::new(),
            fastest: Vec::new(),
            gp,
            arms,
            arm: None,
            arm_weights: [0.0; 2],
            last_pull: 0,
            recovery_start: 0,
            states: Vec::new(),
            actions: Vec::new(),
            predicted: Vec::new(),
            flags: Vec::new(),
            mppi_rng: stream(setup.seed, STREAM_MPPI),
            bandit_rng,
            action_rng: stream(setup.seed, STREAM_RANDOM_ACTIONS),
            params,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    pub fn trap_set(&self) -> &[TrapEntry] {
        &self.trap
    }

    pub fn gp(&self) -> &LocalGp {
        &self.gp
    }

    pub fn arms(&self) -> &ArmSet {
        &self.arms
    }

    pub fn check(&self) -> &NominalCheck {
        &self.check
    }

    /// Maximum nominal speed, or the cold-start speed before any measurement.
    pub fn vbar(&self) -> f64 {
        if self.vbar_measured > 0.0 {
            self.vbar_measured
        } else {
            cold_start_speed(self.bound)
        }
    }

    fn last_n_flags(&self, value: bool) -> bool {
        let n = self.params.n_n;
        self.flags.len() >= n && self.flags[self.flags.len() - n..].iter().all(|f| *f == value)
    }

    fn set_mode(&mut self, to: Mode) {
        if to == self.mode {
            return;
        }
        if to == Mode::Recovery {
            self.plan = self.recovery_mppi.initial_plan();
        } else if self.mode == Mode::Recovery {
            self.plan = self.plan.resized(self.mppi.horizon, &self.mppi.u_nominal);
        }
        self.mode = to;
    }

    fn record_fastest(&mut self, from: &PlanarState, to: &PlanarState) {
        let speed = state_distance(from, to);
        let pos = self.fastest.iter().position(|(s, _)| speed > *s).unwrap_or(self.fastest.len());
        if pos < self.params.n_fastest {
            self.fastest.insert(pos, (speed, *from));
            self.fastest.truncate(self.params.n_fastest);
        }
    }

    fn adapt(&mut self, tr: &Transition) -> Result<(), ControllerError> {
        if self.variant == Variant::ZeroError {
            return Ok(());
        }
        self.gp.add(tr, &*self.model)?;
        self.gp.fit()?;
        Ok(())
    }

    fn pull_arm(&mut self, t: usize, rec: &mut StepRecord) {
        let a = self.arms.select(&mut self.bandit_rng);
        self.arm = Some(a);
        let w = &self.arms.weights[a];
        self.arm_weights = [w[0], w.get(1).copied().unwrap_or(0.0)];
        self.last_pull = t;
        rec.arm_snapshot = Some(ArmSnapshot {
            mean: self.arms.mean.iter().copied().collect(),
            var: self.arms.cov.diagonal().iter().copied().collect(),
        });
    }

    fn expand_trap_set(&mut self, t: usize) {
        let start = self.segment_start.min(t);
        let b = trap_argmin(&self.states[start..=t], &self.predicted[start..t]);
        if let Some(b) = b {
            self.trap.push(TrapEntry {
                state: self.states[start + b],
                action: self.actions[start + b],
            });
        }
    }

    fn renormalize_spread(&mut self, x: &PlanarState) {
        let goal = (x.pos - self.goal).norm_squared();
        let last = self.actions.last().copied().unwrap_or(Action::zero());
        let ct = trap_cost(&self.trap, x, &last, self.params.trap_distance_floor);
        self.spread = goal / ct.max(self.params.spread_floor);
    }

    fn update_mode(&mut self, tr: &Transition, nominal: bool, rec: &mut StepRecord) -> Result<(), ControllerError> {
        let t = self.states.len() - 1;
        let x = self.states[t];
        if self.variant == Variant::PinnedNonNominal {
            return self.adapt(tr);
        }
        match self.mode {
            Mode::Nominal => {
                if self.last_n_flags(false) {
                    self.set_mode(Mode::NonNominal);
                    self.t0 = t;
                    self.gp.reset();
                    if self.variant != Variant::ZeroError {
                        self.gp.add(tr, &*self.model)?;
                    }
                    self.fastest.clear();
                    self.record_fastest(&tr.state, &tr.next_state);
                } else if nominal {
                    self.spread *= self.params.gamma;
                    rec.annealed = true;
                    let n_d = self.params.n_d;
                    if t >= n_d {
                        let v = state_distance(&self.states[t - n_d], &x) / n_d as f64;
                        self.vbar_measured = self.vbar_measured.max(v);
                    }
                }
            }
            Mode::NonNominal | Mode::Recovery => {
                self.adapt(tr)?;
                self.record_fastest(&tr.state, &tr.next_state);
                let back_to_nominal = self.last_n_flags(true);
                let vbar = self.vbar();
                if self.mode == Mode::NonNominal
                    && entering_trap(&self.states[self.t0..=t], vbar, self.params.n_d, self.params.upsilon)
                {
                    self.set_mode(Mode::Recovery);
                    self.expand_trap_set(t);
                    rec.trap_added = true;
                    self.recovery_start = t;
                    if self.variant != Variant::RandomRecovery {
                        self.pull_arm(t, rec);
                    }
                }
                if self.mode == Mode::Recovery {
                    let done = match self.variant {
                        Variant::RandomRecovery => back_to_nominal,
                        _ => back_to_nominal || recovered(&self.states[self.recovery_start..=t], vbar, &self.params),
                    };
                    if done {
                        self.set_mode(Mode::NonNominal);
                        self.renormalize_spread(&x);
                        rec.renormalized = true;
                        self.t0 = t;
                        self.segment_start = t;
                    } else if self.variant != Variant::RandomRecovery && t - self.last_pull >= self.params.n_mab {
                        let n = self.params.n_mab;
                        let reward = state_distance(&x, &self.states[t - n]) / (n as f64 * vbar);
                        if let Some(a) = self.arm {
                            self.arms.update(a, reward);
                        }
                        rec.reward = Some(reward);
                        self.pull_arm(t, rec);
                    }
                }
                if back_to_nominal {
                    self.set_mode(Mode::Nominal);
                }
            }
        }
        Ok(())
    }

    fn act(&mut self, x: &PlanarState, rec: &mut StepRecord) -> Result<Action, ControllerError> {
        let use_gp = self.variant != Variant::ZeroError && self.mode != Mode::Nominal;
        let model = MixedModel {
            nominal: &*self.model,
            gp: use_gp.then_some(&self.gp),
            bound: self.bound,
        };
        let xa = x.to_array();
        let u_norm: [f64; 2] = match self.mode {
            Mode::Recovery if self.variant == Variant::RandomRecovery => {
                [self.action_rng.random_range(-1.0..=1.0), self.action_rng.random_range(-1.0..=1.0)]
            }
            Mode::Recovery => {
                let nominal: Vec<Vec2> = if self.nominal_states.is_empty() {
                    vec![self.states[0].pos]
                } else {
                    self.nominal_states.iter().map(|s| s.pos).collect()
                };
                let fastest: Vec<Vec2> = if self.fastest.is_empty() {
                    vec![x.pos]
                } else {
                    self.fastest.iter().map(|(_, s)| s.pos).collect()
                };
                let cost = RecoveryCost {
                    omega: self.params.omega,
                    weights: self.arm_weights,
                    nominal_states: &nominal,
                    fastest_states: &fastest,
                };
                let plan = mppi_plan(&model, &cost, &xa, &self.plan, &self.recovery_mppi, &mut self.mppi_rng)?;
                rec.min_cost = Some(plan.diagnostics.min_cost);
                let u = [plan.first()[0], plan.first()[1]];
                self.plan = plan_shift(&plan, &self.recovery_mppi.u_nominal);
                u
            }
            _ => {
                let cost = TrapGoalCost {
                    goal: GoalCost {
                        goal: self.goal,
                        bound: self.bound,
                    },
                    spread: self.spread,
                    trap: &self.trap,
                    floor: self.params.trap_distance_floor,
                };
                let plan = mppi_plan(&model, &cost, &xa, &self.plan, &self.mppi, &mut self.mppi_rng)?;
                rec.min_cost = Some(plan.diagnostics.min_cost);
                let u = [plan.first()[0], plan.first()[1]];
                self.plan = plan_shift(&plan, &self.mppi.u_nominal);
                u
            }
        };
        let u = Action::new(u_norm[0] * self.bound, u_norm[1] * self.bound);
        let next = model.next_state(&xa, &u.to_array());
        self.predicted.push(PlanarState::from_slice(&next));
        Ok(u)
    }
}

impl Controller for Tampc {
    fn step(&mut self, observation: &PlanarState) -> Result<StepRecord, ControllerError> {
        let t = self.states.len();
        self.states.push(*observation);
        let mut rec = StepRecord::new(t, self.mode, observation);
        if t > 0 {
            let tr = Transition::new(self.states[t - 1], self.actions[t - 1], *observation);
            let score = self.check.score(&*self.model, &tr);
            let nominal = score <= self.check.epsilon;
            self.flags.push(nominal);
            rec.dx = Some(tr.dx);
            rec.score = Some(score);
            rec.nominal = Some(nominal);
            self.update_mode(&tr, nominal, &mut rec)?;
        }
        if self.mode == Mode::Nominal && rec.nominal != Some(false) {
            self.nominal_states.push_back(*observation);
            while self.nominal_states.len() > self.params.n_nom_buffer {
                self.nominal_states.pop_front();
            }
        }
        rec.mode = self.mode;
        let u = self.act(observation, &mut rec)?;
        self.actions.push(u);
        rec.u = u.to_array();
        rec.spread = self.spread;
        rec.vbar = self.vbar();
        rec.trap_size = self.trap.len();
        rec.arm = self.arm;
        rec.arm_weights = self.arm_weights;
        Ok(rec)
    }
}
