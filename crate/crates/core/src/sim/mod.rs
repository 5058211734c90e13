//! Deterministic planar world with axis-aligned walls.
//!
//! A point peg moves by commanded displacements. Contact with a wall clips the
//! motion at the first face crossed, removes the component pushing into the
//! face and lets the tangential remainder slide with a friction factor. The
//! blocked displacement shows up in the state as a reaction force, which is
//! the only way a controller ever perceives a wall.

mod contact;
mod dataset;
mod distance;
mod tasks;

pub use contact::{first_hit, Hit};
pub use dataset::{collect_random_dataset, Dataset, Trajectory};
pub use distance::{dijkstra_goal_distance, DistanceField};
pub use tasks::{task, task_keys, TASK_KEYS};

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub type Vec2 = Vector2<f64>;

/// State dimension: position (2) followed by sensed reaction (2).
pub const STATE_DIM: usize = 4;
/// Control dimension: commanded displacement.
pub const CONTROL_DIM: usize = 2;

/// Default per-component action magnitude (m per control step).
pub const DEFAULT_ACTION_BOUND: f64 = 0.03;

/// Tolerance used when checking that a point is outside wall interiors.
pub const PENETRATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarState {
    pub pos: Vec2,
    pub reaction: Vec2,
}

impl PlanarState {
    pub fn new(pos: Vec2, reaction: Vec2) -> Self {
        Self { pos, reaction }
    }

    /// State at `(x, y)` with no reaction.
    pub fn at(x: f64, y: f64) -> Self {
        Self {
            pos: Vec2::new(x, y),
            reaction: Vec2::zeros(),
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.pos.x, self.pos.y, self.reaction.x, self.reaction.y]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            pos: Vec2::new(v[0], v[1]),
            reaction: Vec2::new(v[2], v[3]),
        }
    }

    /// Componentwise `self + dx`.
    pub fn offset(&self, dx: &[f64; STATE_DIM]) -> Self {
        Self {
            pos: self.pos + Vec2::new(dx[0], dx[1]),
            reaction: self.reaction + Vec2::new(dx[2], dx[3]),
        }
    }

    pub fn diff(&self, earlier: &PlanarState) -> [f64; STATE_DIM] {
        let a = self.to_array();
        let b = earlier.to_array();
        [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub delta: Vec2,
}

impl Action {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self {
            delta: Vec2::new(dx, dy),
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn to_array(&self) -> [f64; CONTROL_DIM] {
        [self.delta.x, self.delta.y]
    }

    /// Clamp each component to `[-bound, bound]`; returns whether clamping changed anything.
    pub fn clamped(&self, bound: f64) -> (Action, bool) {
        let c = Action::new(
            self.delta.x.clamp(-bound, bound),
            self.delta.y.clamp(-bound, bound),
        );
        (c, c != *self)
    }
}

/// Axis-aligned rectangular wall.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub center: Vec2,
    pub half_extents: Vec2,
}

impl Wall {
    pub fn new(center: Vec2, half_extents: Vec2) -> Self {
        Self {
            center,
            half_extents,
        }
    }

    /// Wall spanning `[x0, x1] x [y0, y1]`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            center: Vec2::new(0.5 * (x0 + x1), 0.5 * (y0 + y1)),
            half_extents: Vec2::new(0.5 * (x1 - x0).abs(), 0.5 * (y1 - y0).abs()),
        }
    }

    pub fn min(&self) -> Vec2 {
        self.center - self.half_extents
    }

    pub fn max(&self) -> Vec2 {
        self.center + self.half_extents
    }

    /// True when `p` is strictly inside the wall by more than `tol` on both axes.
    pub fn interior_contains(&self, p: &Vec2, tol: f64) -> bool {
        let lo = self.min();
        let hi = self.max();
        p.x > lo.x + tol && p.x < hi.x - tol && p.y > lo.y + tol && p.y < hi.y - tol
    }

    /// Closed-set containment.
    pub fn contains(&self, p: &Vec2) -> bool {
        let lo = self.min();
        let hi = self.max();
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y
    }

    pub fn translated(&self, offset: Vec2) -> Self {
        Self {
            center: self.center + offset,
            half_extents: self.half_extents,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn clamp(&self, p: &Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }
}

fn default_action_bound() -> f64 {
    DEFAULT_ACTION_BOUND
}

/// Wall layout, goal and start that together define a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub walls: Vec<Wall>,
    pub goal: Vec2,
    pub start: PlanarState,
    pub bounds: Bounds,
    pub slide_friction: f64,
    pub reaction_gain: f64,
    #[serde(default = "default_action_bound")]
    pub action_bound: f64,
    /// Std of Gaussian noise added to sensed reaction by [`step_noisy`]; 0 disables it.
    #[serde(default)]
    pub reaction_noise_std: f64,
}

impl WorldSpec {
    pub fn freespace(bounds: Bounds) -> Self {
        Self {
            walls: Vec::new(),
            goal: Vec2::zeros(),
            start: PlanarState::at(0.0, 0.0),
            bounds,
            slide_friction: 0.5,
            reaction_gain: 100.0,
            action_bound: DEFAULT_ACTION_BOUND,
            reaction_noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (i, w) in self.walls.iter().enumerate() {
            if !(w.half_extents.x > 0.0 && w.half_extents.y > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "wall {i} has non-positive half extents"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.slide_friction) {
            return Err(ConfigError::Invalid("slide_friction must lie in [0, 1]".into()));
        }
        if !(self.reaction_gain > 0.0) {
            return Err(ConfigError::Invalid("reaction_gain must be positive".into()));
        }
        if !(self.action_bound > 0.0) {
            return Err(ConfigError::Invalid("action_bound must be positive".into()));
        }
        if self.reaction_noise_std < 0.0 {
            return Err(ConfigError::Invalid("reaction_noise_std must be non-negative".into()));
        }
        for (name, p) in [("start", self.start.pos), ("goal", self.goal)] {
            if !self.bounds.contains(&p) {
                return Err(ConfigError::Invalid(format!("{name} lies outside bounds")));
            }
            if self.walls.iter().any(|w| w.interior_contains(&p, 0.0)) {
                return Err(ConfigError::Invalid(format!("{name} lies inside a wall")));
            }
        }
        Ok(())
    }

    /// Copy of this world shifted by `offset` (walls, goal, start and bounds).
    pub fn translated(&self, offset: Vec2) -> Self {
        let mut w = self.clone();
        w.walls = self.walls.iter().map(|wall| wall.translated(offset)).collect();
        w.goal += offset;
        w.start.pos += offset;
        w.bounds = Bounds::new(self.bounds.min + offset, self.bounds.max + offset);
        w
    }

    pub fn penetrates(&self, p: &Vec2) -> bool {
        self.walls.iter().any(|w| w.interior_contains(p, PENETRATION_TOL))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: PlanarState,
    pub action: Action,
    pub next_state: PlanarState,
    pub dx: [f64; STATE_DIM],
    /// Action or resulting position had to be clamped to its bounds.
    #[serde(default)]
    pub clamped: bool,
    /// A wall blocked part of the motion.
    #[serde(default)]
    pub contact: bool,
}

impl Transition {
    pub fn new(state: PlanarState, action: Action, next_state: PlanarState) -> Self {
        Self {
            state,
            action,
            next_state,
            dx: next_state.diff(&state),
            clamped: false,
            contact: false,
        }
    }
}

/// Advance the world by one control step.
///
/// The action is clamped to the world's action box before use.
pub fn step(world: &WorldSpec, state: &PlanarState, action: &Action) -> Transition {
    let (action, action_clamped) = action.clamped(world.action_bound);
    let start = state.pos;
    let outcome = contact::resolve(&world.walls, start, action.delta, world.slide_friction);
    let clamped_pos = world.bounds.clamp(&outcome.end);
    let pos_clamped = clamped_pos != outcome.end;
    let reaction = if outcome.contact {
        -outcome.blocked * world.reaction_gain
    } else {
        Vec2::zeros()
    };
    let next = PlanarState::new(clamped_pos, reaction);
    Transition {
        state: *state,
        action,
        next_state: next,
        dx: next.diff(state),
        clamped: action_clamped || pos_clamped,
        contact: outcome.contact,
    }
}

/// [`step`] followed by optional Gaussian noise on the sensed reaction.
pub fn step_noisy<R: Rng + ?Sized>(
    world: &WorldSpec,
    state: &PlanarState,
    action: &Action,
    rng: &mut R,
) -> Transition {
    let mut tr = step(world, state, action);
    if world.reaction_noise_std > 0.0 {
        let n = Normal::new(0.0, world.reaction_noise_std).expect("finite std");
        tr.next_state.reaction += Vec2::new(n.sample(rng), n.sample(rng));
        tr.dx = tr.next_state.diff(&tr.state);
    }
    tr
}

/// Euclidean distance between positions; reaction is ignored.
pub fn state_distance(a: &PlanarState, b: &PlanarState) -> f64 {
    (a.pos - b.pos).norm()
}

/// `max(0, cos(u1, u2))`, or 0 when either action is the zero vector.
pub fn control_similarity(u1: &Action, u2: &Action) -> f64 {
    similarity(&u1.to_array(), &u2.to_array())
}

pub(crate) fn similarity(u1: &[f64], u2: &[f64]) -> f64 {
    let n1 = u1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = u2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return 0.0;
    }
    let dot: f64 = u1.iter().zip(u2).map(|(a, b)| a * b).sum();
    (dot / (n1 * n2)).clamp(0.0, 1.0)
}

/// Quadratic goal cost `(p - g)' Q (p - g) + u' R u` with `Q = R = I` on the
/// planar components; reaction is not penalized.
pub fn goal_cost(world: &WorldSpec, x: &PlanarState, u: &Action) -> f64 {
    let e = x.pos - world.goal;
    e.norm_squared() + u.delta.norm_squared()
}
