//! Trap-aware model predictive control.
//!
//! The crate is organised bottom-up: [`sim`] is the planar contact world,
//! [`nn`] and [`repr`] learn the nominal dynamics offline, [`gp`] models the
//! online error dynamics, [`mppi`] is the sampling MPC, [`bandit`] picks
//! recovery policies, [`controller`] ties them together and [`baselines`]
//! holds the comparison controllers. [`harness`] runs trials and sweeps.

pub mod bandit;
pub mod baselines;
pub mod controller;
pub mod error;
pub mod gp;
pub mod harness;
pub mod mppi;
pub mod nn;
pub mod repr;
pub mod sim;
pub mod stats;

pub use error::ConfigError;
pub use sim::{Action, PlanarState, Transition, Vec2, WorldSpec};
