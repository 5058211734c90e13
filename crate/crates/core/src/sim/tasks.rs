//! Task library. Every layout places the hole (goal) at the origin, except the
//! translated copy of the T task which is shifted by `(10, 10)`.
//!
//! Wall rectangles overlap where they join so no seam exists between them.
//! Extents already include the peg half-width (the peg is treated as a point).

use super::{Bounds, PlanarState, Vec2, Wall, WorldSpec};
use crate::error::ConfigError;

pub const TASK_KEYS: [&str; 5] = ["freespace", "peg-u", "peg-i", "peg-t", "peg-t-translated"];

pub fn task_keys() -> &'static [&'static str] {
    &TASK_KEYS
}

fn base(walls: Vec<Wall>, start: PlanarState) -> WorldSpec {
    WorldSpec {
        walls,
        goal: Vec2::zeros(),
        start,
        bounds: Bounds::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0)),
        slide_friction: 0.5,
        reaction_gain: 100.0,
        action_bound: super::DEFAULT_ACTION_BOUND,
        reaction_noise_std: 0.0,
    }
}

fn peg_t() -> WorldSpec {
    base(
        vec![
            // cross bar shielding the hole
            Wall::from_corners(-0.15, 0.13, 0.15, 0.17),
            // stem pointing at the start
            Wall::from_corners(-0.02, 0.15, 0.02, 0.45),
        ],
        PlanarState::at(0.05, 0.75),
    )
}

pub fn task(key: &str) -> Result<WorldSpec, ConfigError> {
    let world = match key {
        "freespace" => WorldSpec {
            // wide enough that random walks from [-1, 1]^2 never reach a bound
            bounds: Bounds::new(Vec2::new(-3.0, -3.0), Vec2::new(3.0, 3.0)),
            ..base(Vec::new(), PlanarState::at(0.05, 0.75))
        },
        "peg-t" => peg_t(),
        "peg-t-translated" => peg_t().translated(Vec2::new(10.0, 10.0)),
        "peg-u" => base(
            vec![
                Wall::from_corners(-0.20, -0.16, 0.20, -0.12),
                Wall::from_corners(-0.20, -0.16, -0.16, 0.14),
                Wall::from_corners(0.16, -0.16, 0.20, 0.14),
            ],
            PlanarState::at(0.03, -0.65),
        ),
        "peg-i" => base(
            vec![Wall::from_corners(-0.25, 0.10, 0.25, 0.14)],
            PlanarState::at(0.02, 0.65),
        ),
        other => return Err(ConfigError::UnknownTask(other.to_string())),
    };
    world.validate()?;
    Ok(world)
}
