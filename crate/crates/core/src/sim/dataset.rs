use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{step_noisy, Action, PlanarState, Transition, WorldSpec};
use crate::error::ConfigError;

/// Temporally consecutive transitions sharing one trajectory id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub transitions: Vec<Transition>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    /// Split by trajectory id: ids with `id % 10 == 9` go to validation.
    pub fn split_validation(&self) -> (Dataset, Dataset) {
        let (val, train): (Vec<_>, Vec<_>) = self
            .trajectories
            .iter()
            .cloned()
            .partition(|t| t.id % 10 == 9);
        (
            Dataset { trajectories: train },
            Dataset { trajectories: val },
        )
    }

    /// JSON-lines: one transition per line tagged with its trajectory id.
    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            trajectory_id: usize,
            #[serde(flatten)]
            transition: &'a Transition,
        }
        for traj in &self.trajectories {
            for tr in &traj.transitions {
                let line = Line {
                    trajectory_id: traj.id,
                    transition: tr,
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Dataset, ConfigError> {
        #[derive(Deserialize)]
        struct Line {
            trajectory_id: usize,
            #[serde(flatten)]
            transition: Transition,
        }
        let mut trajectories: Vec<Trajectory> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| ConfigError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| ConfigError::Malformed(format!("dataset line {}: {e}", lineno + 1)))?;
            match trajectories.last_mut() {
                Some(t) if t.id == parsed.trajectory_id => t.transitions.push(parsed.transition),
                _ => trajectories.push(Trajectory {
                    id: parsed.trajectory_id,
                    transitions: vec![parsed.transition],
                }),
            }
        }
        Ok(Dataset { trajectories })
    }
}

/// Random-action rollouts in a wall-free world.
///
/// Starts are uniform in `[-1, 1]^2`; actions are uniform in the world's
/// action box. Sensed reaction carries the world's reaction noise, if any.
/// Reproducible from `seed`.
pub fn collect_random_dataset(
    world: &WorldSpec,
    n_traj: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Dataset, ConfigError> {
    if !world.walls.is_empty() {
        return Err(ConfigError::Invalid(
            "random dataset collection needs a wall-free world".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = world.action_bound;
    let trajectories = (0..n_traj)
        .map(|id| {
            let mut state = PlanarState::at(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            let transitions = (0..n_steps)
                .map(|_| {
                    let u = Action::new(rng.random_range(-b..=b), rng.random_range(-b..=b));
                    let tr = step_noisy(world, &state, &u, &mut rng);
                    state = tr.next_state;
                    tr
                })
                .collect();
            Trajectory { id, transitions }
        })
        .collect();
    Ok(Dataset { trajectories })
}
