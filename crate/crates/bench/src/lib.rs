//! Shared fixtures for the kernel benchmarks.

use tampc::controller::GoalCost;
use tampc::gp::{GpConfig, InputScaler, LocalGp};
use tampc::repr::FreespaceModel;
use tampc::sim::{collect_random_dataset, task, Transition, Vec2};

/// `n` consecutive transitions from a random freespace walk.
pub fn transitions(n: usize, seed: u64) -> Vec<Transition> {
    let data = collect_random_dataset(&task("freespace").expect("task"), 1, n, seed).expect("dataset");
    data.transitions().cloned().collect()
}

/// A GP window filled with `n` points against the exact freespace model.
pub fn filled_gp(n: usize) -> LocalGp {
    let pts = transitions(n, 3);
    let mut gp = LocalGp::new(
        GpConfig {
            window: n,
            ..GpConfig::default()
        },
        InputScaler::from_transitions(&pts),
    );
    for t in &pts {
        gp.add(t, &FreespaceModel).expect("add");
    }
    gp
}

pub fn goal_cost() -> GoalCost {
    GoalCost {
        goal: Vec2::zeros(),
        bound: 0.03,
    }
}
