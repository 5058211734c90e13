use serde::Serialize;

use crate::baselines::ControllerKind;
use crate::controller::{StepRecord, TampcParams};
use crate::sim::{PlanarState, Vec2, WorldSpec};

const SPREAD_RTOL: f64 = 1e-9;
const REWARD_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceViolation {
    pub t: usize,
    pub rule: &'static str,
    pub detail: String,
}

/// Checks a run log against the controller invariants: legal mode
/// transitions, segmentwise geometric annealing of the trap-cost weight,
/// a trap set that never shrinks, bandit rewards that match the logged
/// states, and positions that never enter a wall. `final_state` is the
/// state reached after the last logged action.
pub fn check_trace(
    log: &[StepRecord],
    world: &WorldSpec,
    final_state: Option<&PlanarState>,
    params: &TampcParams,
    kind: ControllerKind,
) -> Vec<TraceViolation> {
    let mut out = Vec::new();
    let mut flag = |t: usize, rule: &'static str, detail: String| out.push(TraceViolation { t, rule, detail });
    let tampc = matches!(
        kind,
        ControllerKind::Tampc | ControllerKind::TampcE0 | ControllerKind::TampcRandrec | ControllerKind::AdaptiveMpcpp
    );

    let mut expected_spread = params.initial_spread;
    for (i, rec) in log.iter().enumerate() {
        if rec.t != i {
            flag(i, "step-index", format!("record carries t={}", rec.t));
        }
        if world.penetrates(&Vec2::new(rec.x[0], rec.x[1])) {
            flag(i, "wall-penetration", format!("position ({}, {})", rec.x[0], rec.x[1]));
        }
        if i > 0 {
            let prev = &log[i - 1];
            if !prev.mode.can_become(rec.mode) {
                flag(i, "mode-transition", format!("{:?} -> {:?}", prev.mode, rec.mode));
            }
            if rec.trap_size < prev.trap_size {
                flag(i, "trap-monotone", format!("{} -> {}", prev.trap_size, rec.trap_size));
            }
        }
        if !tampc {
            continue;
        }
        if rec.renormalized {
            expected_spread = rec.spread;
        } else if rec.annealed {
            expected_spread *= params.gamma;
        }
        if (rec.spread - expected_spread).abs() > SPREAD_RTOL * expected_spread.abs().max(1e-300) {
            flag(i, "spread-annealing", format!("logged {} expected {}", rec.spread, expected_spread));
        }
        if let Some(r) = rec.reward {
            let n = params.n_mab;
            if i < n {
                flag(i, "bandit-reward", "reward before n_mab steps".into());
            } else {
                let a = &log[i - n].x;
                let d = ((rec.x[0] - a[0]).powi(2) + (rec.x[1] - a[1]).powi(2)).sqrt();
                let want = d / (n as f64 * rec.vbar);
                if (r - want).abs() > REWARD_TOL {
                    flag(i, "bandit-reward", format!("logged {r} recomputed {want}"));
                }
            }
        }
    }
    if let Some(x) = final_state {
        if world.penetrates(&x.pos) {
            flag(log.len(), "wall-penetration", format!("final position ({}, {})", x.pos.x, x.pos.y));
        }
    }
    out
}
