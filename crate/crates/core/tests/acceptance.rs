//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not raised, so the process exits successfully unless
//! `TAMPC_ACCEPTANCE_STRICT` is set. `TAMPC_ACCEPTANCE_ONLY=4,5` restricts the
//! run to the listed criteria. Trained models and trial results are recomputed
//! on every run; expect the whole suite to take tens of minutes on one core.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tampc::bandit::ArmSet;
use tampc::controller::{trap_argmin, TampcParams};
use tampc::gp::{log_marginal_likelihood, GpConfig, HeadHyper, InputScaler, LocalGp, INPUT_DIM};
use tampc::harness::{
    aggregate, check_trace, ood_eval, ood_medians, run_trial, train_checkpoints, ModelBundle, NominalSource, RunConfig,
    Summary, Trial,
};
use tampc::mppi::{mppi_plan, plan_shift, MppiParams, RolloutModel, StageCost};
use tampc::nn::Mlp;
use tampc::repr::{base_loss, vrex_loss, TrainConfig, TransformSet};
use tampc::sim::{collect_random_dataset, state_distance, task, DistanceField, PlanarState};

const SEEDS: u64 = 10;
const TRIAL_BUDGET_S: f64 = 300.0;
const TAMPC_MIN_SUCCESSES: usize = 6;
const OOD_WITHIN_FACTOR: f64 = 3.0;
const ORACLE_TOL: f64 = 1e-10;
const FD_REL_TOL: f64 = 1e-4;
const FD_INSTANCES: usize = 100;
const TRACE_TOL: f64 = 1e-9;
const MPPI_GOAL_RADIUS: f64 = 0.05;
const MPPI_REPLANS: usize = 30;
const BANDIT_BEST_FREQ: f64 = 0.8;
const BANDIT_PULLS: usize = 500;
const BANDIT_SWITCH_WINDOW: usize = 200;
const BANDIT_REPS: u64 = 20;
/// Tuned peg-U settings for full TAMPC; the ablations keep the defaults.
const PEG_U_TAMPC_N_D: usize = 15;
const PEG_U_TAMPC_HORIZON: usize = 15;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn counts(s: &[Summary], controller: &str) -> usize {
    s.iter().find(|s| s.controller == controller).map_or(0, |s| s.successes)
}

// ---------------------------------------------------------------- trials

struct Trials {
    runs: Vec<(RunConfig, Trial)>,
}

impl Trials {
    fn run(&mut self, base: &RunConfig, bundle: &ModelBundle) -> Vec<Summary> {
        let mut results = Vec::new();
        for seed in 0..SEEDS {
            let cfg = RunConfig { seed, ..base.clone() };
            let trial = run_trial(&cfg, bundle).expect("trial runs");
            results.push(trial.result.clone());
            self.runs.push((cfg, trial));
        }
        aggregate(&results)
    }

    fn slowest(&self) -> f64 {
        self.runs.iter().map(|(_, t)| t.result.wall_clock_s).fold(0.0, f64::max)
    }
}

fn config(task_key: &str, controller: &str) -> RunConfig {
    RunConfig {
        task: task_key.into(),
        controller: controller.into(),
        ..RunConfig::default()
    }
}

fn learned_bundle() -> ModelBundle {
    let data = collect_random_dataset(&task("freespace").unwrap(), 200, 50, 0).unwrap();
    let params = TampcParams::default();
    let (ck, _) = train_checkpoints(&data, &TrainConfig::default(), &params, 0).expect("training");
    ModelBundle::from_checkpoints(&ck, NominalSource::Invariant, &params)
}

fn peg_t_counts(trials: &mut Trials, nominal: NominalSource, bundle: &ModelBundle) -> Vec<Summary> {
    let mut s = Vec::new();
    for c in ["nonadaptive", "adaptive-mpcpp", "tampc"] {
        s.extend(trials.run(&RunConfig { nominal, ..config("peg-t", c) }, bundle));
    }
    s
}

fn headline(trials: &mut Trials, bundle: &ModelBundle) -> Outcome {
    let s = peg_t_counts(trials, NominalSource::Invariant, bundle);
    let (na, ad, ta) = (counts(&s, "nonadaptive"), counts(&s, "adaptive-mpcpp"), counts(&s, "tampc"));
    let slowest = trials.slowest();
    outcome(
        na == 0 && ad == 0 && ta >= TAMPC_MIN_SUCCESSES && slowest <= TRIAL_BUDGET_S,
        format!(
            "peg-t successes: nonadaptive {na}/10, adaptive-mpcpp {ad}/10, tampc {ta}/10 (need 0, 0, >= {TAMPC_MIN_SUCCESSES}); slowest trial {slowest:.1}s"
        ),
    )
}

fn ablation(trials: &mut Trials, bundle: &ModelBundle) -> Outcome {
    let mut tuned = config("peg-u", "tampc");
    tuned.tampc.n_d = PEG_U_TAMPC_N_D;
    tuned.mppi.horizon = PEG_U_TAMPC_HORIZON;
    let mut s = trials.run(&tuned, bundle);
    for c in ["tampc-e0", "tampc-randrec"] {
        s.extend(trials.run(&config("peg-u", c), bundle));
    }
    let (ta, e0, rr) = (counts(&s, "tampc"), counts(&s, "tampc-e0"), counts(&s, "tampc-randrec"));
    outcome(
        ta >= e0 && ta >= rr,
        format!(
            "peg-u successes: tampc {ta}/10 (n_d {PEG_U_TAMPC_N_D}, horizon {PEG_U_TAMPC_HORIZON}), tampc-e0 {e0}/10, tampc-randrec {rr}/10"
        ),
    )
}

/// The headline counts again with the true freespace dynamics as nominal model.
fn headline_exact(trials: &mut Trials) -> String {
    let s = peg_t_counts(trials, NominalSource::Exact, &ModelBundle::exact(&TampcParams::default()));
    format!(
        "peg-t successes with the exact nominal model: nonadaptive {}/10, adaptive-mpcpp {}/10, tampc {}/10",
        counts(&s, "nonadaptive"),
        counts(&s, "adaptive-mpcpp"),
        counts(&s, "tampc")
    )
}

fn trace_invariants(trials: &Trials) -> Outcome {
    let mut violations = Vec::new();
    let mut steps = 0;
    for (cfg, trial) in &trials.runs {
        let fin = PlanarState::from_slice(&trial.result.final_state);
        let v = check_trace(&trial.log, &cfg.world().unwrap(), Some(&fin), &cfg.tampc, cfg.kind().unwrap());
        steps += trial.log.len();
        violations.extend(v.into_iter().map(|v| format!("{} seed {}: {:?}", cfg.controller, cfg.seed, v)));
    }
    let first = violations.first().cloned().unwrap_or_default();
    outcome(
        violations.is_empty(),
        format!(
            "{} runs, {steps} steps, {} violations (tol {TRACE_TOL:e}) {first}",
            trials.runs.len(),
            violations.len()
        ),
    )
}

// ---------------------------------------------------------------- representation

fn ood() -> Outcome {
    let data = collect_random_dataset(&task("freespace").unwrap(), 200, 50, 0).unwrap();
    let cfg = TrainConfig::default();
    let rows = ood_eval(&data, &cfg, &(0..SEEDS).collect::<Vec<_>>()).expect("ood sweep");
    let [inv_val, inv_ood, base_val, base_ood] = ood_medians(&rows);
    outcome(
        inv_ood < base_ood && inv_ood <= OOD_WITHIN_FACTOR * inv_val,
        format!(
            "median relative MSE after {} epochs: invariant {inv_val:.4} val / {inv_ood:.4} translated, baseline {base_val:.4} val / {base_ood:.4} translated",
            cfg.epochs
        ),
    )
}

// ---------------------------------------------------------------- oracles

fn gp_one_point() -> f64 {
    let mut g = LocalGp::new(GpConfig::default(), InputScaler::identity());
    let (x, u, y) = ([0.3, -0.2, 0.5, 0.1], [0.4, -0.7], [0.9, -1.1, 0.25, 2.0]);
    g.add_point(&x, &u, y).unwrap();
    let (xs, us) = ([0.1, 0.0, 0.4, 0.0], [0.2, -0.5]);
    let (m, v) = g.predict(&xs, &us);
    let h = &g.hyper()[0];
    let k = h.kernel(&[xs[0], xs[1], xs[2], xs[3], us[0], us[1]], &[x[0], x[1], x[2], x[3], u[0], u[1]]);
    let (sf, sn) = (h.signal_var(), h.noise_var());
    (0..4)
        .map(|i| {
            let dm = (m[i] - k / (sf + sn) * y[i]).abs();
            let dv = (v[i] - (sf + sn - k * k / (sf + sn))).abs();
            dm.max(dv)
        })
        .fold(0.0, f64::max)
}

fn bandit_kalman() -> f64 {
    let mut arms = ArmSet::from_weights(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.0, 0.1);
    let (mut m, mut p) = (0.0f64, 1.0f64);
    let mut worst = 0.0f64;
    for r in [0.3, 1.2, 0.8, 0.95, 1.4, 0.1, 0.7] {
        arms.update(0, r);
        let k = p / (p + 0.1);
        m += k * (r - m);
        p -= k * p;
        worst = worst.max((arms.mean[0] - m).abs()).max((arms.cov[(0, 0)] - p).abs());
    }
    worst
}

fn argmin_mismatches() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let states: Vec<PlanarState> = (0..=n)
            .map(|_| PlanarState::at(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let pred: Vec<PlanarState> = (0..n)
            .map(|_| PlanarState::at(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut best = (n - 1, f64::INFINITY);
        for a in 0..n {
            let e = state_distance(&states[a], &pred[a]);
            if e > 0.0 {
                let r = state_distance(&states[a], &states[a + 1]) / e;
                if r < best.1 {
                    best = (a, r);
                }
            }
        }
        bad += (trap_argmin(&states, &pred) != Some(best.0)) as usize;
    }
    bad
}

fn dijkstra_vs_bfs() -> f64 {
    let mut worst = 0.0f64;
    for key in ["peg-t", "peg-u", "peg-i"] {
        let mut f = DistanceField::grid(&task(key).unwrap(), 0.02);
        f.solve(1.0, 1.0);
        let mut bfs = vec![f64::INFINITY; f.cell_count()];
        let mut queue = std::collections::VecDeque::from([f.goal_index()]);
        bfs[f.goal_index()] = 0.0;
        while let Some(c) = queue.pop_front() {
            for (nbr, _) in f.neighbors(c, 1.0, 1.0) {
                if bfs[nbr].is_infinite() {
                    bfs[nbr] = bfs[c] + 1.0;
                    queue.push_back(nbr);
                }
            }
        }
        for (a, b) in f.cell_distances().iter().zip(&bfs) {
            if a.is_finite() != b.is_finite() {
                return f64::INFINITY;
            }
            if a.is_finite() {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

fn vrex_loop() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ts = TransformSet::new(&[16, 32], &[16, 16], 0.03, &mut rng);
    let data = collect_random_dataset(&task("freespace").unwrap(), 12, 50, 8).unwrap();
    let beta = 1.0;
    let rep = vrex_loss(&ts, &data, beta).unwrap();
    let per: Vec<f64> = data
        .trajectories
        .iter()
        .map(|t| {
            let r = base_loss(&ts, &t.transitions).unwrap();
            r.l_reconstruct + r.l_match
        })
        .collect();
    let n = per.len() as f64;
    let mean = per.iter().sum::<f64>() / n;
    let var = per.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    (rep.total - (beta * var + per.iter().sum::<f64>())).abs()
}

fn oracles() -> Outcome {
    let gp = gp_one_point();
    let kalman = bandit_kalman();
    let argmin = argmin_mismatches();
    let dijkstra = dijkstra_vs_bfs();
    let vrex = vrex_loop();
    outcome(
        gp < ORACLE_TOL && kalman < ORACLE_TOL && argmin == 0 && dijkstra < ORACLE_TOL && vrex < ORACLE_TOL,
        format!(
            "gp posterior {gp:.1e}, bandit kalman {kalman:.1e}, trap argmin {argmin}/200 mismatches, dijkstra vs bfs {dijkstra:.1e}, vrex total {vrex:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- gradients

fn weighted_output(net: &Mlp, x: &DMatrix<f64>, up: &DMatrix<f64>) -> f64 {
    net.forward_batch(x).unwrap().component_mul(up).sum()
}

fn nn_gradient_error(rng: &mut ChaCha8Rng) -> f64 {
    let depth = rng.random_range(1..4);
    let mut widths = vec![rng.random_range(1..7)];
    widths.extend((0..depth).map(|_| rng.random_range(1..9)));
    let net = Mlp::new(&widths, rng);
    let rows = rng.random_range(1..6);
    let x = DMatrix::from_fn(rows, widths[0], |_, _| rng.random_range(-2.0..2.0));
    let up = DMatrix::from_fn(rows, *widths.last().unwrap(), |_, _| rng.random_range(-1.0..1.0));
    let trace = net.forward_trace(x.clone()).unwrap();
    let (g, gx) = net.backward(&trace, &up);
    let h = 1e-6;
    let p0 = net.flat_params();
    let mut probe = net.clone();
    let mut fd = Vec::with_capacity(p0.len());
    for k in 0..p0.len() {
        let mut p = p0.clone();
        p[k] += h;
        probe.set_flat_params(&p).unwrap();
        let fp = weighted_output(&probe, &x, &up);
        p[k] -= 2.0 * h;
        probe.set_flat_params(&p).unwrap();
        fd.push((fp - weighted_output(&probe, &x, &up)) / (2.0 * h));
    }
    let mut fdx = Vec::with_capacity(x.len());
    for idx in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[idx] += h;
        xm[idx] -= h;
        fdx.push((weighted_output(&net, &xp, &up) - weighted_output(&net, &xm, &up)) / (2.0 * h));
    }
    rel_err(&fd, &g.flat()).max(rel_err(&fdx, gx.as_slice()))
}

fn gp_gradient_error(rng: &mut ChaCha8Rng) -> f64 {
    let mut v = [0.0; INPUT_DIM + 2];
    for p in v.iter_mut().take(INPUT_DIM) {
        *p = rng.random_range(-1.0..1.5);
    }
    v[INPUT_DIM] = rng.random_range(-1.0..1.0);
    v[INPUT_DIM + 1] = rng.random_range(-4.0..-1.0);
    let n = rng.random_range(2..15);
    let xs: Vec<[f64; INPUT_DIM]> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
        .collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, grad) = log_marginal_likelihood(&HeadHyper::from_vec(&v), &xs, &y).unwrap();
    let h = 1e-5;
    let fd: Vec<f64> = (0..v.len())
        .map(|k| {
            let (mut a, mut b) = (v, v);
            a[k] += h;
            b[k] -= h;
            let fa = log_marginal_likelihood(&HeadHyper::from_vec(&a), &xs, &y).unwrap().0;
            let fb = log_marginal_likelihood(&HeadHyper::from_vec(&b), &xs, &y).unwrap().0;
            (fa - fb) / (2.0 * h)
        })
        .collect();
    rel_err(&fd, &grad)
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let nn = (0..FD_INSTANCES).map(|_| nn_gradient_error(&mut rng)).fold(0.0, f64::max);
    let gp = (0..FD_INSTANCES).map(|_| gp_gradient_error(&mut rng)).fold(0.0, f64::max);
    outcome(
        nn < FD_REL_TOL && gp < FD_REL_TOL,
        format!("worst relative error over {FD_INSTANCES} instances: nn {nn:.2e}, gp likelihood {gp:.2e} (tol {FD_REL_TOL:e})"),
    )
}

// ---------------------------------------------------------------- mppi

struct Integrator {
    bound: f64,
}

impl RolloutModel for Integrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn step_batch(&self, states: &[f64], controls: &[f64], _r: usize) -> Vec<f64> {
        states.iter().zip(controls).map(|(x, u)| x + self.bound * u).collect()
    }
}

struct Quadratic;

impl StageCost for Quadratic {
    fn state_cost(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }
    fn action_cost(&self, _x: &[f64], _u: &[f64]) -> f64 {
        0.0
    }
}

fn mppi_sanity() -> Outcome {
    let model = Integrator { bound: 0.05 };
    let base = MppiParams {
        n_samples: 200,
        horizon: 5,
        ..MppiParams::default()
    };

    let zero = MppiParams {
        noise_var: vec![0.0, 0.0],
        ..base.clone()
    };
    let prev = tampc::mppi::ControlPlan::new(vec![0.3, -0.2, 0.1, 0.1, -0.5, 0.0, 0.9, 0.9, 0.0, -1.0], 2);
    let out = mppi_plan(&model, &Quadratic, &[1.0, 0.0], &prev, &zero, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let identity = out.controls == prev.controls;

    let cold = MppiParams {
        lambda: 1e-12,
        ..base.clone()
    };
    let out = mppi_plan(&model, &Quadratic, &[0.5, -0.4], &cold.initial_plan(), &cold, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let argmin = (0..out.sample_costs.len()).min_by(|&a, &b| out.sample_costs[a].total_cmp(&out.sample_costs[b]));
    let argmax = (0..out.weights.len()).max_by(|&a, &b| out.weights[a].total_cmp(&out.weights[b]));
    let selects = argmin == argmax && argmax.is_some_and(|i| out.weights[i] > 0.999);

    let greedy_steps = {
        let mut x = 1.0f64;
        (1..=MPPI_REPLANS).find(|_| {
            x -= x.abs().min(model.bound) * x.signum();
            x.abs() < MPPI_GOAL_RADIUS
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = vec![1.0, 0.0];
    let mut plan = base.initial_plan();
    let mut reached = None;
    for i in 1..=MPPI_REPLANS {
        plan = mppi_plan(&model, &Quadratic, &x, &plan, &base, &mut rng).unwrap();
        x = model.step_batch(&x, plan.first(), 0);
        if reached.is_none() && (x[0].powi(2) + x[1].powi(2)).sqrt() < MPPI_GOAL_RADIUS {
            reached = Some(i);
        }
        plan = plan_shift(&plan, &base.u_nominal);
    }
    let reaches = reached.is_some() && greedy_steps.is_some_and(|g| reached >= Some(g));
    outcome(
        identity && selects && reaches,
        format!(
            "zero-noise identity {identity}, cold-temperature argmin {selects}, integrator reached at re-plan {reached:?} (greedy oracle {greedy_steps:?}, limit {MPPI_REPLANS})"
        ),
    )
}

// ---------------------------------------------------------------- bandit

/// Fraction of pulls of `best` in the last `window` of `pulls` Thompson steps.
/// Arm `w` earns `w . mu`.
fn run_arms(arms: &mut ArmSet, mu: [f64; 2], pulls: usize, window: usize, best: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut hits = 0;
    for i in 0..pulls {
        let a = arms.select(rng);
        let w = &arms.weights[a];
        arms.update(a, w[0] * mu[0] + w[1] * mu[1]);
        if i >= pulls - window {
            hits += (a == best) as usize;
        }
    }
    hits as f64 / window as f64
}

fn bandit_behavior() -> Outcome {
    let weights = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]];
    let (mut stationary, mut tracked) = (0.0, 0.0);
    for rep in 0..BANDIT_REPS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + rep);
        let mut arms = ArmSet::from_weights(weights.clone(), 0.01, 0.1);
        stationary += run_arms(&mut arms, [0.0, 1.0], BANDIT_PULLS, 100, 2, &mut rng);
        tracked += run_arms(&mut arms, [1.0, 0.0], BANDIT_SWITCH_WINDOW, 50, 0, &mut rng);
    }
    stationary /= BANDIT_REPS as f64;
    tracked /= BANDIT_REPS as f64;
    outcome(
        stationary > BANDIT_BEST_FREQ && tracked > BANDIT_BEST_FREQ,
        format!(
            "best-arm frequency {stationary:.3} over pulls 401-500, {tracked:.3} over the last 50 of {BANDIT_SWITCH_WINDOW} pulls after the switch ({BANDIT_REPS} reps, need > {BANDIT_BEST_FREQ})"
        ),
    )
}

// ---------------------------------------------------------------- main

fn selected() -> Option<Vec<usize>> {
    let spec = std::env::var("TAMPC_ACCEPTANCE_ONLY").ok()?;
    Some(spec.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let started = Instant::now();
    let only = selected();
    let wants = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} [{n}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };

    if wants(4) {
        report(4, "exact oracles", oracles());
    }
    if wants(5) {
        report(5, "finite-difference gradients", gradients());
    }
    if wants(7) {
        report(7, "mppi sanity", mppi_sanity());
    }
    if wants(8) {
        report(8, "bandit behavior", bandit_behavior());
    }
    if wants(1) || wants(2) || wants(6) {
        let bundle = learned_bundle();
        let mut trials = Trials { runs: Vec::new() };
        if wants(1) || wants(6) {
            report(1, "trap escape on peg-t", headline(&mut trials, &bundle));
            println!("INFO [1] {}", headline_exact(&mut trials));
        }
        if wants(2) || wants(6) {
            report(2, "ablation ordering on peg-u", ablation(&mut trials, &bundle));
        }
        if wants(6) {
            report(6, "controller trace invariants", trace_invariants(&trials));
        }
    }
    if wants(3) {
        report(3, "out-of-distribution representation", ood());
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s{}",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() && std::env::var_os("TAMPC_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
