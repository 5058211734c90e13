use super::*;
use crate::controller::Mode;
use crate::sim::collect_random_dataset;

fn exact_cfg(task: &str, controller: &str, seed: u64, steps: usize) -> RunConfig {
    RunConfig {
        task: task.into(),
        controller: controller.into(),
        seed,
        max_steps: steps,
        nominal: NominalSource::Exact,
        mppi: MppiParams {
            n_samples: 200,
            ..MppiParams::default()
        },
        ..RunConfig::default()
    }
}

fn result(controller: &str, seed: u64, d: f64) -> TrialResult {
    TrialResult {
        task: "peg-t".into(),
        controller: controller.into(),
        seed,
        steps: 500,
        min_distance: d,
        success_threshold: 0.05,
        success: d < 0.05,
        steps_to_success: None,
        mode_counts: [500, 0, 0],
        final_state: [0.0; 4],
        wall_clock_s: 1.0,
    }
}

#[test]
fn config_roundtrips_through_toml() {
    let cfg = RunConfig {
        task: "peg-u".into(),
        seed: 9,
        ..RunConfig::default()
    };
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let partial = RunConfig::from_toml("task = \"peg-i\"\n[tampc]\ngamma = 0.5\n").unwrap();
    assert_eq!(partial.task, "peg-i");
    assert_eq!(partial.tampc.gamma, 0.5);
    assert_eq!(partial.tampc.n_d, 5);
    assert_eq!(partial.max_steps, 500);
}

#[test]
fn config_errors_are_distinct() {
    assert_eq!(
        RunConfig::from_toml("task = \"peg-x\""),
        Err(ConfigError::UnknownTask("peg-x".into()))
    );
    assert_eq!(
        RunConfig::from_toml("controller = \"sac\""),
        Err(ConfigError::UnknownController("sac".into()))
    );
    assert!(matches!(RunConfig::from_toml("max_steps = 0"), Err(ConfigError::Invalid(_))));
    assert!(matches!(RunConfig::from_toml("max_steps = \"many\""), Err(ConfigError::Malformed(_))));
    assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(ConfigError::Malformed(_))));
    assert!(matches!(
        RunConfig::load(Path::new("/nonexistent/run.toml")),
        Err(HarnessError::MissingFile(_))
    ));
}

#[test]
fn seed_lists() {
    assert_eq!(parse_seeds("0..9").unwrap(), (0..10).collect::<Vec<_>>());
    assert!(parse_seeds("5..2").is_err());
    assert_eq!(parse_seeds("0..=9").unwrap(), (0..10).collect::<Vec<_>>());
    assert_eq!(parse_seeds("3,5,8").unwrap(), vec![3, 5, 8]);
    assert!(parse_seeds("a..b").is_err());
}

#[test]
fn aggregate_uses_linear_percentiles() {
    let rs: Vec<TrialResult> = (1..=10).map(|i| result("tampc", i, i as f64)).collect();
    let s = aggregate(&rs);
    assert_eq!(s.len(), 1);
    assert!((s[0].median - 5.5).abs() < 1e-12);
    assert!((s[0].p20 - 2.8).abs() < 1e-12);
    assert!((s[0].p80 - 8.2).abs() < 1e-12);
    assert_eq!(s[0].successes, 0);
    assert_eq!(s[0].n, 10);
}

#[test]
fn aggregate_counts_and_groups() {
    let mut rs: Vec<TrialResult> = (0..10).map(|i| result("tampc", i, 0.01)).collect();
    rs.extend((0..10).map(|i| result("nonadaptive", i, 0.3)));
    let s = aggregate(&rs);
    assert_eq!(s[0].controller, "tampc");
    assert_eq!(s[0].successes, 10);
    assert_eq!(s[1].successes, 0);
    assert!(aggregate(&[]).is_empty());
}

#[test]
fn results_csv_roundtrip() {
    let rs: Vec<TrialResult> = (0..10).map(|i| result("tampc", i, 0.02 * i as f64)).collect();
    let mut buf = Vec::new();
    write_results_csv(&rs, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with(PERCENTILE_NOTE));
    let rows = read_results_csv(buf.as_slice()).unwrap();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows.iter().filter(|r| r.is_summary()).count(), 1);
    let s = rows[10].as_summary().unwrap();
    assert_eq!(s, aggregate(&rs)[0]);
    assert_eq!(rows[3], ResultRow::trial(&rs[3]));
}

#[test]
fn empty_results_give_header_only() {
    let mut buf = Vec::new();
    write_results_csv(&[], &mut buf).unwrap();
    assert!(read_results_csv(buf.as_slice()).unwrap().is_empty());
}

#[test]
fn plot_has_threshold_and_markers() {
    let mut rs: Vec<TrialResult> = (0..4).map(|i| result("tampc", i, 0.1 * i as f64)).collect();
    rs.push(TrialResult {
        task: "peg-u".into(),
        ..result("apf-vo", 0, 0.2)
    });
    let mut buf = Vec::new();
    write_results_csv(&rs, &mut buf).unwrap();
    let svg = plot_svg(&read_results_csv(buf.as_slice()).unwrap());
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("stroke=\"red\"").count(), 2);
    // one faint dot per trial and one solid dot per summary
    assert_eq!(svg.matches("fill-opacity").count(), 5);
    assert_eq!(svg.matches("r=\"4\"").count(), 2);
}

#[test]
fn nonadaptive_reaches_goal_in_freespace() {
    let trial = run_trial(&exact_cfg("freespace", "nonadaptive", 0, 60), &ModelBundle::exact(&TampcParams::default())).unwrap();
    let r = &trial.result;
    assert!(r.success, "min distance {}", r.min_distance);
    assert_eq!(r.steps, r.steps_to_success.unwrap());
    assert_eq!(trial.log.len(), r.steps);
    assert!(r.min_distance < r.success_threshold);
}

#[test]
fn runs_are_bit_reproducible() {
    let cfg = exact_cfg("peg-i", "tampc", 5, 80);
    let bundle = ModelBundle::exact(&cfg.tampc);
    let a = run_trial(&cfg, &bundle).unwrap();
    let b = run_trial(&cfg, &bundle).unwrap();
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    write_run_log(&a.log, &mut la).unwrap();
    write_run_log(&b.log, &mut lb).unwrap();
    assert_eq!(la, lb);
    assert_eq!(read_run_log(la.as_slice()).unwrap(), a.log);
}

#[test]
fn logged_runs_satisfy_trace_invariants() {
    for key in ["tampc", "tampc-e0", "tampc-randrec", "adaptive-mpcpp", "nonadaptive", "apf-vo"] {
        let cfg = exact_cfg("peg-i", key, 2, 120);
        let trial = run_trial(&cfg, &ModelBundle::exact(&cfg.tampc)).unwrap();
        let fin = PlanarState::from_slice(&trial.result.final_state);
        let v = check_trace(&trial.log, &cfg.world().unwrap(), Some(&fin), &cfg.tampc, cfg.kind().unwrap());
        assert!(v.is_empty(), "{key}: {v:?}");
    }
}

#[test]
fn trace_checker_catches_tampering() {
    let cfg = exact_cfg("peg-i", "tampc", 2, 120);
    let trial = run_trial(&cfg, &ModelBundle::exact(&cfg.tampc)).unwrap();
    let world = cfg.world().unwrap();
    let kind = cfg.kind().unwrap();
    assert!(trial.log.iter().any(|r| r.mode == Mode::Recovery));

    let mut log = trial.log.clone();
    let i = log.iter().position(|r| r.mode == Mode::Recovery).unwrap();
    log[i - 1].mode = Mode::Nominal;
    let v = check_trace(&log, &world, None, &cfg.tampc, kind);
    assert!(v.iter().any(|v| v.rule == "mode-transition"));

    let mut log = trial.log.clone();
    let i = log.iter().position(|r| r.annealed).unwrap();
    log[i].spread *= 1.0 + 1e-6;
    let v = check_trace(&log, &world, None, &cfg.tampc, kind);
    assert!(v.iter().any(|v| v.rule == "spread-annealing"));

    let mut log = trial.log.clone();
    let last = log.len() - 1;
    log[last].trap_size = 0;
    log[last - 1].trap_size = 1;
    let v = check_trace(&log, &world, None, &cfg.tampc, kind);
    assert!(v.iter().any(|v| v.rule == "trap-monotone"));

    let mut log = trial.log.clone();
    log[3].x = [0.0, 0.12, 0.0, 0.0];
    let v = check_trace(&log, &world, None, &cfg.tampc, kind);
    assert!(v.iter().any(|v| v.rule == "wall-penetration"));

    let mut log = trial.log.clone();
    if let Some(i) = log.iter().position(|r| r.reward.is_some()) {
        log[i].reward = Some(log[i].reward.unwrap() + 1e-6);
        let v = check_trace(&log, &world, None, &cfg.tampc, kind);
        assert!(v.iter().any(|v| v.rule == "bandit-reward"));
    }
}

#[test]
fn checkpoints_roundtrip_and_resolve() {
    let data = collect_random_dataset(&task("freespace").unwrap(), 12, 10, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        fine_tune_epochs: 2,
        baseline_epochs: 2,
        ..TrainConfig::default()
    };
    let (ck, curve) = train_checkpoints(&data, &cfg, &TampcParams::default(), 0).unwrap();
    assert_eq!(curve.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoints::load(dir.path()).unwrap();
    assert_eq!(back.calibration, ck.calibration);
    assert_eq!(back.invariant, ck.invariant);

    let run = RunConfig {
        tampc: TampcParams {
            epsilon: Some(TABLE_EPS),
            ..TampcParams::default()
        },
        ..RunConfig::default()
    };
    let b = ModelBundle::resolve(&run, Some(dir.path())).unwrap();
    assert_eq!(b.check.epsilon, TABLE_EPS);
    assert_eq!(b.check.scale, ck.calibration.invariant.scale);
    assert!(matches!(ModelBundle::resolve(&run, None), Err(HarnessError::Config(ConfigError::Invalid(_)))));
    let missing = dir.path().join("nothing");
    assert!(matches!(ModelBundle::resolve(&run, Some(&missing)), Err(HarnessError::MissingFile(_))));
}

const TABLE_EPS: f64 = crate::controller::TABLE_EPSILON;

#[test]
fn ood_sweep_writes_median_row() {
    let data = collect_random_dataset(&task("freespace").unwrap(), 12, 10, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        baseline_epochs: 3,
        ..TrainConfig::default()
    };
    let rows = ood_eval(&data, &cfg, &[0, 1]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.invariant_val.is_finite() && r.baseline_ood.is_finite()));
    let mut buf = Vec::new();
    write_ood_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().last().unwrap().starts_with("median,"));
    let m = ood_medians(&rows);
    assert!((m[0] - 0.5 * (rows[0].invariant_val + rows[1].invariant_val)).abs() < 1e-15);
}
