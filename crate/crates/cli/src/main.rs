use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use tampc::harness::{
    aggregate, eval, ood_eval, ood_medians, output_path, parse_seeds, plot_svg, read_results_csv, run_trial,
    train_checkpoints, write_ood_csv, write_results_csv, write_run_log, HarnessError, ModelBundle, NominalSource,
    RunConfig, TrialResult, CURVE_FILE,
};
use tampc::repr::write_curve_csv;
use tampc::sim::{collect_random_dataset, task, Dataset, WorldSpec};

#[derive(Parser)]
#[command(name = "tampc", version, about = "Trap-aware MPC: data collection, training, trials and sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record random-action trajectories in a wall-free task.
    Collect {
        #[arg(long, default_value = "freespace")]
        task: String,
        #[arg(long, default_value_t = 200)]
        n_traj: usize,
        #[arg(long, default_value_t = 50)]
        n_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Std of Gaussian noise on the sensed reaction.
        #[arg(long, default_value_t = 0.0)]
        reaction_noise: f64,
        #[arg(long, default_value = "dataset.jsonl")]
        out: PathBuf,
    },
    /// Train the invariant and baseline models and calibrate the nominal check.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "checkpoints")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides every epoch count in the training config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run one trial and print its result.
    Run {
        #[command(flatten)]
        trial: TrialArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSON-lines run log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a seed sweep, or with --ood the representation sweep.
    Eval {
        #[command(flatten)]
        trial: TrialArgs,
        #[arg(long, default_value = "0..9")]
        seeds: String,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Directory receiving one run log per trial.
        #[arg(long)]
        logs: Option<PathBuf>,
        /// Train both models per seed and report validation and translated-validation error.
        #[arg(long)]
        ood: bool,
        /// Dataset for --ood.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render a results table as an SVG chart.
    Plot {
        #[arg(long, default_value = "results.csv")]
        results: PathBuf,
        #[arg(long, default_value = "results.svg")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrialArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// One controller key, or a comma list for eval.
    #[arg(long)]
    controller: Option<String>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// invariant, baseline or exact.
    #[arg(long)]
    nominal: Option<String>,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl TrialArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(t) = &self.task {
            cfg.task = t.clone();
        }
        if let Some(c) = &self.controller {
            cfg.controller = c.clone();
        }
        if let Some(n) = &self.nominal {
            cfg.nominal = match n.as_str() {
                "invariant" => NominalSource::Invariant,
                "baseline" => NominalSource::Baseline,
                "exact" => NominalSource::Exact,
                other => bail!("unknown nominal model `{other}` (expected invariant, baseline or exact)"),
            };
        }
        if let Some(m) = self.max_steps {
            cfg.max_steps = m;
        }
        Ok(cfg)
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(HarnessError::MissingFile(path.to_path_buf()).into());
    }
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_jsonl(open(path)?).with_context(|| format!("reading dataset {}", path.display()))
}

fn print_result(r: &TrialResult) {
    println!("{}", serde_json::to_string(r).expect("result serializes"));
}

fn collect(task_key: &str, n_traj: usize, n_steps: usize, seed: u64, noise: f64, out: &Path) -> Result<()> {
    let world = WorldSpec {
        reaction_noise_std: noise,
        ..task(task_key)?
    };
    world.validate()?;
    let data = collect_random_dataset(&world, n_traj, n_steps, seed)?;
    let out = output_path(out);
    data.write_jsonl(create(&out)?).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} transitions to {}", data.len(), out.display());
    Ok(())
}

fn train(dataset: &Path, out: &Path, config: Option<&Path>, seed: u64, epochs: Option<usize>) -> Result<()> {
    let cfg = load_config(config)?;
    let mut tc = cfg.train.clone();
    if let Some(e) = epochs {
        tc.epochs = e;
        tc.fine_tune_epochs = e;
        tc.baseline_epochs = e;
    }
    let data = read_dataset(dataset)?;
    info!("training on {} transitions", data.len());
    let (ck, curve) = train_checkpoints(&data, &tc, &cfg.tampc, seed)?;
    let out = output_path(out);
    ck.save(&out)?;
    write_curve_csv(&out.join(CURVE_FILE), &curve)?;
    println!(
        "saved checkpoints to {} (epsilon {:.4} invariant, {:.4} baseline)",
        out.display(),
        ck.calibration.invariant.epsilon,
        ck.calibration.baseline.epsilon
    );
    Ok(())
}

fn run(args: &TrialArgs, seed: Option<u64>, log: Option<&Path>) -> Result<()> {
    let mut cfg = args.config()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let bundle = ModelBundle::resolve(&cfg, args.checkpoints.as_deref())?;
    let trial = run_trial(&cfg, &bundle)?;
    if let Some(p) = log {
        let p = output_path(p);
        write_run_log(&trial.log, create(&p)?).with_context(|| format!("writing {}", p.display()))?;
    }
    print_result(&trial.result);
    Ok(())
}

fn eval_trials(args: &TrialArgs, seeds: &[u64], out: &Path, logs: Option<&Path>) -> Result<()> {
    let base = args.config()?;
    let keys: Vec<String> = base.controller.split(',').map(|s| s.trim().to_string()).collect();
    let mut results = Vec::new();
    for key in keys {
        let cfg = RunConfig {
            controller: key,
            ..base.clone()
        };
        cfg.validate()?;
        let bundle = ModelBundle::resolve(&cfg, args.checkpoints.as_deref())?;
        for trial in eval(&cfg, &bundle, seeds)? {
            if let Some(dir) = logs {
                let p = output_path(dir).join(format!("{}_{}_{}.jsonl", cfg.task, cfg.controller, trial.result.seed));
                write_run_log(&trial.log, create(&p)?).with_context(|| format!("writing {}", p.display()))?;
            }
            print_result(&trial.result);
            results.push(trial.result);
        }
    }
    let out = output_path(out);
    write_results_csv(&results, create(&out)?)?;
    for s in aggregate(&results) {
        println!(
            "{} {}: {}/{} successes, median {:.4} (p20 {:.4}, p80 {:.4})",
            s.task, s.controller, s.successes, s.n, s.median, s.p20, s.p80
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval_ood(config: Option<&Path>, dataset: Option<&Path>, seeds: &[u64], out: &Path, epochs: Option<usize>) -> Result<()> {
    let Some(dataset) = dataset else {
        bail!("--ood needs --dataset");
    };
    let cfg = load_config(config)?;
    let mut tc = cfg.train.clone();
    if let Some(e) = epochs {
        tc.epochs = e;
        tc.baseline_epochs = e;
    }
    let data = read_dataset(dataset)?;
    let rows = ood_eval(&data, &tc, seeds)?;
    let out = output_path(out);
    write_ood_csv(&rows, create(&out)?)?;
    let m = ood_medians(&rows);
    println!(
        "median relative MSE: invariant {:.4} val / {:.4} translated, baseline {:.4} val / {:.4} translated",
        m[0], m[1], m[2], m[3]
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn plot(results: &Path, out: &Path) -> Result<()> {
    let rows = read_results_csv(open(results)?)?;
    let out = output_path(out);
    create(&out)?.write_all(plot_svg(&rows).as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect {
            task,
            n_traj,
            n_steps,
            seed,
            reaction_noise,
            out,
        } => collect(&task, n_traj, n_steps, seed, reaction_noise, &out),
        Command::Train {
            dataset,
            out,
            config,
            seed,
            epochs,
        } => train(&dataset, &out, config.as_deref(), seed, epochs),
        Command::Run { trial, seed, log } => run(&trial, seed, log.as_deref()),
        Command::Eval {
            trial,
            seeds,
            out,
            logs,
            ood,
            dataset,
            epochs,
        } => {
            let seeds = parse_seeds(&seeds)?;
            if ood {
                eval_ood(trial.config.as_deref(), dataset.as_deref(), &seeds, &out, epochs)
            } else {
                eval_trials(&trial, &seeds, &out, logs.as_deref())
            }
        }
        Command::Plot { results, out } => plot(&results, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
