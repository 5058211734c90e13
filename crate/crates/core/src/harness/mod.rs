//! Trial execution, checkpoints and multi-seed sweeps.

mod report;
mod trace;

pub use report::{aggregate, plot_svg, read_results_csv, write_results_csv, ResultRow, Summary, PERCENTILE_NOTE};
pub use trace::{check_trace, TraceViolation};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::BanditConfig;
use crate::baselines::{build_controller, ApfVoParams, ControllerKind};
use crate::controller::tampc::stream;
use crate::controller::{ControllerError, NominalCheck, StepRecord, TampcParams, TampcSetup};
use crate::error::ConfigError;
use crate::gp::{GpConfig, InputScaler};
use crate::mppi::MppiParams;
use crate::repr::{fine_tune, train, train_baseline, BaselineModel, CurveRow, FreespaceModel, NominalModel, ReprError, TrainConfig, TransformSet};
use crate::sim::{step_noisy, task, Dataset, DistanceField, PlanarState, Transition, WorldSpec, TASK_KEYS};

/// Environment variable that redirects every output file.
pub const OUT_DIR_ENV: &str = "TAMPC_OUT_DIR";

const STREAM_SIM_NOISE: u64 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("controller failed: {0}")]
    Controller(#[from] ControllerError),
    #[error("model error: {0}")]
    Repr(#[from] ReprError),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error on {}: {detail}", path.display())]
    Io { path: PathBuf, detail: String },
    #[error("malformed results table: {0}")]
    Csv(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    }
}

/// Which learned dynamics a trial plans with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NominalSource {
    #[default]
    Invariant,
    Baseline,
    /// The true freespace dynamics; needs no checkpoints.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub controller: String,
    pub seed: u64,
    pub max_steps: usize,
    pub success_threshold: f64,
    pub distance_resolution: f64,
    pub stop_on_success: bool,
    /// Std of Gaussian noise on the sensed reaction during trials.
    pub reaction_noise_std: f64,
    pub nominal: NominalSource,
    pub mppi: MppiParams,
    pub tampc: TampcParams,
    pub gp: GpConfig,
    pub bandit: BanditConfig,
    pub apf: ApfVoParams,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "peg-t".into(),
            controller: "tampc".into(),
            seed: 0,
            max_steps: 500,
            success_threshold: 0.05,
            distance_resolution: 0.01,
            stop_on_success: true,
            reaction_noise_std: 0.0,
            nominal: NominalSource::Invariant,
            mppi: MppiParams::default(),
            tampc: TampcParams::default(),
            gp: GpConfig::default(),
            bandit: BanditConfig::default(),
            apf: ApfVoParams::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Malformed(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        if !path.exists() {
            return Err(HarnessError::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(Self::from_toml(&text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !TASK_KEYS.contains(&self.task.as_str()) {
            return Err(ConfigError::UnknownTask(self.task.clone()));
        }
        ControllerKind::from_str(&self.controller)?;
        self.world()?;
        if self.max_steps == 0 {
            return Err(ConfigError::Invalid("max_steps must be at least 1".into()));
        }
        if !(self.success_threshold > 0.0 && self.distance_resolution > 0.0) {
            return Err(ConfigError::Invalid("success threshold and distance resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn kind(&self) -> Result<ControllerKind, ConfigError> {
        ControllerKind::from_str(&self.controller)
    }

    pub fn world(&self) -> Result<WorldSpec, ConfigError> {
        let world = WorldSpec {
            reaction_noise_std: self.reaction_noise_std,
            ..task(&self.task)?
        };
        world.validate()?;
        Ok(world)
    }
}

/// Calibration shipped with the checkpoints: one nominal check per learned
/// model plus the GP input scaler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub invariant: NominalCheck,
    pub baseline: NominalCheck,
    pub scaler: InputScaler,
}

/// Everything learned offline.
pub struct Checkpoints {
    pub invariant: TransformSet,
    pub baseline: BaselineModel,
    pub calibration: Calibration,
}

pub const INVARIANT_FILE: &str = "invariant.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const CURVE_FILE: &str = "curve.csv";

/// Trains both models on the training split and calibrates on the validation
/// split. The invariant model is fine-tuned before calibration.
pub fn train_checkpoints(
    data: &Dataset,
    cfg: &TrainConfig,
    params: &TampcParams,
    seed: u64,
) -> Result<(Checkpoints, Vec<CurveRow>), HarnessError> {
    let (tr, val) = data.split_validation();
    let (ts, curve) = train(&tr, Some(&val), cfg, seed)?;
    let (invariant, _) = fine_tune(&ts, &tr, cfg, seed)?;
    let (baseline, _) = train_baseline(&tr, Some(&val), cfg, seed)?;
    let train_t: Vec<Transition> = tr.transitions().cloned().collect();
    let val_t: Vec<Transition> = val.transitions().cloned().collect();
    let calibration = Calibration {
        invariant: NominalCheck::calibrate(&invariant, &train_t, &val_t, params),
        baseline: NominalCheck::calibrate(&baseline, &train_t, &val_t, params),
        scaler: InputScaler::from_transitions(&train_t),
    };
    Ok((
        Checkpoints {
            invariant,
            baseline,
            calibration,
        },
        curve,
    ))
}

impl Checkpoints {
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        self.invariant.save(&dir.join(INVARIANT_FILE))?;
        self.baseline.save(&dir.join(BASELINE_FILE))?;
        let path = dir.join(CALIBRATION_FILE);
        let text = serde_json::to_string_pretty(&self.calibration).expect("calibration serializes");
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        for f in [INVARIANT_FILE, BASELINE_FILE, CALIBRATION_FILE] {
            if !dir.join(f).exists() {
                return Err(HarnessError::MissingFile(dir.join(f)));
            }
        }
        let path = dir.join(CALIBRATION_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let calibration = serde_json::from_str(&text).map_err(|e| ConfigError::Malformed(format!("{}: {e}", path.display())))?;
        Ok(Self {
            invariant: TransformSet::load(&dir.join(INVARIANT_FILE))?,
            baseline: BaselineModel::load(&dir.join(BASELINE_FILE))?,
            calibration,
        })
    }
}

/// The nominal model a trial plans with, its check and the GP scaler.
#[derive(Clone)]
pub struct ModelBundle {
    pub model: Arc<dyn NominalModel>,
    pub check: NominalCheck,
    pub scaler: InputScaler,
}

impl ModelBundle {
    /// Exact freespace dynamics with a tight fixed check.
    pub fn exact(params: &TampcParams) -> Self {
        Self {
            model: Arc::new(FreespaceModel),
            check: NominalCheck {
                scale: [1e-4; 4],
                epsilon: params.epsilon.unwrap_or(1.0),
            },
            scaler: InputScaler::identity(),
        }
    }

    pub fn from_checkpoints(ck: &Checkpoints, source: NominalSource, params: &TampcParams) -> Self {
        let (model, mut check): (Arc<dyn NominalModel>, NominalCheck) = match source {
            NominalSource::Exact => return Self::exact(params),
            NominalSource::Invariant => (Arc::new(ck.invariant.clone()), ck.calibration.invariant.clone()),
            NominalSource::Baseline => (Arc::new(ck.baseline.clone()), ck.calibration.baseline.clone()),
        };
        if let Some(e) = params.epsilon {
            check.epsilon = e;
        }
        Self {
            model,
            check,
            scaler: ck.calibration.scaler.clone(),
        }
    }

    /// Resolves the bundle for `cfg`, loading checkpoints unless the exact
    /// model is requested.
    pub fn resolve(cfg: &RunConfig, checkpoints: Option<&Path>) -> Result<Self, HarnessError> {
        if cfg.nominal == NominalSource::Exact {
            return Ok(Self::exact(&cfg.tampc));
        }
        let dir = checkpoints.ok_or_else(|| ConfigError::Invalid("a learned nominal model needs --checkpoints".into()))?;
        Ok(Self::from_checkpoints(&Checkpoints::load(dir)?, cfg.nominal, &cfg.tampc))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task: String,
    pub controller: String,
    pub seed: u64,
    pub steps: usize,
    pub min_distance: f64,
    pub success_threshold: f64,
    pub success: bool,
    pub steps_to_success: Option<usize>,
    /// Step counts in NOMINAL, NONNOMINAL and RECOVERY.
    pub mode_counts: [usize; 3],
    pub final_state: [f64; 4],
    pub wall_clock_s: f64,
}

/// A finished trial and its full log.
pub struct Trial {
    pub result: TrialResult,
    pub log: Vec<StepRecord>,
}

pub fn run_trial(cfg: &RunConfig, bundle: &ModelBundle) -> Result<Trial, HarnessError> {
    cfg.validate()?;
    let world = cfg.world()?;
    let field = DistanceField::compute(&world, cfg.distance_resolution);
    let setup = TampcSetup {
        params: cfg.tampc.clone(),
        mppi: cfg.mppi.clone(),
        gp: cfg.gp.clone(),
        bandit: cfg.bandit.clone(),
        scaler: bundle.scaler.clone(),
        check: bundle.check.clone(),
        goal: world.goal,
        bound: world.action_bound,
        seed: cfg.seed,
    };
    let mut controller = build_controller(cfg.kind()?, bundle.model.clone(), setup, &cfg.apf)?;
    let mut noise = stream(cfg.seed, STREAM_SIM_NOISE);
    let started = Instant::now();

    let mut x: PlanarState = world.start;
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut min_distance = field.query(&x.pos);
    let mut steps_to_success = (min_distance < cfg.success_threshold).then_some(0);
    let mut mode_counts = [0usize; 3];
    for t in 0..cfg.max_steps {
        if steps_to_success.is_some() && cfg.stop_on_success {
            break;
        }
        let rec = controller.step(&x)?;
        mode_counts[rec.mode.index()] += 1;
        x = step_noisy(&world, &x, &rec.action(), &mut noise).next_state;
        log.push(rec);
        let d = field.query(&x.pos);
        min_distance = min_distance.min(d);
        if steps_to_success.is_none() && d < cfg.success_threshold {
            steps_to_success = Some(t + 1);
        }
    }
    let result = TrialResult {
        task: cfg.task.clone(),
        controller: cfg.controller.clone(),
        seed: cfg.seed,
        steps: log.len(),
        min_distance,
        success_threshold: cfg.success_threshold,
        success: min_distance < cfg.success_threshold,
        steps_to_success,
        mode_counts,
        final_state: x.to_array(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok(Trial { result, log })
}

/// Runs `cfg` once per seed, in parallel.
pub fn eval(cfg: &RunConfig, bundle: &ModelBundle, seeds: &[u64]) -> Result<Vec<Trial>, HarnessError> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, ..cfg.clone() };
            run_trial(&cfg, bundle)
        })
        .collect()
}

/// Parses an inclusive range `a..b` (also written `a..=b`) or a comma list.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = || ConfigError::Invalid(format!("bad seed list `{spec}`"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(num).collect()
}

pub fn write_run_log<W: Write>(log: &[StepRecord], mut out: W) -> std::io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_run_log<R: std::io::BufRead>(input: R) -> Result<Vec<StepRecord>, ConfigError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ConfigError::Malformed(format!("run log line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// `path` re-rooted under `$TAMPC_OUT_DIR` when that is set and `path` is relative.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// Validation and translated-validation relative MSE of both models after
/// training from one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub seed: u64,
    pub invariant_val: f64,
    pub invariant_ood: f64,
    pub baseline_val: f64,
    pub baseline_ood: f64,
}

pub fn ood_trial(data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<OodResult, HarnessError> {
    let (tr, val) = data.split_validation();
    let (_, inv) = train(&tr, Some(&val), cfg, seed)?;
    let (_, base) = train_baseline(&tr, Some(&val), cfg, seed)?;
    let (inv, base) = (inv.last().ok_or(ReprError::Empty)?, base.last().ok_or(ReprError::Empty)?);
    Ok(OodResult {
        seed,
        invariant_val: inv.val_mse,
        invariant_ood: inv.ood_mse,
        baseline_val: base.val_mse,
        baseline_ood: base.ood_mse,
    })
}

pub fn ood_eval(data: &Dataset, cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<OodResult>, HarnessError> {
    seeds.par_iter().map(|&s| ood_trial(data, cfg, s)).collect()
}

/// Per-seed rows followed by a `median` row.
pub fn write_ood_csv<W: Write>(rows: &[OodResult], mut out: W) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Csv(e.to_string());
    writeln!(out, "{PERCENTILE_NOTE}").map_err(|e| HarnessError::Csv(e.to_string()))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "invariant_val", "invariant_ood", "baseline_val", "baseline_ood"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.invariant_val.to_string(),
            r.invariant_ood.to_string(),
            r.baseline_val.to_string(),
            r.baseline_ood.to_string(),
        ])
        .map_err(err)?;
    }
    if !rows.is_empty() {
        let m = ood_medians(rows);
        w.write_record(["median".to_string(), m[0].to_string(), m[1].to_string(), m[2].to_string(), m[3].to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.to_string()))
}

/// Medians of invariant val, invariant OOD, baseline val and baseline OOD.
pub fn ood_medians(rows: &[OodResult]) -> [f64; 4] {
    let col = |f: fn(&OodResult) -> f64| crate::stats::median(&rows.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    [
        col(|r| r.invariant_val),
        col(|r| r.invariant_ood),
        col(|r| r.baseline_val),
        col(|r| r.baseline_ood),
    ]
}

#[cfg(test)]
mod tests;
