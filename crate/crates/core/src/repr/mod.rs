//! Invariant representation of the nominal dynamics.
//!
//! Five maps are learned jointly from freespace data:
//!
//! * `rho: (x, u) -> z` (5-D latent, a bottleneck below the 6 inputs),
//! * `eta: x -> h` (2-D state summary),
//! * `nu: (dx, h) -> v` (5-D latent state change),
//! * `psi: (v, h) -> dx` (decoder back to state change),
//! * `fz: z -> v_hat` (latent dynamics).
//!
//! The composed predictor is `psi(fz(rho(x, u)), eta(x))`. Controls and state
//! changes are divided by `unit` (the action bound) before entering the
//! networks so all inputs are O(1); losses are ratios and do not see the scale.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Adam, Mlp, MlpCheckpoint, MlpGrad, NnError, Trace};
use crate::sim::{Dataset, Transition, Vec2, CONTROL_DIM, DEFAULT_ACTION_BOUND, STATE_DIM};


pub const Z_DIM: usize = 5;
pub const V_DIM: usize = 5;
pub const ETA_DIM: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReprError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("degenerate batch: every state change is zero")]
    DegenerateBatch,
    #[error("empty dataset")]
    Empty,
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Anything that predicts a one-step state change from a state and a control.
pub trait NominalModel: Send + Sync {
    /// `states` holds `n` rows of 4 values, `controls` `n` rows of 2; the
    /// result holds `n` rows of 4.
    fn predict_batch(&self, states: &[f64], controls: &[f64]) -> Vec<f64>;

    fn predict(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> [f64; STATE_DIM] {
        let out = self.predict_batch(x, u);
        [out[0], out[1], out[2], out[3]]
    }
}

/// Closed-form dynamics of the obstacle-free world: the peg moves by the
/// commanded displacement and any sensed reaction vanishes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FreespaceModel;

impl NominalModel for FreespaceModel {
    fn predict_batch(&self, states: &[f64], controls: &[f64]) -> Vec<f64> {
        let n = states.len() / STATE_DIM;
        let mut out = Vec::with_capacity(n * STATE_DIM);
        for i in 0..n {
            out.extend_from_slice(&[
                controls[i * CONTROL_DIM],
                controls[i * CONTROL_DIM + 1],
                -states[i * STATE_DIM + 2],
                -states[i * STATE_DIM + 3],
            ]);
        }
        out
    }
}

/// Row-major flat slice to a `rows x cols` matrix.
pub(crate) fn rows_to_matrix(data: &[f64], cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(data.len() / cols, cols, data)
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ca = a.ncols();
    DMatrix::from_fn(a.nrows(), ca + b.ncols(), |i, j| {
        if j < ca {
            a[(i, j)]
        } else {
            b[(i, j - ca)]
        }
    })
}

fn split_cols(m: &DMatrix<f64>, at: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        m.columns(0, at).into_owned(),
        m.columns(at, m.ncols() - at).into_owned(),
    )
}

fn row_norm(m: &DMatrix<f64>, i: usize) -> f64 {
    m.row(i).norm()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformSet {
    pub rho: Mlp,
    pub eta: Mlp,
    pub nu: Mlp,
    pub psi: Mlp,
    pub fz: Mlp,
    pub unit: f64,
}

impl TransformSet {
    pub fn new<R: rand::Rng + ?Sized>(hidden: &[usize], fz_hidden: &[usize], unit: f64, rng: &mut R) -> Self {
        Self {
            rho: Mlp::with_hidden(STATE_DIM + CONTROL_DIM, hidden, Z_DIM, rng),
            eta: Mlp::with_hidden(STATE_DIM, hidden, ETA_DIM, rng),
            nu: Mlp::with_hidden(STATE_DIM + ETA_DIM, hidden, V_DIM, rng),
            psi: Mlp::with_hidden(V_DIM + ETA_DIM, hidden, STATE_DIM, rng),
            fz: Mlp::with_hidden(Z_DIM, fz_hidden, V_DIM, rng),
            unit,
        }
    }

    /// All-zero parameters with the default widths.
    pub fn zeros() -> Self {
        let w = |i: usize, h: &[usize], o: usize| {
            let mut v = vec![i];
            v.extend_from_slice(h);
            v.push(o);
            Mlp::zeros(&v)
        };
        Self {
            rho: w(STATE_DIM + CONTROL_DIM, &[16, 32], Z_DIM),
            eta: w(STATE_DIM, &[16, 32], ETA_DIM),
            nu: w(STATE_DIM + ETA_DIM, &[16, 32], V_DIM),
            psi: w(V_DIM + ETA_DIM, &[16, 32], STATE_DIM),
            fz: w(Z_DIM, &[16, 16], V_DIM),
            unit: DEFAULT_ACTION_BOUND,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.rho.output_dim()
    }

    fn forward(&self, batch: &Batch) -> Result<Forward, ReprError> {
        let eta = self.eta.forward_trace(batch.x.clone())?;
        let rho = self.rho.forward_trace(batch.xu.clone())?;
        let nu = self.nu.forward_trace(hcat(&batch.dx, eta.output()))?;
        let fz = self.fz.forward_trace(rho.output().clone())?;
        let psi = self.psi.forward_trace(hcat(nu.output(), eta.output()))?;
        Ok(Forward { eta, rho, nu, fz, psi })
    }

    pub fn checkpoint(&self) -> TransformSetCheckpoint {
        TransformSetCheckpoint {
            version: TransformSetCheckpoint::VERSION,
            unit: self.unit,
            rho: self.rho.checkpoint(),
            eta: self.eta.checkpoint(),
            nu: self.nu.checkpoint(),
            psi: self.psi.checkpoint(),
            fz: self.fz.checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &TransformSetCheckpoint) -> Result<Self, ReprError> {
        if ck.version != TransformSetCheckpoint::VERSION {
            return Err(ReprError::Malformed(format!("version {}", ck.version)));
        }
        Ok(Self {
            rho: Mlp::from_checkpoint(&ck.rho)?,
            eta: Mlp::from_checkpoint(&ck.eta)?,
            nu: Mlp::from_checkpoint(&ck.nu)?,
            psi: Mlp::from_checkpoint(&ck.psi)?,
            fz: Mlp::from_checkpoint(&ck.fz)?,
            unit: ck.unit,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ReprError> {
        write_json(path, &self.checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self, ReprError> {
        Self::from_checkpoint(&read_json(path)?)
    }
}

impl NominalModel for TransformSet {
    fn predict_batch(&self, states: &[f64], controls: &[f64]) -> Vec<f64> {
        let x = rows_to_matrix(states, STATE_DIM);
        let u = rows_to_matrix(controls, CONTROL_DIM) / self.unit;
        let h = self.eta.forward_batch(&x).expect("eta input width");
        let z = self.rho.forward_batch(&hcat(&x, &u)).expect("rho input width");
        let vhat = self.fz.forward_batch(&z).expect("fz input width");
        let dx = self.psi.forward_batch(&hcat(&vhat, &h)).expect("psi input width");
        matrix_to_rows(&(dx * self.unit))
    }
}

/// Versioned JSON document holding the five maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSetCheckpoint {
    pub version: u32,
    pub unit: f64,
    pub rho: MlpCheckpoint,
    pub eta: MlpCheckpoint,
    pub nu: MlpCheckpoint,
    pub psi: MlpCheckpoint,
    pub fz: MlpCheckpoint,
}

impl TransformSetCheckpoint {
    pub const VERSION: u32 = 1;
}

/// Direct `(x, u) -> dx` network used as the non-invariant comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub net: Mlp,
    pub unit: f64,
}

impl NominalModel for BaselineModel {
    fn predict_batch(&self, states: &[f64], controls: &[f64]) -> Vec<f64> {
        let x = rows_to_matrix(states, STATE_DIM);
        let u = rows_to_matrix(controls, CONTROL_DIM) / self.unit;
        let dx = self.net.forward_batch(&hcat(&x, &u)).expect("baseline input width");
        matrix_to_rows(&(dx * self.unit))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCheckpoint {
    pub version: u32,
    pub unit: f64,
    pub net: MlpCheckpoint,
}

impl BaselineModel {
    pub fn save(&self, path: &Path) -> Result<(), ReprError> {
        write_json(
            path,
            &BaselineCheckpoint {
                version: 1,
                unit: self.unit,
                net: self.net.checkpoint(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self, ReprError> {
        let ck: BaselineCheckpoint = read_json(path)?;
        if ck.version != 1 {
            return Err(ReprError::Malformed(format!("version {}", ck.version)));
        }
        Ok(Self {
            net: Mlp::from_checkpoint(&ck.net)?,
            unit: ck.unit,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReprError> {
    let text = serde_json::to_string(value).map_err(|e| ReprError::Malformed(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| ReprError::Io(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReprError> {
    let text = std::fs::read_to_string(path).map_err(|e| ReprError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ReprError::Malformed(format!("{}: {e}", path.display())))
}

/// Network inputs for a set of transition groups (one group per trajectory).
#[derive(Clone, Debug)]
pub struct Batch {
    x: DMatrix<f64>,
    xu: DMatrix<f64>,
    dx: DMatrix<f64>,
    groups: Vec<(usize, usize)>,
}

impl Batch {
    pub fn from_groups(groups: &[&[Transition]], unit: f64) -> Self {
        let n: usize = groups.iter().map(|g| g.len()).sum();
        let mut x = DMatrix::zeros(n, STATE_DIM);
        let mut xu = DMatrix::zeros(n, STATE_DIM + CONTROL_DIM);
        let mut dx = DMatrix::zeros(n, STATE_DIM);
        let mut ranges = Vec::with_capacity(groups.len());
        let mut row = 0;
        for g in groups {
            ranges.push((row, row + g.len()));
            for t in g.iter() {
                let s = t.state.to_array();
                let u = t.action.to_array();
                for k in 0..STATE_DIM {
                    x[(row, k)] = s[k];
                    xu[(row, k)] = s[k];
                    dx[(row, k)] = t.dx[k] / unit;
                }
                for k in 0..CONTROL_DIM {
                    xu[(row, STATE_DIM + k)] = u[k] / unit;
                }
                row += 1;
            }
        }
        Self { x, xu, dx, groups: ranges }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Forward {
    eta: Trace,
    rho: Trace,
    nu: Trace,
    fz: Trace,
    psi: Trace,
}

/// Loss values for one evaluation. `base` has one entry per trajectory group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub l_reconstruct: f64,
    pub l_match: f64,
    pub base: Vec<f64>,
    pub variance: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformGrad {
    pub rho: MlpGrad,
    pub eta: MlpGrad,
    pub nu: MlpGrad,
    pub psi: MlpGrad,
    pub fz: MlpGrad,
}

impl TransformGrad {
    pub fn flat(&self) -> Vec<f64> {
        [&self.rho, &self.eta, &self.nu, &self.psi, &self.fz]
            .iter()
            .flat_map(|g| g.flat())
            .collect()
    }
}

/// Per-group ratio terms `L_R = sum|r| / sum|dx|` and `L_M = sum|e| / sum|v|`.
struct GroupTerms {
    l_r: f64,
    l_m: f64,
    sum_dx: f64,
    sum_e: f64,
    sum_v: f64,
}

fn match_ratio(sum_e: f64, sum_v: f64) -> f64 {
    if sum_v > 0.0 {
        sum_e / sum_v
    } else if sum_e == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn group_terms(batch: &Batch, fwd: &Forward, (a, b): (usize, usize)) -> Result<GroupTerms, ReprError> {
    let dxhat = fwd.psi.output();
    let v = fwd.nu.output();
    let vhat = fwd.fz.output();
    let (mut sum_r, mut sum_dx, mut sum_e, mut sum_v) = (0.0, 0.0, 0.0, 0.0);
    for i in a..b {
        sum_r += (batch.dx.row(i) - dxhat.row(i)).norm();
        sum_dx += row_norm(&batch.dx, i);
        sum_e += (v.row(i) - vhat.row(i)).norm();
        sum_v += row_norm(v, i);
    }
    if sum_dx == 0.0 {
        return Err(ReprError::DegenerateBatch);
    }
    Ok(GroupTerms {
        l_r: sum_r / sum_dx,
        l_m: match_ratio(sum_e, sum_v),
        sum_dx,
        sum_e,
        sum_v,
    })
}

fn unit_or_zero(row: nalgebra::RowDVector<f64>) -> nalgebra::RowDVector<f64> {
    let n = row.norm();
    if n > 0.0 {
        row / n
    } else {
        row * 0.0
    }
}

/// Population variance of the per-group losses and `beta * var + sum`.
pub fn vrex_combine(base: &[f64], beta: f64) -> (f64, f64) {
    let n = base.len() as f64;
    let mean = base.iter().sum::<f64>() / n;
    let variance = base.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / n;
    (variance, beta * variance + base.iter().sum::<f64>())
}

fn report(terms: &[GroupTerms], beta: f64) -> LossReport {
    let n = terms.len() as f64;
    let base: Vec<f64> = terms.iter().map(|t| t.l_r + t.l_m).collect();
    let (variance, total) = vrex_combine(&base, beta);
    LossReport {
        l_reconstruct: terms.iter().map(|t| t.l_r).sum::<f64>() / n,
        l_match: terms.iter().map(|t| t.l_m).sum::<f64>() / n,
        total,
        base,
        variance,
    }
}

/// V-REx objective `beta * Var(L_base) + sum L_base` over the batch's groups,
/// with exact gradients for all five maps when `with_grad` is set.
pub fn vrex_objective(
    ts: &TransformSet,
    batch: &Batch,
    beta: f64,
    with_grad: bool,
) -> Result<(LossReport, Option<TransformGrad>), ReprError> {
    if batch.is_empty() || batch.groups.is_empty() {
        return Err(ReprError::Empty);
    }
    let fwd = ts.forward(batch)?;
    let terms = batch
        .groups
        .iter()
        .map(|&g| group_terms(batch, &fwd, g))
        .collect::<Result<Vec<_>, _>>()?;
    let rep = report(&terms, beta);
    if !with_grad {
        return Ok((rep, None));
    }

    let n_groups = terms.len() as f64;
    let mean = rep.base.iter().sum::<f64>() / n_groups;
    let n = batch.len();
    let mut g_dxhat = DMatrix::zeros(n, STATE_DIM);
    let mut g_v = DMatrix::zeros(n, V_DIM);
    let mut g_vhat = DMatrix::zeros(n, V_DIM);
    let (dxhat, v, vhat) = (fwd.psi.output(), fwd.nu.output(), fwd.fz.output());
    for (k, &(a, b)) in batch.groups.iter().enumerate() {
        let t = &terms[k];
        let c = 1.0 + beta * 2.0 * (rep.base[k] - mean) / n_groups;
        let match_active = t.sum_v > 0.0;
        for i in a..b {
            let r = unit_or_zero(batch.dx.row(i) - dxhat.row(i));
            g_dxhat.row_mut(i).copy_from(&(r * (-c / t.sum_dx)));
            if match_active {
                let e = unit_or_zero(v.row(i) - vhat.row(i));
                let vn = unit_or_zero(v.row(i).into_owned());
                let de = &e * (c / t.sum_v);
                g_vhat.row_mut(i).copy_from(&(-&de));
                g_v.row_mut(i)
                    .copy_from(&(de - vn * (c * t.sum_e / (t.sum_v * t.sum_v))));
            }
        }
    }
    Ok((rep, Some(backprop(ts, &fwd, &g_dxhat, g_v, &g_vhat))))
}

fn backprop(
    ts: &TransformSet,
    fwd: &Forward,
    g_dxhat: &DMatrix<f64>,
    mut g_v: DMatrix<f64>,
    g_vhat: &DMatrix<f64>,
) -> TransformGrad {
    let (psi, g_psi_in) = ts.psi.backward(&fwd.psi, g_dxhat);
    let (g_v_psi, g_h_psi) = split_cols(&g_psi_in, V_DIM);
    g_v += g_v_psi;
    let (nu, g_nu_in) = ts.nu.backward(&fwd.nu, &g_v);
    let (_, g_h_nu) = split_cols(&g_nu_in, STATE_DIM);
    let (eta, _) = ts.eta.backward(&fwd.eta, &(g_h_psi + g_h_nu));
    let (fz, g_z) = ts.fz.backward(&fwd.fz, g_vhat);
    let (rho, _) = ts.rho.backward(&fwd.rho, &g_z);
    TransformGrad { rho, eta, nu, psi, fz }
}

/// Reconstruction and match ratios over a single group of transitions.
pub fn base_loss(ts: &TransformSet, transitions: &[Transition]) -> Result<LossReport, ReprError> {
    let batch = Batch::from_groups(&[transitions], ts.unit);
    Ok(vrex_objective(ts, &batch, 0.0, false)?.0)
}

/// V-REx loss with one group per trajectory of `data`.
pub fn vrex_loss(ts: &TransformSet, data: &Dataset, beta: f64) -> Result<LossReport, ReprError> {
    if data.trajectories.len() < 2 {
        log::warn!("variance term over fewer than two trajectories is zero");
    }
    let groups: Vec<&[Transition]> = data.trajectories.iter().map(|t| t.transitions.as_slice()).collect();
    let batch = Batch::from_groups(&groups, ts.unit);
    Ok(vrex_objective(ts, &batch, beta, false)?.0)
}

/// `sum |f(x, u) - dx| / sum |dx|` with positions shifted by `offset`.
pub fn eval_relative_mse(model: &dyn NominalModel, transitions: &[Transition], offset: Vec2) -> Result<f64, ReprError> {
    if transitions.is_empty() {
        return Err(ReprError::Empty);
    }
    let (states, controls) = stack_inputs(transitions, offset);
    let pred = model.predict_batch(&states, &controls);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, t) in transitions.iter().enumerate() {
        let p = &pred[i * STATE_DIM..(i + 1) * STATE_DIM];
        num += p.iter().zip(&t.dx).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        den += t.dx.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    if den == 0.0 {
        return Err(ReprError::DegenerateBatch);
    }
    Ok(num / den)
}

/// Row-major state and control arrays, positions shifted by `offset`.
pub fn stack_inputs(transitions: &[Transition], offset: Vec2) -> (Vec<f64>, Vec<f64>) {
    let mut states = Vec::with_capacity(transitions.len() * STATE_DIM);
    let mut controls = Vec::with_capacity(transitions.len() * CONTROL_DIM);
    for t in transitions {
        let s = t.state.to_array();
        states.extend_from_slice(&[s[0] + offset.x, s[1] + offset.y, s[2], s[3]]);
        controls.extend_from_slice(&t.action.to_array());
    }
    (states, controls)
}

/// Training schedule and network sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub hidden: Vec<usize>,
    pub fz_hidden: Vec<usize>,
    pub fine_tune_hidden: Vec<usize>,
    pub fine_tune_epochs: usize,
    pub fine_tune_batch: usize,
    pub baseline_hidden: Vec<usize>,
    pub baseline_epochs: usize,
    pub baseline_batch: usize,
    pub unit: f64,
    pub ood_offset: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            batch_size: 2048,
            lr: 1e-3,
            beta: 1.0,
            hidden: vec![16, 32],
            fz_hidden: vec![16, 16],
            fine_tune_hidden: vec![32, 32],
            fine_tune_epochs: 1000,
            fine_tune_batch: 500,
            baseline_hidden: vec![16, 32, 32, 32, 16, 32],
            baseline_epochs: 3000,
            baseline_batch: 500,
            unit: DEFAULT_ACTION_BOUND,
            ood_offset: [10.0, 10.0],
        }
    }
}

/// One row of a training curve. Validation columns are NaN without a
/// validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub l_reconstruct: f64,
    pub l_match: f64,
    pub variance: f64,
    pub total: f64,
    pub val_mse: f64,
    pub ood_mse: f64,
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<(), ReprError> {
    let io = |e: csv::Error| ReprError::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| ReprError::Io(e.to_string()))
}

fn validation_pair(model: &dyn NominalModel, val: Option<&[Transition]>, offset: Vec2) -> (f64, f64) {
    match val {
        Some(v) if !v.is_empty() => (
            eval_relative_mse(model, v, Vec2::zeros()).unwrap_or(f64::NAN),
            eval_relative_mse(model, v, offset).unwrap_or(f64::NAN),
        ),
        _ => (f64::NAN, f64::NAN),
    }
}

struct TransformOpt {
    rho: Adam,
    eta: Adam,
    nu: Adam,
    psi: Adam,
    fz: Adam,
}

impl TransformOpt {
    fn new(ts: &TransformSet, lr: f64) -> Self {
        Self {
            rho: Adam::with_lr(&ts.rho, lr),
            eta: Adam::with_lr(&ts.eta, lr),
            nu: Adam::with_lr(&ts.nu, lr),
            psi: Adam::with_lr(&ts.psi, lr),
            fz: Adam::with_lr(&ts.fz, lr),
        }
    }

    fn step(&mut self, ts: &mut TransformSet, g: &TransformGrad) {
        self.rho.step(&mut ts.rho, &g.rho);
        self.eta.step(&mut ts.eta, &g.eta);
        self.nu.step(&mut ts.nu, &g.nu);
        self.psi.step(&mut ts.psi, &g.psi);
        self.fz.step(&mut ts.fz, &g.fz);
    }
}

/// Trajectory groups per batch: as many whole trajectories as fit in
/// `batch_size` samples (at least one).
fn trajectories_per_batch(data: &Dataset, batch_size: usize) -> usize {
    let longest = data.trajectories.iter().map(|t| t.transitions.len()).max().unwrap_or(1).max(1);
    (batch_size / longest).max(1)
}

/// Joint training of all five maps on the V-REx objective.
pub fn train(
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TransformSet, Vec<CurveRow>), ReprError> {
    let trajs: Vec<&[Transition]> = data
        .trajectories
        .iter()
        .map(|t| t.transitions.as_slice())
        .filter(|t| !t.is_empty())
        .collect();
    if trajs.is_empty() {
        return Err(ReprError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts = TransformSet::new(&cfg.hidden, &cfg.fz_hidden, cfg.unit, &mut rng);
    let mut opt = TransformOpt::new(&ts, cfg.lr);
    let per_batch = trajectories_per_batch(data, cfg.batch_size);
    let val_t = val.map(|v| v.transitions().cloned().collect::<Vec<_>>());
    let offset = Vec2::new(cfg.ood_offset[0], cfg.ood_offset[1]);
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 4];
        let mut batches = 0.0;
        for chunk in order.chunks(per_batch) {
            let groups: Vec<&[Transition]> = chunk.iter().map(|&i| trajs[i]).collect();
            let batch = Batch::from_groups(&groups, ts.unit);
            let (rep, grad) = vrex_objective(&ts, &batch, cfg.beta, true)?;
            let grad = grad.expect("gradient requested");
            if !rep.total.is_finite() || !grad.flat().iter().all(|g| g.is_finite()) {
                return Err(ReprError::NonFinite {
                    epoch,
                    detail: format!("L_R {} L_M {} var {}", rep.l_reconstruct, rep.l_match, rep.variance),
                });
            }
            opt.step(&mut ts, &grad);
            acc[0] += rep.l_reconstruct;
            acc[1] += rep.l_match;
            acc[2] += rep.variance;
            acc[3] += rep.total;
            batches += 1.0;
        }
        let (val_mse, ood_mse) = validation_pair(&ts, val_t.as_deref(), offset);
        curve.push(CurveRow {
            epoch,
            l_reconstruct: acc[0] / batches,
            l_match: acc[1] / batches,
            variance: acc[2] / batches,
            total: acc[3] / batches,
            val_mse,
            ood_mse,
        });
    }
    Ok((ts, curve))
}

/// Latent targets `(z, v)` of the frozen encoders for every transition.
fn frozen_latents(ts: &TransformSet, transitions: &[Transition]) -> Result<(DMatrix<f64>, DMatrix<f64>), ReprError> {
    let batch = Batch::from_groups(&[transitions], ts.unit);
    let h = ts.eta.forward_batch(&batch.x)?;
    let z = ts.rho.forward_batch(&batch.xu)?;
    let v = ts.nu.forward_batch(&hcat(&batch.dx, &h))?;
    Ok((z, v))
}

/// `L_M` of the latent dynamics over all given transitions.
pub fn match_loss(ts: &TransformSet, transitions: &[Transition]) -> Result<f64, ReprError> {
    if transitions.is_empty() {
        return Err(ReprError::Empty);
    }
    let (z, v) = frozen_latents(ts, transitions)?;
    let vhat = ts.fz.forward_batch(&z)?;
    let sum_e: f64 = (0..v.nrows()).map(|i| (v.row(i) - vhat.row(i)).norm()).sum();
    let sum_v: f64 = (0..v.nrows()).map(|i| row_norm(&v, i)).sum();
    Ok(match_ratio(sum_e, sum_v))
}

/// Replaces `fz` with a fresh higher-capacity network trained on `L_M` alone;
/// the other maps are untouched. Returns the per-epoch mean training `L_M`.
pub fn fine_tune(
    ts: &TransformSet,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TransformSet, Vec<f64>), ReprError> {
    let transitions: Vec<Transition> = data.transitions().cloned().collect();
    if transitions.is_empty() {
        return Err(ReprError::Empty);
    }
    let (z_all, v_all) = frozen_latents(ts, &transitions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF1AE_7000);
    let mut fz = Mlp::with_hidden(ts.latent_dim(), &cfg.fine_tune_hidden, V_DIM, &mut rng);
    let mut opt = Adam::with_lr(&fz, cfg.lr);
    let mut order: Vec<usize> = (0..transitions.len()).collect();
    let mut curve = Vec::with_capacity(cfg.fine_tune_epochs);
    for epoch in 1..=cfg.fine_tune_epochs {
        order.shuffle(&mut rng);
        let (mut acc, mut batches) = (0.0, 0.0);
        for chunk in order.chunks(cfg.fine_tune_batch.max(1)) {
            let z = z_all.select_rows(chunk);
            let v = v_all.select_rows(chunk);
            let trace = fz.forward_trace(z)?;
            let vhat = trace.output();
            let mut sum_e = 0.0;
            let sum_v: f64 = (0..v.nrows()).map(|i| row_norm(&v, i)).sum();
            let mut g = DMatrix::zeros(v.nrows(), V_DIM);
            for i in 0..v.nrows() {
                let e = v.row(i) - vhat.row(i);
                sum_e += e.norm();
                if sum_v > 0.0 {
                    g.row_mut(i).copy_from(&(unit_or_zero(e) * (-1.0 / sum_v)));
                }
            }
            let loss = match_ratio(sum_e, sum_v);
            if !loss.is_finite() {
                return Err(ReprError::NonFinite {
                    epoch,
                    detail: format!("fine-tune L_M {loss}"),
                });
            }
            let (grad, _) = fz.backward(&trace, &g);
            opt.step(&mut fz, &grad);
            acc += loss;
            batches += 1.0;
        }
        curve.push(acc / batches);
    }
    let mut out = ts.clone();
    out.fz = fz;
    Ok((out, curve))
}

/// Direct feedforward model trained on the relative error ratio.
pub fn train_baseline(
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(BaselineModel, Vec<CurveRow>), ReprError> {
    let transitions: Vec<Transition> = data.transitions().cloned().collect();
    if transitions.is_empty() {
        return Err(ReprError::Empty);
    }
    let all = Batch::from_groups(&[&transitions], cfg.unit);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBA5E_0000);
    let net = Mlp::with_hidden(STATE_DIM + CONTROL_DIM, &cfg.baseline_hidden, STATE_DIM, &mut rng);
    let mut model = BaselineModel { net, unit: cfg.unit };
    let mut opt = Adam::with_lr(&model.net, cfg.lr);
    let val_t = val.map(|v| v.transitions().cloned().collect::<Vec<_>>());
    let offset = Vec2::new(cfg.ood_offset[0], cfg.ood_offset[1]);
    let mut order: Vec<usize> = (0..transitions.len()).collect();
    let mut curve = Vec::with_capacity(cfg.baseline_epochs);
    for epoch in 1..=cfg.baseline_epochs {
        order.shuffle(&mut rng);
        let (mut acc, mut batches) = (0.0, 0.0);
        for chunk in order.chunks(cfg.baseline_batch.max(1)) {
            let xu = all.xu.select_rows(chunk);
            let dx = all.dx.select_rows(chunk);
            let trace = model.net.forward_trace(xu)?;
            let pred = trace.output();
            let sum_dx: f64 = (0..dx.nrows()).map(|i| row_norm(&dx, i)).sum();
            if sum_dx == 0.0 {
                return Err(ReprError::DegenerateBatch);
            }
            let mut sum_r = 0.0;
            let mut g = DMatrix::zeros(dx.nrows(), STATE_DIM);
            for i in 0..dx.nrows() {
                let r = dx.row(i) - pred.row(i);
                sum_r += r.norm();
                g.row_mut(i).copy_from(&(unit_or_zero(r) * (-1.0 / sum_dx)));
            }
            let loss = sum_r / sum_dx;
            if !loss.is_finite() {
                return Err(ReprError::NonFinite {
                    epoch,
                    detail: format!("baseline loss {loss}"),
                });
            }
            let (grad, _) = model.net.backward(&trace, &g);
            opt.step(&mut model.net, &grad);
            acc += loss;
            batches += 1.0;
        }
        let (val_mse, ood_mse) = validation_pair(&model, val_t.as_deref(), offset);
        curve.push(CurveRow {
            epoch,
            l_reconstruct: acc / batches,
            l_match: 0.0,
            variance: 0.0,
            total: acc / batches,
            val_mse,
            ood_mse,
        });
    }
    Ok((model, curve))
}
