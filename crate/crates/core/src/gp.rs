//! Local Gaussian-process model of the error dynamics `dx - f_nom(x, u)`.
//!
//! Four independent zero-mean heads share one window of inputs. Each head has
//! an ARD squared-exponential kernel whose log hyperparameters are refit by a
//! few guarded Adam steps on the exact log marginal likelihood.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repr::NominalModel;
use crate::sim::{Transition, CONTROL_DIM, STATE_DIM};

pub const INPUT_DIM: usize = STATE_DIM + CONTROL_DIM;
pub const OUTPUT_DIM: usize = STATE_DIM;

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("kernel matrix not positive definite even with jitter {0}")]
    NotPositiveDefinite(f64),
    #[error("cannot fit an empty window")]
    EmptyWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    pub window: usize,
    pub fit_iterations: usize,
    pub lr: f64,
    pub init_lengthscale: f64,
    pub init_signal_var: f64,
    pub init_noise_var: f64,
    pub noise_floor: f64,
    pub lengthscale_range: [f64; 2],
    pub signal_var_range: [f64; 2],
    pub noise_var_max: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            window: 50,
            fit_iterations: 15,
            lr: 0.1,
            init_lengthscale: 1.0,
            init_signal_var: 1.0,
            init_noise_var: 0.01,
            noise_floor: 1e-6,
            lengthscale_range: [1e-2, 1e3],
            signal_var_range: [1e-8, 1e4],
            noise_var_max: 1e2,
        }
    }
}

/// Log hyperparameters of one output head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadHyper {
    pub log_lengthscale: [f64; INPUT_DIM],
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl HeadHyper {
    pub fn initial(cfg: &GpConfig) -> Self {
        Self {
            log_lengthscale: [cfg.init_lengthscale.ln(); INPUT_DIM],
            log_signal_var: cfg.init_signal_var.ln(),
            log_noise_var: cfg.init_noise_var.max(cfg.noise_floor).ln(),
        }
    }

    pub fn to_vec(&self) -> [f64; INPUT_DIM + 2] {
        let mut p = [0.0; INPUT_DIM + 2];
        p[..INPUT_DIM].copy_from_slice(&self.log_lengthscale);
        p[INPUT_DIM] = self.log_signal_var;
        p[INPUT_DIM + 1] = self.log_noise_var;
        p
    }

    pub fn from_vec(p: &[f64; INPUT_DIM + 2]) -> Self {
        let mut log_lengthscale = [0.0; INPUT_DIM];
        log_lengthscale.copy_from_slice(&p[..INPUT_DIM]);
        Self {
            log_lengthscale,
            log_signal_var: p[INPUT_DIM],
            log_noise_var: p[INPUT_DIM + 1],
        }
    }

    fn clamp(&mut self, cfg: &GpConfig) {
        let (l0, l1) = (cfg.lengthscale_range[0].ln(), cfg.lengthscale_range[1].ln());
        self.log_lengthscale.iter_mut().for_each(|l| *l = l.clamp(l0, l1));
        self.log_signal_var = self
            .log_signal_var
            .clamp(cfg.signal_var_range[0].ln(), cfg.signal_var_range[1].ln());
        self.log_noise_var = self.log_noise_var.clamp(cfg.noise_floor.ln(), cfg.noise_var_max.ln());
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for d in 0..INPUT_DIM {
            let r = (a[d] - b[d]) / self.log_lengthscale[d].exp();
            s += r * r;
        }
        self.signal_var() * (-0.5 * s).exp()
    }
}

/// Per-dimension affine standardization of GP inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: [f64; INPUT_DIM],
    pub std: [f64; INPUT_DIM],
}

impl InputScaler {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; INPUT_DIM],
            std: [1.0; INPUT_DIM],
        }
    }

    /// Statistics of `(x, u)` over the given transitions; dimensions without
    /// spread keep unit scale.
    pub fn from_transitions<'a>(transitions: impl IntoIterator<Item = &'a Transition>) -> Self {
        let mut n = 0.0;
        let mut sum = [0.0; INPUT_DIM];
        let mut sq = [0.0; INPUT_DIM];
        for t in transitions {
            let z = join(&t.state.to_array(), &t.action.to_array());
            for d in 0..INPUT_DIM {
                sum[d] += z[d];
                sq[d] += z[d] * z[d];
            }
            n += 1.0;
        }
        if n == 0.0 {
            return Self::identity();
        }
        let mut out = Self::identity();
        for d in 0..INPUT_DIM {
            let m = sum[d] / n;
            let var = (sq[d] / n - m * m).max(0.0);
            out.mean[d] = m;
            out.std[d] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, raw: &[f64; INPUT_DIM]) -> [f64; INPUT_DIM] {
        let mut z = [0.0; INPUT_DIM];
        for d in 0..INPUT_DIM {
            z[d] = (raw[d] - self.mean[d]) / self.std[d];
        }
        z
    }
}

fn join(x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> [f64; INPUT_DIM] {
    [x[0], x[1], x[2], x[3], u[0], u[1]]
}

#[derive(Clone, Debug)]
struct HeadCache {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Sliding-window GP over standardized `(x, u)` inputs.
#[derive(Clone, Debug)]
pub struct LocalGp {
    cfg: GpConfig,
    scaler: InputScaler,
    inputs: VecDeque<[f64; INPUT_DIM]>,
    targets: VecDeque<[f64; OUTPUT_DIM]>,
    heads: Vec<HeadHyper>,
    cache: Vec<HeadCache>,
}

/// Log marginal likelihood of each head before and after a fit.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub initial: [f64; OUTPUT_DIM],
    pub last: [f64; OUTPUT_DIM],
}

fn gram(h: &HeadHyper, xs: &[[f64; INPUT_DIM]]) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = h.kernel(&xs[i], &xs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + noise I`, escalating a diagonal jitter on failure.
fn factor(mut k: DMatrix<f64>, noise: f64) -> Result<Cholesky<f64, Dyn>, GpError> {
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    if let Some(c) = k.clone().cholesky() {
        return Ok(c);
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-12) {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(GpError::NotPositiveDefinite(JITTER_MAX))
}

/// Exact log marginal likelihood of `y` and its gradient with respect to the
/// head's log hyperparameters (lengthscales, signal variance, noise variance).
pub fn log_marginal_likelihood(
    h: &HeadHyper,
    xs: &[[f64; INPUT_DIM]],
    y: &[f64],
) -> Result<(f64, [f64; INPUT_DIM + 2]), GpError> {
    let n = xs.len();
    if n == 0 {
        return Err(GpError::EmptyWindow);
    }
    let kf = gram(h, xs);
    let noise = h.noise_var();
    let chol = factor(kf.clone(), noise)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let l = chol.l();
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    let lml = -0.5 * yv.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * PI).ln();

    // W = alpha alpha^T - K^-1; dL/dtheta = 0.5 tr(W dK/dtheta)
    let kinv = chol.inverse();
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad = [0.0; INPUT_DIM + 2];
    for d in 0..INPUT_DIM {
        let ell2 = (2.0 * h.log_lengthscale[d]).exp();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let diff = xs[i][d] - xs[j][d];
                s += w[(i, j)] * kf[(i, j)] * diff * diff / ell2;
            }
        }
        grad[d] = 0.5 * s;
    }
    grad[INPUT_DIM] = 0.5 * w.component_mul(&kf).sum();
    grad[INPUT_DIM + 1] = 0.5 * noise * w.trace();
    Ok((lml, grad))
}

impl LocalGp {
    pub fn new(cfg: GpConfig, scaler: InputScaler) -> Self {
        let heads = vec![HeadHyper::initial(&cfg); OUTPUT_DIM];
        Self {
            cfg,
            scaler,
            inputs: VecDeque::new(),
            targets: VecDeque::new(),
            heads,
            cache: Vec::new(),
        }
    }

    pub fn config(&self) -> &GpConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn hyper(&self) -> &[HeadHyper] {
        &self.heads
    }

    pub fn set_hyper(&mut self, heads: Vec<HeadHyper>) -> Result<(), GpError> {
        assert_eq!(heads.len(), OUTPUT_DIM);
        self.heads = heads;
        self.refresh()
    }

    pub fn targets(&self) -> impl Iterator<Item = &[f64; OUTPUT_DIM]> {
        self.targets.iter()
    }

    /// Empties the window and restores the initial hyperparameters.
    pub fn reset(&mut self) {
        self.inputs.clear();
        self.targets.clear();
        self.cache.clear();
        self.heads = vec![HeadHyper::initial(&self.cfg); OUTPUT_DIM];
    }

    /// Stores the residual of `model` on the transition, evicting the oldest
    /// point beyond the window size.
    pub fn add(&mut self, t: &Transition, model: &dyn NominalModel) -> Result<(), GpError> {
        let x = t.state.to_array();
        let u = t.action.to_array();
        let pred = model.predict(&x, &u);
        let mut target = [0.0; OUTPUT_DIM];
        for k in 0..OUTPUT_DIM {
            target[k] = t.dx[k] - pred[k];
        }
        self.add_point(&x, &u, target)
    }

    pub fn add_point(
        &mut self,
        x: &[f64; STATE_DIM],
        u: &[f64; CONTROL_DIM],
        target: [f64; OUTPUT_DIM],
    ) -> Result<(), GpError> {
        self.inputs.push_back(self.scaler.apply(&join(x, u)));
        self.targets.push_back(target);
        while self.inputs.len() > self.cfg.window.max(1) {
            self.inputs.pop_front();
            self.targets.pop_front();
        }
        self.refresh()
    }

    fn window_inputs(&self) -> Vec<[f64; INPUT_DIM]> {
        self.inputs.iter().copied().collect()
    }

    fn head_targets(&self, k: usize) -> Vec<f64> {
        self.targets.iter().map(|t| t[k]).collect()
    }

    fn refresh(&mut self) -> Result<(), GpError> {
        self.cache.clear();
        if self.inputs.is_empty() {
            return Ok(());
        }
        let xs = self.window_inputs();
        for k in 0..OUTPUT_DIM {
            let h = &self.heads[k];
            let chol = factor(gram(h, &xs), h.noise_var())?;
            let alpha = chol.solve(&DVector::from_vec(self.head_targets(k)));
            self.cache.push(HeadCache { chol, alpha });
        }
        Ok(())
    }

    /// Guarded Adam ascent on each head's log marginal likelihood: a step that
    /// lowers the likelihood is undone and the step size halved.
    pub fn fit(&mut self) -> Result<FitReport, GpError> {
        if self.inputs.is_empty() {
            return Err(GpError::EmptyWindow);
        }
        let xs = self.window_inputs();
        let mut report = FitReport {
            initial: [0.0; OUTPUT_DIM],
            last: [0.0; OUTPUT_DIM],
        };
        for k in 0..OUTPUT_DIM {
            let y = self.head_targets(k);
            let mut h = self.heads[k].clone();
            let (mut lml, mut grad) = log_marginal_likelihood(&h, &xs, &y)?;
            report.initial[k] = lml;
            let mut lr = self.cfg.lr;
            let mut m = [0.0; INPUT_DIM + 2];
            let mut v = [0.0; INPUT_DIM + 2];
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            for it in 1..=self.cfg.fit_iterations {
                let mut p = h.to_vec();
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    let mh = m[i] / (1.0 - b1.powi(it as i32));
                    let vh = v[i] / (1.0 - b2.powi(it as i32));
                    p[i] += lr * mh / (vh.sqrt() + eps);
                }
                let mut cand = HeadHyper::from_vec(&p);
                cand.clamp(&self.cfg);
                match log_marginal_likelihood(&cand, &xs, &y) {
                    Ok((l, g)) if l.is_finite() && l >= lml => {
                        h = cand;
                        lml = l;
                        grad = g;
                    }
                    _ => lr *= 0.5,
                }
            }
            report.last[k] = lml;
            self.heads[k] = h;
        }
        self.refresh()?;
        Ok(report)
    }

    /// Posterior mean and predictive variance (noise included) per head.
    pub fn predict(&self, x: &[f64; STATE_DIM], u: &[f64; CONTROL_DIM]) -> ([f64; OUTPUT_DIM], [f64; OUTPUT_DIM]) {
        let q = self.scaler.apply(&join(x, u));
        let mut mean = [0.0; OUTPUT_DIM];
        let mut var = [0.0; OUTPUT_DIM];
        for k in 0..OUTPUT_DIM {
            let h = &self.heads[k];
            let prior = h.signal_var() + h.noise_var();
            if self.cache.is_empty() {
                var[k] = prior;
                continue;
            }
            let ks = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|p| h.kernel(&q, p)));
            let c = &self.cache[k];
            mean[k] = ks.dot(&c.alpha);
            let w = c.chol.l().solve_lower_triangular(&ks).expect("cholesky factor is invertible");
            var[k] = (prior - w.dot(&w)).max(0.0);
        }
        (mean, var)
    }

    /// Posterior means for `n` row-major state/control pairs.
    pub fn predict_mean_batch(&self, states: &[f64], controls: &[f64]) -> Vec<f64> {
        let n = states.len() / STATE_DIM;
        let mut out = vec![0.0; n * OUTPUT_DIM];
        if self.cache.is_empty() {
            return out;
        }
        let inv_ell: Vec<[f64; INPUT_DIM]> = self
            .heads
            .iter()
            .map(|h| std::array::from_fn(|d| (-h.log_lengthscale[d]).exp()))
            .collect();
        for i in 0..n {
            let x = [states[i * 4], states[i * 4 + 1], states[i * 4 + 2], states[i * 4 + 3]];
            let u = [controls[i * 2], controls[i * 2 + 1]];
            let q = self.scaler.apply(&join(&x, &u));
            for k in 0..OUTPUT_DIM {
                let sf2 = self.heads[k].signal_var();
                let alpha = &self.cache[k].alpha;
                let mut s = 0.0;
                for (j, p) in self.inputs.iter().enumerate() {
                    let mut r2 = 0.0;
                    for d in 0..INPUT_DIM {
                        let r = (q[d] - p[d]) * inv_ell[k][d];
                        r2 += r * r;
                    }
                    s += sf2 * (-0.5 * r2).exp() * alpha[j];
                }
                out[i * OUTPUT_DIM + k] = s;
            }
        }
        out
    }

    /// Current log marginal likelihood per head (zero for an empty window).
    pub fn log_likelihoods(&self) -> Result<[f64; OUTPUT_DIM], GpError> {
        let mut out = [0.0; OUTPUT_DIM];
        if self.inputs.is_empty() {
            return Ok(out);
        }
        let xs = self.window_inputs();
        for (k, o) in out.iter_mut().enumerate() {
            *o = log_marginal_likelihood(&self.heads[k], &xs, &self.head_targets(k))?.0;
        }
        Ok(out)
    }
}
