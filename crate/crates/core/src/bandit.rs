//! Non-stationary correlated Gaussian bandit over recovery cost mixtures.
//!
//! Every arm is a convex combination of the recovery hypotheses. Arm values
//! share a Gaussian belief `N(m, S)` whose prior covariance is the arm
//! correlation matrix `C`, so a pull of one arm informs its neighbours.
//! Process noise `q C` keeps the belief able to track drifting rewards. Arms
//! are chosen by Thompson sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditConfig {
    pub n_arms: usize,
    pub n_hypotheses: usize,
    pub process_noise: f64,
    pub obs_noise: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            n_arms: 100,
            n_hypotheses: 2,
            process_noise: 0.01,
            obs_noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSet {
    pub weights: Vec<Vec<f64>>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub corr: DMatrix<f64>,
    pub process_noise: f64,
    pub obs_noise: f64,
}

/// Uniform sample from the probability simplex: gaps of sorted uniforms.
pub fn simplex_sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut cuts: Vec<f64> = (0..dim.saturating_sub(1)).map(|_| rng.random::<f64>()).collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(dim);
    let mut prev = 0.0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(1.0 - prev);
    out
}

/// `max(0, cos(a, b))`, zero when either vector vanishes.
pub fn clipped_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

impl ArmSet {
    pub fn new<R: Rng + ?Sized>(cfg: &BanditConfig, rng: &mut R) -> Self {
        assert!(cfg.n_arms >= 1 && cfg.n_hypotheses >= 1);
        let weights = (0..cfg.n_arms).map(|_| simplex_sample(cfg.n_hypotheses, rng)).collect();
        Self::from_weights(weights, cfg.process_noise, cfg.obs_noise)
    }

    pub fn from_weights(weights: Vec<Vec<f64>>, process_noise: f64, obs_noise: f64) -> Self {
        let k = weights.len();
        let corr = DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                1.0
            } else {
                clipped_cosine(&weights[i], &weights[j])
            }
        });
        Self {
            weights,
            mean: DVector::zeros(k),
            cov: corr.clone(),
            corr,
            process_noise,
            obs_noise,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Thompson draw `theta ~ N(m, S)`; returns the argmax (lowest index on ties).
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let k = self.len();
        let eig = SymmetricEigen::new(self.cov.clone());
        let z = DVector::<f64>::from_fn(k, |_, _| rng.sample(StandardNormal));
        let scaled = DVector::from_fn(k, |i, _| eig.eigenvalues[i].max(0.0).sqrt() * z[i]);
        let theta = &self.mean + &eig.eigenvectors * scaled;
        let mut best = 0;
        for i in 1..k {
            if theta[i] > theta[best] {
                best = i;
            }
        }
        best
    }

    /// Kalman update for a noisy observation of the pulled arm's value,
    /// followed by process noise `q C`.
    pub fn update(&mut self, pulled: usize, reward: f64) {
        let s_col = self.cov.column(pulled).into_owned();
        let gain = &s_col / (s_col[pulled] + self.obs_noise);
        let innovation = reward - self.mean[pulled];
        self.mean += &gain * innovation;
        self.cov -= &gain * s_col.transpose();
        self.cov += &self.corr * self.process_noise;
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        self.cov = sym;
    }

    pub fn min_cov_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov.clone()).eigenvalues.min()
    }
}
