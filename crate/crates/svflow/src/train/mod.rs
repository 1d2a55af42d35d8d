//! Training machinery for discretized flows: the hybrid objective
//! J_hybrid = J_align + beta * J_var, reverse-mode error signals through the
//! Euler steps, the closed-form advantage-function gradients for posterior
//! and score parameters, a finite-difference oracle, and the Adam loop.
//!
//! Gradients are assembled from closed forms plus an explicit chain rule
//! through each Euler step; no automatic differentiation is involved. The
//! finite-difference oracle is the independent check on every block.

mod backward;
mod optim;
mod run;

pub use backward::{
    advantages, backward_signals, grad_phi, grad_theta, hybrid_objective, AdvantageSet,
    BatchGradients, ErrorSignals,
};
pub use optim::{adam_step, finite_diff_oracle, AdamParams, AdamState};
pub use run::{train_run, BatchSampler, HistoryRow, TrainConfig, TrainResult};

use crate::error::{Error, Result};
use crate::flow::{FlowModel, IntegrationMode, Trajectory};
use crate::linalg::{dot, logsumexp, softmax_into};
use serde::{Deserialize, Serialize};

/// Linear classification head producing `softmax(W^T x + b)` over labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// Row-major `num_classes x dim` weights.
    pub weights: Vec<f64>,
    /// Per-class bias; empty means no bias.
    pub bias: Vec<f64>,
    pub num_classes: usize,
    pub dim: usize,
}

impl ClassifierHead {
    pub fn zeros(dim: usize, num_classes: usize, with_bias: bool) -> Self {
        Self {
            weights: vec![0.0; num_classes * dim],
            bias: if with_bias { vec![0.0; num_classes] } else { Vec::new() },
            num_classes,
            dim,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                dot(&self.weights[c * self.dim..(c + 1) * self.dim], x)
                    + self.bias.get(c).copied().unwrap_or(0.0)
            })
            .collect()
    }

    /// Negative log-likelihood of `label` at terminal state `x`.
    pub fn nll(&self, x: &[f64], label: usize) -> Result<f64> {
        if label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        let logits = self.logits(x);
        Ok(logsumexp(&logits) - logits[label])
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = c;
            }
        }
        best
    }

    /// softmax(logits) - onehot(label), the per-class error at `x`.
    pub(crate) fn class_error(&self, x: &[f64], label: usize) -> Vec<f64> {
        let logits = self.logits(x);
        let mut probs = vec![0.0; self.num_classes];
        softmax_into(&logits, &mut probs);
        probs[label] -= 1.0;
        probs
    }
}

/// Weights and mode of the hybrid objective. `beta = f64::INFINITY` selects
/// the pure variational-consistency objective (J_var alone).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta: f64,
    /// Per-step weights lambda_l with mean 1; length equals the step count.
    pub lambda_weights: Vec<f64>,
    pub mode: IntegrationMode,
}

impl ObjectiveConfig {
    pub fn new(beta: f64, lambda_weights: Vec<f64>, mode: IntegrationMode) -> Result<Self> {
        if beta < 0.0 || beta.is_nan() {
            return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
        }
        if lambda_weights.is_empty() {
            return Err(Error::Config("lambda weights must not be empty".into()));
        }
        if lambda_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("lambda weights must be finite and >= 0".into()));
        }
        let mean = lambda_weights.iter().sum::<f64>() / lambda_weights.len() as f64;
        if (mean - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "lambda weights must have mean 1, got {mean}"
            )));
        }
        Ok(Self {
            beta,
            lambda_weights,
            mode,
        })
    }

    /// Uniform weighting lambda = 1 over `num_steps` steps.
    pub fn uniform(beta: f64, num_steps: usize, mode: IntegrationMode) -> Result<Self> {
        Self::new(beta, vec![1.0; num_steps], mode)
    }

    /// Pure J_var training (the infinite-beta regime).
    pub fn pure_var(&self) -> bool {
        self.beta.is_infinite()
    }

    /// Scale applied to task-loss terms (0 in pure-var mode).
    pub(crate) fn align_scale(&self) -> f64 {
        if self.pure_var() {
            0.0
        } else {
            1.0
        }
    }

    /// Scale applied to variational terms (beta, or 1 in pure-var mode).
    pub(crate) fn var_scale(&self) -> f64 {
        if self.pure_var() {
            1.0
        } else {
            self.beta
        }
    }

    /// Per-step weight lambda_l / L.
    pub(crate) fn step_weight(&self, l: usize) -> f64 {
        self.lambda_weights[l] / self.lambda_weights.len() as f64
    }
}

/// Trajectory-averaged variational consistency
/// J_var = mean over samples and steps of lambda_l KL(q_l || p_l).
pub fn j_var(model: &FlowModel, cfg: &ObjectiveConfig, trajectories: &[Trajectory]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::EmptyInput("j_var batch".into()));
    }
    if cfg.lambda_weights.len() != model.num_steps() {
        return Err(Error::Config(format!(
            "lambda table has {} entries, model has {} steps",
            cfg.lambda_weights.len(),
            model.num_steps()
        )));
    }
    let mut acc = 0.0;
    for tr in trajectories {
        for l in 0..model.num_steps() {
            let x = &tr.states[l];
            let q = model.posterior(l, x)?;
            let p = model.true_posterior(l, x)?;
            acc += cfg.step_weight(l) * crate::distributions::categorical_kl(&q, &p)?;
        }
    }
    Ok(acc / trajectories.len() as f64)
}

/// Terminal-state alignment loss: mean -log softmax(W^T x_L)_y over the batch.
pub fn j_align(
    model: &FlowModel,
    head: &ClassifierHead,
    batch: &[(Vec<f64>, usize)],
    mode: IntegrationMode,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("j_align batch".into()));
    }
    let mut acc = 0.0;
    for (x0, y) in batch {
        let tr = model.integrate(x0, mode)?;
        acc += head.nll(tr.states.last().expect("nonempty trajectory"), *y)?;
    }
    Ok(acc / batch.len() as f64)
}

#[cfg(test)]
pub(crate) mod testing {
    use crate::flow::{Family, FlowModel, PosteriorMode};
    use crate::linalg::norm;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub fn random_gaussian_model(
        rng: &mut ChaCha8Rng,
        d: usize,
        zn: usize,
        l: usize,
        h: f64,
        mode: PosteriorMode,
    ) -> FlowModel {
        let theta: Vec<Vec<f64>> = (0..l)
            .map(|_| {
                (0..zn)
                    .flat_map(|_| {
                        let mean: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                        let ls: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 0.6 - 0.5).collect();
                        mean.into_iter().chain(ls)
                    })
                    .collect()
            })
            .collect();
        let phi = match mode {
            PosteriorMode::Tied => vec![],
            PosteriorMode::Untied => (0..l)
                .map(|_| (0..zn * d + zn).map(|_| rng.gen::<f64>() - 0.5).collect())
                .collect(),
        };
        FlowModel::new(Family::Gaussian, d, zn, l, h, mode, theta, phi).unwrap()
    }

    pub fn random_vmf_model(
        rng: &mut ChaCha8Rng,
        d: usize,
        zn: usize,
        l: usize,
        h: f64,
        mode: PosteriorMode,
    ) -> FlowModel {
        let theta: Vec<Vec<f64>> = (0..l)
            .map(|_| {
                (0..zn)
                    .flat_map(|_| {
                        let u: Vec<f64> =
                            (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                        u.into_iter().chain([rng.gen::<f64>() * 2.0 - 0.5])
                    })
                    .collect()
            })
            .collect();
        let phi = match mode {
            PosteriorMode::Tied => vec![],
            PosteriorMode::Untied => (0..l)
                .map(|_| (0..zn * d + zn).map(|_| rng.gen::<f64>() - 0.5).collect())
                .collect(),
        };
        FlowModel::new(Family::Vmf, d, zn, l, h, mode, theta, phi).unwrap()
    }

    pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let n = norm(&v);
            if n > 0.1 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::random_gaussian_model;
    use super::*;
    use crate::flow::PosteriorMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn j_var_zero_in_tied_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_gaussian_model(&mut rng, 2, 4, 3, 0.1, PosteriorMode::Tied);
        let cfg = ObjectiveConfig::uniform(0.5, 3, IntegrationMode::Euclidean).unwrap();
        let trs: Vec<_> = (0..4)
            .map(|i| {
                m.integrate(&[0.1 * i as f64, -0.2], IntegrationMode::Euclidean)
                    .unwrap()
            })
            .collect();
        assert_eq!(j_var(&m, &cfg, &trs).unwrap(), 0.0);
    }

    #[test]
    fn j_var_zero_for_single_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_gaussian_model(&mut rng, 2, 1, 3, 0.1, PosteriorMode::Untied);
        let cfg = ObjectiveConfig::uniform(0.5, 3, IntegrationMode::Euclidean).unwrap();
        let trs = vec![m.integrate(&[0.4, 0.4], IntegrationMode::Euclidean).unwrap()];
        assert_eq!(j_var(&m, &cfg, &trs).unwrap(), 0.0);
    }

    #[test]
    fn j_var_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = random_gaussian_model(&mut rng, 2, 3, 4, 0.1, PosteriorMode::Untied);
        let lambda = vec![0.4, 1.6, 0.8, 1.2];
        let cfg = ObjectiveConfig::new(0.5, lambda.clone(), IntegrationMode::Euclidean).unwrap();
        let trs: Vec<_> = (0..3)
            .map(|i| {
                m.integrate(&[0.3 * i as f64 - 0.2, 0.1], IntegrationMode::Euclidean)
                    .unwrap()
            })
            .collect();
        let got = j_var(&m, &cfg, &trs).unwrap();
        let mut want = 0.0;
        for tr in &trs {
            for l in 0..4 {
                let q = m.posterior(l, &tr.states[l]).unwrap();
                let p = m.true_posterior(l, &tr.states[l]).unwrap();
                want += lambda[l] / 4.0
                    * crate::distributions::categorical_kl(&q, &p).unwrap();
            }
        }
        want /= 3.0;
        assert!((got - want).abs() <= 1e-12);
    }

    #[test]
    fn j_align_uniform_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = random_gaussian_model(&mut rng, 2, 2, 2, 0.05, PosteriorMode::Tied);
        let head = ClassifierHead::zeros(2, 3, true);
        let batch = vec![(vec![0.1, 0.2], 0), (vec![-0.4, 0.5], 2)];
        let got = j_align(&m, &head, &batch, IntegrationMode::Euclidean).unwrap();
        assert!((got - 3.0_f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn j_align_two_class_logit_gap() {
        // With a known terminal state and a crafted head, the per-sample loss
        // is log(1 + exp(-gap)).
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let m = random_gaussian_model(&mut rng, 2, 2, 2, 1e-9, PosteriorMode::Tied);
        // Tiny step size: terminal ~ x0.
        let x0 = vec![1.0, 0.0];
        let gap = 2.3;
        let head = ClassifierHead {
            weights: vec![gap, 0.0, 0.0, 0.0],
            bias: vec![],
            num_classes: 2,
            dim: 2,
        };
        let got = j_align(&m, &head, &[(x0, 0)], IntegrationMode::Euclidean).unwrap();
        assert!((got - (1.0 + (-gap).exp()).ln()).abs() <= 1e-6);
    }

    #[test]
    fn j_align_saturates_with_large_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = random_gaussian_model(&mut rng, 2, 2, 2, 1e-9, PosteriorMode::Tied);
        let head = ClassifierHead {
            weights: vec![50.0, 0.0, -50.0, 0.0],
            bias: vec![],
            num_classes: 2,
            dim: 2,
        };
        let got = j_align(&m, &head, &[(vec![1.0, 0.0], 0)], IntegrationMode::Euclidean).unwrap();
        assert!(got < 1e-10);
    }

    #[test]
    fn j_align_rejects_bad_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let m = random_gaussian_model(&mut rng, 2, 2, 2, 0.1, PosteriorMode::Tied);
        let head = ClassifierHead::zeros(2, 2, false);
        assert!(j_align(&m, &head, &[(vec![0.0, 0.0], 5)], IntegrationMode::Euclidean).is_err());
    }

    #[test]
    fn objective_config_validates_lambda_mean() {
        assert!(ObjectiveConfig::new(0.1, vec![1.0, 2.0], IntegrationMode::Euclidean).is_err());
        assert!(ObjectiveConfig::new(0.1, vec![0.5, 1.5], IntegrationMode::Euclidean).is_ok());
        assert!(ObjectiveConfig::new(-0.1, vec![1.0], IntegrationMode::Euclidean).is_err());
        let pure = ObjectiveConfig::new(f64::INFINITY, vec![1.0], IntegrationMode::Euclidean)
            .unwrap();
        assert!(pure.pure_var());
    }
}
