//! Conditional-likelihood families (von Mises-Fisher on the sphere, diagonal
//! Gaussian in Euclidean space) and categorical utilities: softmax, KL
//! divergence, entropy, and divergence from uniform.
//!
//! Everything is computed in log space; probabilities only materialize at API
//! boundaries (`ProbVector`).

use crate::bessel::{bessel_i_ratio, log_bessel_i};
use crate::error::{Error, Result};
use crate::geometry;
use crate::linalg::{dot, norm, softmax_into};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Tolerance on unit-norm checks for mean directions and sphere points.
pub const UNIT_TOL: f64 = 1e-10;
/// Tolerance on `sum(p) - 1` for probability vectors.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// von Mises-Fisher parameters: unit mean direction and concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    pub mu: Vec<f64>,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if kappa < 0.0 {
            return Err(Error::Domain(format!("kappa must be >= 0, got {kappa}")));
        }
        if !kappa.is_finite() || mu.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("vMF parameters".into()));
        }
        let n = norm(&mu);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Precondition(format!(
                "vMF mean direction is not unit norm: |mu| = {n}"
            )));
        }
        Ok(Self { mu, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Diagonal Gaussian parameters; standard deviations stored as log values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussianParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussianParams {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        if mean.iter().chain(&log_std).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        Ok(Self { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Nonnegative vector summing to one over the latent set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput("probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain("probabilities must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Domain(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// log C_d(kappa) = (d/2 - 1) log kappa - (d/2) log 2pi - log I_{d/2-1}(kappa).
///
/// Uses the log-space Bessel evaluation of [`crate::bessel`], so it stays
/// finite for concentrations up to 1e7.
pub fn vmf_log_normalizer(d: usize, kappa: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::Domain(format!("vMF needs d >= 2, got {d}")));
    }
    if kappa < 0.0 {
        return Err(Error::Domain(format!("kappa must be >= 0, got {kappa}")));
    }
    let half_d = d as f64 / 2.0;
    if kappa == 0.0 {
        // Uniform density on the sphere: Gamma(d/2) / (2 pi^{d/2}).
        return Ok(ln_gamma(half_d) - std::f64::consts::LN_2 - half_d * std::f64::consts::PI.ln());
    }
    let nu = half_d - 1.0;
    Ok(nu * kappa.ln()
        - half_d * (2.0 * std::f64::consts::PI).ln()
        - log_bessel_i(nu, kappa))
}

/// d/dkappa of `vmf_log_normalizer`, equal to minus the mean resultant
/// length `A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa)`.
pub fn vmf_log_normalizer_dkappa(d: usize, kappa: f64) -> Result<f64> {
    if d < 2 {
        return Err(Error::Domain(format!("vMF needs d >= 2, got {d}")));
    }
    if kappa < 0.0 {
        return Err(Error::Domain(format!("kappa must be >= 0, got {kappa}")));
    }
    Ok(-bessel_i_ratio(d as f64 / 2.0 - 1.0, kappa))
}

/// log p_vMF(x; mu, kappa) for unit `x`.
pub fn vmf_log_density(x: &[f64], p: &VmfParams) -> Result<f64> {
    geometry::check_unit(x, UNIT_TOL)?;
    vmf_log_density_ambient(x, p)
}

/// The vMF log-density expression `log C_d(kappa) + kappa mu.x` evaluated at
/// an arbitrary ambient point. Used where gradients are taken in ambient
/// coordinates; agrees with [`vmf_log_density`] on the sphere.
pub fn vmf_log_density_ambient(x: &[f64], p: &VmfParams) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: x.len(),
        });
    }
    Ok(vmf_log_normalizer(p.dim(), p.kappa)? + p.kappa * dot(&p.mu, x))
}

/// Euclidean score of the vMF density: `kappa * mu`, constant in x.
pub fn vmf_score(p: &VmfParams) -> Vec<f64> {
    p.mu.iter().map(|m| m * p.kappa).collect()
}

/// Diagonal-Gaussian log density.
pub fn gaussian_log_density(x: &[f64], p: &DiagGaussianParams) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: x.len(),
        });
    }
    let mut acc = 0.0;
    for i in 0..x.len() {
        let ls = p.log_std[i];
        let z = (x[i] - p.mean[i]) * (-ls).exp();
        acc += -0.5 * (2.0 * std::f64::consts::PI).ln() - ls - 0.5 * z * z;
    }
    Ok(acc)
}

/// Score of the diagonal Gaussian: `-(x - mean) / sigma^2`.
pub fn gaussian_score(x: &[f64], p: &DiagGaussianParams) -> Result<Vec<f64>> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: x.len(),
        });
    }
    Ok((0..x.len())
        .map(|i| -(x[i] - p.mean[i]) * (-2.0 * p.log_std[i]).exp())
        .collect())
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax logits".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    ProbVector::new(out)
}

/// KL(q || p) in nats. Zero p-mass where q has mass yields `f64::INFINITY`.
pub fn categorical_kl(q: &ProbVector, p: &ProbVector) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            got: p.len(),
        });
    }
    let mut acc = 0.0;
    for (&qi, &pi) in q.probs().iter().zip(p.probs()) {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += qi * (qi / pi).ln();
    }
    // Clamp tiny negative rounding residue; KL is nonnegative.
    Ok(acc.max(0.0))
}

/// Shannon entropy in nats, with 0 log 0 = 0.
pub fn entropy(q: &ProbVector) -> f64 {
    q.probs()
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// KL(q || U) = log |Z| - H(q); the concentration of q.
pub fn kl_to_uniform(q: &ProbVector) -> f64 {
    ((q.len() as f64).ln() - entropy(q)).max(0.0)
}
