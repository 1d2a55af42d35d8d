//! The score-based variational flow itself: a discretized mixture-family ODE
//! whose vector field is the posterior-weighted average of conditional scores,
//!
//! dx/dt = sum_z q(z|x) * grad_x log p(x|z),
//!
//! integrated by forward Euler in Euclidean or spherical mode, together with
//! the per-step evidence lower bound, marginal log-density, and the gradient
//! decomposition grad ELBO = v + eps as an executable identity.
//!
//! Parameters are piecewise-constant per Euler step: independent tables
//! theta[l] (conditional components) and phi[l] (posterior logits, untied
//! mode only) simulate a fixed-step time evolution.

use crate::distributions::{DiagGaussianParams, ProbVector, VmfParams};
use crate::distributions::{vmf_log_normalizer, vmf_log_normalizer_dkappa};
use crate::error::{Error, Result};
use crate::geometry;
use crate::linalg::{dot, logsumexp, norm, softmax_into, softplus};
use serde::{Deserialize, Serialize};

/// Finite-difference step used by the gradient-decomposition oracle.
pub const GRAD_CHECK_H: f64 = 1e-5;
/// Unit-norm tolerance for spherical states.
pub const SPHERE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Vmf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorMode {
    /// Posterior logits are the conditional log-densities of the shared
    /// theta parameters; q equals the true posterior exactly.
    Tied,
    /// Posterior logits are affine, g_z(x) = W_z x + b_z, with free phi.
    Untied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationMode {
    Euclidean,
    Spherical,
}

/// Discretized mixture-family flow. `theta[l]` holds the flat conditional
/// parameters of step `l`; `phi[l]` the flat affine posterior parameters
/// (`W` row-major then `b`), present only in untied mode.
///
/// Flat layouts per component:
///  * Gaussian: `[mean(d), log_std(d)]`
///  * vMF:      `[u(d), a]` with mean direction `u/|u|` and concentration
///    `softplus(a)`, keeping both unconstrained for optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowModelRepr", into = "FlowModelRepr")]
pub struct FlowModel {
    family: Family,
    dim: usize,
    num_components: usize,
    num_steps: usize,
    step_size: f64,
    posterior_mode: PosteriorMode,
    theta: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlowModelRepr {
    family: Family,
    dim: usize,
    num_components: usize,
    num_steps: usize,
    step_size: f64,
    posterior_mode: PosteriorMode,
    theta: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
}

impl TryFrom<FlowModelRepr> for FlowModel {
    type Error = Error;
    fn try_from(r: FlowModelRepr) -> Result<Self> {
        FlowModel::new(
            r.family,
            r.dim,
            r.num_components,
            r.num_steps,
            r.step_size,
            r.posterior_mode,
            r.theta,
            r.phi,
        )
    }
}

impl From<FlowModel> for FlowModelRepr {
    fn from(m: FlowModel) -> Self {
        Self {
            family: m.family,
            dim: m.dim,
            num_components: m.num_components,
            num_steps: m.num_steps,
            step_size: m.step_size,
            posterior_mode: m.posterior_mode,
            theta: m.theta,
            phi: m.phi,
        }
    }
}

/// States along an integrated flow, plus optional per-step diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub posteriors: Option<Vec<ProbVector>>,
    pub elbos: Option<Vec<f64>>,
}

/// The three pieces of the identity grad ELBO = v + eps.
#[derive(Debug, Clone)]
pub struct GradDecomposition {
    /// Finite-difference gradient of the ELBO in ambient coordinates.
    pub grad_elbo: Vec<f64>,
    /// The flow vector field at the same point.
    pub vector_field: Vec<f64>,
    /// Closed-form variational error term
    /// E_q[log(p(z|x)/q(z|x)) grad_x log q(z|x)].
    pub eps: Vec<f64>,
}

impl GradDecomposition {
    /// | grad_elbo - v - eps |.
    pub fn residual(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.grad_elbo.len() {
            let r = self.grad_elbo[i] - self.vector_field[i] - self.eps[i];
            acc += r * r;
        }
        acc.sqrt()
    }
}

/// Per-step derived quantities, computed once and reused across a batch.
#[derive(Debug, Clone)]
pub(crate) enum PreparedCond {
    Gaussian {
        /// Z*d means.
        mean: Vec<f64>,
        /// Z*d inverse variances.
        inv_var: Vec<f64>,
        /// Z log normalization constants.
        log_norm: Vec<f64>,
    },
    Vmf {
        /// Z*d natural parameters w = kappa * mu (the constant scores).
        w: Vec<f64>,
        /// Z concentrations.
        kappa: Vec<f64>,
        /// Z log normalizers.
        log_c: Vec<f64>,
        /// Gradient-only extras (see `prepare_step_grad`).
        aux: Option<VmfGradAux>,
    },
}

/// Extra per-component quantities needed by parameter gradients.
#[derive(Debug, Clone)]
pub(crate) struct VmfGradAux {
    /// Z unit mean directions, Z*d.
    pub mu: Vec<f64>,
    /// Z norms |u| of the raw direction parameters.
    pub u_norm: Vec<f64>,
    /// Z sigmoid(a) = d kappa / d a.
    pub sig_a: Vec<f64>,
    /// Z values of d log C_d / d kappa.
    pub dlog_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct PreparedStep {
    pub d: usize,
    pub z: usize,
    pub tied: bool,
    pub cond: PreparedCond,
    /// Z*d affine posterior weights (empty when tied).
    pub phi_w: Vec<f64>,
    /// Z affine posterior biases (empty when tied).
    pub phi_b: Vec<f64>,
}

impl PreparedStep {
    /// Conditional log-densities for all components at `x`.
    pub fn cld_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.cond {
            PreparedCond::Gaussian {
                mean,
                inv_var,
                log_norm,
            } => {
                for z in 0..self.z {
                    let m = &mean[z * self.d..(z + 1) * self.d];
                    let iv = &inv_var[z * self.d..(z + 1) * self.d];
                    let mut quad = 0.0;
                    for i in 0..self.d {
                        let r = x[i] - m[i];
                        quad += iv[i] * r * r;
                    }
                    out[z] = log_norm[z] - 0.5 * quad;
                }
            }
            PreparedCond::Vmf { w, log_c, .. } => {
                for z in 0..self.z {
                    out[z] = log_c[z] + dot(&w[z * self.d..(z + 1) * self.d], x);
                }
            }
        }
    }

    /// Posterior logits: conditional log-densities (tied) or affine (untied).
    pub fn logits_into(&self, x: &[f64], cld: &[f64], out: &mut [f64]) {
        if self.tied {
            out.copy_from_slice(cld);
        } else {
            for z in 0..self.z {
                out[z] = dot(&self.phi_w[z * self.d..(z + 1) * self.d], x) + self.phi_b[z];
            }
        }
    }

    /// Score of component `z` at `x`.
    pub fn score_into(&self, z: usize, x: &[f64], out: &mut [f64]) {
        match &self.cond {
            PreparedCond::Gaussian { mean, inv_var, .. } => {
                let m = &mean[z * self.d..(z + 1) * self.d];
                let iv = &inv_var[z * self.d..(z + 1) * self.d];
                for i in 0..self.d {
                    out[i] = -(x[i] - m[i]) * iv[i];
                }
            }
            PreparedCond::Vmf { w, .. } => {
                out.copy_from_slice(&w[z * self.d..(z + 1) * self.d]);
            }
        }
    }

    /// v = sum_z q_z s_z(x).
    pub fn field_from_weights(&self, q: &[f64], x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        match &self.cond {
            PreparedCond::Gaussian { mean, inv_var, .. } => {
                for z in 0..self.z {
                    let m = &mean[z * self.d..(z + 1) * self.d];
                    let iv = &inv_var[z * self.d..(z + 1) * self.d];
                    for i in 0..self.d {
                        out[i] += q[z] * (-(x[i] - m[i]) * iv[i]);
                    }
                }
            }
            PreparedCond::Vmf { w, .. } => {
                for z in 0..self.z {
                    for i in 0..self.d {
                        out[i] += q[z] * w[z * self.d + i];
                    }
                }
            }
        }
    }
}

impl FlowModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        family: Family,
        dim: usize,
        num_components: usize,
        num_steps: usize,
        step_size: f64,
        posterior_mode: PosteriorMode,
        theta: Vec<Vec<f64>>,
        phi: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if num_components == 0 {
            return Err(Error::Config("need at least one component".into()));
        }
        if num_steps == 0 {
            return Err(Error::Config("need at least one step".into()));
        }
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(Error::Config(format!("step size must be > 0, got {step_size}")));
        }
        if theta.len() != num_steps {
            return Err(Error::Config(format!(
                "theta table has {} entries, expected {num_steps}",
                theta.len()
            )));
        }
        let per_comp = match family {
            Family::Gaussian => 2 * dim,
            Family::Vmf => dim + 1,
        };
        for (l, t) in theta.iter().enumerate() {
            if t.len() != per_comp * num_components {
                return Err(Error::Config(format!(
                    "theta[{l}] has {} values, expected {}",
                    t.len(),
                    per_comp * num_components
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("theta[{l}]")));
            }
        }
        match posterior_mode {
            PosteriorMode::Tied => {
                if !phi.is_empty() {
                    return Err(Error::Config(
                        "tied posterior mode carries no phi parameters".into(),
                    ));
                }
            }
            PosteriorMode::Untied => {
                if phi.len() != num_steps {
                    return Err(Error::Config(format!(
                        "phi table has {} entries, expected {num_steps}",
                        phi.len()
                    )));
                }
                let want = num_components * dim + num_components;
                for (l, p) in phi.iter().enumerate() {
                    if p.len() != want {
                        return Err(Error::Config(format!(
                            "phi[{l}] has {} values, expected {want}",
                            p.len()
                        )));
                    }
                    if p.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("phi[{l}]")));
                    }
                }
            }
        }
        Ok(Self {
            family,
            dim,
            num_components,
            num_steps,
            step_size,
            posterior_mode,
            theta,
            phi,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn num_components(&self) -> usize {
        self.num_components
    }
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }
    pub fn step_size(&self) -> f64 {
        self.step_size
    }
    /// Integration horizon T = L * h.
    pub fn horizon(&self) -> f64 {
        self.num_steps as f64 * self.step_size
    }
    pub fn posterior_mode(&self) -> PosteriorMode {
        self.posterior_mode
    }
    pub fn theta(&self, l: usize) -> &[f64] {
        &self.theta[l]
    }
    pub fn theta_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.theta[l]
    }
    pub fn phi(&self, l: usize) -> &[f64] {
        &self.phi[l]
    }
    pub fn phi_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.phi[l]
    }
    /// Parameter count of one theta table entry.
    pub fn theta_len(&self) -> usize {
        self.theta[0].len()
    }
    /// Parameter count of one phi table entry (0 when tied).
    pub fn phi_len(&self) -> usize {
        self.phi.first().map_or(0, Vec::len)
    }

    /// View of the Gaussian parameters of component `z` at step `l`.
    pub fn gaussian_component(&self, l: usize, z: usize) -> Result<DiagGaussianParams> {
        if self.family != Family::Gaussian {
            return Err(Error::Config("not a Gaussian-family model".into()));
        }
        let d = self.dim;
        let base = z * 2 * d;
        DiagGaussianParams::new(
            self.theta[l][base..base + d].to_vec(),
            self.theta[l][base + d..base + 2 * d].to_vec(),
        )
    }

    /// View of the vMF parameters of component `z` at step `l`.
    pub fn vmf_component(&self, l: usize, z: usize) -> Result<VmfParams> {
        if self.family != Family::Vmf {
            return Err(Error::Config("not a vMF-family model".into()));
        }
        let d = self.dim;
        let base = z * (d + 1);
        let u = &self.theta[l][base..base + d];
        let n = norm(u);
        if n < geometry::DEGENERATE_NORM_TOL {
            return Err(Error::DegenerateInput(format!(
                "vMF direction parameter of component {z} has vanishing norm"
            )));
        }
        VmfParams::new(
            u.iter().map(|v| v / n).collect(),
            softplus(self.theta[l][base + d]),
        )
    }

    fn check_step(&self, l: usize) -> Result<()> {
        if l >= self.num_steps {
            return Err(Error::StepOutOfRange {
                step: l,
                num_steps: self.num_steps,
            });
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn prepare_step(&self, l: usize, with_grad: bool) -> PreparedStep {
        let d = self.dim;
        let zn = self.num_components;
        let cond = match self.family {
            Family::Gaussian => {
                let mut mean = vec![0.0; zn * d];
                let mut inv_var = vec![0.0; zn * d];
                let mut log_norm = vec![0.0; zn];
                let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
                for z in 0..zn {
                    let base = z * 2 * d;
                    let mut ln = 0.0;
                    for i in 0..d {
                        mean[z * d + i] = self.theta[l][base + i];
                        let ls = self.theta[l][base + d + i];
                        inv_var[z * d + i] = (-2.0 * ls).exp();
                        ln += -half_ln_2pi - ls;
                    }
                    log_norm[z] = ln;
                }
                PreparedCond::Gaussian {
                    mean,
                    inv_var,
                    log_norm,
                }
            }
            Family::Vmf => {
                let mut w = vec![0.0; zn * d];
                let mut kappa = vec![0.0; zn];
                let mut log_c = vec![0.0; zn];
                let mut aux = with_grad.then(|| VmfGradAux {
                    mu: vec![0.0; zn * d],
                    u_norm: vec![0.0; zn],
                    sig_a: vec![0.0; zn],
                    dlog_c: vec![0.0; zn],
                });
                for z in 0..zn {
                    let base = z * (d + 1);
                    let u = &self.theta[l][base..base + d];
                    let a = self.theta[l][base + d];
                    let n = norm(u).max(geometry::DEGENERATE_NORM_TOL);
                    let k = softplus(a);
                    kappa[z] = k;
                    for i in 0..d {
                        w[z * d + i] = k * u[i] / n;
                    }
                    log_c[z] =
                        vmf_log_normalizer(d, k).expect("validated kappa is nonnegative");
                    if let Some(aux) = aux.as_mut() {
                        for i in 0..d {
                            aux.mu[z * d + i] = u[i] / n;
                        }
                        aux.u_norm[z] = n;
                        aux.sig_a[z] = crate::linalg::sigmoid(a);
                        aux.dlog_c[z] = vmf_log_normalizer_dkappa(d, k)
                            .expect("validated kappa is nonnegative");
                    }
                }
                PreparedCond::Vmf {
                    w,
                    kappa,
                    log_c,
                    aux,
                }
            }
        };
        let (phi_w, phi_b) = match self.posterior_mode {
            PosteriorMode::Tied => (Vec::new(), Vec::new()),
            PosteriorMode::Untied => {
                let p = &self.phi[l];
                (p[..zn * d].to_vec(), p[zn * d..].to_vec())
            }
        };
        PreparedStep {
            d,
            z: zn,
            tied: self.posterior_mode == PosteriorMode::Tied,
            cond,
            phi_w,
            phi_b,
        }
    }

    /// Variational posterior q(z|x) at step `l`.
    pub fn posterior(&self, l: usize, x: &[f64]) -> Result<ProbVector> {
        self.check_step(l)?;
        self.check_dim(x)?;
        let prep = self.prepare_step(l, false);
        let mut cld = vec![0.0; self.num_components];
        prep.cld_into(x, &mut cld);
        let mut logits = vec![0.0; self.num_components];
        prep.logits_into(x, &cld, &mut logits);
        let mut q = vec![0.0; self.num_components];
        softmax_into(&logits, &mut q);
        ProbVector::new(q)
    }

    /// Bayes posterior p(z|x) under the uniform prior over components.
    pub fn true_posterior(&self, l: usize, x: &[f64]) -> Result<ProbVector> {
        self.check_step(l)?;
        self.check_dim(x)?;
        let prep = self.prepare_step(l, false);
        let mut cld = vec![0.0; self.num_components];
        prep.cld_into(x, &mut cld);
        let mut p = vec![0.0; self.num_components];
        softmax_into(&cld, &mut p);
        ProbVector::new(p)
    }

    /// The flow vector field v(x) = sum_z q(z|x) s(x, z).
    pub fn vector_field(&self, l: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_step(l)?;
        self.check_dim(x)?;
        let prep = self.prepare_step(l, false);
        let mut cld = vec![0.0; self.num_components];
        prep.cld_into(x, &mut cld);
        let mut logits = vec![0.0; self.num_components];
        prep.logits_into(x, &cld, &mut logits);
        let mut q = vec![0.0; self.num_components];
        softmax_into(&logits, &mut q);
        let mut v = vec![0.0; self.dim];
        prep.field_from_weights(&q, x, &mut v);
        Ok(v)
    }

    /// One forward Euler step. Spherical mode renormalizes to the unit
    /// sphere (the sqrt(d) radius of transformer states is divided out).
    pub fn euler_step(&self, l: usize, x: &[f64], mode: IntegrationMode) -> Result<Vec<f64>> {
        let v = self.vector_field(l, x)?;
        apply_euler_update(x, &v, self.step_size, mode)
    }

    /// Integrate the full flow from `x0`, recording all L+1 states.
    pub fn integrate(&self, x0: &[f64], mode: IntegrationMode) -> Result<Trajectory> {
        self.integrate_impl(x0, mode, false)
    }

    /// Integrate and also record per-step posteriors and ELBO values.
    pub fn integrate_detailed(&self, x0: &[f64], mode: IntegrationMode) -> Result<Trajectory> {
        self.integrate_impl(x0, mode, true)
    }

    fn integrate_impl(
        &self,
        x0: &[f64],
        mode: IntegrationMode,
        detailed: bool,
    ) -> Result<Trajectory> {
        self.check_dim(x0)?;
        if mode == IntegrationMode::Spherical {
            geometry::check_unit(x0, SPHERE_TOL)?;
        }
        let mut states = Vec::with_capacity(self.num_steps + 1);
        let mut posteriors = detailed.then(Vec::new);
        let mut elbos = detailed.then(Vec::new);
        states.push(x0.to_vec());
        let mut x = x0.to_vec();
        let zn = self.num_components;
        let mut cld = vec![0.0; zn];
        let mut logits = vec![0.0; zn];
        let mut q = vec![0.0; zn];
        let mut v = vec![0.0; self.dim];
        for l in 0..self.num_steps {
            let prep = self.prepare_step(l, false);
            prep.cld_into(&x, &mut cld);
            prep.logits_into(&x, &cld, &mut logits);
            softmax_into(&logits, &mut q);
            if let Some(ps) = posteriors.as_mut() {
                ps.push(ProbVector::new(q.clone())?);
            }
            if let Some(es) = elbos.as_mut() {
                es.push(elbo_from_parts(&cld, &logits, &q, zn));
            }
            prep.field_from_weights(&q, &x, &mut v);
            x = apply_euler_update(&x, &v, self.step_size, mode)?;
            states.push(x.clone());
        }
        Ok(Trajectory {
            states,
            posteriors,
            elbos,
        })
    }

    /// Instantaneous evidence lower bound
    /// E_q[log p(x|z)] - KL(q(z|x) || uniform prior).
    pub fn elbo(&self, l: usize, x: &[f64]) -> Result<f64> {
        self.check_step(l)?;
        self.check_dim(x)?;
        let prep = self.prepare_step(l, false);
        let zn = self.num_components;
        let mut cld = vec![0.0; zn];
        prep.cld_into(x, &mut cld);
        let mut logits = vec![0.0; zn];
        prep.logits_into(x, &cld, &mut logits);
        let mut q = vec![0.0; zn];
        softmax_into(&logits, &mut q);
        Ok(elbo_from_parts(&cld, &logits, &q, zn))
    }

    /// Marginal log-density via log-sum-exp over components.
    pub fn marginal_log_density(&self, l: usize, x: &[f64]) -> Result<f64> {
        self.check_step(l)?;
        self.check_dim(x)?;
        let prep = self.prepare_step(l, false);
        let mut cld = vec![0.0; self.num_components];
        prep.cld_into(x, &mut cld);
        Ok(logsumexp(&cld) - (self.num_components as f64).ln())
    }

    /// The same marginal through the identity route
    /// ELBO + KL(q || true posterior); agrees with
    /// [`Self::marginal_log_density`] up to rounding.
    pub fn marginal_log_density_via_elbo(&self, l: usize, x: &[f64]) -> Result<f64> {
        let elbo = self.elbo(l, x)?;
        let q = self.posterior(l, x)?;
        let p = self.true_posterior(l, x)?;
        Ok(elbo + crate::distributions::categorical_kl(&q, &p)?)
    }

    /// Evaluate the gradient-decomposition identity at (l, x): the ELBO
    /// gradient (finite differences, the verification oracle), the vector
    /// field, and the closed-form variational error term.
    pub fn grad_decomposition(&self, l: usize, x: &[f64]) -> Result<GradDecomposition> {
        self.check_step(l)?;
        self.check_dim(x)?;
        let d = self.dim;
        let zn = self.num_components;

        let mut grad_elbo = vec![0.0; d];
        let mut xp = x.to_vec();
        for i in 0..d {
            xp[i] = x[i] + GRAD_CHECK_H;
            let hi = self.elbo(l, &xp)?;
            xp[i] = x[i] - GRAD_CHECK_H;
            let lo = self.elbo(l, &xp)?;
            xp[i] = x[i];
            grad_elbo[i] = (hi - lo) / (2.0 * GRAD_CHECK_H);
        }

        let prep = self.prepare_step(l, false);
        let mut cld = vec![0.0; zn];
        prep.cld_into(x, &mut cld);
        let mut logits = vec![0.0; zn];
        prep.logits_into(x, &cld, &mut logits);
        let mut q = vec![0.0; zn];
        softmax_into(&logits, &mut q);
        let mut v = vec![0.0; d];
        prep.field_from_weights(&q, x, &mut v);

        // log p(z|x) - log q(z|x) from the shared logit representations.
        let lse_cld = logsumexp(&cld);
        let lse_g = logsumexp(&logits);

        // grad_x g_z: affine rows (untied) or conditional scores (tied).
        let mut grad_g = vec![0.0; zn * d];
        if prep.tied {
            let mut s = vec![0.0; d];
            for z in 0..zn {
                prep.score_into(z, x, &mut s);
                grad_g[z * d..(z + 1) * d].copy_from_slice(&s);
            }
        } else {
            grad_g.copy_from_slice(&prep.phi_w);
        }
        let mut mean_grad_g = vec![0.0; d];
        for z in 0..zn {
            for i in 0..d {
                mean_grad_g[i] += q[z] * grad_g[z * d + i];
            }
        }
        let mut eps = vec![0.0; d];
        for z in 0..zn {
            if q[z] <= 0.0 {
                continue;
            }
            let log_ratio = (cld[z] - lse_cld) - (logits[z] - lse_g);
            for i in 0..d {
                eps[i] += q[z] * log_ratio * (grad_g[z * d + i] - mean_grad_g[i]);
            }
        }
        Ok(GradDecomposition {
            grad_elbo,
            vector_field: v,
            eps,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// ELBO from precomputed parts:
/// sum_z q_z (cld_z - log q_z) - log |Z|.
fn elbo_from_parts(cld: &[f64], logits: &[f64], q: &[f64], zn: usize) -> f64 {
    let lse = logsumexp(logits);
    let mut acc = 0.0;
    for z in 0..zn {
        if q[z] > 0.0 {
            acc += q[z] * (cld[z] - (logits[z] - lse));
        }
    }
    acc - (zn as f64).ln()
}

/// x + h v, renormalized to the unit sphere in spherical mode.
pub(crate) fn apply_euler_update(
    x: &[f64],
    v: &[f64],
    h: f64,
    mode: IntegrationMode,
) -> Result<Vec<f64>> {
    match mode {
        IntegrationMode::Euclidean => {
            Ok(x.iter().zip(v).map(|(xi, vi)| xi + h * vi).collect())
        }
        IntegrationMode::Spherical => {
            geometry::check_unit(x, SPHERE_TOL)?;
            let u: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| xi + h * vi).collect();
            let n = norm(&u);
            if n < geometry::DEGENERATE_NORM_TOL {
                return Err(Error::DegenerateInput(
                    "spherical Euler update collapsed to the origin".into(),
                ));
            }
            Ok(u.iter().map(|ui| ui / n).collect())
        }
    }
}
