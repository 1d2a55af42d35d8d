//! Reverse-mode error signals and closed-form parameter gradients.
//!
//! Per sample, the forward pass caches states, posteriors, true posteriors
//! and scores at every Euler step. The backward sweep then carries two
//! running state-gradients:
//!
//!  * `delta[l]`   = d J_align / d x^l  (task error signal),
//!  * `var_sum[l]` = sum_{k >= l} d J_var^k / d x^l  (variational signals,
//!    accumulated in a single reverse sweep instead of one signal per
//!    downstream step; the per-step decomposition sums to exactly this).
//!
//! Posterior-parameter gradients are assembled from centered advantages
//!
//!  eta(z) = (A - E_q A) + beta (R - E_q R) + beta (B - E_q B),
//!
//! with task advantage A(z) = delta^T s(x, z), self advantage
//! R(z) = w_l log(q/p), and aggregated future advantage B(z) from the
//! variational signal. Score-parameter gradients combine the flow-path term
//! with the consistency term beta w_l sum_z [p - q] d log p(x|z) / d theta.

use super::{ClassifierHead, ObjectiveConfig};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, IntegrationMode, PosteriorMode, PreparedCond, PreparedStep};
use crate::linalg::{dot, logsumexp, norm, softmax_into};

/// Per-sample error signals along a trajectory.
#[derive(Debug, Clone)]
pub struct ErrorSignals {
    /// d J_align / d x^l for l = 0..=L.
    pub delta: Vec<Vec<f64>>,
    /// sum_{k >= l} d J_var^k / d x^l for l = 0..=L (zero at l = L).
    pub var_sum: Vec<Vec<f64>>,
}

/// Centered per-component gradient weights at one step.
#[derive(Debug, Clone)]
pub struct AdvantageSet {
    /// Task advantage A(z).
    pub task: Vec<f64>,
    /// Self variational advantage R(z) (includes the step weight).
    pub self_var: Vec<f64>,
    /// Future variational advantage, aggregated over downstream steps.
    pub future_var: Vec<f64>,
    /// Total advantage eta(z), centered combination of the three.
    pub total: Vec<f64>,
}

/// Batch-averaged objective values and parameter gradients.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub j_align: f64,
    pub j_var: f64,
    /// J_align + beta J_var, or J_var alone in pure-var mode.
    pub j_hybrid: f64,
    pub theta: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

/// Cached forward quantities for one step of one sample.
struct StepCache {
    x: Vec<f64>,
    q: Vec<f64>,
    log_q: Vec<f64>,
    p: Vec<f64>,
    log_p: Vec<f64>,
    /// Z x d scores s(x, z).
    scores: Vec<f64>,
    /// Posterior-weighted field at x.
    field: Vec<f64>,
    /// |x + h v|, spherical mode only.
    u_norm: f64,
}

struct SampleForward {
    steps: Vec<StepCache>,
    terminal: Vec<f64>,
    /// Per-step lambda_l/L * KL contributions.
    kl: Vec<f64>,
}

fn forward_sample(
    model: &FlowModel,
    prep: &[PreparedStep],
    cfg: &ObjectiveConfig,
    x0: &[f64],
) -> Result<SampleForward> {
    let d = model.dim();
    let zn = model.num_components();
    let ln = model.num_steps();
    let h = model.step_size();
    if x0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    if cfg.mode == IntegrationMode::Spherical {
        crate::geometry::check_unit(x0, crate::flow::SPHERE_TOL)?;
    }
    let mut steps = Vec::with_capacity(ln);
    let mut kl = Vec::with_capacity(ln);
    let mut x = x0.to_vec();
    for l in 0..ln {
        let ps = &prep[l];
        let mut cld = vec![0.0; zn];
        ps.cld_into(&x, &mut cld);
        let mut logits = vec![0.0; zn];
        ps.logits_into(&x, &cld, &mut logits);
        let mut q = vec![0.0; zn];
        softmax_into(&logits, &mut q);
        let lse_g = logsumexp(&logits);
        let log_q: Vec<f64> = logits.iter().map(|g| g - lse_g).collect();
        let lse_c = logsumexp(&cld);
        let log_p: Vec<f64> = cld.iter().map(|c| c - lse_c).collect();
        let mut p = vec![0.0; zn];
        softmax_into(&cld, &mut p);
        let mut scores = vec![0.0; zn * d];
        for z in 0..zn {
            ps.score_into(z, &x, &mut scores[z * d..(z + 1) * d]);
        }
        let mut field = vec![0.0; d];
        for z in 0..zn {
            for i in 0..d {
                field[i] += q[z] * scores[z * d + i];
            }
        }
        let mut kl_l = 0.0;
        for z in 0..zn {
            if q[z] > 0.0 {
                kl_l += q[z] * (log_q[z] - log_p[z]);
            }
        }
        kl.push(cfg.step_weight(l) * kl_l.max(0.0));
        let mut next: Vec<f64> = (0..d).map(|i| x[i] + h * field[i]).collect();
        let mut u_norm = 1.0;
        if cfg.mode == IntegrationMode::Spherical {
            u_norm = norm(&next);
            if u_norm < crate::geometry::DEGENERATE_NORM_TOL {
                return Err(Error::DegenerateInput(
                    "spherical Euler update collapsed to the origin".into(),
                ));
            }
            next.iter_mut().for_each(|v| *v /= u_norm);
        }
        steps.push(StepCache {
            x: x.clone(),
            q,
            log_q,
            p,
            log_p,
            scores,
            field,
            u_norm,
        });
        x = next;
    }
    Ok(SampleForward {
        steps,
        terminal: x,
        kl,
    })
}

/// grad_x of logits row z: the affine row (untied) or the score (tied).
fn logit_gradient(ps: &PreparedStep, sc: &StepCache, z: usize, d: usize, out: &mut [f64]) {
    if ps.tied {
        out.copy_from_slice(&sc.scores[z * d..(z + 1) * d]);
    } else {
        out.copy_from_slice(&ps.phi_w[z * d..(z + 1) * d]);
    }
}

/// (d v / d x)^T w at a cached step, written into `out`.
fn field_jacobian_t(
    ps: &PreparedStep,
    sc: &StepCache,
    d: usize,
    zn: usize,
    w: &[f64],
    out: &mut [f64],
) {
    out.fill(0.0);
    // sum_z (s_z . w) grad q_z with grad q_z = q_z (grad g_z - gbar).
    let mut gbar = vec![0.0; d];
    let mut gz = vec![0.0; d];
    for z in 0..zn {
        logit_gradient(ps, sc, z, d, &mut gz);
        for i in 0..d {
            gbar[i] += sc.q[z] * gz[i];
        }
    }
    for z in 0..zn {
        let sw = dot(&sc.scores[z * d..(z + 1) * d], w);
        logit_gradient(ps, sc, z, d, &mut gz);
        let c = sc.q[z] * sw;
        for i in 0..d {
            out[i] += c * (gz[i] - gbar[i]);
        }
    }
    // Score x-dependence: diagonal -1/sigma^2 for Gaussians, zero for vMF.
    if let PreparedCond::Gaussian { inv_var, .. } = &ps.cond {
        for z in 0..zn {
            for i in 0..d {
                out[i] -= sc.q[z] * inv_var[z * d + i] * w[i];
            }
        }
    }
}

/// grad_x of KL(q(.|x) || p(.|x)) at a cached step.
fn kl_state_gradient(ps: &PreparedStep, sc: &StepCache, d: usize, zn: usize, out: &mut [f64]) {
    out.fill(0.0);
    let mut gbar = vec![0.0; d];
    let mut gz = vec![0.0; d];
    for z in 0..zn {
        logit_gradient(ps, sc, z, d, &mut gz);
        for i in 0..d {
            gbar[i] += sc.q[z] * gz[i];
        }
    }
    for z in 0..zn {
        if sc.q[z] <= 0.0 {
            continue;
        }
        let c = sc.q[z] * (sc.log_q[z] - sc.log_p[z]);
        logit_gradient(ps, sc, z, d, &mut gz);
        for i in 0..d {
            out[i] += c * (gz[i] - gbar[i]);
        }
    }
    // minus (v_q - v_p)
    let mut vp = vec![0.0; d];
    for z in 0..zn {
        for i in 0..d {
            vp[i] += sc.p[z] * sc.scores[z * d + i];
        }
    }
    for i in 0..d {
        out[i] -= sc.field[i] - vp[i];
    }
}

/// Pull a gradient w.r.t. x^{l+1} back through the spherical renormalization
/// to a gradient w.r.t. u = x + h v. Identity in Euclidean mode.
fn pull_back_normalization(
    mode: IntegrationMode,
    y: &[f64],
    u_norm: f64,
    w: &[f64],
    out: &mut [f64],
) {
    match mode {
        IntegrationMode::Euclidean => out.copy_from_slice(w),
        IntegrationMode::Spherical => {
            let yw = dot(y, w);
            for i in 0..w.len() {
                out[i] = (w[i] - y[i] * yw) / u_norm;
            }
        }
    }
}

/// d log p(x|z) / d theta_z accumulated into `out` with coefficient `c`.
fn acc_cond_logdensity_grad(
    ps: &PreparedStep,
    sc: &StepCache,
    z: usize,
    d: usize,
    c: f64,
    out: &mut [f64],
) {
    match &ps.cond {
        PreparedCond::Gaussian { mean, inv_var, .. } => {
            let base = z * 2 * d;
            for i in 0..d {
                let r = sc.x[i] - mean[z * d + i];
                let iv = inv_var[z * d + i];
                out[base + i] += c * r * iv;
                out[base + d + i] += c * (r * r * iv - 1.0);
            }
        }
        PreparedCond::Vmf { kappa, aux, .. } => {
            let aux = aux.as_ref().expect("prepared with gradients");
            let base = z * (d + 1);
            let mu = &aux.mu[z * d..(z + 1) * d];
            let mux = dot(mu, &sc.x);
            let scale = kappa[z] / aux.u_norm[z];
            for i in 0..d {
                out[base + i] += c * scale * (sc.x[i] - mu[i] * mux);
            }
            out[base + d] += c * aux.sig_a[z] * (mux + aux.dlog_c[z]);
        }
    }
}

/// d s(x, z) / d theta_z contracted with `hcu`, accumulated with weight `c`.
fn acc_score_param_grad(
    ps: &PreparedStep,
    sc: &StepCache,
    z: usize,
    d: usize,
    c: f64,
    hcu: &[f64],
    out: &mut [f64],
) {
    match &ps.cond {
        PreparedCond::Gaussian { mean, inv_var, .. } => {
            let base = z * 2 * d;
            for i in 0..d {
                let iv = inv_var[z * d + i];
                let r = sc.x[i] - mean[z * d + i];
                // ds_i/dmean_i = iv; ds_i/dlog_std_i = 2 r iv.
                out[base + i] += c * hcu[i] * iv;
                out[base + d + i] += c * hcu[i] * 2.0 * r * iv;
            }
        }
        PreparedCond::Vmf { kappa, aux, .. } => {
            let aux = aux.as_ref().expect("prepared with gradients");
            let base = z * (d + 1);
            let mu = &aux.mu[z * d..(z + 1) * d];
            let mu_hcu = dot(mu, hcu);
            let scale = kappa[z] / aux.u_norm[z];
            for i in 0..d {
                out[base + i] += c * scale * (hcu[i] - mu[i] * mu_hcu);
            }
            out[base + d] += c * aux.sig_a[z] * mu_hcu;
        }
    }
}

struct SampleGrad {
    j_align: f64,
    j_var: f64,
    theta: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    signals: Option<ErrorSignals>,
}

/// Full reverse sweep for one sample. `head`/`label` may be absent only in
/// pure-var mode.
fn backward_sample(
    model: &FlowModel,
    prep: &[PreparedStep],
    cfg: &ObjectiveConfig,
    head: Option<&ClassifierHead>,
    x0: &[f64],
    label: Option<usize>,
    want_signals: bool,
) -> Result<SampleGrad> {
    let d = model.dim();
    let zn = model.num_components();
    let ln = model.num_steps();
    let h = model.step_size();
    let untied = model.posterior_mode() == PosteriorMode::Untied;
    let fwd = forward_sample(model, prep, cfg, x0)?;
    let align_scale = cfg.align_scale();
    let var_scale = cfg.var_scale();

    let mut theta_grad = vec![vec![0.0; model.theta_len()]; ln];
    let mut phi_grad = if untied {
        vec![vec![0.0; model.phi_len()]; ln]
    } else {
        Vec::new()
    };
    let mut head_w = Vec::new();
    let mut head_b = Vec::new();

    // Terminal task signal.
    let mut delta = vec![0.0; d];
    let mut j_align_val = 0.0;
    if align_scale > 0.0 {
        let head = head.ok_or_else(|| {
            Error::Config("classifier head required unless training J_var alone".into())
        })?;
        let label = label.ok_or_else(|| {
            Error::Config("labels required unless training J_var alone".into())
        })?;
        j_align_val = head.nll(&fwd.terminal, label)?;
        let err = head.class_error(&fwd.terminal, label);
        head_w = vec![0.0; head.num_classes * d];
        head_b = vec![0.0; head.num_classes];
        for c in 0..head.num_classes {
            for i in 0..d {
                head_w[c * d + i] = err[c] * fwd.terminal[i];
                delta[i] += err[c] * head.weights[c * d + i];
            }
            head_b[c] = err[c];
        }
        if head.bias.is_empty() {
            head_b.clear();
        }
    }
    let j_var_val: f64 = fwd.kl.iter().sum();

    let mut var_sum = vec![0.0; d];
    let mut signals = want_signals.then(|| ErrorSignals {
        delta: vec![vec![0.0; d]; ln + 1],
        var_sum: vec![vec![0.0; d]; ln + 1],
    });
    if let Some(s) = signals.as_mut() {
        s.delta[ln].copy_from_slice(&delta);
    }

    let mut du = vec![0.0; d];
    let mut su = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut gz = vec![0.0; d];
    for l in (0..ln).rev() {
        let ps = &prep[l];
        let sc = &fwd.steps[l];
        let w_l = cfg.step_weight(l);
        let y = if l + 1 == ln {
            &fwd.terminal
        } else {
            &fwd.steps[l + 1].x
        };
        pull_back_normalization(cfg.mode, y, sc.u_norm, &delta, &mut du);
        pull_back_normalization(cfg.mode, y, sc.u_norm, &var_sum, &mut su);

        // Advantages.
        let mut task_adv = vec![0.0; zn];
        let mut future_adv = vec![0.0; zn];
        let mut self_adv = vec![0.0; zn];
        for z in 0..zn {
            let s = &sc.scores[z * d..(z + 1) * d];
            task_adv[z] = h * dot(&du, s);
            future_adv[z] = h * dot(&su, s);
            self_adv[z] = w_l * (sc.log_q[z] - sc.log_p[z]);
        }
        let mean_under_q = |a: &[f64]| -> f64 { a.iter().zip(&sc.q).map(|(x, q)| x * q).sum() };
        let (ma, mr, mb) = (
            mean_under_q(&task_adv),
            mean_under_q(&self_adv),
            mean_under_q(&future_adv),
        );
        let mut eta = vec![0.0; zn];
        for z in 0..zn {
            eta[z] = align_scale * (task_adv[z] - ma)
                + var_scale * (self_adv[z] - mr)
                + var_scale * (future_adv[z] - mb);
        }

        // Posterior-parameter gradient: sum_z q_z eta_z dg_z/dparams.
        if untied {
            let g = &mut phi_grad[l];
            for z in 0..zn {
                let c = sc.q[z] * eta[z];
                for i in 0..d {
                    g[z * d + i] += c * sc.x[i];
                }
                g[zn * d + z] += c;
            }
        } else {
            // Tied mode: logits are the conditional log-densities, so the
            // posterior path lands on theta.
            for z in 0..zn {
                let c = sc.q[z] * eta[z];
                if c != 0.0 {
                    acc_cond_logdensity_grad(ps, sc, z, d, c, &mut theta_grad[l]);
                }
            }
        }

        // Score-parameter gradient, flow path: combined pullback.
        let mut hcu = vec![0.0; d];
        for i in 0..d {
            hcu[i] = h * (align_scale * du[i] + var_scale * su[i]);
        }
        for z in 0..zn {
            acc_score_param_grad(ps, sc, z, d, sc.q[z], &hcu, &mut theta_grad[l]);
        }
        // Consistency term: var_scale w_l sum_z (p - q) dlogp(x|z)/dtheta.
        for z in 0..zn {
            let c = var_scale * w_l * (sc.p[z] - sc.q[z]);
            if c != 0.0 {
                acc_cond_logdensity_grad(ps, sc, z, d, c, &mut theta_grad[l]);
            }
        }

        // Propagate state gradients: w + h (dv/dx)^T w, then the direct
        // KL term for the variational signal.
        field_jacobian_t(ps, sc, d, zn, &du, &mut scratch);
        let mut new_delta = vec![0.0; d];
        for i in 0..d {
            new_delta[i] = du[i] + h * scratch[i];
        }
        field_jacobian_t(ps, sc, d, zn, &su, &mut scratch);
        let mut new_var = vec![0.0; d];
        for i in 0..d {
            new_var[i] = su[i] + h * scratch[i];
        }
        kl_state_gradient(ps, sc, d, zn, &mut gz);
        for i in 0..d {
            new_var[i] += w_l * gz[i];
        }
        delta = new_delta;
        var_sum = new_var;
        if let Some(s) = signals.as_mut() {
            s.delta[l].copy_from_slice(&delta);
            s.var_sum[l].copy_from_slice(&var_sum);
        }
    }

    Ok(SampleGrad {
        j_align: j_align_val,
        j_var: j_var_val,
        theta: theta_grad,
        phi: phi_grad,
        head_w,
        head_b,
        signals,
    })
}

/// Reverse-accumulated error signals for one sample: the task signal
/// delta[l] and the aggregated variational signal at every state.
pub fn backward_signals(
    model: &FlowModel,
    cfg: &ObjectiveConfig,
    head: Option<&ClassifierHead>,
    x0: &[f64],
    label: Option<usize>,
) -> Result<ErrorSignals> {
    check_cfg(model, cfg)?;
    let prep: Vec<_> = (0..model.num_steps())
        .map(|l| model.prepare_step(l, true))
        .collect();
    let g = backward_sample(model, &prep, cfg, head, x0, label, true)?;
    Ok(g.signals.expect("signals requested"))
}

/// Per-component advantages at step `l` for a sample whose signals are
/// given; `x` must be the trajectory state x^l the signals were computed on.
pub fn advantages(
    model: &FlowModel,
    cfg: &ObjectiveConfig,
    signals: &ErrorSignals,
    l: usize,
    x: &[f64],
) -> Result<AdvantageSet> {
    check_cfg(model, cfg)?;
    if l >= model.num_steps() {
        return Err(Error::StepOutOfRange {
            step: l,
            num_steps: model.num_steps(),
        });
    }
    let d = model.dim();
    let zn = model.num_components();
    let h = model.step_size();
    let ps = model.prepare_step(l, false);
    let mut cld = vec![0.0; zn];
    ps.cld_into(x, &mut cld);
    let mut logits = vec![0.0; zn];
    ps.logits_into(x, &cld, &mut logits);
    let mut q = vec![0.0; zn];
    softmax_into(&logits, &mut q);
    let lse_g = logsumexp(&logits);
    let lse_c = logsumexp(&cld);
    let mut scores = vec![0.0; zn * d];
    for z in 0..zn {
        let row = &mut scores[z * d..(z + 1) * d];
        ps.score_into(z, x, row);
    }
    // Reconstruct the one-step update to pull signals back through the
    // normalization, mirroring the forward pass.
    let mut field = vec![0.0; d];
    for z in 0..zn {
        for i in 0..d {
            field[i] += q[z] * scores[z * d + i];
        }
    }
    let mut u: Vec<f64> = (0..d).map(|i| x[i] + h * field[i]).collect();
    let mut u_norm = 1.0;
    if cfg.mode == IntegrationMode::Spherical {
        u_norm = norm(&u);
        u.iter_mut().for_each(|v| *v /= u_norm);
    }
    let mut du = vec![0.0; d];
    let mut su = vec![0.0; d];
    pull_back_normalization(cfg.mode, &u, u_norm, &signals.delta[l + 1], &mut du);
    pull_back_normalization(cfg.mode, &u, u_norm, &signals.var_sum[l + 1], &mut su);

    let w_l = cfg.step_weight(l);
    let mut task = vec![0.0; zn];
    let mut future = vec![0.0; zn];
    let mut selfv = vec![0.0; zn];
    for z in 0..zn {
        let s = &scores[z * d..(z + 1) * d];
        task[z] = h * dot(&du, s);
        future[z] = h * dot(&su, s);
        selfv[z] = w_l * ((logits[z] - lse_g) - (cld[z] - lse_c));
    }
    let center = |a: &[f64]| -> Vec<f64> {
        let m: f64 = a.iter().zip(&q).map(|(v, qq)| v * qq).sum();
        a.iter().map(|v| v - m).collect()
    };
    let (ct, cr, cb) = (center(&task), center(&selfv), center(&future));
    let total: Vec<f64> = (0..zn)
        .map(|z| cfg.align_scale() * ct[z] + cfg.var_scale() * (cr[z] + cb[z]))
        .collect();
    Ok(AdvantageSet {
        task,
        self_var: selfv,
        future_var: future,
        total,
    })
}

fn check_cfg(model: &FlowModel, cfg: &ObjectiveConfig) -> Result<()> {
    if cfg.lambda_weights.len() != model.num_steps() {
        return Err(Error::Config(format!(
            "lambda table has {} entries, model has {} steps",
            cfg.lambda_weights.len(),
            model.num_steps()
        )));
    }
    Ok(())
}

/// The scalar hybrid objective on a batch (forward only). Labels may be
/// omitted in pure-var mode.
pub fn hybrid_objective(
    model: &FlowModel,
    cfg: &ObjectiveConfig,
    head: Option<&ClassifierHead>,
    batch: &[(Vec<f64>, Option<usize>)],
) -> Result<f64> {
    check_cfg(model, cfg)?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("objective batch".into()));
    }
    let prep: Vec<_> = (0..model.num_steps())
        .map(|l| model.prepare_step(l, false))
        .collect();
    let mut align = 0.0;
    let mut var = 0.0;
    for (x0, label) in batch {
        let fwd = forward_sample(model, &prep, cfg, x0)?;
        var += fwd.kl.iter().sum::<f64>();
        if !cfg.pure_var() {
            let head = head.ok_or_else(|| {
                Error::Config("classifier head required unless training J_var alone".into())
            })?;
            let label = label.ok_or_else(|| {
                Error::Config("labels required unless training J_var alone".into())
            })?;
            align += head.nll(&fwd.terminal, label)?;
        }
    }
    let n = batch.len() as f64;
    align /= n;
    var /= n;
    Ok(if cfg.pure_var() {
        var
    } else {
        align + cfg.beta * var
    })
}

/// Batch-averaged gradients of the hybrid objective for every parameter
/// block, computed by the closed-form reverse sweep.
pub fn batch_gradients(
    model: &FlowModel,
    cfg: &ObjectiveConfig,
    head: Option<&ClassifierHead>,
    batch: &[(Vec<f64>, Option<usize>)],
) -> Result<BatchGradients> {
    check_cfg(model, cfg)?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("gradient batch".into()));
    }
    let prep: Vec<_> = (0..model.num_steps())
        .map(|l| model.prepare_step(l, true))
        .collect();
    let ln = model.num_steps();
    let untied = model.posterior_mode() == PosteriorMode::Untied;
    let (hw_len, hb_len) = head.map_or((0, 0), |h| {
        (h.num_classes * h.dim, if h.bias.is_empty() { 0 } else { h.num_classes })
    });

    let mut out = BatchGradients {
        j_align: 0.0,
        j_var: 0.0,
        j_hybrid: 0.0,
        theta: vec![vec![0.0; model.theta_len()]; ln],
        phi: if untied {
            vec![vec![0.0; model.phi_len()]; ln]
        } else {
            Vec::new()
        },
        head_w: vec![0.0; hw_len],
        head_b: vec![0.0; hb_len],
    };

    // Deterministic chunked parallel reduction: fixed chunk boundaries, then
    // an ordered sum over chunk results.
    use rayon::prelude::*;
    const CHUNK: usize = 64;
    let chunks: Vec<&[(Vec<f64>, Option<usize>)]> = batch.chunks(CHUNK).collect();
    let partials: Vec<Result<Vec<SampleGrad>>> = chunks
        .par_iter()
        .map(|chunk| {
            chunk
                .iter()
                .map(|(x0, label)| {
                    backward_sample(model, &prep, cfg, head, x0, *label, false)
                })
                .collect()
        })
        .collect();
    for partial in partials {
        for g in partial? {
            out.j_align += g.j_align;
            out.j_var += g.j_var;
            for l in 0..ln {
                for (a, b) in out.theta[l].iter_mut().zip(&g.theta[l]) {
                    *a += b;
                }
                if untied {
                    for (a, b) in out.phi[l].iter_mut().zip(&g.phi[l]) {
                        *a += b;
                    }
                }
            }
            for (a, b) in out.head_w.iter_mut().zip(&g.head_w) {
                *a += b;
            }
            for (a, b) in out.head_b.iter_mut().zip(&g.head_b) {
                *a += b;
            }
        }
    }
    let n = batch.len() as f64;
    out.j_align /= n;
    out.j_var /= n;
    out.j_hybrid = if cfg.pure_var() {
        out.j_var
    } else {
        out.j_align + cfg.beta * out.j_var
    };
    for l in 0..ln {
        out.theta[l].iter_mut().for_each(|v| *v /= n);
        if untied {
            out.phi[l].iter_mut().for_each(|v| *v /= n);
        }
    }
    out.head_w.iter_mut().for_each(|v| *v /= n);
    out.head_b.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Gradient table for the posterior parameters phi (untied mode).
pub fn grad_phi(
    model: &FlowModel,
    cfg: &ObjectiveConfig,
    head: Option<&ClassifierHead>,
    batch: &[(Vec<f64>, Option<usize>)],
) -> Result<Vec<Vec<f64>>> {
    if model.posterior_mode() != PosteriorMode::Untied {
        return Err(Error::Config(
            "tied posterior mode routes phi gradients into theta".into(),
        ));
    }
    Ok(batch_gradients(model, cfg, head, batch)?.phi)
}

/// Gradient table for the conditional (score) parameters theta.
pub fn grad_theta(
    model: &FlowModel,
    cfg: &ObjectiveConfig,
    head: Option<&ClassifierHead>,
    batch: &[(Vec<f64>, Option<usize>)],
) -> Result<Vec<Vec<f64>>> {
    Ok(batch_gradients(model, cfg, head, batch)?.theta)
}
