//! Attention and mixture-of-experts layers written two ways: the literal
//! transformer computation and the posterior-weighted-score form, with an
//! exact equivalence check between them; plus the auxiliary load-balancing
//! loss and EMA output centering.
//!
//! Heads store the merged products QK = W_q W_k^T and OV = W_o W_v^T; only
//! these products ever enter the math.

pub mod backprop;
pub mod kernel;
pub mod transformer;

use crate::distributions::{softmax, ProbVector};
use crate::error::{Error, Result};
use crate::linalg::{dot, matvec, matvec_t, norm, softmax_into};
use serde::{Deserialize, Serialize};

/// One attention head: merged query-key and value-output matrices, both
/// `dim x dim` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub qk: Vec<f64>,
    pub ov: Vec<f64>,
    pub dim: usize,
}

impl AttentionHead {
    pub fn new(qk: Vec<f64>, ov: Vec<f64>, dim: usize) -> Result<Self> {
        if qk.len() != dim * dim || ov.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: qk.len().max(ov.len()),
            });
        }
        if qk.iter().chain(&ov).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention head matrices".into()));
        }
        Ok(Self { qk, ov, dim })
    }
}

/// Multi-head attention with a fixed head distribution (uniform by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhaLayer {
    pub heads: Vec<AttentionHead>,
    pub head_weights: ProbVector,
}

impl MhaLayer {
    pub fn uniform(heads: Vec<AttentionHead>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::EmptyInput("attention heads".into()));
        }
        let n = heads.len();
        Ok(Self {
            heads,
            head_weights: ProbVector::uniform(n),
        })
    }
}

/// Which algebraic route computes the layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MhaForm {
    /// Sum over heads of OV applied to the attention-weighted value mix.
    Literal,
    /// Head-count-rescaled expectation of per-component scores under the
    /// joint head/key posterior.
    Svflow,
}

/// One expert: a single-hidden-layer map with tanh nonlinearity,
/// hidden width `2 * dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    /// hidden x dim.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// dim x hidden.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub dim: usize,
    pub hidden: usize,
}

impl Expert {
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = vec![0.0; self.hidden];
        matvec(&self.w1, self.hidden, self.dim, x, &mut pre);
        for (p, b) in pre.iter_mut().zip(&self.b1) {
            *p = (*p + b).tanh();
        }
        let mut out = vec![0.0; self.dim];
        matvec(&self.w2, self.dim, self.hidden, &pre, &mut out);
        for (o, b) in out.iter_mut().zip(&self.b2) {
            *o += b;
        }
        (out, pre)
    }
}

/// Exponential-moving-average centering of expert outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaCenter {
    /// Per-expert running output means, E x dim row-major.
    pub means: Vec<f64>,
    pub decay: f64,
}

/// Mixture-of-experts layer: affine gate, independent experts, optional
/// EMA centering of expert outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub experts: Vec<Expert>,
    /// E x dim gate weights.
    pub gate_w: Vec<f64>,
    pub gate_b: Vec<f64>,
    pub ema: Option<EmaCenter>,
    pub dim: usize,
}

impl MoeLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Gating posterior at `x`.
    pub fn routing(&self, x: &[f64]) -> Result<ProbVector> {
        let e = self.num_experts();
        let mut logits = vec![0.0; e];
        for (i, l) in logits.iter_mut().enumerate() {
            *l = dot(&self.gate_w[i * self.dim..(i + 1) * self.dim], x) + self.gate_b[i];
        }
        softmax(&logits)
    }

    /// Gated expert mix at `x`, read-only (no EMA update).
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ProbVector)> {
        let routing = self.routing(x)?;
        let mut out = vec![0.0; self.dim];
        for (i, expert) in self.experts.iter().enumerate() {
            let (mut o, _) = expert.forward(x);
            if let Some(ema) = &self.ema {
                for (oj, mj) in o.iter_mut().zip(&ema.means[i * self.dim..(i + 1) * self.dim]) {
                    *oj -= mj;
                }
            }
            for (acc, oj) in out.iter_mut().zip(&o) {
                *acc += routing.probs()[i] * oj;
            }
        }
        Ok((out, routing))
    }

    /// Update the EMA centers from raw (uncentered) expert outputs.
    pub fn update_ema(&mut self, raw_outputs: &[Vec<f64>]) {
        if let Some(ema) = &mut self.ema {
            for (i, o) in raw_outputs.iter().enumerate() {
                for (m, &v) in ema.means[i * self.dim..(i + 1) * self.dim]
                    .iter_mut()
                    .zip(o)
                {
                    *m = ema.decay * *m + (1.0 - ema.decay) * v;
                }
            }
        }
    }
}

/// Split a vector into direction and magnitude: `(w/|w|, |w|)`. The zero
/// vector yields the first basis direction with zero concentration (the
/// score is zero either way).
pub fn mean_direction_decompose(w: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(w);
    if n < crate::geometry::DEGENERATE_NORM_TOL {
        let mut e1 = vec![0.0; w.len()];
        if !e1.is_empty() {
            e1[0] = 1.0;
        }
        return (e1, 0.0);
    }
    (w.iter().map(|v| v / n).collect(), n)
}

/// Attention weights of one head: softmax over keys of `(QK k_z) . x_q`.
pub fn attention_posterior(
    head: &AttentionHead,
    x_q: &[f64],
    keys: &[Vec<f64>],
) -> Result<ProbVector> {
    if keys.is_empty() {
        return Err(Error::EmptyInput("attention keys".into()));
    }
    let d = head.dim;
    // (QK k) . x = k . (QK^T x): one matvec, then dots.
    let mut qtx = vec![0.0; d];
    matvec_t(&head.qk, d, d, x_q, &mut qtx);
    let logits: Vec<f64> = keys.iter().map(|k| dot(&qtx, k)).collect();
    softmax(&logits)
}

/// Posterior-weighted sum of per-key scores `OV v_z` for one head.
pub fn head_field(
    head: &AttentionHead,
    x_q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if keys.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: keys.len(),
            got: values.len(),
        });
    }
    let q = attention_posterior(head, x_q, keys)?;
    let d = head.dim;
    let mut out = vec![0.0; d];
    let mut score = vec![0.0; d];
    for (z, v) in values.iter().enumerate() {
        matvec(&head.ov, d, d, v, &mut score);
        for i in 0..d {
            out[i] += q.probs()[z] * score[i];
        }
    }
    Ok(out)
}

/// Full multi-head output in either algebraic form.
///
/// The literal route sums heads and projects the mixed value once per head;
/// the flow route rescales the head expectation by the head count so both
/// agree exactly under uniform head weights.
pub fn mha_forward(
    layer: &MhaLayer,
    x_q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    form: MhaForm,
) -> Result<Vec<f64>> {
    if keys.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: keys.len(),
            got: values.len(),
        });
    }
    let d = layer.heads[0].dim;
    let h_count = layer.heads.len() as f64;
    let mut out = vec![0.0; d];
    match form {
        MhaForm::Literal => {
            let mut mix = vec![0.0; d];
            let mut proj = vec![0.0; d];
            for head in &layer.heads {
                let q = attention_posterior(head, x_q, keys)?;
                mix.fill(0.0);
                for (z, v) in values.iter().enumerate() {
                    for i in 0..d {
                        mix[i] += q.probs()[z] * v[i];
                    }
                }
                matvec(&head.ov, d, d, &mix, &mut proj);
                for i in 0..d {
                    out[i] += proj[i];
                }
            }
        }
        MhaForm::Svflow => {
            for (h, head) in layer.heads.iter().enumerate() {
                let field = head_field(head, x_q, keys, values)?;
                let w = layer.head_weights.probs()[h] * h_count;
                for i in 0..d {
                    out[i] += w * field[i];
                }
            }
        }
    }
    Ok(out)
}

/// Read-only MoE layer op returning (output, routing); EMA centers are
/// updated from this call's raw outputs.
pub fn moe_forward(layer: &mut MoeLayer, x: &[f64]) -> Result<(Vec<f64>, ProbVector)> {
    let (out, routing) = layer.forward(x)?;
    if layer.ema.is_some() {
        let raw: Vec<Vec<f64>> = layer.experts.iter().map(|e| e.forward(x).0).collect();
        layer.update_ema(&raw);
    }
    Ok((out, routing))
}

/// Auxiliary load-balancing loss sum_z f_z P_z: f_z is the fraction of
/// samples routed (argmax, ties to the lowest index) to expert z, P_z the
/// mean routing probability.
pub fn load_balance_loss(routings: &[ProbVector]) -> Result<f64> {
    if routings.is_empty() {
        return Err(Error::EmptyInput("routing batch".into()));
    }
    let e = routings[0].len();
    let mut f = vec![0.0; e];
    let mut p = vec![0.0; e];
    for r in routings {
        if r.len() != e {
            return Err(Error::DimensionMismatch {
                expected: e,
                got: r.len(),
            });
        }
        let probs = r.probs();
        let mut best = 0usize;
        for (z, &v) in probs.iter().enumerate() {
            if v > probs[best] {
                best = z;
            }
        }
        f[best] += 1.0;
        for (acc, &v) in p.iter_mut().zip(probs) {
            *acc += v;
        }
    }
    let n = routings.len() as f64;
    Ok(f.iter().zip(&p).map(|(fz, pz)| (fz / n) * (pz / n)).sum())
}

/// Fraction of samples whose argmax routing is each expert (the detached
/// factor of the balancing loss).
pub(crate) fn routing_fractions(routings: &[Vec<f64>], num_experts: usize) -> Vec<f64> {
    let mut f = vec![0.0; num_experts];
    for r in routings {
        let mut best = 0usize;
        for (z, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = z;
            }
        }
        f[best] += 1.0;
    }
    let n = routings.len().max(1) as f64;
    f.iter_mut().for_each(|v| *v /= n);
    f
}

/// Softmax logits for the gate at `x`, written into `out`.
pub(crate) fn gate_logits_into(layer: &MoeLayer, x: &[f64], out: &mut [f64]) {
    for (i, l) in out.iter_mut().enumerate() {
        *l = dot(&layer.gate_w[i * layer.dim..(i + 1) * layer.dim], x) + layer.gate_b[i];
    }
}

pub(crate) fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub fn random_head(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> AttentionHead {
        AttentionHead::new(
            (0..d * d).map(|_| scale * (rng.gen::<f64>() - 0.5)).collect(),
            (0..d * d).map(|_| scale * (rng.gen::<f64>() - 0.5)).collect(),
            d,
        )
        .unwrap()
    }

    pub fn random_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect()
    }

    pub fn random_moe(rng: &mut ChaCha8Rng, d: usize, e: usize, ema: bool) -> MoeLayer {
        let hidden = 2 * d;
        let experts = (0..e)
            .map(|_| Expert {
                w1: (0..hidden * d).map(|_| 0.5 * (rng.gen::<f64>() - 0.5)).collect(),
                b1: (0..hidden).map(|_| 0.1 * (rng.gen::<f64>() - 0.5)).collect(),
                w2: (0..d * hidden).map(|_| 0.5 * (rng.gen::<f64>() - 0.5)).collect(),
                b2: (0..d).map(|_| 0.1 * (rng.gen::<f64>() - 0.5)).collect(),
                dim: d,
                hidden,
            })
            .collect();
        MoeLayer {
            experts,
            gate_w: (0..e * d).map(|_| 0.5 * (rng.gen::<f64>() - 0.5)).collect(),
            gate_b: vec![0.0; e],
            ema: ema.then(|| EmaCenter {
                means: vec![0.0; e * d],
                decay: 0.99,
            }),
            dim: d,
        }
    }
}
