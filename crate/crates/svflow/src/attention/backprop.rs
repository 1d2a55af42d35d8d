//! Reverse-mode training for the toy transformer: explicit chain rule
//! through windowed attention (where key, value, and query roles all feed
//! gradients back into the shared token states), slot attention (shared
//! per-slot parameters in both the posterior and value paths), MoE layers
//! (decoupled gate and experts), and the spherical normalization.
//!
//! The balancing loss contributes through the mean routing probabilities
//! only; the argmax fractions are treated as constants, as usual.

use super::transformer::{Layer, SlotAttention, ToyTransformer};
use super::{routing_fractions, AttentionHead, MoeLayer};
use crate::data::SequenceCorpus;
use crate::error::{Error, Result};
use crate::linalg::{dot, matvec, matvec_t, outer_acc, softmax_into};
use crate::train::{adam_step, AdamParams, AdamState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradients for every trainable block, in the model's canonical block
/// order (see [`ToyTransformer::for_each_block`]).
#[derive(Debug, Clone)]
pub struct TransformerGradients {
    pub blocks: Vec<Vec<f64>>,
}

impl ToyTransformer {
    /// Visit all trainable blocks in a fixed order.
    pub fn for_each_block(&self, mut f: impl FnMut(&Vec<f64>)) {
        for layer in &self.layers {
            match layer {
                Layer::WindowAttention { heads, .. } => {
                    for h in heads {
                        f(&h.qk);
                        f(&h.ov);
                    }
                }
                Layer::Slot(s) => {
                    f(&s.head.qk);
                    f(&s.head.ov);
                    f(&s.slots);
                }
                Layer::Moe(m) => {
                    f(&m.gate_w);
                    f(&m.gate_b);
                    for e in &m.experts {
                        f(&e.w1);
                        f(&e.b1);
                        f(&e.w2);
                        f(&e.b2);
                    }
                }
            }
        }
        f(&self.head.weights);
        if !self.head.bias.is_empty() {
            f(&self.head.bias);
        }
    }

    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(&mut Vec<f64>)) {
        for layer in &mut self.layers {
            match layer {
                Layer::WindowAttention { heads, .. } => {
                    for h in heads {
                        f(&mut h.qk);
                        f(&mut h.ov);
                    }
                }
                Layer::Slot(s) => {
                    f(&mut s.head.qk);
                    f(&mut s.head.ov);
                    f(&mut s.slots);
                }
                Layer::Moe(m) => {
                    f(&mut m.gate_w);
                    f(&mut m.gate_b);
                    for e in &mut m.experts {
                        f(&mut e.w1);
                        f(&mut e.b1);
                        f(&mut e.w2);
                        f(&mut e.b2);
                    }
                }
            }
        }
        f(&mut self.head.weights);
        if !self.head.bias.is_empty() {
            f(&mut self.head.bias);
        }
    }

    pub fn zero_gradients(&self) -> TransformerGradients {
        let mut blocks = Vec::new();
        self.for_each_block(|b| blocks.push(vec![0.0; b.len()]));
        TransformerGradients { blocks }
    }
}

/// Per-layer forward cache for one sequence.
enum LayerFwd {
    Attn {
        /// position -> head -> posterior over the window.
        q: Vec<Vec<Vec<f64>>>,
    },
    Slot {
        /// position -> routing over slots.
        q: Vec<Vec<f64>>,
    },
    Moe {
        /// position -> routing over experts.
        q: Vec<Vec<f64>>,
        /// position -> expert -> hidden activations (post-tanh).
        hidden: Vec<Vec<Vec<f64>>>,
        /// position -> expert -> centered expert output.
        outs: Vec<Vec<Vec<f64>>>,
        /// position -> expert -> raw expert output (for EMA updates).
        raw: Vec<Vec<Vec<f64>>>,
    },
}

struct SeqCache {
    /// (layers + 1) x positions x dim.
    states: Vec<Vec<Vec<f64>>>,
    /// layers x positions: norm of the pre-normalization sum.
    u_norm: Vec<Vec<f64>>,
    layers: Vec<LayerFwd>,
}

fn forward_train(model: &ToyTransformer, x0: &[Vec<f64>]) -> Result<SeqCache> {
    let d = model.dim;
    let n = x0.len();
    let mut states = vec![x0.to_vec()];
    let mut u_norms = Vec::new();
    let mut layer_caches = Vec::new();
    let sqrt_d = (d as f64).sqrt();
    for layer in &model.layers {
        let cur = states.last().expect("nonempty");
        let mut next = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        let cache = match layer {
            Layer::WindowAttention { heads, window } => {
                let mut q_all = Vec::with_capacity(n);
                let mut qtx = vec![0.0; d];
                let mut mix = vec![0.0; d];
                let mut proj = vec![0.0; d];
                for pos in 0..n {
                    let lo = pos.saturating_sub(*window);
                    let keys = &cur[lo..=pos];
                    let x = &cur[pos];
                    let mut f = vec![0.0; d];
                    let mut q_heads = Vec::with_capacity(heads.len());
                    for head in heads {
                        matvec_t(&head.qk, d, d, x, &mut qtx);
                        let logits: Vec<f64> = keys.iter().map(|k| dot(&qtx, k)).collect();
                        let mut q = vec![0.0; logits.len()];
                        softmax_into(&logits, &mut q);
                        mix.fill(0.0);
                        for (z, k) in keys.iter().enumerate() {
                            for i in 0..d {
                                mix[i] += q[z] * k[i];
                            }
                        }
                        matvec(&head.ov, d, d, &mix, &mut proj);
                        for i in 0..d {
                            f[i] += proj[i];
                        }
                        q_heads.push(q);
                    }
                    let (y, un) = residual_norm(x, &f, sqrt_d)?;
                    next.push(y);
                    norms.push(un);
                    q_all.push(q_heads);
                }
                LayerFwd::Attn { q: q_all }
            }
            Layer::Slot(slot) => {
                let mut q_all = Vec::with_capacity(n);
                for x in cur {
                    let (f, q) = slot.forward(x);
                    let (y, un) = residual_norm(x, &f, sqrt_d)?;
                    next.push(y);
                    norms.push(un);
                    q_all.push(q);
                }
                LayerFwd::Slot { q: q_all }
            }
            Layer::Moe(moe) => {
                let e_count = moe.num_experts();
                let mut q_all = Vec::with_capacity(n);
                let mut hid_all = Vec::with_capacity(n);
                let mut out_all = Vec::with_capacity(n);
                let mut raw_all = Vec::with_capacity(n);
                let mut logits = vec![0.0; e_count];
                for x in cur {
                    super::gate_logits_into(moe, x, &mut logits);
                    let mut q = vec![0.0; e_count];
                    softmax_into(&logits, &mut q);
                    let mut hid = Vec::with_capacity(e_count);
                    let mut outs = Vec::with_capacity(e_count);
                    let mut raws = Vec::with_capacity(e_count);
                    let mut f = vec![0.0; d];
                    for (i, expert) in moe.experts.iter().enumerate() {
                        let (raw, h) = expert.forward(x);
                        let mut centered = raw.clone();
                        if let Some(ema) = &moe.ema {
                            for (c, m) in centered
                                .iter_mut()
                                .zip(&ema.means[i * d..(i + 1) * d])
                            {
                                *c -= m;
                            }
                        }
                        for j in 0..d {
                            f[j] += q[i] * centered[j];
                        }
                        hid.push(h);
                        outs.push(centered);
                        raws.push(raw);
                    }
                    let (y, un) = residual_norm(x, &f, sqrt_d)?;
                    next.push(y);
                    norms.push(un);
                    q_all.push(q);
                    hid_all.push(hid);
                    out_all.push(outs);
                    raw_all.push(raws);
                }
                LayerFwd::Moe {
                    q: q_all,
                    hidden: hid_all,
                    outs: out_all,
                    raw: raw_all,
                }
            }
        };
        states.push(next);
        u_norms.push(norms);
        layer_caches.push(cache);
    }
    Ok(SeqCache {
        states,
        u_norm: u_norms,
        layers: layer_caches,
    })
}

fn residual_norm(x: &[f64], f: &[f64], sqrt_d: f64) -> Result<(Vec<f64>, f64)> {
    let u: Vec<f64> = x.iter().zip(f).map(|(a, b)| a + b).collect();
    let n = crate::linalg::norm(&u);
    if n < crate::geometry::DEGENERATE_NORM_TOL {
        return Err(Error::DegenerateInput("residual update collapsed".into()));
    }
    Ok((u.iter().map(|v| v * sqrt_d / n).collect(), n))
}

/// Softmax backward: given t_z = dJ/dq_z, produce e_z = dJ/dlogit_z.
fn softmax_backward(q: &[f64], t: &[f64], out: &mut [f64]) {
    let mean: f64 = q.iter().zip(t).map(|(a, b)| a * b).sum();
    for z in 0..q.len() {
        out[z] = q[z] * (t[z] - mean);
    }
}

/// Per-sequence loss and gradients. `targets` are per-position labels;
/// positions before `min_position` are skipped. `balance` carries, per
/// layer, the detached argmax fractions scaled by the balance weight and
/// divided by the total routed-position count of the batch.
pub fn sequence_grads(
    model: &ToyTransformer,
    x0: &[Vec<f64>],
    targets: &[usize],
    min_position: usize,
    balance: &[Option<Vec<f64>>],
    grads: &mut TransformerGradients,
) -> Result<f64> {
    let d = model.dim;
    let n = x0.len();
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    let cache = forward_train(model, x0)?;
    let sqrt_d = (d as f64).sqrt();
    let classes = model.head.num_classes;
    let trained: Vec<usize> = (min_position.min(n.saturating_sub(1))..n).collect();
    let scale = 1.0 / trained.len().max(1) as f64;

    // Classifier loss and terminal state gradients.
    let final_states = cache.states.last().expect("states");
    let mut g: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    let mut loss = 0.0;
    {
        let mut probs = vec![0.0; classes];
        // Block order: the classifier blocks come last.
        let nb = grads.blocks.len();
        let has_bias = !model.head.bias.is_empty();
        let (w_idx, b_idx) = if has_bias { (nb - 2, nb - 1) } else { (nb - 1, nb) };
        for &pos in &trained {
            let y = targets[pos];
            if y >= classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes: classes,
                });
            }
            let logits = model.head.logits(&final_states[pos]);
            softmax_into(&logits, &mut probs);
            loss += scale * (crate::linalg::logsumexp(&logits) - logits[y]);
            for c in 0..classes {
                let err = scale * (probs[c] - (c == y) as usize as f64);
                for i in 0..d {
                    grads.blocks[w_idx][c * d + i] += err * final_states[pos][i];
                    g[pos][i] += err * model.head.weights[c * d + i];
                }
                if has_bias {
                    grads.blocks[b_idx][c] += err;
                }
            }
        }
    }

    // Walk layers in reverse, tracking the block index range of each layer.
    let mut block_starts = Vec::with_capacity(model.layers.len());
    {
        let mut idx = 0;
        for layer in &model.layers {
            block_starts.push(idx);
            idx += match layer {
                Layer::WindowAttention { heads, .. } => 2 * heads.len(),
                Layer::Slot(_) => 3,
                Layer::Moe(m) => 2 + 4 * m.experts.len(),
            };
        }
    }

    let mut gu = vec![0.0; d];
    let mut gm = vec![0.0; d];
    let mut qtx = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let cur = &cache.states[l];
        let next = &cache.states[l + 1];
        let mut new_g: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let b0 = block_starts[l];
        for pos in 0..n {
            // Through rms normalization: grad_u = (sqrt_d/|u|)(g - y (y.g)/d).
            let y = &next[pos];
            let gy = &g[pos];
            let yg = dot(y, gy) / d as f64;
            let un = cache.u_norm[l][pos];
            for i in 0..d {
                gu[i] = sqrt_d / un * (gy[i] - y[i] * yg);
            }
            // Residual identity path.
            for i in 0..d {
                new_g[pos][i] += gu[i];
            }
            match (layer, &cache.layers[l]) {
                (Layer::WindowAttention { heads, window }, LayerFwd::Attn { q }) => {
                    let lo = pos.saturating_sub(*window);
                    let keys = &cur[lo..=pos];
                    let x = &cur[pos];
                    for (hi, head) in heads.iter().enumerate() {
                        let qh = &q[pos][hi];
                        // gm = OV^T gu; mix = sum_z q_z k_z.
                        matvec_t(&head.ov, d, d, &gu, &mut gm);
                        let mut mix = vec![0.0; d];
                        for (z, k) in keys.iter().enumerate() {
                            for i in 0..d {
                                mix[i] += qh[z] * k[i];
                            }
                        }
                        outer_acc(&mut grads.blocks[b0 + 2 * hi + 1], 1.0, &gu, &mix);
                        // Value role.
                        for (z, _) in keys.iter().enumerate() {
                            for i in 0..d {
                                new_g[lo + z][i] += qh[z] * gm[i];
                            }
                        }
                        // Softmax/logit path.
                        let t: Vec<f64> = keys.iter().map(|k| dot(&gm, k)).collect();
                        let mut e = vec![0.0; t.len()];
                        softmax_backward(qh, &t, &mut e);
                        // grad QK += sum_z e_z x (x) k_z = x (x) (sum e_z k_z).
                        let mut ek = vec![0.0; d];
                        for (z, k) in keys.iter().enumerate() {
                            for i in 0..d {
                                ek[i] += e[z] * k[i];
                            }
                        }
                        outer_acc(&mut grads.blocks[b0 + 2 * hi], 1.0, x, &ek);
                        // Query role: QK (sum e_z k_z).
                        matvec(&head.qk, d, d, &ek, &mut tmp);
                        for i in 0..d {
                            new_g[pos][i] += tmp[i];
                        }
                        // Key role: e_z QK^T x.
                        matvec_t(&head.qk, d, d, x, &mut qtx);
                        for (z, _) in keys.iter().enumerate() {
                            for i in 0..d {
                                new_g[lo + z][i] += e[z] * qtx[i];
                            }
                        }
                    }
                }
                (Layer::Slot(slot), LayerFwd::Slot { q }) => {
                    let x = &cur[pos];
                    let qh = &q[pos];
                    let e_slots = slot.num_slots;
                    matvec_t(&slot.head.ov, d, d, &gu, &mut gm);
                    let mut mix = vec![0.0; d];
                    for z in 0..e_slots {
                        for i in 0..d {
                            mix[i] += qh[z] * slot.slots[z * d + i];
                        }
                    }
                    outer_acc(&mut grads.blocks[b0 + 1], 1.0, &gu, &mix);
                    let mut t: Vec<f64> = (0..e_slots)
                        .map(|z| dot(&gm, &slot.slots[z * d..(z + 1) * d]))
                        .collect();
                    if let Some(bal) = &balance[l] {
                        for z in 0..e_slots {
                            t[z] += bal[z];
                        }
                    }
                    let mut e = vec![0.0; e_slots];
                    softmax_backward(qh, &t, &mut e);
                    let mut ec = vec![0.0; d];
                    for z in 0..e_slots {
                        for i in 0..d {
                            ec[i] += e[z] * slot.slots[z * d + i];
                        }
                    }
                    outer_acc(&mut grads.blocks[b0], 1.0, x, &ec);
                    matvec(&slot.head.qk, d, d, &ec, &mut tmp);
                    for i in 0..d {
                        new_g[pos][i] += tmp[i];
                    }
                    // Slot gradients: value role + key role.
                    matvec_t(&slot.head.qk, d, d, x, &mut qtx);
                    let gs = &mut grads.blocks[b0 + 2];
                    for z in 0..e_slots {
                        for i in 0..d {
                            gs[z * d + i] += qh[z] * gm[i] + e[z] * qtx[i];
                        }
                    }
                }
                (Layer::Moe(moe), LayerFwd::Moe { q, hidden, outs, .. }) => {
                    let x = &cur[pos];
                    let e_count = moe.num_experts();
                    let qh = &q[pos];
                    let mut t = vec![0.0; e_count];
                    for i in 0..e_count {
                        t[i] = dot(&gu, &outs[pos][i]);
                    }
                    if let Some(bal) = &balance[l] {
                        for z in 0..e_count {
                            t[z] += bal[z];
                        }
                    }
                    let mut e = vec![0.0; e_count];
                    softmax_backward(qh, &t, &mut e);
                    // Gate gradients and state contribution.
                    for i in 0..e_count {
                        let gw = &mut grads.blocks[b0][i * d..(i + 1) * d];
                        for j in 0..d {
                            gw[j] += e[i] * x[j];
                        }
                        grads.blocks[b0 + 1][i] += e[i];
                        for j in 0..d {
                            new_g[pos][j] += e[i] * moe.gate_w[i * d + j];
                        }
                    }
                    // Expert paths.
                    for (i, expert) in moe.experts.iter().enumerate() {
                        let go: Vec<f64> = gu.iter().map(|v| qh[i] * v).collect();
                        let hid = &hidden[pos][i];
                        let eb = b0 + 2 + 4 * i;
                        // w2, b2.
                        outer_acc(&mut grads.blocks[eb + 2], 1.0, &go, hid);
                        for j in 0..d {
                            grads.blocks[eb + 3][j] += go[j];
                        }
                        // Through tanh.
                        let mut gh = vec![0.0; expert.hidden];
                        matvec_t(&expert.w2, d, expert.hidden, &go, &mut gh);
                        for (k, h) in gh.iter_mut().zip(hid) {
                            *k *= 1.0 - h * h;
                        }
                        outer_acc(&mut grads.blocks[eb], 1.0, &gh, x);
                        for (bk, ghk) in grads.blocks[eb + 1].iter_mut().zip(&gh) {
                            *bk += ghk;
                        }
                        let mut gx = vec![0.0; d];
                        matvec_t(&expert.w1, expert.hidden, d, &gh, &mut gx);
                        for j in 0..d {
                            new_g[pos][j] += gx[j];
                        }
                    }
                }
                _ => unreachable!("cache kind matches layer kind"),
            }
        }
        g = new_g;
    }
    Ok(loss)
}

/// Mean routing distribution per mixing layer over a set of sequences.
pub fn mean_routings(model: &ToyTransformer, corpus: &SequenceCorpus, seq_idx: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Slot(s) => Some((vec![0.0; s.num_slots], 0)),
            Layer::Moe(m) => Some((vec![0.0; m.num_experts()], 0)),
            _ => None,
        })
        .collect();
    for &si in seq_idx {
        let seq = &corpus.sequences[si];
        let embeds: Vec<&[f64]> = seq.tokens.iter().map(|&t| corpus.embedding(t)).collect();
        let x0 = model.embed(&embeds);
        let fwd = model.forward(&x0, false)?;
        for (l, routing) in fwd.routings.iter().enumerate() {
            if let Some((sum, count)) = sums[l].as_mut() {
                for r in routing {
                    for (a, b) in sum.iter_mut().zip(r) {
                        *a += b;
                    }
                    *count += 1;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| {
            s.map(|(mut sum, count)| {
                if count > 0 {
                    sum.iter_mut().for_each(|v| *v /= count as f64);
                }
                sum
            })
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct TransformerTrainConfig {
    pub steps: usize,
    pub batch_sequences: usize,
    pub adam: AdamParams,
    pub seed: u64,
    pub log_every: usize,
    /// Weight of the auxiliary balancing loss (0 disables it).
    pub balance_weight: f64,
    /// First position contributing to the loss.
    pub min_position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerHistoryRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Balancing loss per gated layer (None for attention layers).
    pub balance: Vec<Option<f64>>,
    /// kl_to_uniform of the mean routing, per gated layer.
    pub routing_concentration: Vec<Option<f64>>,
}

/// Classification accuracy over whole sequences, positions >= min_position.
pub fn transformer_accuracy(
    model: &ToyTransformer,
    corpus: &SequenceCorpus,
    seq_idx: &[usize],
    min_position: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for &si in seq_idx {
        let seq = &corpus.sequences[si];
        let embeds: Vec<&[f64]> = seq.tokens.iter().map(|&t| corpus.embedding(t)).collect();
        let x0 = model.embed(&embeds);
        let fwd = model.forward(&x0, false)?;
        for pos in min_position..seq.len() {
            let logits = &fwd.logits[pos];
            let mut best = 0;
            for (c, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = c;
                }
            }
            correct += (best == seq.targets[pos]) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Routing state of the gated layers on a set of sequences: per layer the
/// balancing loss and the concentration of the mean routing.
fn routing_report(
    model: &ToyTransformer,
    corpus: &SequenceCorpus,
    seq_idx: &[usize],
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>)> {
    use crate::distributions::{kl_to_uniform, ProbVector};
    let mut all: Vec<Option<Vec<ProbVector>>> = model
        .layers
        .iter()
        .map(|l| matches!(l, Layer::Slot(_) | Layer::Moe(_)).then(Vec::new))
        .collect();
    for &si in seq_idx {
        let seq = &corpus.sequences[si];
        let embeds: Vec<&[f64]> = seq.tokens.iter().map(|&t| corpus.embedding(t)).collect();
        let x0 = model.embed(&embeds);
        let fwd = model.forward(&x0, false)?;
        for (l, routing) in fwd.routings.iter().enumerate() {
            if let Some(list) = all[l].as_mut() {
                for r in routing {
                    list.push(ProbVector::new(r.clone())?);
                }
            }
        }
    }
    let mut balance = Vec::new();
    let mut conc = Vec::new();
    for layer in all {
        match layer {
            Some(list) if !list.is_empty() => {
                balance.push(Some(super::load_balance_loss(&list)?));
                let e = list[0].len();
                let mut mean = vec![0.0; e];
                for r in &list {
                    for (a, b) in mean.iter_mut().zip(r.probs()) {
                        *a += b;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= list.len() as f64);
                conc.push(Some(kl_to_uniform(&ProbVector::new(mean)?)));
            }
            _ => {
                balance.push(None);
                conc.push(None);
            }
        }
    }
    Ok((balance, conc))
}

/// Train the toy transformer on the sequence corpus with cross-entropy plus
/// an optional balancing loss on gated layers. Deterministic under the seed.
pub fn train_transformer(
    mut model: ToyTransformer,
    corpus: &SequenceCorpus,
    cfg: &TransformerTrainConfig,
) -> Result<(ToyTransformer, Vec<TransformerHistoryRow>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_seq = corpus.sequences.len();
    if num_seq == 0 {
        return Err(Error::EmptyInput("sequence corpus".into()));
    }
    let eval_idx: Vec<usize> = (0..num_seq).collect();
    let mut states: Vec<AdamState> = Vec::new();
    model.for_each_block(|b| states.push(AdamState::new(b.len())));
    let mut history = Vec::new();

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_sequences)
            .map(|_| rng.gen_range(0..num_seq))
            .collect();
        // Pass 1: routing fractions for the balancing loss.
        let mut balance: Vec<Option<Vec<f64>>> = vec![None; model.layers.len()];
        if cfg.balance_weight > 0.0 {
            let mut per_layer: Vec<Option<Vec<Vec<f64>>>> = model
                .layers
                .iter()
                .map(|l| matches!(l, Layer::Slot(_) | Layer::Moe(_)).then(Vec::new))
                .collect();
            for &si in &batch {
                let seq = &corpus.sequences[si];
                let embeds: Vec<&[f64]> =
                    seq.tokens.iter().map(|&t| corpus.embedding(t)).collect();
                let x0 = model.embed(&embeds);
                let fwd = model.forward(&x0, false)?;
                for (l, routing) in fwd.routings.iter().enumerate() {
                    if let Some(list) = per_layer[l].as_mut() {
                        list.extend(routing.iter().cloned());
                    }
                }
            }
            for (l, list) in per_layer.into_iter().enumerate() {
                if let Some(list) = list {
                    if !list.is_empty() {
                        let e = list[0].len();
                        let f = routing_fractions(&list, e);
                        let total = list.len() as f64;
                        balance[l] = Some(
                            f.iter()
                                .map(|fz| cfg.balance_weight * fz / total)
                                .collect(),
                        );
                    }
                }
            }
        }
        // Pass 2: gradients.
        let mut grads = model.zero_gradients();
        let mut loss = 0.0;
        for &si in &batch {
            let seq = &corpus.sequences[si];
            let embeds: Vec<&[f64]> = seq.tokens.iter().map(|&t| corpus.embedding(t)).collect();
            let x0 = model.embed(&embeds);
            loss += sequence_grads(
                &model,
                &x0,
                &seq.targets,
                cfg.min_position,
                &balance,
                &mut grads,
            )?;
        }
        let bn = cfg.batch_sequences as f64;
        loss /= bn;
        for b in grads.blocks.iter_mut() {
            b.iter_mut().for_each(|v| *v /= bn);
        }
        if !loss.is_finite() || loss.abs() > 1e6 {
            return Err(Error::NonFinite(format!(
                "transformer loss diverged at step {step}: {loss}"
            )));
        }
        if step % cfg.log_every == 0 {
            let accuracy = transformer_accuracy(&model, corpus, &eval_idx, cfg.min_position)?;
            let (bal, conc) = routing_report(&model, corpus, &eval_idx)?;
            history.push(TransformerHistoryRow {
                step,
                loss,
                accuracy,
                balance: bal,
                routing_concentration: conc,
            });
        }
        let mut bi = 0;
        model.for_each_block_mut(|b| {
            adam_step(b, &grads.blocks[bi], &mut states[bi], &cfg.adam).expect("matching shapes");
            bi += 1;
        });
        // EMA centers update once per batch from the batch-mean raw outputs.
        let mut ema_updates: Vec<Option<Vec<Vec<f64>>>> = vec![None; model.layers.len()];
        for (l, layer) in model.layers.iter().enumerate() {
            if let Layer::Moe(moe) = layer {
                if moe.ema.is_some() {
                    let d = moe.dim;
                    let e_count = moe.num_experts();
                    let mut sums = vec![vec![0.0; d]; e_count];
                    let mut count = 0usize;
                    for &si in &batch {
                        let seq = &corpus.sequences[si];
                        let embeds: Vec<&[f64]> =
                            seq.tokens.iter().map(|&t| corpus.embedding(t)).collect();
                        let x0 = model.embed(&embeds);
                        let cache = forward_train(&model, &x0)?;
                        if let LayerFwd::Moe { raw, .. } = &cache.layers[l] {
                            for pos_raw in raw {
                                for (i, r) in pos_raw.iter().enumerate() {
                                    for (a, b) in sums[i].iter_mut().zip(r) {
                                        *a += b;
                                    }
                                }
                                count += 1;
                            }
                        }
                    }
                    if count > 0 {
                        for s in sums.iter_mut() {
                            s.iter_mut().for_each(|v| *v /= count as f64);
                        }
                        ema_updates[l] = Some(sums);
                    }
                }
            }
        }
        for (l, update) in ema_updates.into_iter().enumerate() {
            if let (Some(sums), Layer::Moe(moe)) = (update, &mut model.layers[l]) {
                moe.update_ema(&sums);
            }
        }
    }
    let accuracy = transformer_accuracy(&model, corpus, &eval_idx, cfg.min_position)?;
    let (bal, conc) = routing_report(&model, corpus, &eval_idx)?;
    history.push(TransformerHistoryRow {
        step: cfg.steps,
        loss: corpus_nll(&model, corpus, &eval_idx, cfg.min_position)?,
        accuracy,
        balance: bal,
        routing_concentration: conc,
    });
    Ok((model, history))
}

/// Mean per-position negative log-likelihood over the given sequences.
pub fn corpus_nll(
    model: &ToyTransformer,
    corpus: &SequenceCorpus,
    seq_idx: &[usize],
    min_position: usize,
) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for &si in seq_idx {
        let seq = &corpus.sequences[si];
        let embeds: Vec<&[f64]> = seq.tokens.iter().map(|&t| corpus.embedding(t)).collect();
        let x0 = model.embed(&embeds);
        let fwd = model.forward(&x0, false)?;
        for pos in min_position..seq.len() {
            let logits = &fwd.logits[pos];
            nll += crate::linalg::logsumexp(logits) - logits[seq.targets[pos]];
            count += 1;
        }
    }
    Ok(nll / count.max(1) as f64)
}

/// Random stack of windowed attention layers.
pub fn random_attention_stack(
    rng: &mut ChaCha8Rng,
    dim: usize,
    num_layers: usize,
    heads_per_layer: usize,
    window: usize,
    num_classes: usize,
) -> ToyTransformer {
    let layers = (0..num_layers)
        .map(|_| Layer::WindowAttention {
            heads: (0..heads_per_layer)
                .map(|_| random_head_scaled(rng, dim))
                .collect(),
            window,
        })
        .collect();
    ToyTransformer {
        dim,
        layers,
        head: random_classifier(rng, dim, num_classes),
    }
}

/// Attention stack followed by a coupled slot layer.
pub fn coupled_slot_model(
    rng: &mut ChaCha8Rng,
    dim: usize,
    window: usize,
    num_slots: usize,
    num_classes: usize,
) -> ToyTransformer {
    let layers = vec![
        Layer::WindowAttention {
            heads: vec![random_head_scaled(rng, dim)],
            window,
        },
        Layer::Slot(SlotAttention {
            head: random_head_scaled(rng, dim),
            slots: (0..num_slots * dim)
                .map(|_| rng.gen::<f64>() - 0.5)
                .collect(),
            num_slots,
        }),
    ];
    ToyTransformer {
        dim,
        layers,
        head: random_classifier(rng, dim, num_classes),
    }
}

/// Attention stack followed by a decoupled MoE layer.
pub fn decoupled_moe_model(
    rng: &mut ChaCha8Rng,
    dim: usize,
    window: usize,
    num_experts: usize,
    num_classes: usize,
    ema: bool,
) -> ToyTransformer {
    use super::{EmaCenter, Expert};
    let hidden = 2 * dim;
    let experts = (0..num_experts)
        .map(|_| Expert {
            w1: (0..hidden * dim)
                .map(|_| (rng.gen::<f64>() - 0.5) / (dim as f64).sqrt())
                .collect(),
            b1: vec![0.0; hidden],
            w2: (0..dim * hidden)
                .map(|_| (rng.gen::<f64>() - 0.5) / (hidden as f64).sqrt())
                .collect(),
            b2: vec![0.0; dim],
            dim,
            hidden,
        })
        .collect();
    let layers = vec![
        Layer::WindowAttention {
            heads: vec![random_head_scaled(rng, dim)],
            window,
        },
        Layer::Moe(MoeLayer {
            experts,
            gate_w: (0..num_experts * dim)
                .map(|_| (rng.gen::<f64>() - 0.5) / (dim as f64))
                .collect(),
            gate_b: vec![0.0; num_experts],
            ema: ema.then(|| EmaCenter {
                means: vec![0.0; num_experts * dim],
                decay: 0.99,
            }),
            dim,
        }),
    ];
    ToyTransformer {
        dim,
        layers,
        head: random_classifier(rng, dim, num_classes),
    }
}

fn random_head_scaled(rng: &mut ChaCha8Rng, dim: usize) -> AttentionHead {
    let qk_scale = 1.0 / dim as f64;
    let ov_scale = 0.5 / (dim as f64).sqrt();
    AttentionHead {
        qk: (0..dim * dim)
            .map(|_| qk_scale * (rng.gen::<f64>() - 0.5))
            .collect(),
        ov: (0..dim * dim)
            .map(|_| ov_scale * (rng.gen::<f64>() - 0.5))
            .collect(),
        dim,
    }
}

fn random_classifier(rng: &mut ChaCha8Rng, dim: usize, num_classes: usize) -> crate::train::ClassifierHead {
    crate::train::ClassifierHead {
        weights: (0..num_classes * dim)
            .map(|_| 0.1 * (rng.gen::<f64>() - 0.5))
            .collect(),
        bias: vec![0.0; num_classes],
        num_classes,
        dim,
    }
}
