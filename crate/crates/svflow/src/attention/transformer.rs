//! A small residual-normalized sequence model built from the layers in this
//! module: windowed self-attention, slot attention (per-slot parameters used
//! as both key and value source, the coupled form), and mixture-of-experts
//! (independent gate and experts, the decoupled form).
//!
//! States live on the sphere of radius sqrt(d); every layer applies
//! `x <- rms_normalize(x + f(x))`. Attention diagnostics expose, per layer,
//! position and head, the key posterior together with the directional
//! conditional log-densities induced by the value-output projections.

use super::{AttentionHead, MoeLayer};
use crate::distributions::vmf_log_normalizer;
use crate::error::{Error, Result};
use crate::geometry::rms_normalize;
use crate::linalg::{dot, matvec, matvec_t, norm, softmax_into};
use crate::train::ClassifierHead;
use serde::{Deserialize, Serialize};

/// Coupled mixing layer: per-slot vectors serve as both keys and value
/// sources through the shared head matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAttention {
    pub head: AttentionHead,
    /// E x dim slot parameters.
    pub slots: Vec<f64>,
    pub num_slots: usize,
}

impl SlotAttention {
    pub fn routing(&self, x: &[f64]) -> Vec<f64> {
        let d = self.head.dim;
        let mut qtx = vec![0.0; d];
        matvec_t(&self.head.qk, d, d, x, &mut qtx);
        let logits: Vec<f64> = (0..self.num_slots)
            .map(|z| dot(&qtx, &self.slots[z * d..(z + 1) * d]))
            .collect();
        super::softmax_vec(&logits)
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.head.dim;
        let q = self.routing(x);
        let mut mix = vec![0.0; d];
        for z in 0..self.num_slots {
            for i in 0..d {
                mix[i] += q[z] * self.slots[z * d + i];
            }
        }
        let mut out = vec![0.0; d];
        matvec(&self.head.ov, d, d, &mix, &mut out);
        (out, q)
    }
}

/// One mixing layer of the toy transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// Multi-head self-attention over a trailing window of positions
    /// (self-inclusive).
    WindowAttention {
        heads: Vec<AttentionHead>,
        window: usize,
    },
    /// Coupled slot mixing.
    Slot(SlotAttention),
    /// Decoupled expert mixing.
    Moe(MoeLayer),
}

/// Token-sequence model: embeddings scaled to the sqrt(d) sphere, a stack
/// of residual-normalized mixing layers, and a linear classifier per
/// position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTransformer {
    pub dim: usize,
    pub layers: Vec<Layer>,
    pub head: ClassifierHead,
}

/// Residual update with spherical normalization:
/// `rms_normalize(x + f_x, d)`.
pub fn transformer_layer_update(x: &[f64], f_x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != f_x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: f_x.len(),
        });
    }
    let sum: Vec<f64> = x.iter().zip(f_x).map(|(a, b)| a + b).collect();
    rms_normalize(&sum, x.len())
}

/// Per-(layer, position, head) attention diagnostics.
#[derive(Debug, Clone)]
pub struct AttentionDiagnostics {
    /// Posterior over the window keys.
    pub posterior: Vec<f64>,
    /// Directional conditional log-densities of each key's value score,
    /// evaluated at the unit-normalized query state.
    pub cond_log_density: Vec<f64>,
}

/// Forward pass over one sequence of token states.
#[derive(Debug, Clone)]
pub struct SequenceForward {
    /// (layers + 1) x positions x dim states, all on the sqrt(d) sphere.
    pub states: Vec<Vec<Vec<f64>>>,
    /// Per-position classifier logits at the final states.
    pub logits: Vec<Vec<f64>>,
    /// layer -> position -> head diagnostics; empty vectors for non-attention
    /// layers.
    pub diagnostics: Option<Vec<Vec<Vec<AttentionDiagnostics>>>>,
    /// layer -> position routing distributions for slot/MoE layers.
    pub routings: Vec<Vec<Vec<f64>>>,
}

impl ToyTransformer {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Map token embeddings (unit vectors) to initial states on the
    /// sqrt(d) sphere.
    pub fn embed(&self, embeddings: &[&[f64]]) -> Vec<Vec<f64>> {
        let s = (self.dim as f64).sqrt();
        embeddings
            .iter()
            .map(|e| e.iter().map(|v| v * s).collect())
            .collect()
    }

    /// Run the stack over a sequence of initial states.
    pub fn forward(&self, x0: &[Vec<f64>], with_diagnostics: bool) -> Result<SequenceForward> {
        let d = self.dim;
        let n = x0.len();
        if n == 0 {
            return Err(Error::EmptyInput("token sequence".into()));
        }
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        states.push(x0.to_vec());
        let mut diagnostics = with_diagnostics.then(Vec::new);
        let mut routings = Vec::new();
        for layer in &self.layers {
            let cur = states.last().expect("nonempty states");
            let mut next = Vec::with_capacity(n);
            let mut layer_diag = with_diagnostics.then(Vec::new);
            let mut layer_routing = Vec::new();
            match layer {
                Layer::WindowAttention { heads, window } => {
                    let mut qtx = vec![0.0; d];
                    let mut mix = vec![0.0; d];
                    let mut proj = vec![0.0; d];
                    for pos in 0..n {
                        let lo = pos.saturating_sub(*window);
                        let keys = &cur[lo..=pos];
                        let x = &cur[pos];
                        let mut f = vec![0.0; d];
                        let mut pos_diag = with_diagnostics.then(Vec::new);
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
                            if let Some(pd) = pos_diag.as_mut() {
                                pd.push(self.attention_diag(head, x, keys, &q)?);
                            }
                        }
                        next.push(transformer_layer_update(x, &f)?);
                        if let (Some(ld), Some(pd)) = (layer_diag.as_mut(), pos_diag) {
                            ld.push(pd);
                        }
                    }
                }
                Layer::Slot(slot) => {
                    for x in cur {
                        let (f, q) = slot.forward(x);
                        next.push(transformer_layer_update(x, &f)?);
                        layer_routing.push(q);
                        if let Some(ld) = layer_diag.as_mut() {
                            ld.push(Vec::new());
                        }
                    }
                }
                Layer::Moe(moe) => {
                    for x in cur {
                        let (f, q) = moe.forward(x)?;
                        next.push(transformer_layer_update(x, &f)?);
                        layer_routing.push(q.into_inner());
                        if let Some(ld) = layer_diag.as_mut() {
                            ld.push(Vec::new());
                        }
                    }
                }
            }
            states.push(next);
            if let (Some(diags), Some(ld)) = (diagnostics.as_mut(), layer_diag) {
                diags.push(ld);
            }
            routings.push(layer_routing);
        }
        let last = states.last().expect("nonempty states");
        let logits = last.iter().map(|x| self.head.logits(x)).collect();
        Ok(SequenceForward {
            states,
            logits,
            diagnostics,
            routings,
        })
    }

    /// Posterior plus directional conditional log-densities for one head at
    /// one query position. Keys play the component role; each value score
    /// is OV k_z with concentration |OV k_z|, evaluated at the
    /// unit-normalized query.
    fn attention_diag(
        &self,
        head: &AttentionHead,
        x: &[f64],
        keys: &[Vec<f64>],
        posterior: &[f64],
    ) -> Result<AttentionDiagnostics> {
        let d = self.dim;
        let sqrt_d = (d as f64).sqrt();
        let x_unit: Vec<f64> = x.iter().map(|v| v / sqrt_d).collect();
        let mut w = vec![0.0; d];
        let mut cond = Vec::with_capacity(keys.len());
        for k in keys {
            matvec(&head.ov, d, d, k, &mut w);
            let kappa = norm(&w);
            cond.push(vmf_log_normalizer(d, kappa)? + dot(&w, &x_unit));
        }
        Ok(AttentionDiagnostics {
            posterior: posterior.to_vec(),
            cond_log_density: cond,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::random_head;
    use super::*;
    use crate::flow::{Family, FlowModel, IntegrationMode, PosteriorMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_update_identity_for_zero_mixing() {
        let x = rms_normalize(&[0.4, -0.3, 0.8, 0.1], 4).unwrap();
        let y = transformer_layer_update(&x, &[0.0; 4]).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn layer_update_output_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = rms_normalize(
                &(0..6).map(|_| rng.gen::<f64>() - 0.5).collect::<Vec<_>>(),
                6,
            )
            .unwrap();
            let f: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() - 0.5).collect();
            let y = transformer_layer_update(&x, &f).unwrap();
            assert!((norm(&y) - 6.0_f64.sqrt()).abs() <= 1e-10);
        }
    }

    #[test]
    fn layer_update_matches_spherical_euler_step() {
        // A single-component directional flow and a transformer layer with
        // the same absorbed field produce identical unit-sphere states.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let h = 0.05;
        let u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let theta: Vec<f64> = u.iter().cloned().chain([1.3]).collect();
        let m = FlowModel::new(
            Family::Vmf,
            d,
            1,
            1,
            h,
            PosteriorMode::Tied,
            vec![theta],
            vec![],
        )
        .unwrap();
        let x_unit: Vec<f64> = {
            let raw: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
            let n = norm(&raw);
            raw.iter().map(|v| v / n).collect()
        };
        let flow_step = m.euler_step(0, &x_unit, IntegrationMode::Spherical).unwrap();
        // Absorb h into the field and scale states to the sqrt(d) sphere.
        let sqrt_d = (d as f64).sqrt();
        let x_scaled: Vec<f64> = x_unit.iter().map(|v| v * sqrt_d).collect();
        let v = m.vector_field(0, &x_unit).unwrap();
        let f: Vec<f64> = v.iter().map(|vi| vi * h * sqrt_d).collect();
        let y = transformer_layer_update(&x_scaled, &f).unwrap();
        for i in 0..d {
            assert!((y[i] / sqrt_d - flow_step[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_states_stay_on_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 8;
        let model = ToyTransformer {
            dim: d,
            layers: vec![
                Layer::WindowAttention {
                    heads: vec![random_head(&mut rng, d, 0.5), random_head(&mut rng, d, 0.5)],
                    window: 3,
                },
                Layer::Slot(SlotAttention {
                    head: random_head(&mut rng, d, 0.5),
                    slots: (0..4 * d).map(|_| rng.gen::<f64>() - 0.5).collect(),
                    num_slots: 4,
                }),
            ],
            head: ClassifierHead::zeros(d, 5, true),
        };
        let x0: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                rms_normalize(
                    &(0..d).map(|_| rng.gen::<f64>() - 0.5).collect::<Vec<_>>(),
                    d,
                )
                .unwrap()
            })
            .collect();
        let fwd = model.forward(&x0, true).unwrap();
        assert_eq!(fwd.states.len(), 3);
        for layer_states in &fwd.states {
            for s in layer_states {
                assert!((norm(s) - (d as f64).sqrt()).abs() <= 1e-10);
            }
        }
        // Diagnostics exist for the attention layer with a full posterior
        // per head, and routing traces for the slot layer.
        let diags = fwd.diagnostics.as_ref().unwrap();
        assert_eq!(diags[0].len(), 10);
        assert_eq!(diags[0][5].len(), 2);
        assert_eq!(diags[0][5][0].posterior.len(), 4); // window 3 + self
        assert_eq!(fwd.routings[1].len(), 10);
        for q in &fwd.routings[1] {
            let s: f64 = q.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
