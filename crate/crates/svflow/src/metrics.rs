//! Diagnostic metrics per evaluation point: marginal negative log-likelihood,
//! variational divergence and concentrations, calibration (ECE), log
//! perplexity, prefix-shuffle-rate binning, and layer-depth aggregation.

use crate::distributions::{categorical_kl, kl_to_uniform, ProbVector};
use crate::error::{Error, Result};
use crate::linalg::logsumexp;
use serde::{Deserialize, Serialize};

/// Tolerance for the two computation routes of the marginal.
pub const IDENTITY_TOL: f64 = 1e-9;

/// Per-evaluation-point record. `neg_log_p` is in nats per dimension; the
/// KL values are raw nats (possibly `f64::INFINITY`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenMetrics {
    pub neg_log_p: f64,
    pub kl_qp: f64,
    pub kl_qu: f64,
    pub kl_pu: f64,
}

/// Index of the shuffle-rate bin: (0, .25], (.25, .5], (.5, .75], (.75, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShuffleBin(pub usize);

pub const NUM_SHUFFLE_BINS: usize = 4;

impl ShuffleBin {
    /// Human-readable interval label.
    pub fn label(&self) -> &'static str {
        ["0.00-0.25", "0.25-0.50", "0.50-0.75", "0.75-1.00"][self.0]
    }
}

/// Outcome of the shuffle-rate computation for one token position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShuffleRate {
    /// Position inside the fully shuffled prefix; excluded from bins.
    Excluded,
    /// Baseline (p = 0).
    Baseline,
    /// Rate in (0, 1) with its bin.
    Rate(f64, ShuffleBin),
}

/// Calibration and perplexity summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Expected calibration error in percent.
    pub ece: f64,
    /// Mean per-token negative log-likelihood in nats.
    pub log_ppl: f64,
    /// Sample count per confidence bin.
    pub bin_counts: Vec<usize>,
}

/// Metrics from a posterior and the per-component conditional log-densities.
///
/// The marginal is computed by log-sum-exp under the uniform prior and
/// cross-checked against the bound-plus-gap route (ELBO + KL(q || p)); a
/// disagreement beyond `IDENTITY_TOL` is reported as an error.
pub fn svflow_metrics(q: &ProbVector, cond_log_densities: &[f64], d: usize) -> Result<TokenMetrics> {
    let zn = q.len();
    if cond_log_densities.len() != zn {
        return Err(Error::DimensionMismatch {
            expected: zn,
            got: cond_log_densities.len(),
        });
    }
    if d == 0 {
        return Err(Error::Config("dimension must be positive".into()));
    }
    let log_z = (zn as f64).ln();
    let marginal = logsumexp(cond_log_densities) - log_z;

    let mut p_raw = vec![0.0; zn];
    crate::linalg::softmax_into(cond_log_densities, &mut p_raw);
    let p = ProbVector::new(p_raw)?;
    let kl_qp = categorical_kl(q, &p)?;

    // Identity route: ELBO + KL(q || p).
    let elbo = {
        let mut acc = 0.0;
        for (&qi, &c) in q.probs().iter().zip(cond_log_densities) {
            if qi > 0.0 {
                acc += qi * (c - qi.ln());
            }
        }
        acc - log_z
    };
    if kl_qp.is_finite() {
        let alt = elbo + kl_qp;
        if (alt - marginal).abs() > IDENTITY_TOL * marginal.abs().max(1.0) {
            return Err(Error::NonFinite(format!(
                "marginal identity mismatch: {marginal} vs {alt}"
            )));
        }
    }

    Ok(TokenMetrics {
        neg_log_p: -marginal / d as f64,
        kl_qp,
        kl_qu: kl_to_uniform(q),
        kl_pu: kl_to_uniform(&p),
    })
}

/// Expected calibration error in percent over equal-width confidence bins.
/// Boundary values fall into the lower bin, except 0 which goes to the first.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::EmptyInput("ece inputs".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch {
            expected: confidences.len(),
            got: correct.len(),
        });
    }
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Domain("confidences must lie in [0, 1]".into()));
    }
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = if c <= 0.0 {
            0
        } else {
            ((c * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1)
        };
        conf_sum[b] += c;
        acc_sum[b] += ok as usize as f64;
        count[b] += 1;
    }
    let n = confidences.len() as f64;
    let mut e = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        e += (nb / n) * ((acc_sum[b] / nb) - (conf_sum[b] / nb)).abs();
    }
    Ok(e * 100.0)
}

/// Log perplexity: arithmetic mean of per-token negative log-likelihoods.
pub fn log_ppl(per_token_nll: &[f64]) -> Result<f64> {
    if per_token_nll.is_empty() {
        return Err(Error::EmptyInput("per-token negative log-likelihoods".into()));
    }
    Ok(per_token_nll.iter().sum::<f64>() / per_token_nll.len() as f64)
}

/// Prefix shuffle rate r = min(1, floor(p N)/n) for the 1-indexed position
/// `n` of a length-`N` sequence shuffled with proportion `p`. Positions
/// inside the shuffled prefix are flagged excluded.
pub fn shuffle_rate(p: f64, seq_len: usize, position: usize) -> Result<ShuffleRate> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("proportion {p} outside [0, 1]")));
    }
    if position == 0 || position > seq_len {
        return Err(Error::Domain(format!(
            "position {position} outside 1..={seq_len}"
        )));
    }
    let m = (p * seq_len as f64).floor() as usize;
    if m == 0 {
        return Ok(ShuffleRate::Baseline);
    }
    if position <= m {
        return Ok(ShuffleRate::Excluded);
    }
    let r = (m as f64 / position as f64).min(1.0);
    let bin = if r <= 0.25 {
        0
    } else if r <= 0.5 {
        1
    } else if r <= 0.75 {
        2
    } else {
        3
    };
    Ok(ShuffleRate::Rate(r, ShuffleBin(bin)))
}

/// Arithmetic mean over the deepest ceil(fraction * L) layers.
pub fn aggregate_deep(layer_metrics: &[TokenMetrics], fraction: f64) -> Result<TokenMetrics> {
    if layer_metrics.is_empty() {
        return Err(Error::EmptyInput("layer metrics".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("fraction {fraction} outside (0, 1]")));
    }
    let l = layer_metrics.len();
    let take = ((fraction * l as f64).ceil() as usize).clamp(1, l);
    let slice = &layer_metrics[l - take..];
    let n = slice.len() as f64;
    Ok(TokenMetrics {
        neg_log_p: slice.iter().map(|m| m.neg_log_p).sum::<f64>() / n,
        kl_qp: slice.iter().map(|m| m.kl_qp).sum::<f64>() / n,
        kl_qu: slice.iter().map(|m| m.kl_qu).sum::<f64>() / n,
        kl_pu: slice.iter().map(|m| m.kl_pu).sum::<f64>() / n,
    })
}

/// Streaming mean of token metrics that skips non-finite KL values and
/// counts them as saturated.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sum: [f64; 4],
    count: [usize; 4],
    pub saturated: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, m: &TokenMetrics) {
        let vals = [m.neg_log_p, m.kl_qp, m.kl_qu, m.kl_pu];
        let mut any_saturated = false;
        for (i, v) in vals.into_iter().enumerate() {
            if v.is_finite() {
                self.sum[i] += v;
                self.count[i] += 1;
            } else {
                any_saturated = true;
            }
        }
        if any_saturated {
            self.saturated += 1;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count.iter().all(|&c| c == 0)
    }

    pub fn mean(&self) -> TokenMetrics {
        let m = |i: usize| {
            if self.count[i] == 0 {
                f64::NAN
            } else {
                self.sum[i] / self.count[i] as f64
            }
        };
        TokenMetrics {
            neg_log_p: m(0),
            kl_qp: m(1),
            kl_qu: m(2),
            kl_pu: m(3),
        }
    }
}

/// Spearman rank correlation with averaged ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::EmptyInput("need at least two points".into()));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if da == 0.0 || db == 0.0 {
        return Err(Error::DegenerateInput("constant ranking".into()));
    }
    Ok(num / (da * db).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("finite values"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metrics_uniform_case() {
        let q = ProbVector::uniform(4);
        let c = 2.5;
        let m = svflow_metrics(&q, &[c; 4], 8).unwrap();
        assert!((m.neg_log_p + c / 8.0).abs() <= 1e-12);
        assert!(m.kl_qp.abs() <= 1e-12);
        assert!(m.kl_qu.abs() <= 1e-12);
        assert!(m.kl_pu.abs() <= 1e-12);
    }

    #[test]
    fn metrics_single_component() {
        let q = ProbVector::new(vec![1.0]).unwrap();
        let m = svflow_metrics(&q, &[-3.0], 4).unwrap();
        assert!((m.neg_log_p - 3.0 / 4.0).abs() <= 1e-12);
        assert_eq!(m.kl_qp, 0.0);
        assert_eq!(m.kl_qu, 0.0);
    }

    #[test]
    fn metrics_routes_agree_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let zn = rng.gen_range(2..12);
            let q = softmax(&(0..zn).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect::<Vec<_>>())
                .unwrap();
            let cld: Vec<f64> = (0..zn).map(|_| rng.gen::<f64>() * 10.0 - 8.0).collect();
            // svflow_metrics errors out if the two routes disagree.
            let m = svflow_metrics(&q, &cld, 3).unwrap();
            assert!(m.kl_qp >= 0.0 && m.kl_qu >= 0.0 && m.kl_pu >= 0.0);
        }
    }

    #[test]
    fn ece_perfect_predictions() {
        let conf = vec![1.0; 100];
        let correct = vec![true; 100];
        assert_eq!(ece(&conf, &correct, 15).unwrap(), 0.0);
    }

    #[test]
    fn ece_half_correct_at_full_confidence() {
        let conf = vec![1.0; 100];
        let correct: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        assert!((ece(&conf, &correct, 15).unwrap() - 50.0).abs() <= 1e-12);
    }

    #[test]
    fn ece_calibrated_sampler_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 100_000;
        let mut conf = Vec::with_capacity(n);
        let mut correct = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.gen::<f64>();
            conf.push(c);
            correct.push(rng.gen::<f64>() < c);
        }
        let e = ece(&conf, &correct, 15).unwrap();
        assert!(e <= 0.5, "calibrated ECE {e}%");
    }

    #[test]
    fn ece_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conf: Vec<f64> = (0..500).map(|_| rng.gen()).collect();
        let correct: Vec<bool> = (0..500).map(|_| rng.gen()).collect();
        let a = ece(&conf, &correct, 15).unwrap();
        let mut order: Vec<usize> = (0..500).collect();
        for i in (1..500).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let pc: Vec<f64> = order.iter().map(|&i| conf[i]).collect();
        let pk: Vec<bool> = order.iter().map(|&i| correct[i]).collect();
        let b = ece(&pc, &pk, 15).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn ece_boundary_assignment() {
        // 1/15 sits on the first boundary and stays in bin 0; zero also
        // lands in the first bin.
        let e = ece(&[0.0, 1.0 / 15.0], &[false, false], 15).unwrap();
        assert!((e - (1.0 / 30.0) * 100.0).abs() <= 1e-9);
    }

    #[test]
    fn log_ppl_examples() {
        assert_eq!(log_ppl(&[2.5]).unwrap(), 2.5);
        let v = 7.0_f64.ln();
        assert!((log_ppl(&[v; 10]).unwrap() - v).abs() <= 1e-12);
        // exp(mean of logs) is the geometric mean of per-token perplexities.
        let nll = [1.0_f64, 2.0, 3.0];
        let geo = (nll.iter().map(|x| x.exp()).product::<f64>()).powf(1.0 / 3.0);
        assert!((log_ppl(&nll).unwrap().exp() - geo).abs() <= 1e-12);
        assert!(log_ppl(&[]).is_err());
    }

    #[test]
    fn shuffle_rate_examples() {
        assert_eq!(shuffle_rate(0.0, 100, 50).unwrap(), ShuffleRate::Baseline);
        match shuffle_rate(0.4, 100, 50).unwrap() {
            ShuffleRate::Rate(r, bin) => {
                assert!((r - 0.8).abs() <= 1e-12);
                assert_eq!(bin, ShuffleBin(3));
            }
            other => panic!("unexpected {other:?}"),
        }
        // Position equal to the shuffled prefix length is excluded.
        assert_eq!(shuffle_rate(0.4, 100, 40).unwrap(), ShuffleRate::Excluded);
        assert!(shuffle_rate(0.4, 100, 0).is_err());
        assert!(shuffle_rate(0.4, 100, 101).is_err());
    }

    #[test]
    fn shuffle_rate_bins_cover_open_interval() {
        for n in 41..=100usize {
            match shuffle_rate(0.4, 100, n).unwrap() {
                ShuffleRate::Rate(r, ShuffleBin(b)) => {
                    assert!(r > 0.0 && r < 1.0);
                    assert!(b < NUM_SHUFFLE_BINS);
                }
                other => panic!("position {n}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn aggregate_deep_examples() {
        let mk = |v: f64| TokenMetrics {
            neg_log_p: v,
            kl_qp: 2.0 * v,
            kl_qu: 0.0,
            kl_pu: 0.0,
        };
        let single = [mk(3.0)];
        assert_eq!(aggregate_deep(&single, 1.0 / 3.0).unwrap(), mk(3.0));
        // 24 layers with fraction 1/3 averages the last 8.
        let layers: Vec<TokenMetrics> = (0..24).map(|i| mk(i as f64)).collect();
        let got = aggregate_deep(&layers, 1.0 / 3.0).unwrap();
        let want = (16..24).sum::<usize>() as f64 / 8.0;
        assert!((got.neg_log_p - want).abs() <= 1e-12);
        // Fraction 1 is the full-layer mean.
        let full = aggregate_deep(&layers, 1.0).unwrap();
        assert!((full.neg_log_p - 11.5).abs() <= 1e-12);
    }

    #[test]
    fn accumulator_skips_saturated_values() {
        let mut acc = MetricAccumulator::new();
        acc.add(&TokenMetrics {
            neg_log_p: 1.0,
            kl_qp: 2.0,
            kl_qu: 0.5,
            kl_pu: 0.5,
        });
        acc.add(&TokenMetrics {
            neg_log_p: 3.0,
            kl_qp: f64::INFINITY,
            kl_qu: 0.5,
            kl_pu: 0.5,
        });
        assert_eq!(acc.saturated, 1);
        let m = acc.mean();
        assert!((m.neg_log_p - 2.0).abs() <= 1e-12);
        assert!((m.kl_qp - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn spearman_known_rankings() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() <= 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() <= 1e-12);
        // Ties averaged: the pair (2, 2) shares rank 2.5.
        let t = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(t > 0.9 && t < 1.0);
    }

    #[test]
    fn concentration_divergence_dichotomy() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let zn = rng.gen_range(4..32);
            // Near-uniform pairs stay tightly bounded.
            let qa = softmax(&(0..zn).map(|_| 0.02 * (rng.gen::<f64>() - 0.5)).collect::<Vec<_>>())
                .unwrap();
            let pa = softmax(&(0..zn).map(|_| 0.02 * (rng.gen::<f64>() - 0.5)).collect::<Vec<_>>())
                .unwrap();
            assert!(kl_to_uniform(&qa) <= 1e-3 && kl_to_uniform(&pa) <= 1e-3);
            assert!(categorical_kl(&qa, &pa).unwrap() <= 0.1);
            // Concentrated pairs on disjoint components blow up.
            let spread = 1e-7;
            let mut ql = vec![spread; zn];
            let mut pl = vec![spread; zn];
            ql[0] = 1.0 - spread * (zn - 1) as f64;
            pl[1] = 1.0 - spread * (zn - 1) as f64;
            pl[0] = spread;
            ql[1] = spread;
            let q = ProbVector::new(ql).unwrap();
            let p = ProbVector::new(pl).unwrap();
            assert!(categorical_kl(&q, &p).unwrap() > 10.0);
        }
    }
}
