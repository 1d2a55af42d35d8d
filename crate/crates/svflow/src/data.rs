//! Dataset generators: two-moons, labeled spherical clusters, synthetic
//! token sequences with a bounded-window majority target, and the
//! prefix-shuffling perturbation. Everything is deterministic under a seed.

use crate::error::{Error, Result};
use crate::linalg::norm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Points with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoints {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// One token sequence. Targets are computed at generation time from the
/// original token order; shuffling moves whole records (token, original
/// index, target) so the original prefix is recoverable by sorting on
/// `orig_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub orig_index: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A corpus of sequences over a shared unit-vector embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceCorpus {
    pub vocab: usize,
    pub dim: usize,
    /// Row-major vocab x dim unit embeddings.
    pub embeddings: Vec<f64>,
    pub window: usize,
    pub sequences: Vec<TokenSequence>,
}

impl SequenceCorpus {
    pub fn embedding(&self, token: usize) -> &[f64] {
        &self.embeddings[token * self.dim..(token + 1) * self.dim]
    }

    /// JSON-lines serialization: a header object, then one sequence per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = serde_json::json!({
            "vocab": self.vocab,
            "dim": self.dim,
            "window": self.window,
            "embeddings": self.embeddings,
        });
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for seq in &self.sequences {
            out.push_str(&serde_json::to_string(seq)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::EmptyInput("jsonl corpus".into()))?,
        )?;
        let vocab = header["vocab"]
            .as_u64()
            .ok_or_else(|| Error::Config("missing vocab".into()))? as usize;
        let dim = header["dim"]
            .as_u64()
            .ok_or_else(|| Error::Config("missing dim".into()))? as usize;
        let window = header["window"]
            .as_u64()
            .ok_or_else(|| Error::Config("missing window".into()))? as usize;
        let embeddings: Vec<f64> = serde_json::from_value(header["embeddings"].clone())?;
        if embeddings.len() != vocab * dim {
            return Err(Error::Config("embedding table size mismatch".into()));
        }
        let sequences: Vec<TokenSequence> = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            vocab,
            dim,
            embeddings,
            window,
            sequences,
        })
    }
}

/// Two interleaved half-circles with Gaussian noise, the standard two-arc
/// construction: upper arc (cos t, sin t), lower arc (1 - cos t, 0.5 - sin t)
/// for t on a uniform grid over [0, pi]. Classes are balanced to within one.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<LabeledPoints> {
    if n < 2 {
        return Err(Error::Config(format!("need n >= 2 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_upper = n / 2 + n % 2;
    let n_lower = n / 2;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let grid = |i: usize, count: usize| -> f64 {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    for i in 0..n_upper {
        let t = grid(i, n_upper);
        let mut p = vec![t.cos(), t.sin()];
        for c in p.iter_mut() {
            *c += noise * rng.sample::<f64, _>(StandardNormal);
        }
        points.push(p);
        labels.push(0);
    }
    for i in 0..n_lower {
        let t = grid(i, n_lower);
        let mut p = vec![1.0 - t.cos(), 0.5 - t.sin()];
        for c in p.iter_mut() {
            *c += noise * rng.sample::<f64, _>(StandardNormal);
        }
        points.push(p);
        labels.push(1);
    }
    Ok(LabeledPoints { points, labels })
}

/// Labeled clusters on the unit sphere: cluster directions drawn uniformly,
/// points perturbed by tangent-scale Gaussian noise with standard deviation
/// `1/sqrt(kappa)` and renormalized. `kappa` plays the role of a
/// concentration; larger values give tighter clusters.
pub fn make_spherical_clusters(
    n: usize,
    dim: usize,
    num_clusters: usize,
    kappa: f64,
    seed: u64,
) -> Result<LabeledPoints> {
    if dim < 2 {
        return Err(Error::Config("need dim >= 2".into()));
    }
    if num_clusters == 0 || n < num_clusters {
        return Err(Error::Config("need at least one point per cluster".into()));
    }
    if !(kappa > 0.0) {
        return Err(Error::Config("kappa must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(num_clusters);
    for _ in 0..num_clusters {
        loop {
            let c: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let cn = norm(&c);
            if cn > 1e-6 {
                centers.push(c.iter().map(|v| v / cn).collect::<Vec<f64>>());
                break;
            }
        }
    }
    let sigma = 1.0 / kappa.sqrt();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % num_clusters;
        let mut p: Vec<f64> = centers[k]
            .iter()
            .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pn = norm(&p);
        p.iter_mut().for_each(|v| *v /= pn);
        points.push(p);
        labels.push(k);
    }
    Ok(LabeledPoints { points, labels })
}

/// Majority token id over the `window` positions before `pos`, ties broken
/// toward the lowest id; position 0 targets its own token.
fn majority_target(tokens: &[usize], pos: usize, window: usize, vocab: usize) -> usize {
    if pos == 0 {
        return tokens[0];
    }
    let lo = pos.saturating_sub(window);
    let mut counts = vec![0usize; vocab];
    for &t in &tokens[lo..pos] {
        counts[t] += 1;
    }
    let mut best = 0usize;
    for (id, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = id;
        }
    }
    best
}

/// Synthetic sequence-prediction corpus: random unit embeddings, tokens
/// drawn from a sticky Markov stream (runs of repeated symbols), and a
/// per-position target equal to the majority token over the previous
/// `window` positions. Shuffling the prefix corrupts exactly this
/// deep-context relationship.
pub fn make_sequence_task(
    vocab: usize,
    num_sequences: usize,
    seq_len: usize,
    dim: usize,
    window: usize,
    seed: u64,
) -> Result<SequenceCorpus> {
    if vocab < 2 {
        return Err(Error::Config("need vocab >= 2".into()));
    }
    if dim < 4 {
        return Err(Error::Config("need dim >= 4".into()));
    }
    if window == 0 || seq_len == 0 || num_sequences == 0 {
        return Err(Error::Config("empty sequence task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embeddings = vec![0.0; vocab * dim];
    for t in 0..vocab {
        loop {
            let v: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let n = norm(&v);
            if n > 1e-6 {
                for i in 0..dim {
                    embeddings[t * dim + i] = v[i] / n;
                }
                break;
            }
        }
    }
    let mut sequences = Vec::with_capacity(num_sequences);
    for _ in 0..num_sequences {
        let mut tokens = Vec::with_capacity(seq_len);
        let mut cur = rng.gen_range(0..vocab);
        for _ in 0..seq_len {
            // Sticky stream: repeat with probability 0.7, else resample.
            if rng.gen::<f64>() > 0.7 {
                cur = rng.gen_range(0..vocab);
            }
            tokens.push(cur);
        }
        let targets = (0..seq_len)
            .map(|p| majority_target(&tokens, p, window, vocab))
            .collect();
        sequences.push(TokenSequence {
            tokens,
            targets,
            orig_index: (0..seq_len).collect(),
        });
    }
    Ok(SequenceCorpus {
        vocab,
        dim,
        embeddings,
        window,
        sequences,
    })
}

/// Permute the first floor(p*N) records of the sequence by a seeded uniform
/// permutation; the suffix is untouched. Records move whole: token, target,
/// original index. p = 0 is the identity.
pub fn prefix_shuffle(seq: &TokenSequence, p: f64, seed: u64) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("shuffle proportion {p} outside [0, 1]")));
    }
    let n = seq.len();
    let m = (p * n as f64).floor() as usize;
    let mut out = seq.clone();
    if m <= 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over the prefix.
    for i in (1..m).rev() {
        let j = rng.gen_range(0..=i);
        out.tokens.swap(i, j);
        out.targets.swap(i, j);
        out.orig_index.swap(i, j);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_noise_free_points_lie_on_arcs() {
        let d = make_moons(101, 0.0, 7).unwrap();
        for (p, &l) in d.points.iter().zip(&d.labels) {
            let dist = if l == 0 {
                // Distance to the unit circle, restricted to the upper arc.
                ((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs()
            } else {
                let (cx, cy) = (1.0, 0.5);
                ((((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()) - 1.0).abs()
            };
            assert!(dist <= 1e-12, "point {p:?} off arc by {dist}");
        }
    }

    #[test]
    fn moons_deterministic_and_balanced() {
        let a = make_moons(257, 0.06, 42).unwrap();
        let b = make_moons(257, 0.06, 42).unwrap();
        assert_eq!(a, b);
        let n0 = a.labels.iter().filter(|&&l| l == 0).count();
        let n1 = a.labels.len() - n0;
        assert!(n0.abs_diff(n1) <= 1);
        assert!(make_moons(1, 0.1, 0).is_err());
    }

    #[test]
    fn spherical_clusters_unit_norm_and_concentrated() {
        let d = make_spherical_clusters(200, 8, 4, 20.0, 3).unwrap();
        for p in &d.points {
            assert!((norm(p) - 1.0).abs() <= 1e-12);
        }
        // Same-cluster points are closer to their center than to others on
        // average at kappa = 20.
        let d2 = make_spherical_clusters(200, 8, 4, 20.0, 3).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn sequence_task_copy_when_window_one() {
        let c = make_sequence_task(6, 3, 40, 8, 1, 11).unwrap();
        for seq in &c.sequences {
            for p in 1..seq.len() {
                assert_eq!(seq.targets[p], seq.tokens[p - 1]);
            }
        }
    }

    #[test]
    fn sequence_task_regeneration_identical() {
        let a = make_sequence_task(10, 5, 64, 16, 8, 123).unwrap();
        let b = make_sequence_task(10, 5, 64, 16, 8, 123).unwrap();
        assert_eq!(a, b);
        for t in 0..10 {
            assert!((norm(a.embedding(t)) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn shuffle_within_constant_run_keeps_targets() {
        // All-same tokens: any permutation leaves the majority unchanged.
        let seq = TokenSequence {
            tokens: vec![3; 20],
            targets: vec![3; 20],
            orig_index: (0..20).collect(),
        };
        let sh = prefix_shuffle(&seq, 0.8, 5).unwrap();
        assert_eq!(sh.tokens, seq.tokens);
        assert_eq!(sh.targets, seq.targets);
    }

    #[test]
    fn prefix_shuffle_identity_at_zero() {
        let c = make_sequence_task(6, 1, 30, 8, 4, 17).unwrap();
        let seq = &c.sequences[0];
        assert_eq!(&prefix_shuffle(seq, 0.0, 9).unwrap(), seq);
    }

    #[test]
    fn prefix_shuffle_deterministic_and_suffix_fixed() {
        let c = make_sequence_task(6, 1, 30, 8, 4, 19).unwrap();
        let seq = &c.sequences[0];
        let a = prefix_shuffle(seq, 0.5, 77).unwrap();
        let b = prefix_shuffle(seq, 0.5, 77).unwrap();
        assert_eq!(a, b);
        // Suffix untouched: floor(0.5 * 30) = 15.
        assert_eq!(&a.tokens[15..], &seq.tokens[15..]);
        assert_eq!(&a.orig_index[15..], &seq.orig_index[15..]);
        // p = 1 with tiny sequence: a specific, reproducible permutation.
        let tiny = TokenSequence {
            tokens: vec![0, 1, 2],
            targets: vec![0, 0, 1],
            orig_index: vec![0, 1, 2],
        };
        let s1 = prefix_shuffle(&tiny, 1.0, 4).unwrap();
        let s2 = prefix_shuffle(&tiny, 1.0, 4).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn prefix_shuffle_preserves_multiset_and_recovers_by_sort() {
        let c = make_sequence_task(8, 1, 50, 8, 4, 23).unwrap();
        let seq = &c.sequences[0];
        let sh = prefix_shuffle(seq, 0.7, 31).unwrap();
        let mut a = seq.tokens.clone();
        let mut b = sh.tokens.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        // Sorting records by original index recovers the original prefix.
        let mut records: Vec<(usize, usize, usize)> = sh
            .orig_index
            .iter()
            .zip(&sh.tokens)
            .zip(&sh.targets)
            .map(|((&oi, &t), &tg)| (oi, t, tg))
            .collect();
        records.sort_unstable_by_key(|r| r.0);
        let recovered: Vec<usize> = records.iter().map(|r| r.1).collect();
        assert_eq!(recovered, seq.tokens);
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let c = make_sequence_task(6, 4, 20, 8, 4, 29).unwrap();
        let s = c.to_jsonl().unwrap();
        let back = SequenceCorpus::from_jsonl(&s).unwrap();
        assert_eq!(c, back);
    }
}
