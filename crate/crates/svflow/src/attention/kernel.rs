//! The many-keys limit of attention: with keys drawn i.i.d. from a known
//! density, the discrete key posterior converges to the kernel-smoothed
//! posterior q(k|x) proportional to exp((QK k) . x) p_key(k), so
//! posterior-weighted sums of a test function approach a fixed integral at
//! the Monte Carlo rate 1/sqrt(N).

use super::{attention_posterior, AttentionHead};
use crate::error::{Error, Result};
use crate::linalg::{dot, matvec_t};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform key density on an axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyBox {
    pub lo: f64,
    pub hi: f64,
    pub dim: usize,
}

impl KeyBox {
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..self.dim)
                    .map(|_| self.lo + (self.hi - self.lo) * rng.gen::<f64>())
                    .collect()
            })
            .collect()
    }
}

/// The discrete side: sum_z f(k_z) q(z | x_q) over sampled keys.
pub fn empirical_attention_expectation(
    head: &AttentionHead,
    x_q: &[f64],
    keys: &[Vec<f64>],
    f: impl Fn(&[f64]) -> f64,
) -> Result<f64> {
    let q = attention_posterior(head, x_q, keys)?;
    Ok(keys
        .iter()
        .zip(q.probs())
        .map(|(k, &w)| w * f(k))
        .sum())
}

/// The continuous side: int f(k) psi(x_q, k) dk / int psi(x_q, k) dk over
/// the box with psi = exp((QK k) . x_q), by product Simpson quadrature with
/// `resolution` nodes per axis (made odd). Convergence is verified against
/// a refined grid; disagreement is reported as an error.
pub fn kernel_smoothed_expectation(
    head: &AttentionHead,
    x_q: &[f64],
    key_box: &KeyBox,
    f: impl Fn(&[f64]) -> f64 + Copy,
    resolution: usize,
) -> Result<f64> {
    if key_box.dim > 3 {
        return Err(Error::Config(
            "quadrature domain limited to dim <= 3".into(),
        ));
    }
    let coarse = simpson_ratio(head, x_q, key_box, f, resolution.max(5) | 1)?;
    let fine = simpson_ratio(head, x_q, key_box, f, (2 * resolution.max(5)) | 1)?;
    let scale = fine.abs().max(1.0);
    if (coarse - fine).abs() > 1e-6 * scale {
        return Err(Error::QuadratureNonConvergence(format!(
            "{coarse} vs {fine} at refined resolution"
        )));
    }
    Ok(fine)
}

fn simpson_weights(n: usize, step: f64) -> Vec<f64> {
    let mut w = vec![0.0; n];
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = if i == 0 || i == n - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        } * step
            / 3.0;
    }
    w
}

fn simpson_ratio(
    head: &AttentionHead,
    x_q: &[f64],
    key_box: &KeyBox,
    f: impl Fn(&[f64]) -> f64,
    n: usize,
) -> Result<f64> {
    let d = key_box.dim;
    let mut m = vec![0.0; head.dim];
    matvec_t(&head.qk, head.dim, head.dim, x_q, &mut m);
    let step = (key_box.hi - key_box.lo) / (n - 1) as f64;
    let w = simpson_weights(n, step);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut k = vec![0.0; d];
    let mut idx = vec![0usize; d];
    loop {
        let mut weight = 1.0;
        for a in 0..d {
            k[a] = key_box.lo + idx[a] as f64 * step;
            weight *= w[idx[a]];
        }
        let psi = dot(&m[..d], &k).exp();
        num += weight * psi * f(&k);
        den += weight * psi;
        // Advance the mixed-radix counter.
        let mut axis = 0;
        loop {
            if axis == d {
                return Ok(num / den);
            }
            idx[axis] += 1;
            if idx[axis] < n {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
    }
}

/// |discrete - continuous| for `n_keys` i.i.d. keys under one seed.
pub fn kernel_limit_error(
    head: &AttentionHead,
    x_q: &[f64],
    key_box: &KeyBox,
    f: impl Fn(&[f64]) -> f64 + Copy,
    n_keys: usize,
    resolution: usize,
    seed: u64,
) -> Result<f64> {
    let limit = kernel_smoothed_expectation(head, x_q, key_box, f, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = key_box.sample(&mut rng, n_keys);
    let emp = empirical_attention_expectation(head, x_q, &keys, f)?;
    Ok((emp - limit).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::linear_fit_slope;

    fn test_head(dim: usize) -> AttentionHead {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        AttentionHead {
            qk: (0..dim * dim).map(|_| rng.gen::<f64>() - 0.5).collect(),
            ov: vec![0.0; dim * dim],
            dim,
        }
    }

    #[test]
    fn constant_test_function_has_zero_error() {
        let head = test_head(3);
        let key_box = KeyBox {
            lo: -1.0,
            hi: 1.0,
            dim: 3,
        };
        let x = [0.4, -0.2, 0.7];
        let err =
            kernel_limit_error(&head, &x, &key_box, |_| 3.25, 128, 21, 5).unwrap();
        assert!(err <= 1e-12, "constant-f error {err}");
    }

    #[test]
    fn error_shrinks_with_more_keys() {
        let head = test_head(3);
        let key_box = KeyBox {
            lo: -1.0,
            hi: 1.0,
            dim: 3,
        };
        let x = [0.4, -0.2, 0.7];
        let f = |k: &[f64]| (k[0] - 0.3 * k[1]).tanh() + 0.5 * k[2];
        let limit = kernel_smoothed_expectation(&head, &x, &key_box, f, 33).unwrap();
        let mut wins = 0;
        let seeds = 40u64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let few = key_box.sample(&mut rng, 64);
            let many = key_box.sample(&mut rng, 4096);
            let e_few =
                (empirical_attention_expectation(&head, &x, &few, f).unwrap() - limit).abs();
            let e_many =
                (empirical_attention_expectation(&head, &x, &many, f).unwrap() - limit).abs();
            if e_many < e_few {
                wins += 1;
            }
        }
        assert!(
            wins as f64 >= 0.9 * seeds as f64,
            "error shrank on only {wins}/{seeds} seeds"
        );
    }

    #[test]
    fn monte_carlo_rate_is_half_order() {
        let head = test_head(3);
        let key_box = KeyBox {
            lo: -1.0,
            hi: 1.0,
            dim: 3,
        };
        let x = [0.4, -0.2, 0.7];
        let f = |k: &[f64]| (k[0] - 0.3 * k[1]).tanh() + 0.5 * k[2];
        let limit = kernel_smoothed_expectation(&head, &x, &key_box, f, 33).unwrap();
        let ns = [64usize, 256, 1024, 4096];
        let seeds = 40u64;
        let (mut lx, mut ly) = (Vec::new(), Vec::new());
        for &n in &ns {
            let mut mean_err = 0.0;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let keys = key_box.sample(&mut rng, n);
                mean_err += (empirical_attention_expectation(&head, &x, &keys, f).unwrap()
                    - limit)
                    .abs();
            }
            mean_err /= seeds as f64;
            lx.push((n as f64).ln());
            ly.push(mean_err.ln());
        }
        let slope = linear_fit_slope(&lx, &ly);
        assert!(
            (-0.65..=-0.35).contains(&slope),
            "Monte Carlo slope {slope}"
        );
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
}
