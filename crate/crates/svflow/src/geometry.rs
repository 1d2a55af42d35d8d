//! Spherical-manifold primitives: tangent projection, exponential map,
//! retraction, and the RMS normalization used by transformer-style updates.
//!
//! Points on the unit sphere are plain `&[f64]` slices with `|x| = 1`;
//! tangent vectors at `x` satisfy `x . v = 0`. Preconditions are checked
//! against the module tolerances below and reported as errors.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Tolerance on `| |x| - 1 |` for spherical points.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Tolerance on `x . v` for tangent vectors.
pub const TANGENT_TOL: f64 = 1e-10;
/// Norms below this are treated as degenerate.
pub const DEGENERATE_NORM_TOL: f64 = 1e-12;

/// Check `|x| = 1` within `tol`.
pub fn check_unit(x: &[f64], tol: f64) -> Result<()> {
    let n = norm(x);
    if !n.is_finite() {
        return Err(Error::NonFinite("point norm".into()));
    }
    if (n - 1.0).abs() > tol {
        return Err(Error::Precondition(format!(
            "point is not unit norm: |x| = {n}"
        )));
    }
    Ok(())
}

/// Check `x . v = 0` within `tol * (1 + |v|)`.
pub fn check_tangent(x: &[f64], v: &[f64], tol: f64) -> Result<()> {
    if x.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: v.len(),
        });
    }
    let ip = dot(x, v);
    if ip.abs() > tol * (1.0 + norm(v)) {
        return Err(Error::Precondition(format!(
            "vector is not tangent: x.v = {ip}"
        )));
    }
    Ok(())
}

/// Orthogonal projection `(I - x x^T) v` onto the tangent space at `x`.
pub fn tangent_project(x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_unit(x, UNIT_NORM_TOL)?;
    if x.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: v.len(),
        });
    }
    let ip = dot(x, v);
    Ok(v.iter().zip(x).map(|(vi, xi)| vi - ip * xi).collect())
}

/// Geodesic step `cos(|v|) x + sin(|v|) v/|v|`.
///
/// `|v| < DEGENERATE_NORM_TOL` returns `x` unchanged (removable singularity
/// of `sin(|v|)/|v|`).
pub fn exp_map(x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_unit(x, UNIT_NORM_TOL)?;
    check_tangent(x, v, TANGENT_TOL)?;
    let t = norm(v);
    if t < DEGENERATE_NORM_TOL {
        return Ok(x.to_vec());
    }
    let (c, s) = (t.cos(), t.sin() / t);
    Ok(x.iter().zip(v).map(|(xi, vi)| c * xi + s * vi).collect())
}

/// First-order retraction `(x + v) / |x + v|`.
///
/// For tangent `v` the denominator is `sqrt(1 + |v|^2) >= 1`; the degenerate
/// guard only fires for raw non-tangent inputs.
pub fn retract(x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_unit(x, UNIT_NORM_TOL)?;
    if x.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: v.len(),
        });
    }
    let sum: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + b).collect();
    let n = norm(&sum);
    if n < DEGENERATE_NORM_TOL {
        return Err(Error::DegenerateInput(
            "retraction of x + v with vanishing norm".into(),
        ));
    }
    Ok(sum.iter().map(|s| s / n).collect())
}

/// Projection onto the sphere of radius `sqrt(d)`: `sqrt(d) * x / |x|`.
pub fn rms_normalize(x: &[f64], d: usize) -> Result<Vec<f64>> {
    let n = norm(x);
    if n < DEGENERATE_NORM_TOL {
        return Err(Error::DegenerateInput("rms_normalize of zero vector".into()));
    }
    let s = (d as f64).sqrt() / n;
    Ok(x.iter().map(|xi| xi * s).collect())
}

/// `| rms_normalize(x + v, d)/sqrt(d) - retract(x, (I - xx^T) v) |`.
///
/// Measures how far the residual-plus-normalization update is from the
/// strict retraction of the tangent part of `v`; second order in `|v|`.
pub fn relaxed_retraction_residual(x: &[f64], v: &[f64]) -> Result<f64> {
    check_unit(x, UNIT_NORM_TOL)?;
    let d = x.len();
    let sum: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + b).collect();
    let relaxed = rms_normalize(&sum, d)?;
    let strict = retract(x, &tangent_project(x, v)?)?;
    let sqrt_d = (d as f64).sqrt();
    let mut acc = 0.0;
    for (r, s) in relaxed.iter().zip(&strict) {
        let diff = r / sqrt_d - s;
        acc += diff * diff;
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::linear_fit_slope;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let n = norm(&v);
            if n > 0.1 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    #[test]
    fn project_orthogonal_vector_is_identity() {
        let p = tangent_project(&e(0, 3), &e(1, 3)).unwrap();
        assert_eq!(p, e(1, 3));
    }

    #[test]
    fn project_parallel_vector_is_zero() {
        let p = tangent_project(&e(0, 3), &e(0, 3)).unwrap();
        assert!(norm(&p) < 1e-15);
    }

    #[test]
    fn project_2d_example() {
        let p = tangent_project(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((p[0] - 0.0).abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn project_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = random_unit(&mut rng, 5);
            let v: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let p1 = tangent_project(&x, &v).unwrap();
            let p2 = tangent_project(&x, &p1).unwrap();
            for (a, b) in p1.iter().zip(&p2) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn exp_map_zero_step_returns_x() {
        let x = e(0, 3);
        assert_eq!(exp_map(&x, &[0.0; 3]).unwrap(), x);
    }

    #[test]
    fn exp_map_quarter_circle() {
        let v = [0.0, std::f64::consts::FRAC_PI_2, 0.0];
        let y = exp_map(&e(0, 3), &v).unwrap();
        for (a, b) in y.iter().zip(&e(1, 3)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_map_antipode() {
        let v = [0.0, std::f64::consts::PI, 0.0];
        let y = exp_map(&e(0, 3), &v).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);
    }

    #[test]
    fn exp_map_rejects_non_tangent() {
        assert!(exp_map(&e(0, 3), &[0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn exp_and_retract_outputs_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = random_unit(&mut rng, 4);
            let raw: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
            let v = tangent_project(&x, &raw).unwrap();
            let a = exp_map(&x, &v).unwrap();
            let b = retract(&x, &v).unwrap();
            assert!((norm(&a) - 1.0).abs() <= UNIT_NORM_TOL);
            assert!((norm(&b) - 1.0).abs() <= UNIT_NORM_TOL);
        }
    }

    #[test]
    fn retract_45_degrees() {
        let y = retract(&e(0, 3), &e(1, 3)).unwrap();
        let s = 1.0 / 2.0_f64.sqrt();
        assert!((y[0] - s).abs() < 1e-15 && (y[1] - s).abs() < 1e-15);
    }

    #[test]
    fn retract_tracks_exp_map_to_second_order() {
        // The gap is measured against the exp_map oracle over four decades.
        // For tangent v the leading term is cubic, so the O(|v|^2) bound holds
        // with margin and the fitted slope sits near 3 rather than 2.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scales = [1e-1, 1e-2, 1e-3, 1e-4];
        let mut slopes = Vec::new();
        for _ in 0..10 {
            let x = random_unit(&mut rng, 4);
            let raw: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
            let dir = tangent_project(&x, &raw).unwrap();
            let n = norm(&dir);
            let dir: Vec<f64> = dir.iter().map(|d| d / n).collect();
            let (mut lx, mut ly) = (Vec::new(), Vec::new());
            for &s in &scales {
                let v: Vec<f64> = dir.iter().map(|d| d * s).collect();
                let r = retract(&x, &v).unwrap();
                let g = exp_map(&x, &v).unwrap();
                let diff: f64 = r
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(diff <= s * s, "second-order bound violated: {diff} at scale {s}");
                lx.push(s.ln());
                ly.push(diff.ln());
            }
            slopes.push(linear_fit_slope(&lx, &ly));
        }
        let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
        assert!(
            (2.7..=3.3).contains(&mean),
            "retract-vs-exp order off: slope {mean}"
        );
    }

    #[test]
    fn rms_normalize_examples() {
        let a = rms_normalize(&[2.0, 0.0, 0.0, 0.0], 4).unwrap();
        assert_eq!(a, vec![2.0, 0.0, 0.0, 0.0]);
        let b = rms_normalize(&[-3.0], 1).unwrap();
        assert!((b[0] + 1.0).abs() < 1e-15);
        let c = rms_normalize(&[3.0, 4.0], 2).unwrap();
        let s = 2.0_f64.sqrt() / 5.0;
        assert!((c[0] - 3.0 * s).abs() < 1e-15 && (c[1] - 4.0 * s).abs() < 1e-15);
    }

    #[test]
    fn rms_normalize_rejects_zero() {
        assert!(rms_normalize(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn rms_normalize_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() - 0.5).collect();
            let c = rng.gen::<f64>() * 10.0 + 0.01;
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let a = rms_normalize(&x, 6).unwrap();
            let b = rms_normalize(&xs, 6).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relaxed_residual_zero_step() {
        let x = e(0, 4);
        assert!(relaxed_retraction_residual(&x, &[0.0; 4]).unwrap() < 1e-15);
    }

    #[test]
    fn relaxed_residual_tangent_small_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_unit(&mut rng, 4);
        let raw: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
        let t = tangent_project(&x, &raw).unwrap();
        let n = norm(&t);
        let v: Vec<f64> = t.iter().map(|ti| ti / n * 1e-4).collect();
        assert!(relaxed_retraction_residual(&x, &v).unwrap() <= 1e-7);
    }

    #[test]
    fn relaxed_residual_second_order_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut slopes = Vec::new();
        for _ in 0..10 {
            let x = random_unit(&mut rng, 4);
            let base: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
            let (mut lx, mut ly) = (Vec::new(), Vec::new());
            let mut s = 1e-1;
            while s >= 1e-4 {
                let v: Vec<f64> = base.iter().map(|b| b * s).collect();
                let r = relaxed_retraction_residual(&x, &v).unwrap();
                lx.push(s.ln());
                ly.push(r.ln());
                s *= 0.5;
            }
            slopes.push(linear_fit_slope(&lx, &ly));
        }
        let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
        assert!((1.9..=2.1).contains(&mean), "relaxed residual slope {mean}");
    }
}
