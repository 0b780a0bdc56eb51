use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::scalar::Scalar;

/// One Laplace(0, scale) draw by inverse CDF.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let tail = 1.0 - 2.0 * u.abs();
        if tail > 0.0 {
            return -scale * u.signum() * tail.ln();
        }
    }
}

/// Matrix of i.i.d. Laplace(0, scale) draws, fully determined by `seed`.
pub fn laplace_noise<T: Scalar>(rows: usize, cols: usize, scale: f64, seed: u64) -> Result<Matrix<T>> {
    let mut rng = rng_from(seed);
    laplace_noise_with(rows, cols, scale, &mut rng)
}

pub fn laplace_noise_with<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut R,
) -> Result<Matrix<T>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::validation(format!("Laplace scale must be > 0, got {scale}")));
    }
    let data = (0..rows * cols).map(|_| T::of(sample_laplace(rng, scale))).collect();
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a: Matrix<f64> = laplace_noise(3, 4, 0.5, 11).unwrap();
        assert_eq!(a, laplace_noise(3, 4, 0.5, 11).unwrap());
        assert_ne!(a, laplace_noise(3, 4, 0.5, 12).unwrap());
    }

    #[test]
    fn rejects_non_positive_scale() {
        assert!(laplace_noise::<f64>(1, 1, 0.0, 1).is_err());
        assert!(laplace_noise::<f64>(1, 1, -1.0, 1).is_err());
    }

    #[test]
    fn moments_match_laplace() {
        let scale = 0.001;
        let n = 100_000;
        let m: Matrix<f64> = laplace_noise(n, 1, scale, 2024).unwrap();
        let mean = m.sum() / n as f64;
        let mad = m.as_slice().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        // std of the mean is sqrt(2)*scale/sqrt(n) ~ 4.5e-6
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((mad - scale).abs() < 0.05 * scale, "mad {mad}");
    }
}
