use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-wise numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Tolerance on target row sums; loose enough for `f32` soft labels.
fn row_sum_tolerance<T: Scalar>() -> T {
    T::of(1e-5)
}

/// Mean soft-label cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            "cross_entropy targets",
            format!("{:?}", logits.shape()),
            format!("{:?}", targets.shape()),
        ));
    }
    let n = logits.rows();
    if n == 0 {
        return Err(Error::validation("cross_entropy on an empty batch"));
    }
    for (i, t) in targets.row_iter().enumerate() {
        let s: T = t.iter().copied().sum();
        if (s - T::one()).abs() > row_sum_tolerance() || t.iter().any(|&v| v < T::zero()) {
            return Err(Error::validation(format!(
                "target row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    let inv_n = T::one() / T::of_usize(n);
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = T::zero();
    for i in 0..n {
        let z = logits.row(i);
        let t = targets.row(i);
        let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let log_total = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        let g = grad.row_mut(i);
        for c in 0..z.len() {
            let log_p = z[c] - log_total;
            if t[c] > T::zero() {
                loss -= t[c] * log_p;
            }
            g[c] = (log_p.exp() - t[c]) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Mean squared error over all elements and its gradient.
pub fn mse<T: Scalar>(pred: &Matrix<T>, target: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse target",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    let count = pred.rows() * pred.cols();
    if count == 0 {
        return Err(Error::validation("mse on an empty matrix"));
    }
    let inv = T::one() / T::of_usize(count);
    let diff = pred.sub(target)?;
    let loss = diff.sum_squares() * inv;
    let two = T::of(2.0);
    Ok((loss, diff.map(|d| two * d * inv)))
}

/// One-hot rows for integer labels.
pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        m[(i, y)] = T::one();
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Matrix::<f64>::zeros(1, 10);
        let (loss, _) = cross_entropy(&logits, &one_hot(&[4], 10)).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stationary_when_target_is_softmax() {
        let logits = Matrix::from_rows(&[[0.3, -1.2, 2.0]]).unwrap();
        let (_, g) = cross_entropy(&logits, &softmax(&logits)).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn two_class_hand_value() {
        let (loss, _) = cross_entropy(
            &Matrix::from_rows(&[[2.0, 0.0]]).unwrap(),
            &Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        assert!((loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_margin_loss_vanishes() {
        // ln(1 + (C-1) e^-20) < 1e-8 needs C <= 5
        for classes in [2, 5] {
            let mut logits = Matrix::<f64>::zeros(1, classes);
            logits[(0, 1)] = 20.0;
            let (loss, _) = cross_entropy(&logits, &one_hot(&[1], classes)).unwrap();
            assert!(loss < 1e-8, "{loss}");
        }
    }

    #[test]
    fn rejects_unnormalized_targets() {
        let t = Matrix::from_rows(&[[0.5, 0.4]]).unwrap();
        assert!(matches!(
            cross_entropy(&Matrix::<f64>::zeros(1, 2), &t),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn mse_values() {
        let p = Matrix::from_rows(&[[0.0, 2.0]]).unwrap();
        assert_eq!(mse(&p, &p).unwrap().0, 0.0);
        assert_eq!(mse(&p.map(|v| v + 1.0), &p).unwrap().0, 1.0);
        let (l, g) = mse(&p, &Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.as_slice(), &[-1.0, 2.0]);
        assert!(mse(&p, &Matrix::zeros(2, 1)).is_err());
    }
}
