//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::rng_from;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct KMeansResult<T> {
    pub assignments: Vec<usize>,
    pub centers: Matrix<T>,
    /// Inertia after every assignment step; non-increasing.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl<T> KMeansResult<T> {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment step")
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum()
}

fn plus_plus_init<T: Scalar, R: Rng>(points: &Matrix<T>, k: usize, rng: &mut R) -> Matrix<T> {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on an existing center
            if d2[pick] == 0.0 {
                d2.iter().position(|&w| w > 0.0).unwrap_or(pick)
            } else {
                pick
            }
        } else {
            // every point coincides with a center: fall back to an unused index
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

/// Nearest center per point (lowest index on ties) and the resulting inertia.
fn assign<T: Scalar>(points: &Matrix<T>, centers: &Matrix<T>) -> Result<(Vec<usize>, f64)> {
    // |x - c|^2 = |x|^2 - 2 x.c + |c|^2; the |x|^2 term does not affect the argmin
    let cross = points.matmul_t(centers)?;
    let c_norm: Vec<T> = centers.row_iter().map(|c| c.iter().map(|&v| v * v).sum()).collect();
    let two = T::of(2.0);
    let mut assignments = Vec::with_capacity(points.rows());
    let mut inertia = 0.0;
    for i in 0..points.rows() {
        let row = cross.row(i);
        let mut best = 0;
        let mut best_val = c_norm[0] - two * row[0];
        for j in 1..centers.rows() {
            let v = c_norm[j] - two * row[j];
            if v < best_val {
                best = j;
                best_val = v;
            }
        }
        inertia += sq_dist(points.row(i), centers.row(best));
        assignments.push(best);
    }
    Ok((assignments, inertia))
}

pub fn kmeans<T: Scalar>(points: &Matrix<T>, k: usize, max_iter: usize, seed: u64) -> Result<KMeansResult<T>> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::validation("k-means on an empty point set"));
    }
    if k == 0 || k > n {
        return Err(Error::validation(format!("k = {k} must lie in 1..={n}")));
    }
    let mut rng = rng_from(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let (mut assignments, inertia) = assign(points, &centers)?;
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = Matrix::<T>::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            crate::numcore::axpy(T::one(), points.row(i), sums.row_mut(a));
        }
        for (j, &count) in counts.iter().enumerate() {
            // empty clusters keep their previous center
            if count > 0 {
                let inv = T::one() / T::of_usize(count);
                let row: Vec<T> = sums.row(j).iter().map(|&v| v * inv).collect();
                centers.row_mut(j).copy_from_slice(&row);
            }
        }
        let (next, inertia) = assign(points, &centers)?;
        let prev = *history.last().expect("non-empty");
        debug_assert!(inertia <= prev * (1.0 + 1e-9) + 1e-12, "inertia rose from {prev} to {inertia}");
        history.push(inertia);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok(KMeansResult {
        assignments,
        centers,
        inertia_history: history,
        iterations,
    })
}
