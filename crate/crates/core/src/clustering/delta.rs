//! Client-side choice of the cluster size δ.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{centroids, random_clustering, GroupEmbeddings};
use crate::client::{accuracy, fit_classifier, EmbeddingTable, FitConfig};
use crate::error::{Error, Result};
use crate::numcore::{one_hot, AdamConfig, Matrix, Mlp};
use crate::rng::{derive_seed, rng_from};
use crate::scalar::Scalar;
use crate::seed_path;

/// Starting point of the head retrained on centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// Continue from the trained head.
    Warm,
    /// Fresh Glorot weights of the same shape.
    Cold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaValidationConfig {
    pub grid: Vec<usize>,
    pub repeats: usize,
    pub init: HeadInit,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for DeltaValidationConfig {
    fn default() -> Self {
        Self {
            grid: vec![1, 5, 10, 20, 35, 50, 65, 80, 100],
            repeats: 100,
            init: HeadInit::Cold,
            epochs: 10,
            batch_size: 16,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub delta: usize,
    pub accuracy: f64,
    pub std: f64,
}

/// Mean holdout accuracy of `head` retrained on random-cluster centroids, per grid δ.
///
/// The retraining stream depends only on the repeat index, so at δ = 1 the head sees
/// exactly the real embeddings in ascending id order.
#[allow(clippy::too_many_arguments)]
pub fn validate_delta<T: Scalar>(
    head: &Mlp<T>,
    train: &EmbeddingTable<T>,
    train_labels: &[usize],
    holdout: &EmbeddingTable<T>,
    holdout_labels: &[usize],
    num_classes: usize,
    cfg: &DeltaValidationConfig,
    seed: u64,
) -> Result<Vec<DeltaPoint>> {
    if train.sample_ids.len() != train_labels.len() {
        return Err(Error::shape("validation train labels", train.sample_ids.len(), train_labels.len()));
    }
    if holdout.sample_ids.len() != holdout_labels.len() {
        return Err(Error::shape("validation holdout labels", holdout.sample_ids.len(), holdout_labels.len()));
    }
    if holdout_labels.is_empty() || train_labels.is_empty() {
        return Err(Error::validation("δ validation needs training and holdout embeddings"));
    }
    if cfg.repeats == 0 {
        return Err(Error::validation("δ validation needs at least one repeat"));
    }
    let mut order: Vec<usize> = (0..train.sample_ids.len()).collect();
    order.sort_by_key(|&r| train.sample_ids[r]);
    let emb = GroupEmbeddings {
        client_key: vec![train.client_id],
        sample_ids: order.iter().map(|&r| train.sample_ids[r]).collect(),
        per_client: vec![train.vectors.select_rows(&order)],
    };
    let labels: HashMap<usize, usize> = train.sample_ids.iter().copied().zip(train_labels.iter().copied()).collect();
    let fit = FitConfig {
        adam: cfg.adam,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        patience: 0,
    };
    let mut curve = Vec::new();
    for &delta in &cfg.grid {
        if delta == 0 || delta > emb.sample_ids.len() {
            log::warn!(
                "client {}: skipping δ = {delta} ({} training samples)",
                train.client_id,
                emb.sample_ids.len()
            );
            continue;
        }
        let mut scores = Vec::with_capacity(cfg.repeats);
        for rep in 0..cfg.repeats {
            let cseed = derive_seed(seed, seed_path!["cluster", delta, rep]);
            let clusters = random_clustering(&emb.sample_ids, delta, cseed)?;
            let cs = centroids(&clusters, &emb, &labels, num_classes)?;
            let rows: Vec<&[T]> = cs.iter().map(|c| c.means[0].as_slice()).collect();
            let soft: Vec<&[T]> = cs.iter().map(|c| c.soft_label.as_slice()).collect();
            let (x, y) = (Matrix::from_rows(&rows)?, Matrix::from_rows(&soft)?);
            let mut rng = rng_from(derive_seed(seed, seed_path!["retrain", rep]));
            let mut net = match cfg.init {
                HeadInit::Warm => head.clone(),
                HeadInit::Cold => fresh_like(head, &mut rng),
            };
            fit_classifier(&mut net, &x, &y, None, &fit, &mut rng)?;
            scores.push(accuracy(&net.predict(&holdout.vectors)?, holdout_labels)?);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
        curve.push(DeltaPoint {
            delta,
            accuracy: mean,
            std: var.sqrt(),
        });
    }
    Ok(curve)
}

fn fresh_like<T: Scalar, R: rand::Rng>(net: &Mlp<T>, rng: &mut R) -> Mlp<T> {
    let mut dims = vec![net.input_dim()];
    dims.extend(net.layers.iter().map(|l| l.out_dim()));
    let hidden = net.layers[0].activation;
    let output = net.layers[net.layers.len() - 1].activation;
    let mut fresh = Mlp::glorot(&dims, hidden, output, rng);
    for (f, l) in fresh.layers.iter_mut().zip(&net.layers) {
        f.activation = l.activation;
    }
    fresh
}

/// Accuracy of retraining `head` on the real embeddings, the δ = 1 reference.
#[allow(clippy::too_many_arguments)]
pub fn unclustered_retrain<T: Scalar>(
    head: &Mlp<T>,
    train: &EmbeddingTable<T>,
    train_labels: &[usize],
    holdout: &EmbeddingTable<T>,
    holdout_labels: &[usize],
    num_classes: usize,
    cfg: &DeltaValidationConfig,
    seed: u64,
    rep: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.sample_ids.len()).collect();
    order.sort_by_key(|&r| train.sample_ids[r]);
    let x = train.vectors.select_rows(&order);
    let y: Vec<usize> = order.iter().map(|&r| train_labels[r]).collect();
    let fit = FitConfig {
        adam: cfg.adam,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        patience: 0,
    };
    let mut rng = rng_from(derive_seed(seed, seed_path!["retrain", rep]));
    let mut net = match cfg.init {
        HeadInit::Warm => head.clone(),
        HeadInit::Cold => fresh_like(head, &mut rng),
    };
    fit_classifier(&mut net, &x, &one_hot(&y, num_classes), None, &fit, &mut rng)?;
    accuracy(&net.predict(&holdout.vectors)?, holdout_labels)
}

/// Smallest grid δ whose accuracy is within `tolerance` of the best on the curve.
pub fn select_delta(curve: &[DeltaPoint], tolerance: f64) -> Result<usize> {
    let best = curve
        .iter()
        .map(|p| p.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    curve
        .iter()
        .filter(|p| p.accuracy >= best - tolerance)
        .map(|p| p.delta)
        .min()
        .ok_or_else(|| Error::validation("empty δ curve"))
}

/// Quantile binning of regression targets into `bins` classes.
///
/// Edges sit at the `ceil(i·n/bins)`-th order statistics; a value's class is the number of
/// edges strictly below it. Repeated edges collapse, so heavy ties yield fewer classes.
pub fn discretize_labels(values: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(Error::validation("discretization needs at least 2 bins"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite regression target"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 || sorted[0] == sorted[n - 1] {
        return Err(Error::validation("regression targets are constant"));
    }
    let mut edges: Vec<f64> = (1..bins).map(|i| sorted[(i * n).div_ceil(bins) - 1]).collect();
    edges.dedup();
    Ok(values
        .iter()
        .map(|v| edges.iter().filter(|&&e| e < *v).count())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Activation;

    fn point(delta: usize, accuracy: f64) -> DeltaPoint {
        DeltaPoint { delta, accuracy, std: 0.0 }
    }

    #[test]
    fn selection_rule() {
        let flat: Vec<_> = [1, 5, 10].iter().map(|&d| point(d, 0.8)).collect();
        assert_eq!(select_delta(&flat, 0.02).unwrap(), 1);
        let rising: Vec<_> = [(1, 0.5), (20, 0.6), (50, 0.75), (65, 0.8), (80, 0.805), (100, 0.81)]
            .iter()
            .map(|&(d, a)| point(d, a))
            .collect();
        assert_eq!(select_delta(&rising, 0.02).unwrap(), 65);
        assert_eq!(select_delta(&[point(7, 0.1)], 0.02).unwrap(), 7);
        assert!(select_delta(&[], 0.02).is_err());
    }

    #[test]
    fn quantile_bins() {
        let v: Vec<f64> = (0..12).map(f64::from).collect();
        let c = discretize_labels(&v, 3).unwrap();
        assert_eq!(c, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(discretize_labels(&[3.0, 1.0, 2.0, 0.0], 2).unwrap(), vec![1, 0, 1, 0]);
        assert!(discretize_labels(&[1.0, 1.0], 2).is_err());
        assert!(discretize_labels(&[1.0, 2.0], 1).is_err());
    }

    fn embeddings(n: usize, offset: usize) -> (EmbeddingTable<f64>, Vec<usize>) {
        let mut rows = vec![];
        let mut labels = vec![];
        for i in 0..n {
            let y = (i * 5 + i / 7) % 3;
            let t = (i as f64 * 0.91).sin() * 0.3;
            let mut r = vec![t, -t, 0.1];
            r[y] += 1.0;
            rows.push(r);
            labels.push(y);
        }
        let ids = (0..n).map(|i| offset + 2 * i).rev().collect();
        (
            EmbeddingTable {
                client_id: 4,
                sample_ids: ids,
                vectors: Matrix::from_rows(&rows).unwrap(),
            },
            labels,
        )
    }

    #[test]
    fn singleton_clusters_match_unclustered_retrain() {
        let head = Mlp::glorot(&[3, 8, 3], Activation::Relu, Activation::Logits, &mut rng_from(1));
        let (train, ty) = embeddings(60, 0);
        let (hold, hy) = embeddings(20, 1000);
        let cfg = DeltaValidationConfig {
            grid: vec![1, 60, 61],
            repeats: 2,
            epochs: 5,
            ..Default::default()
        };
        let curve = validate_delta(&head, &train, &ty, &hold, &hy, 3, &cfg, 9).unwrap();
        assert_eq!(curve.len(), 2, "δ beyond the sample count is skipped");
        let r0 = unclustered_retrain(&head, &train, &ty, &hold, &hy, 3, &cfg, 9, 0).unwrap();
        let r1 = unclustered_retrain(&head, &train, &ty, &hold, &hy, 3, &cfg, 9, 1).unwrap();
        assert_eq!(curve[0].accuracy, (r0 + r1) / 2.0);
    }
}
