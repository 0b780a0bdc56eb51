//! Dataset ingestion, the hybrid sample/feature partitioner, and sample groups.

mod idx;
mod partition;

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use idx::{load_idx, write_idx};
pub use partition::{auto_feature_frac, partition, partition_samples, HybridPartition, PartitionConfig, RepairLog};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::rng_from;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Samples as rows, features as columns, integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Seeded subset of `n` samples, kept in their original order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(Error::validation(format!(
                "cannot take {n} samples from a dataset of {}",
                self.len()
            )));
        }
        let mut rng = rng_from(seed);
        let mut idx = index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        Ok(Self {
            features: self.features.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        })
    }

    /// The rows `samples` restricted to the columns `features`.
    pub fn view(&self, features: &[usize], samples: &[usize]) -> ClientData<T> {
        ClientData {
            sample_ids: samples.to_vec(),
            features: self.features.select_rows(samples).select_cols(features),
            labels: samples.iter().map(|&n| self.labels[n]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// A client's local slice of a dataset.
#[derive(Debug, Clone)]
pub struct ClientData<T> {
    pub sample_ids: Vec<usize>,
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> ClientData<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at local positions `rows`.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            sample_ids: rows.iter().map(|&i| self.sample_ids[i]).collect(),
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// `v ↦ 2v/255 − 1`.
pub fn normalize<T: Scalar>(dataset: &Dataset<T>) -> Dataset<T> {
    let (two, max, one) = (T::of(2.0), T::of(255.0), T::one());
    Dataset {
        features: dataset.features.map(|v| two * v / max - one),
        ..dataset.clone()
    }
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(dataset: &Dataset<T>) -> Dataset<T> {
    let (half, max, one) = (T::of(0.5), T::of(255.0), T::one());
    Dataset {
        features: dataset.features.map(|v| (v + one) * half * max),
        ..dataset.clone()
    }
}

/// Samples sharing one exact client set `C_n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub client_key: Vec<usize>,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedSamples {
    pub groups: Vec<SampleGroup>,
    /// Samples held by no client.
    pub uncovered: Vec<usize>,
}

/// Groups samples by their client set. Groups come out ordered by key.
/// With `strict`, a sample held by no client is an error; otherwise it is reported in `uncovered`.
pub fn sample_groups(client_sets: &[Vec<usize>], strict: bool) -> Result<GroupedSamples> {
    let mut by_key: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    let mut uncovered = Vec::new();
    for (n, key) in client_sets.iter().enumerate() {
        if key.is_empty() {
            if strict {
                return Err(Error::validation(format!("sample {n} is held by no client")));
            }
            uncovered.push(n);
            continue;
        }
        by_key.entry(key.as_slice()).or_default().push(n);
    }
    Ok(GroupedSamples {
        groups: by_key
            .into_iter()
            .map(|(k, members)| SampleGroup {
                client_key: k.to_vec(),
                members,
            })
            .collect(),
        uncovered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_and_roundtrip() {
        let ds = Dataset {
            features: Matrix::<f64>::from_rows(&[[0.0, 255.0, 127.5, 3.0]]).unwrap(),
            labels: vec![0],
            num_classes: 1,
            split: Split::Train,
        };
        let n = normalize(&ds);
        assert_eq!(n.features.as_slice()[..3], [-1.0, 1.0, 0.0]);
        let back = denormalize(&n);
        for (a, b) in back.features.as_slice().iter().zip(ds.features.as_slice()) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn groups_in_the_three_client_scenario() {
        // x1 only client 0; x2, x3 clients {0,1}; x4 clients {1,2}; x5 client 2
        let sets = vec![vec![0], vec![0, 1], vec![0, 1], vec![1, 2], vec![2]];
        let g = sample_groups(&sets, true).unwrap();
        assert_eq!(g.groups.len(), 4);
        let pair = g.groups.iter().find(|g| g.client_key == vec![0, 1]).unwrap();
        assert_eq!(pair.members, vec![1, 2]);
    }

    #[test]
    fn vfl_is_one_group_and_disjoint_is_two() {
        let sets = vec![vec![0, 1, 2]; 6];
        assert_eq!(sample_groups(&sets, true).unwrap().groups.len(), 1);
        let sets = vec![vec![0], vec![1], vec![0], vec![1]];
        let g = sample_groups(&sets, true).unwrap();
        assert_eq!(g.groups.len(), 2);
        assert_eq!(g.groups[0].members, vec![0, 2]);
    }

    #[test]
    fn empty_client_set_strict_vs_lenient() {
        let sets = vec![vec![0], vec![]];
        assert!(sample_groups(&sets, true).is_err());
        let g = sample_groups(&sets, false).unwrap();
        assert_eq!(g.uncovered, vec![1]);
    }
}
