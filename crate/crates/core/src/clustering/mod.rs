//! Sample clustering inside sample groups and centroid construction.
//!
//! [`crc`] and [`random_clustering`] see only sample ids and labels. Only
//! [`kmeans_clusters`] reads embedding values.

mod delta;
mod kmeans;

use std::collections::{BTreeMap, HashMap};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

pub use delta::{
    discretize_labels, select_delta, unclustered_retrain, validate_delta, DeltaPoint, DeltaValidationConfig, HeadInit,
};
pub use kmeans::{kmeans, KMeansResult};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::servergcn::NodeBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    Random,
    Kmeans,
    Crc,
}

impl ClusterMode {
    pub const ALL: [ClusterMode; 3] = [ClusterMode::Random, ClusterMode::Kmeans, ClusterMode::Crc];

    pub fn name(self) -> &'static str {
        match self {
            ClusterMode::Random => "random",
            ClusterMode::Kmeans => "kmeans",
            ClusterMode::Crc => "crc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// Target cluster size δ.
    pub delta: usize,
    /// Share of same-class members α in a CRC cluster.
    pub alpha: f64,
    pub mode: ClusterMode,
    pub seed: u64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::validation("cluster size δ must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation(format!("α must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Sample ids of one cluster. `in_class` members partition the group; `padding`
/// holds the other-class extras CRC adds, which may repeat across clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub in_class: Vec<usize>,
    pub padding: Vec<usize>,
}

impl Cluster {
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.in_class.iter().chain(&self.padding).copied()
    }

    pub fn len(&self) -> usize {
        self.in_class.len() + self.padding.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sort_clusters(clusters: &mut [Cluster]) {
    clusters.sort_by_key(|c| c.in_class.iter().min().copied());
}

/// In-class members of a full CRC cluster: `round(αδ)` (half rounds up), at least one.
pub fn in_class_count(delta: usize, alpha: f64) -> usize {
    ((alpha * delta as f64 + 0.5).floor() as usize).clamp(1, delta)
}

/// Class-conditioned random clustering. `labels[i]` is the label of `members[i]`.
///
/// Each class is shuffled and cut into blocks of `round(αδ)`; each block is padded with
/// `δ − round(αδ)` other-class members of the group, drawn without replacement (the pool is
/// reused once exhausted). A short final block gets proportionally fewer extras.
pub fn crc(members: &[usize], labels: &[usize], delta: usize, alpha: f64, seed: u64) -> Result<Vec<Cluster>> {
    ClusterSpec { delta, alpha, mode: ClusterMode::Crc, seed }.validate()?;
    if members.is_empty() {
        return Err(Error::validation("cannot cluster an empty group"));
    }
    if members.len() != labels.len() {
        return Err(Error::shape("crc labels", members.len(), labels.len()));
    }
    let n_in = in_class_count(delta, alpha);
    let n_out = delta - n_in;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&m, &y) in members.iter().zip(labels) {
        by_class.entry(y).or_default().push(m);
    }
    let mut rng = rng_from(seed);
    let mut clusters = Vec::new();
    for (&class, own) in &by_class {
        let pool: Vec<usize> = members
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y != class)
            .map(|(&m, _)| m)
            .collect();
        let mut own = own.clone();
        own.shuffle(&mut rng);
        for block in own.chunks(n_in) {
            let want = if block.len() == n_in {
                n_out
            } else {
                ((block.len() * n_out) as f64 / n_in as f64 + 0.5).floor() as usize
            };
            let mut padding = Vec::with_capacity(want);
            while padding.len() < want && !pool.is_empty() {
                let take = (want - padding.len()).min(pool.len());
                padding.extend(index::sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i]));
            }
            clusters.push(Cluster {
                in_class: block.to_vec(),
                padding,
            });
        }
    }
    sort_clusters(&mut clusters);
    Ok(clusters)
}

/// Class-agnostic clustering: shuffle, then consecutive blocks of δ.
pub fn random_clustering(members: &[usize], delta: usize, seed: u64) -> Result<Vec<Cluster>> {
    if delta == 0 {
        return Err(Error::validation("cluster size δ must be at least 1"));
    }
    if members.is_empty() {
        return Err(Error::validation("cannot cluster an empty group"));
    }
    let mut order = members.to_vec();
    order.shuffle(&mut rng_from(seed));
    let mut clusters: Vec<Cluster> = order
        .chunks(delta)
        .map(|c| Cluster {
            in_class: c.to_vec(),
            padding: Vec::new(),
        })
        .collect();
    sort_clusters(&mut clusters);
    Ok(clusters)
}

/// K-means over `points` (row `i` belongs to `members[i]`) with `k = ceil(n / δ)`.
pub fn kmeans_clusters<T: Scalar>(members: &[usize], points: &Matrix<T>, delta: usize, seed: u64) -> Result<(Vec<Cluster>, KMeansResult<T>)> {
    if delta == 0 {
        return Err(Error::validation("cluster size δ must be at least 1"));
    }
    if members.len() != points.rows() {
        return Err(Error::shape("kmeans points", members.len(), points.rows()));
    }
    let k = members.len().div_ceil(delta).max(1);
    let result = kmeans(points, k, 100, seed)?;
    let mut buckets = vec![Vec::new(); k];
    for (&m, &a) in members.iter().zip(&result.assignments) {
        buckets[a].push(m);
    }
    let mut clusters: Vec<Cluster> = buckets
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(|in_class| Cluster {
            in_class,
            padding: Vec::new(),
        })
        .collect();
    sort_clusters(&mut clusters);
    Ok((clusters, result))
}

/// Embeddings of one sample group: row `r` of every matrix belongs to `sample_ids[r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEmbeddings<T> {
    pub client_key: Vec<usize>,
    pub sample_ids: Vec<usize>,
    pub per_client: Vec<Matrix<T>>,
}

impl<T: Scalar> GroupEmbeddings<T> {
    /// Per-sample concatenation of all clients' embeddings (the K-means input).
    pub fn concatenated(&self) -> Result<Matrix<T>> {
        let refs: Vec<&Matrix<T>> = self.per_client.iter().collect();
        Matrix::hcat(&refs)
    }
}

/// Per-client mean embeddings plus the mean one-hot label of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid<T> {
    pub client_key: Vec<usize>,
    pub means: Vec<Vec<T>>,
    pub soft_label: Vec<T>,
    pub member_count: usize,
}

/// `labels` maps sample id to class for every id that appears in a cluster.
pub fn centroids<T: Scalar>(
    clusters: &[Cluster],
    embeddings: &GroupEmbeddings<T>,
    labels: &HashMap<usize, usize>,
    num_classes: usize,
) -> Result<Vec<Centroid<T>>> {
    let row_of: HashMap<usize, usize> = embeddings
        .sample_ids
        .iter()
        .enumerate()
        .map(|(r, &n)| (n, r))
        .collect();
    let mut out = Vec::with_capacity(clusters.len());
    for cluster in clusters {
        if cluster.is_empty() {
            continue;
        }
        let inv = T::one() / T::of_usize(cluster.len());
        let mut means: Vec<Vec<T>> = embeddings
            .per_client
            .iter()
            .map(|m| vec![T::zero(); m.cols()])
            .collect();
        let mut soft_label = vec![T::zero(); num_classes];
        for n in cluster.members() {
            let r = *row_of
                .get(&n)
                .ok_or_else(|| Error::validation(format!("no embedding for sample {n}")))?;
            for (mean, m) in means.iter_mut().zip(&embeddings.per_client) {
                crate::numcore::axpy(T::one(), m.row(r), mean);
            }
            let y = *labels
                .get(&n)
                .ok_or_else(|| Error::validation(format!("no label for sample {n}")))?;
            if y >= num_classes {
                return Err(Error::validation(format!("label {y} of sample {n} out of range")));
            }
            soft_label[y] += T::one();
        }
        means.iter_mut().flatten().for_each(|v| *v *= inv);
        soft_label.iter_mut().for_each(|v| *v *= inv);
        out.push(Centroid {
            client_key: embeddings.client_key.clone(),
            means,
            soft_label,
            member_count: cluster.len(),
        });
    }
    Ok(out)
}

/// Stacks the centroids of one group into a server training batch.
pub fn centroid_batch<T: Scalar>(centroids: &[Centroid<T>]) -> Result<NodeBatch<T>> {
    let first = centroids
        .first()
        .ok_or_else(|| Error::validation("no centroids to batch"))?;
    if centroids.iter().any(|c| c.client_key != first.client_key) {
        return Err(Error::contract("centroids of different groups in one batch"));
    }
    let inputs = (0..first.client_key.len())
        .map(|i| {
            let rows: Vec<&[T]> = centroids.iter().map(|c| c.means[i].as_slice()).collect();
            Matrix::from_rows(&rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&[T]> = centroids.iter().map(|c| c.soft_label.as_slice()).collect();
    Ok(NodeBatch {
        client_key: first.client_key.clone(),
        inputs,
        targets: Matrix::from_rows(&labels)?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn labelled(n: usize, classes: usize) -> (Vec<usize>, Vec<usize>) {
        let members: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let labels = (0..n).map(|i| (i * 7 + i / 3) % classes).collect();
        (members, labels)
    }

    #[test]
    fn crc_composition() {
        assert_eq!(in_class_count(10, 0.7), 7);
        assert_eq!(in_class_count(65, 0.7), 46);
        assert_eq!(in_class_count(1, 0.0), 1);
        let (members, labels) = labelled(200, 4);
        let clusters = crc(&members, &labels, 10, 0.7, 3).unwrap();
        let label_of: HashMap<usize, usize> = members.iter().copied().zip(labels.iter().copied()).collect();
        for c in &clusters {
            let class = label_of[&c.in_class[0]];
            assert!(c.in_class.iter().all(|m| label_of[m] == class));
            assert!(c.padding.iter().all(|m| label_of[m] != class));
            if c.in_class.len() == 7 {
                assert_eq!(c.padding.len(), 3);
            }
        }
    }

    #[test]
    fn crc_identity_clustering() {
        let (members, labels) = labelled(30, 3);
        let clusters = crc(&members, &labels, 1, 1.0, 0).unwrap();
        assert_eq!(clusters.len(), 30);
        assert!(clusters.iter().all(|c| c.in_class.len() == 1 && c.padding.is_empty()));
        assert!(crc(&members, &labels, 0, 0.5, 0).is_err());
        assert!(crc(&members, &labels, 3, 1.5, 0).is_err());
    }

    #[test]
    fn crc_single_class_group_has_no_padding() {
        let clusters = crc(&[1, 2, 3, 4], &[5, 5, 5, 5], 2, 0.5, 1).unwrap();
        assert!(clusters.iter().all(|c| c.padding.is_empty()));
    }

    #[test]
    fn random_block_sizes() {
        let members: Vec<usize> = (0..10).collect();
        let mut sizes: Vec<usize> = random_clustering(&members, 3, 4).unwrap().iter().map(Cluster::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 3, 3, 3]);
        assert_eq!(random_clustering(&members, 10, 4).unwrap().len(), 1);
        assert_eq!(random_clustering(&members, 1, 4).unwrap().len(), 10);
        assert!(random_clustering(&members, 0, 4).is_err());
    }

    #[test]
    fn centroid_arithmetic() {
        let emb = GroupEmbeddings {
            client_key: vec![0, 2],
            sample_ids: vec![10, 11],
            per_client: vec![
                Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0]]).unwrap(),
                Matrix::from_rows(&[[0.0], [1.0]]).unwrap(),
            ],
        };
        let labels: HashMap<usize, usize> = [(10, 0), (11, 2)].into_iter().collect();
        let single = centroids(&[Cluster { in_class: vec![11], padding: vec![] }], &emb, &labels, 3).unwrap();
        assert_eq!(single[0].means, vec![vec![3.0, 6.0], vec![1.0]]);
        assert_eq!(single[0].soft_label, vec![0.0, 0.0, 1.0]);
        let pair = centroids(&[Cluster { in_class: vec![10], padding: vec![11] }], &emb, &labels, 3).unwrap();
        assert_eq!(pair[0].means, vec![vec![2.0, 4.0], vec![0.5]]);
        assert_eq!(pair[0].soft_label, vec![0.5, 0.0, 0.5]);
        let missing = Cluster { in_class: vec![99], padding: vec![] };
        assert!(centroids(&[missing], &emb, &labels, 3).is_err());
    }

    #[test]
    fn crc_soft_label_mass_at_delta_65() {
        let mut members = vec![];
        let mut labels = vec![];
        for i in 0..46 {
            members.push(i);
            labels.push(3);
        }
        for i in 46..200 {
            members.push(i);
            labels.push(i % 3);
        }
        let clusters = crc(&members, &labels, 65, 0.7, 8).unwrap();
        let label_of: HashMap<usize, usize> = members.iter().copied().zip(labels.iter().copied()).collect();
        let emb = GroupEmbeddings {
            client_key: vec![0],
            sample_ids: members.clone(),
            per_client: vec![Matrix::<f64>::zeros(200, 1)],
        };
        let cs = centroids(&clusters, &emb, &label_of, 4).unwrap();
        let class3 = cs.iter().find(|c| c.member_count == 65 && c.soft_label[3] > 0.5).unwrap();
        assert!((class3.soft_label[3] - 46.0 / 65.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn crc_partitions_group(n in 1usize..150, classes in 1usize..6, delta in 1usize..30, alpha in 0.0f64..=1.0, seed in any::<u64>()) {
            let (members, labels) = labelled(n, classes);
            let clusters = crc(&members, &labels, delta, alpha, seed).unwrap();
            let mut seen: Vec<usize> = clusters.iter().flat_map(|c| c.in_class.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(&seen, &members);
            let n_in = in_class_count(delta, alpha);
            let full = clusters.iter().filter(|c| c.in_class.len() == n_in).count();
            let short = clusters.iter().filter(|c| c.in_class.len() < n_in).count();
            prop_assert_eq!(full + short, clusters.len());
            prop_assert_eq!(clusters, crc(&members, &labels, delta, alpha, seed).unwrap());
        }

        #[test]
        fn random_covers_once(n in 1usize..200, delta in 1usize..40, seed in any::<u64>()) {
            let members: Vec<usize> = (0..n).map(|i| i * 2).collect();
            let clusters = random_clustering(&members, delta, seed).unwrap();
            let mut seen: Vec<usize> = clusters.iter().flat_map(|c| c.in_class.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, members);
            prop_assert!(clusters.iter().filter(|c| c.len() != delta).count() <= 1);
        }
    }
}
