//! Client graph: one node per client, an edge wherever two clients share a feature.
//! Each edge carries the multi-hot vector of the shared features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::HybridPartition;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientGraph {
    pub num_clients: usize,
    pub num_features: usize,
    /// Unordered pairs stored as `(m, l)` with `m < l`, mapped to the sorted shared feature ids.
    edges: BTreeMap<(usize, usize), Vec<usize>>,
    /// `R_m` per client; the self-edge vector when self-loops are on.
    own_features: Vec<Vec<usize>>,
    pub self_loops: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub density: f64,
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

impl ClientGraph {
    /// `feature_sets[m]` must be sorted and deduplicated.
    pub fn build(feature_sets: &[Vec<usize>], num_features: usize, self_loops: bool) -> Result<Self> {
        for (m, fs) in feature_sets.iter().enumerate() {
            if fs.windows(2).any(|w| w[0] >= w[1]) || fs.iter().any(|&r| r >= num_features) {
                return Err(Error::validation(format!("feature set of client {m} is not a sorted subset")));
            }
        }
        let mut edges = BTreeMap::new();
        for m in 0..feature_sets.len() {
            for l in m + 1..feature_sets.len() {
                let shared = sorted_intersection(&feature_sets[m], &feature_sets[l]);
                if !shared.is_empty() {
                    edges.insert((m, l), shared);
                }
            }
        }
        Ok(Self {
            num_clients: feature_sets.len(),
            num_features,
            edges,
            own_features: feature_sets.to_vec(),
            self_loops,
        })
    }

    pub fn has_edge(&self, m: usize, l: usize) -> bool {
        m != l && self.edges.contains_key(&(m.min(l), m.max(l)))
    }

    /// Shared feature ids of `(m, l)`; for `m == l` the client's own features when self-loops are on.
    pub fn edge_features(&self, m: usize, l: usize) -> Option<&[usize]> {
        if m == l {
            return self.self_loops.then(|| self.own_features[m].as_slice());
        }
        self.edges.get(&(m.min(l), m.max(l))).map(Vec::as_slice)
    }

    /// Dense binary edge vector of length `num_features` (all zeros when there is no edge).
    pub fn edge_vector<T: Scalar>(&self, m: usize, l: usize) -> Vec<T> {
        let mut v = vec![T::zero(); self.num_features];
        if let Some(ids) = self.edge_features(m, l) {
            ids.iter().for_each(|&r| v[r] = T::one());
        }
        v
    }

    /// `NB`: the members of `client_set` adjacent to `m`, plus `m` itself when self-loops are on.
    /// Sorted ascending. The graph is static, so the same set serves every conv layer.
    pub fn neighbors(&self, m: usize, client_set: &[usize]) -> Result<Vec<usize>> {
        if !client_set.contains(&m) {
            return Err(Error::contract(format!("client {m} does not hold the sample")));
        }
        let mut nb: Vec<usize> = client_set
            .iter()
            .copied()
            .filter(|&l| (l == m && self.self_loops) || self.has_edge(m, l))
            .collect();
        nb.sort_unstable();
        nb.dedup();
        Ok(nb)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &[usize])> {
        self.edges.iter().map(|(&(m, l), v)| (m, l, v.as_slice()))
    }

    pub fn summary(&self) -> GraphSummary {
        let possible = self.num_clients * self.num_clients.saturating_sub(1) / 2;
        GraphSummary {
            nodes: self.num_clients,
            edges: self.edges.len(),
            density: if possible == 0 { 0.0 } else { self.edges.len() as f64 / possible as f64 },
        }
    }

    /// `m,l,shared_count` rows for inspection.
    pub fn adjacency_csv(&self) -> String {
        let mut out = String::from("m,l,shared_features\n");
        for (m, l, ids) in self.edges() {
            out.push_str(&format!("{m},{l},{}\n", ids.len()));
        }
        out
    }
}

pub fn build_graph(partition: &HybridPartition, self_loops: bool) -> Result<ClientGraph> {
    ClientGraph::build(&partition.feature_sets, partition.num_features, self_loops)
}
