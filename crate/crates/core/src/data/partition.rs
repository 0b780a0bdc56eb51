use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng as StreamRng};
use crate::seed_path;

/// Per-client feature share used when none is configured: `max(0.03, 1/M)`.
pub fn auto_feature_frac(num_clients: usize) -> f64 {
    (1.0 / num_clients as f64).max(0.03)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub feature_frac: f64,
    /// `1.0` gives pure vertical partitioning.
    pub sample_frac: f64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::validation("at least one client is required"));
        }
        for (name, v) in [("feature_frac", self.feature_frac), ("sample_frac", self.sample_frac)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::validation(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairLog {
    pub clients_given_feature: usize,
    pub features_assigned: usize,
    pub clients_given_sample: usize,
    pub samples_assigned: usize,
}

/// Which features (`R_m`) and samples (`N_m`) each client holds. All sets are sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridPartition {
    pub num_clients: usize,
    pub num_features: usize,
    pub num_samples: usize,
    pub feature_sets: Vec<Vec<usize>>,
    pub sample_sets: Vec<Vec<usize>>,
    pub repairs: RepairLog,
}

impl HybridPartition {
    /// `C_n` for every sample.
    pub fn client_sets(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.num_samples];
        for (m, samples) in self.sample_sets.iter().enumerate() {
            for &n in samples {
                sets[n].push(m);
            }
        }
        sets
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_sets.len() != self.num_clients || self.sample_sets.len() != self.num_clients {
            return Err(Error::validation("partition set count differs from client count"));
        }
        let mut feature_seen = vec![false; self.num_features];
        for (m, fs) in self.feature_sets.iter().enumerate() {
            if fs.is_empty() {
                return Err(Error::validation(format!("client {m} holds no feature")));
            }
            if fs.windows(2).any(|w| w[0] >= w[1]) || fs.iter().any(|&r| r >= self.num_features) {
                return Err(Error::validation(format!("client {m} feature set is not a sorted subset")));
            }
            fs.iter().for_each(|&r| feature_seen[r] = true);
        }
        if let Some(r) = feature_seen.iter().position(|s| !s) {
            return Err(Error::validation(format!("feature {r} is held by no client")));
        }
        for (m, ns) in self.sample_sets.iter().enumerate() {
            if ns.is_empty() {
                return Err(Error::validation(format!("client {m} holds no sample")));
            }
            if ns.windows(2).any(|w| w[0] >= w[1]) || ns.iter().any(|&n| n >= self.num_samples) {
                return Err(Error::validation(format!("client {m} sample set is not a sorted subset")));
            }
        }
        Ok(())
    }
}

/// Independent Bernoulli inclusion per (client, item) followed by a repair pass:
/// an empty client gets one random item, an orphaned item goes to one random client.
fn bernoulli_sets(
    clients: usize,
    items: usize,
    p: f64,
    rng: &mut StreamRng,
) -> (Vec<Vec<usize>>, usize, usize) {
    let mut sets: Vec<Vec<usize>> = (0..clients)
        .map(|_| (0..items).filter(|_| rng.random::<f64>() < p).collect())
        .collect();
    let mut fixed_clients = 0;
    for set in sets.iter_mut() {
        if set.is_empty() && items > 0 {
            set.push(rng.random_range(0..items));
            fixed_clients += 1;
        }
    }
    let mut owned = vec![false; items];
    for set in &sets {
        set.iter().for_each(|&i| owned[i] = true);
    }
    let mut fixed_items = 0;
    for (i, _) in owned.iter().enumerate().filter(|(_, o)| !**o) {
        let m = rng.random_range(0..clients);
        let pos = sets[m].partition_point(|&x| x < i);
        sets[m].insert(pos, i);
        fixed_items += 1;
    }
    (sets, fixed_clients, fixed_items)
}

pub fn partition(num_samples: usize, num_features: usize, cfg: &PartitionConfig, seed: u64) -> Result<HybridPartition> {
    cfg.validate()?;
    if num_samples == 0 || num_features == 0 {
        return Err(Error::validation("cannot partition an empty dataset"));
    }
    let mut frng = stream(seed, seed_path!["partition", "features"]);
    let (feature_sets, cf, fa) = bernoulli_sets(cfg.num_clients, num_features, cfg.feature_frac, &mut frng);
    let (sample_sets, cs, sa) = partition_samples(num_samples, cfg, seed, "train")?;
    let repairs = RepairLog {
        clients_given_feature: cf,
        features_assigned: fa,
        clients_given_sample: cs,
        samples_assigned: sa,
    };
    if repairs != RepairLog::default() {
        info!("partition repairs: {repairs:?}");
    }
    let p = HybridPartition {
        num_clients: cfg.num_clients,
        num_features,
        num_samples,
        feature_sets,
        sample_sets,
        repairs,
    };
    p.validate()?;
    Ok(p)
}

/// Sample ownership alone, drawn from the stream `split`; used for held-out splits.
/// Returns the sets and the two repair counts.
pub fn partition_samples(
    num_samples: usize,
    cfg: &PartitionConfig,
    seed: u64,
    split: &str,
) -> Result<(Vec<Vec<usize>>, usize, usize)> {
    cfg.validate()?;
    let mut rng = stream(seed, seed_path!["partition", "samples", split]);
    Ok(bernoulli_sets(cfg.num_clients, num_samples, cfg.sample_frac, &mut rng))
}
