//! Experiment configuration, presets and the config fingerprint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::ClientConfig;
use crate::clustering::{ClusterMode, DeltaValidationConfig};
use crate::data::{auto_feature_frac, PartitionConfig};
use crate::error::{Error, Result};
use crate::numcore::AdamConfig;
use crate::privacy::{LayerRule, PrivacyProbeConfig};
use crate::servergcn::Pooling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    /// Directory holding the four gzipped (or raw) IDX files.
    pub dir: PathBuf,
    /// Seeded subsample sizes; `None` keeps the whole split.
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSettings {
    pub num_clients: usize,
    /// `None` uses `max(0.03, 1/M)`.
    pub feature_frac: Option<f64>,
    pub sample_frac: f64,
}

impl PartitionSettings {
    pub fn resolved(&self) -> PartitionConfig {
        PartitionConfig {
            num_clients: self.num_clients,
            feature_frac: self.feature_frac.unwrap_or_else(|| auto_feature_frac(self.num_clients)),
            sample_frac: self.sample_frac,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySettings {
    pub probe: PrivacyProbeConfig,
    pub rule: LayerRule,
    /// Fixed extractor depth for every client; `None` uses each client's selected depth.
    pub fixed_depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringSettings {
    pub delta: usize,
    pub alpha: f64,
    pub methods: Vec<ClusterMode>,
    /// Runs the δ sweep on one client when present.
    pub validation: Option<DeltaValidationConfig>,
    pub selection_tolerance: f64,
    /// Use the δ picked by the sweep instead of `delta`.
    pub use_validated_delta: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSettings {
    pub layers: usize,
    pub width: usize,
    pub pooling: Pooling,
    pub self_loops: bool,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: DataSettings,
    pub partition: PartitionSettings,
    pub client: ClientConfig,
    pub privacy: PrivacySettings,
    pub clustering: ClusteringSettings,
    pub server: ServerSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Workstation scale: 10 clients, 8k/2k samples, 64-wide networks.
    Desk,
    /// The published setting: 50 clients, full data, 256-wide networks. Long-running.
    Paper,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

/// Default location of the dataset, relative to the working directory.
pub const DEFAULT_DATA_DIR: &str = "data/fashion-mnist";

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn desk() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            data: DataSettings {
                dir: PathBuf::from(DEFAULT_DATA_DIR),
                train_samples: Some(8000),
                test_samples: Some(2000),
            },
            partition: PartitionSettings {
                num_clients: 10,
                feature_frac: None,
                sample_frac: 1.0,
            },
            client: ClientConfig {
                width: 64,
                hidden_layers: 4,
                ..ClientConfig::default()
            },
            privacy: PrivacySettings {
                probe: PrivacyProbeConfig {
                    sample_budget: 128,
                    ..PrivacyProbeConfig::default()
                },
                rule: LayerRule::SteepestDrop,
                fixed_depth: None,
            },
            clustering: ClusteringSettings {
                delta: 65,
                alpha: 0.7,
                methods: ClusterMode::ALL.to_vec(),
                validation: Some(DeltaValidationConfig {
                    repeats: 5,
                    ..DeltaValidationConfig::default()
                }),
                selection_tolerance: 0.02,
                use_validated_delta: false,
            },
            server: ServerSettings {
                layers: 2,
                width: 64,
                pooling: Pooling::Mean,
                self_loops: true,
                adam: AdamConfig::default(),
                epochs: 50,
                batch_size: 16,
            },
        }
    }

    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            precision: Precision::F32,
            data: DataSettings {
                train_samples: None,
                test_samples: None,
                ..desk.data
            },
            partition: PartitionSettings {
                num_clients: 50,
                ..desk.partition
            },
            client: ClientConfig::default(),
            privacy: PrivacySettings {
                probe: PrivacyProbeConfig::default(),
                ..desk.privacy
            },
            clustering: ClusteringSettings {
                validation: Some(DeltaValidationConfig::default()),
                ..desk.clustering
            },
            server: ServerSettings {
                width: 256,
                ..desk.server
            },
            ..desk
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks numeric bounds. Dataset paths are checked separately by [`ExperimentConfig::validate_paths`].
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.partition.resolved().validate().map_err(cfg_err)?;
        self.privacy.probe.validate().map_err(cfg_err)?;
        let c = &self.client;
        if c.width == 0 || c.hidden_layers == 0 || c.batch_size == 0 {
            return Err(Error::Config("client width, hidden_layers and batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&c.holdout_frac) {
            return Err(Error::Config(format!("holdout_frac must lie in [0, 1), got {}", c.holdout_frac)));
        }
        if let Some(j) = self.privacy.fixed_depth {
            if j == 0 || j > c.hidden_layers {
                return Err(Error::Config(format!("fixed_depth {j} outside 1..={}", c.hidden_layers)));
            }
        }
        let k = &self.clustering;
        if k.delta == 0 || !(0.0..=1.0).contains(&k.alpha) {
            return Err(Error::Config("clustering needs δ ≥ 1 and α in [0, 1]".into()));
        }
        if k.methods.is_empty() {
            return Err(Error::Config("no clustering methods selected".into()));
        }
        if let Some(v) = &k.validation {
            if v.grid.is_empty() || v.repeats == 0 || v.batch_size == 0 {
                return Err(Error::Config("δ validation needs a grid, repeats ≥ 1 and batch ≥ 1".into()));
            }
        } else if k.use_validated_delta {
            return Err(Error::Config("use_validated_delta requires a validation block".into()));
        }
        let s = &self.server;
        if s.layers == 0 || s.width == 0 || s.batch_size == 0 {
            return Err(Error::Config("server layers, width and batch_size must be ≥ 1".into()));
        }
        for (name, lr) in [("client", c.adam.lr), ("server", s.adam.lr)] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} learning rate must be > 0")));
            }
        }
        if matches!(self.data.train_samples, Some(0)) || matches!(self.data.test_samples, Some(0)) {
            return Err(Error::Config("sample counts must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn validate_paths(&self) -> Result<()> {
        for (images, labels) in DATA_FILES {
            for name in [images, labels] {
                if resolve_idx(&self.data.dir, name).is_none() {
                    return Err(Error::Config(format!(
                        "missing {name}(.gz) in {}; run scripts/fetch_fashion_mnist.py",
                        self.data.dir.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (object keys sorted, no whitespace).
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hex_sha256(serde_json::to_string(&value).expect("value serialises").as_bytes())
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `(images, labels)` base names of the training and test splits.
pub const DATA_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

/// `dir/name.gz` if present, else `dir/name`.
pub fn resolve_idx(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(format!("{name}.gz")), dir.join(name)]
        .into_iter()
        .find(|p| p.is_file())
}
