//! End-to-end experiment: stages, checkpoints, metrics and evaluation.
//!
//! Stages run in order: partition, client training, privacy scoring, optional
//! δ sweep, clustering, server training and evaluation. Each stage writes
//! `metrics/<stage>.csv` and, where later stages need its result, a
//! checkpoint under `checkpoints/`. A stage run on its own loads its inputs
//! from those checkpoints.

pub mod checkpoint;
pub mod config;
pub mod metrics;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Precision, Preset};
pub use metrics::MetricsRecord;
pub use report::{report, Report};

use crate::client::{accuracy, embed, holdout_split, ClientModel, EmbeddingTable, FitConfig};
use crate::clustering::{
    centroid_batch, centroids, crc, kmeans_clusters, random_clustering, select_delta, validate_delta, Cluster,
    ClusterMode, DeltaPoint, GroupEmbeddings,
};
use crate::data::{load_idx, partition, partition_samples, HybridPartition};
use crate::data::{normalize, sample_groups, ClientData, Dataset, SampleGroup, Split};
use crate::error::{Error, Result};
use crate::graph::{build_graph, ClientGraph};
use crate::numcore::Mlp;
use crate::privacy::{privacy_report, PrivacyReport};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::seed_path;
use crate::servergcn::{GcnConfig, GcnModel, NodeBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Partition,
    TrainClients,
    PrivacyScore,
    ValidateDelta,
    Cluster,
    TrainServer,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Partition,
        Stage::TrainClients,
        Stage::PrivacyScore,
        Stage::ValidateDelta,
        Stage::Cluster,
        Stage::TrainServer,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Partition => "partition",
            Stage::TrainClients => "train_clients",
            Stage::PrivacyScore => "privacy_score",
            Stage::ValidateDelta => "validate_delta",
            Stage::Cluster => "cluster",
            Stage::TrainServer => "train_server",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Train/test sample ownership; feature ownership lives in `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionArtifact {
    pub train: HybridPartition,
    pub test_sample_sets: Vec<Vec<usize>>,
}

impl PartitionArtifact {
    pub fn test_client_sets(&self) -> Vec<Vec<usize>> {
        let n = self.test_sample_sets.iter().flatten().max().map_or(0, |&m| m + 1);
        let mut sets = vec![Vec::new(); n];
        for (m, samples) in self.test_sample_sets.iter().enumerate() {
            for &s in samples {
                sets[s].push(m);
            }
        }
        sets
    }
}

pub struct DeltaInputs<T> {
    pub client: usize,
    pub head: Mlp<T>,
    pub train: EmbeddingTable<T>,
    pub train_labels: Vec<usize>,
    pub holdout: EmbeddingTable<T>,
    pub holdout_labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaArtifact {
    pub client: usize,
    pub curve: Vec<DeltaPoint>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupClusters {
    pub client_key: Vec<usize>,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub delta: usize,
    pub methods: BTreeMap<ClusterMode, Vec<GroupClusters>>,
}

/// Accuracy per method on the test split, plus the mean local accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub baseline: f64,
    pub methods: BTreeMap<ClusterMode, f64>,
    pub test_samples: usize,
    pub uncovered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageTiming {
    stage: String,
    duration_secs: f64,
    resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Summary {
    fingerprint: String,
    seed: u64,
    precision: Precision,
    stages: Vec<StageTiming>,
    evaluation: Option<Evaluation>,
}

/// One experiment bound to an output directory.
pub struct Experiment<T> {
    pub cfg: ExperimentConfig,
    pub fingerprint: String,
    pub out: PathBuf,
    data: Option<(Dataset<T>, Dataset<T>)>,
    partition: Option<PartitionArtifact>,
    clients: Option<Vec<ClientModel<T>>>,
    privacy: Option<Vec<PrivacyReport>>,
    delta: Option<DeltaArtifact>,
    clusters: Option<ClusterArtifact>,
    servers: Option<BTreeMap<ClusterMode, GcnModel<T>>>,
    evaluation: Option<Evaluation>,
    timings: Vec<StageTiming>,
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| e.in_stage(stage.name())
}

fn missing(what: &str, path: &Path) -> Error {
    Error::validation(format!(
        "missing {what}: {} not found (run the earlier stages first)",
        path.display()
    ))
}

impl<T: Scalar> Experiment<T> {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            fingerprint: cfg.fingerprint(),
            cfg,
            out: out.into(),
            data: None,
            partition: None,
            clients: None,
            privacy: None,
            delta: None,
            clusters: None,
            servers: None,
            evaluation: None,
            timings: Vec::new(),
        })
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.out.join("metrics")
    }

    pub fn figures_dir(&self) -> PathBuf {
        self.out.join("figures")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{name}.fgck"))
    }

    fn seed(&self, path: &[crate::rng::SeedPart<'_>]) -> u64 {
        derive_seed(self.cfg.seed, path)
    }

    fn load_checkpoint(&self, name: &str, what: &str) -> Result<Checkpoint> {
        let path = self.checkpoint_path(name);
        if !path.is_file() {
            return Err(missing(what, &path));
        }
        let ck = Checkpoint::load(&path)?;
        if ck.fingerprint != self.fingerprint {
            return Err(Error::validation(format!(
                "{} was written by a different configuration ({} vs {})",
                path.display(),
                ck.fingerprint,
                self.fingerprint
            )));
        }
        Ok(ck)
    }

    fn checkpoint_ok(&self, name: &str) -> bool {
        Checkpoint::load(&self.checkpoint_path(name)).is_ok_and(|ck| ck.fingerprint == self.fingerprint)
    }

    fn write_metrics(&self, rec: &MetricsRecord) -> Result<()> {
        rec.write(&self.metrics_dir())
    }

    // ---- data -----------------------------------------------------------

    fn ensure_data(&mut self) -> Result<()> {
        if self.data.is_some() {
            return Ok(());
        }
        self.cfg.validate_paths()?;
        let dir = &self.cfg.data.dir;
        let file = |name: &str| config::resolve_idx(dir, name).expect("checked by validate_paths");
        let mut splits = Vec::new();
        for (((images, labels), split), limit) in config::DATA_FILES
            .iter()
            .zip([Split::Train, Split::Test])
            .zip([self.cfg.data.train_samples, self.cfg.data.test_samples])
        {
            let raw: Dataset<T> = load_idx(&file(images), &file(labels), split)?;
            let mut ds = normalize(&raw);
            if let Some(n) = limit {
                let tag = if split == Split::Train { "train" } else { "test" };
                ds = ds.subsample(n.min(ds.len()), self.seed(seed_path!["data", tag]))?;
            }
            info!("loaded {tag:?} split: {} samples", ds.len(), tag = split);
            splits.push(ds);
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        if train.num_features() != test.num_features() {
            return Err(Error::shape("test split features", train.num_features(), test.num_features()));
        }
        self.data = Some((train, test));
        Ok(())
    }

    fn num_classes(&self) -> usize {
        let (train, test) = self.data.as_ref().expect("data loaded");
        train.num_classes.max(test.num_classes)
    }

    // ---- partition ------------------------------------------------------

    pub fn run_partition(&mut self) -> Result<()> {
        self.timed(Stage::Partition, |e| e.partition_stage())
    }

    fn partition_stage(&mut self) -> Result<()> {
        self.ensure_data()?;
        let (train, test) = self.data.as_ref().expect("data loaded");
        let pcfg = self.cfg.partition.resolved();
        let train_part = partition(train.len(), train.num_features(), &pcfg, self.cfg.seed)?;
        let (test_sets, _, _) = partition_samples(test.len(), &pcfg, self.cfg.seed, "test")?;
        let artifact = PartitionArtifact {
            train: train_part,
            test_sample_sets: test_sets,
        };
        let graph = build_graph(&artifact.train, self.cfg.server.self_loops)?;
        let mut rec = MetricsRecord::new(Stage::Partition.name(), &self.fingerprint);
        let p = &artifact.train;
        rec.scalar("clients", p.num_clients as f64);
        rec.scalar("feature_frac", pcfg.feature_frac);
        rec.scalar("train_samples", p.num_samples as f64);
        rec.scalar("test_samples", test.len() as f64);
        let mut held = vec![false; p.num_features];
        p.feature_sets.iter().flatten().for_each(|&r| held[r] = true);
        rec.scalar("features_held", held.iter().filter(|h| **h).count() as f64);
        let summary = graph.summary();
        rec.scalar("graph_edges", summary.edges as f64);
        rec.scalar("graph_density", summary.density);
        rec.scalar("repair_features_assigned", p.repairs.features_assigned as f64);
        rec.scalar("repair_samples_assigned", p.repairs.samples_assigned as f64);
        rec.push_series("features_per_client", p.feature_sets.iter().map(|f| f.len() as f64).collect());
        rec.push_series("samples_per_client", p.sample_sets.iter().map(|s| s.len() as f64).collect());
        let mut ck = Checkpoint::new("partition", &self.fingerprint, serde_json::to_value(&artifact)?);
        ck.meta["graph_edges"] = json!(summary.edges);
        ck.save(&self.checkpoint_path("partition"))?;
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("graph_adjacency.csv"), graph.adjacency_csv())?;
        self.write_metrics(&rec)?;
        self.partition = Some(artifact);
        Ok(())
    }

    fn ensure_partition(&mut self) -> Result<()> {
        if self.partition.is_none() {
            let ck = self.load_checkpoint("partition", "partition")?;
            let artifact: PartitionArtifact = serde_json::from_value(ck.meta)?;
            artifact.train.validate()?;
            self.partition = Some(artifact);
        }
        Ok(())
    }

    fn client_view(&self, m: usize, split: Split) -> ClientData<T> {
        let (train, test) = self.data.as_ref().expect("data loaded");
        let p = self.partition.as_ref().expect("partition loaded");
        match split {
            Split::Train => train.view(&p.train.feature_sets[m], &p.train.sample_sets[m]),
            Split::Test => test.view(&p.train.feature_sets[m], &p.test_sample_sets[m]),
        }
    }

    /// The client's local training rows and its early-stopping holdout.
    fn client_split(&self, m: usize) -> (ClientData<T>, ClientData<T>) {
        let view = self.client_view(m, Split::Train);
        holdout_split(&view, self.cfg.client.holdout_frac, self.seed(seed_path!["client", m, "holdout"]))
    }

    // ---- client training -----------------------------------------------

    pub fn run_train_clients(&mut self) -> Result<()> {
        self.timed(Stage::TrainClients, |e| e.train_clients_stage())
    }

    fn train_clients_stage(&mut self) -> Result<()> {
        self.ensure_data()?;
        self.ensure_partition()?;
        let num_clients = self.cfg.partition.num_clients;
        let classes = self.num_classes();
        let fit = FitConfig::from(&self.cfg.client);
        let mut rec = MetricsRecord::new(Stage::TrainClients.name(), &self.fingerprint);
        let mut clients = Vec::with_capacity(num_clients);
        let mut local = Vec::with_capacity(num_clients);
        for m in 0..num_clients {
            let (train, holdout) = self.client_split(m);
            let mut model = ClientModel::new(
                m,
                train.features.cols(),
                classes,
                &self.cfg.client,
                self.seed(seed_path!["client", m, "init"]),
            )?;
            let report = model.train_local(&train, Some(&holdout), &fit, self.seed(seed_path!["client", m, "train"]))?;
            let acc = model.evaluate_local(&self.client_view(m, Split::Test))?;
            info!(
                "client {m}: {} features, local accuracy {acc:.4} (kept epoch {})",
                train.features.cols(),
                report.best_epoch
            );
            rec.scalar(format!("local_accuracy.c{m}"), acc);
            rec.scalar(format!("best_epoch.c{m}"), report.best_epoch as f64);
            rec.push_series(format!("train_loss.c{m}"), report.train_loss.clone());
            rec.push_series(format!("val_loss.c{m}"), report.val_loss.clone());
            let mut ck = Checkpoint::new(
                "client",
                &self.fingerprint,
                json!({"client_id": m, "input_dim": train.features.cols(), "split_index": model.split_index}),
            );
            ck.push_mlp("net", &model.net);
            ck.save(&self.checkpoint_path(&format!("client_{m:03}")))?;
            local.push(acc);
            clients.push(model);
        }
        rec.scalar("baseline_accuracy", local.iter().sum::<f64>() / local.len() as f64);
        self.write_metrics(&rec)?;
        self.clients = Some(clients);
        // downstream results depend on the trained clients
        self.privacy = None;
        Ok(())
    }

    fn ensure_clients(&mut self) -> Result<()> {
        if self.clients.is_some() {
            return Ok(());
        }
        self.ensure_data()?;
        self.ensure_partition()?;
        let classes = self.num_classes();
        let mut clients = Vec::new();
        for m in 0..self.cfg.partition.num_clients {
            let ck = self.load_checkpoint(&format!("client_{m:03}"), &format!("trained client {m}"))?;
            let input_dim = self.partition.as_ref().expect("partition loaded").train.feature_sets[m].len();
            let mut model = ClientModel::new(m, input_dim, classes, &self.cfg.client, 0)?;
            ck.load_mlp_into("net", &mut model.net)?;
            clients.push(model);
        }
        self.clients = Some(clients);
        Ok(())
    }

    // ---- privacy scoring -----------------------------------------------

    pub fn run_privacy_score(&mut self) -> Result<()> {
        self.timed(Stage::PrivacyScore, |e| e.privacy_stage())
    }

    fn privacy_stage(&mut self) -> Result<()> {
        self.ensure_clients()?;
        let mut probe = self.cfg.privacy.probe;
        probe.seed = self.seed(seed_path!["privacy"]);
        let rule = self.cfg.privacy.rule;
        let mut rec = MetricsRecord::new(Stage::PrivacyScore.name(), &self.fingerprint);
        let mut reports = Vec::new();
        for m in 0..self.cfg.partition.num_clients {
            let (train, _) = self.client_split(m);
            let client = &self.clients.as_ref().expect("clients loaded")[m];
            let report = privacy_report(client, &train, &probe, rule)?;
            info!("client {m}: privacy scores {:?}, selected depth {}", report.scores, report.selected);
            for &(j, s) in &report.scores {
                rec.scalar(format!("score.c{m}.j{j}"), s);
            }
            rec.scalar(format!("selected.c{m}"), report.selected as f64);
            reports.push(report);
        }
        let depths = self.apply_depths(&reports);
        rec.push_series("extractor_depth", depths.iter().map(|&d| d as f64).collect());
        let ck = Checkpoint::new("privacy", &self.fingerprint, json!({"reports": reports, "depths": depths}));
        ck.save(&self.checkpoint_path("privacy"))?;
        self.write_metrics(&rec)?;
        self.privacy = Some(reports);
        Ok(())
    }

    /// Sets every client's split index; returns the depths used.
    fn apply_depths(&mut self, reports: &[PrivacyReport]) -> Vec<usize> {
        let fixed = self.cfg.privacy.fixed_depth;
        let clients = self.clients.as_mut().expect("clients loaded");
        clients
            .iter_mut()
            .zip(reports)
            .map(|(c, r)| {
                c.split_index = fixed.unwrap_or(r.selected);
                c.split_index
            })
            .collect()
    }

    fn ensure_privacy(&mut self) -> Result<()> {
        self.ensure_clients()?;
        if self.privacy.is_none() {
            let ck = self.load_checkpoint("privacy", "privacy scores")?;
            let reports: Vec<PrivacyReport> = serde_json::from_value(ck.meta["reports"].clone())?;
            if reports.len() != self.cfg.partition.num_clients {
                return Err(Error::validation("privacy checkpoint has the wrong client count"));
            }
            self.apply_depths(&reports);
            self.privacy = Some(reports);
        }
        Ok(())
    }

    fn extractor_embeddings(&self, m: usize, data: &ClientData<T>) -> Result<EmbeddingTable<T>> {
        let client = &self.clients.as_ref().expect("clients loaded")[m];
        embed(m, &client.extractor()?, data)
    }

    // ---- δ sweep ----------------------------------------------------------

    pub fn run_validate_delta(&mut self) -> Result<()> {
        self.timed(Stage::ValidateDelta, |e| e.delta_stage())
    }

    fn delta_stage(&mut self) -> Result<()> {
        let Some(vcfg) = self.cfg.clustering.validation.clone() else {
            info!("no δ validation configured; skipping");
            return Ok(());
        };
        let inputs = self.delta_inputs()?;
        let m = inputs.client;
        let curve = validate_delta(
            &inputs.head,
            &inputs.train,
            &inputs.train_labels,
            &inputs.holdout,
            &inputs.holdout_labels,
            inputs.num_classes,
            &vcfg,
            inputs.seed,
        )?;
        let selected = select_delta(&curve, self.cfg.clustering.selection_tolerance)?;
        info!("δ sweep on client {m}: selected δ = {selected}");
        let mut rec = MetricsRecord::new(Stage::ValidateDelta.name(), &self.fingerprint);
        rec.scalar("client", m as f64);
        for p in &curve {
            rec.scalar(format!("accuracy.d{}", p.delta), p.accuracy);
            rec.scalar(format!("std.d{}", p.delta), p.std);
        }
        rec.scalar("selected_delta", selected as f64);
        let artifact = DeltaArtifact { client: m, curve, selected };
        Checkpoint::new("delta", &self.fingerprint, serde_json::to_value(&artifact)?)
            .save(&self.checkpoint_path("delta"))?;
        self.write_metrics(&rec)?;
        self.delta = Some(artifact);
        Ok(())
    }

    /// Embeddings, labels and head of the client chosen for the δ sweep.
    pub fn delta_inputs(&mut self) -> Result<DeltaInputs<T>> {
        self.ensure_privacy()?;
        let m = (self.seed(seed_path!["delta", "client"]) % self.cfg.partition.num_clients as u64) as usize;
        let (train, holdout) = self.client_split(m);
        Ok(DeltaInputs {
            client: m,
            head: self.clients.as_ref().expect("clients loaded")[m].head()?,
            train: self.extractor_embeddings(m, &train)?,
            train_labels: train.labels.clone(),
            holdout: self.extractor_embeddings(m, &holdout)?,
            holdout_labels: holdout.labels.clone(),
            num_classes: self.num_classes(),
            seed: self.seed(seed_path!["delta"]),
        })
    }

    fn cluster_delta(&mut self) -> Result<usize> {
        if !self.cfg.clustering.use_validated_delta {
            return Ok(self.cfg.clustering.delta);
        }
        if self.delta.is_none() {
            let ck = self.load_checkpoint("delta", "δ sweep")?;
            self.delta = Some(serde_json::from_value(ck.meta)?);
        }
        Ok(self.delta.as_ref().expect("delta loaded").selected)
    }

    // ---- clustering -----------------------------------------------------

    /// Training-split embeddings of every client over all its samples.
    fn train_embeddings(&self) -> Result<Vec<EmbeddingTable<T>>> {
        (0..self.cfg.partition.num_clients)
            .map(|m| self.extractor_embeddings(m, &self.client_view(m, Split::Train)))
            .collect()
    }

    fn group_embeddings(tables: &[EmbeddingTable<T>], group: &SampleGroup) -> Result<GroupEmbeddings<T>> {
        let per_client = group
            .client_key
            .iter()
            .map(|&m| {
                let t = &tables[m];
                let rows = rows_of(&t.sample_ids, &group.members)?;
                Ok(t.vectors.select_rows(&rows))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroupEmbeddings {
            client_key: group.client_key.clone(),
            sample_ids: group.members.clone(),
            per_client,
        })
    }

    pub fn run_cluster(&mut self) -> Result<()> {
        self.timed(Stage::Cluster, |e| e.cluster_stage())
    }

    fn cluster_stage(&mut self) -> Result<()> {
        self.ensure_privacy()?;
        let delta = self.cluster_delta()?;
        let alpha = self.cfg.clustering.alpha;
        let p = self.partition.as_ref().expect("partition loaded");
        let grouped = sample_groups(&p.train.client_sets(), false)?;
        let labels = &self.data.as_ref().expect("data loaded").0.labels;
        let tables = self.train_embeddings()?;
        let mut rec = MetricsRecord::new(Stage::Cluster.name(), &self.fingerprint);
        rec.scalar("delta", delta as f64);
        rec.scalar("groups", grouped.groups.len() as f64);
        rec.scalar("uncovered", grouped.uncovered.len() as f64);
        let mut methods = BTreeMap::new();
        for &mode in &self.cfg.clustering.methods {
            let mut per_group = Vec::new();
            let mut inertia = 0.0;
            for (g, group) in grouped.groups.iter().enumerate() {
                let seed = derive_seed(self.cfg.seed, seed_path!["cluster", mode.name(), g]);
                let group_labels: Vec<usize> = group.members.iter().map(|&n| labels[n]).collect();
                let clusters = match mode {
                    ClusterMode::Random => random_clustering(&group.members, delta, seed)?,
                    ClusterMode::Crc => crc(&group.members, &group_labels, delta, alpha, seed)?,
                    ClusterMode::Kmeans => {
                        let emb = Self::group_embeddings(&tables, group)?;
                        let (clusters, result) = kmeans_clusters(&group.members, &emb.concatenated()?, delta, seed)?;
                        inertia += result.inertia();
                        rec.scalar(format!("kmeans_iterations.g{g}"), result.iterations as f64);
                        clusters
                    }
                };
                per_group.push(GroupClusters {
                    client_key: group.client_key.clone(),
                    clusters,
                });
            }
            let all: Vec<&Cluster> = per_group.iter().flat_map(|g| &g.clusters).collect();
            let sizes: Vec<f64> = all.iter().map(|c| c.len() as f64).collect();
            let purity: f64 = all.iter().map(|c| majority_share(c, labels)).sum::<f64>() / all.len() as f64;
            let name = mode.name();
            rec.scalar(format!("clusters.{name}"), all.len() as f64);
            rec.scalar(format!("mean_size.{name}"), sizes.iter().sum::<f64>() / sizes.len() as f64);
            rec.scalar(format!("label_purity.{name}"), purity);
            if mode == ClusterMode::Kmeans {
                rec.scalar("kmeans_inertia", inertia);
            }
            info!("{name}: {} clusters, mean label purity {purity:.3}", all.len());
            methods.insert(mode, per_group);
        }
        let artifact = ClusterArtifact { delta, methods };
        Checkpoint::new("clusters", &self.fingerprint, serde_json::to_value(&artifact)?)
            .save(&self.checkpoint_path("clusters"))?;
        self.write_metrics(&rec)?;
        self.clusters = Some(artifact);
        Ok(())
    }

    fn ensure_clusters(&mut self) -> Result<()> {
        self.ensure_privacy()?;
        if self.clusters.is_none() {
            let ck = self.load_checkpoint("clusters", "clusters")?;
            self.clusters = Some(serde_json::from_value(ck.meta)?);
        }
        Ok(())
    }

    // ---- server ---------------------------------------------------------

    fn graph(&self) -> Result<ClientGraph> {
        build_graph(&self.partition.as_ref().expect("partition loaded").train, self.cfg.server.self_loops)
    }

    fn gcn_config(&self) -> GcnConfig {
        let clients = self.clients.as_ref().expect("clients loaded");
        GcnConfig {
            layers: self.cfg.server.layers,
            input_dim: clients[0].embedding_dim(),
            width: self.cfg.server.width,
            num_features: self.partition.as_ref().expect("partition loaded").train.num_features,
            num_classes: self.num_classes(),
            pooling: self.cfg.server.pooling,
        }
    }

    fn centroid_batches(&self, mode: ClusterMode, tables: &[EmbeddingTable<T>]) -> Result<Vec<NodeBatch<T>>> {
        let artifact = self.clusters.as_ref().expect("clusters loaded");
        let groups = artifact
            .methods
            .get(&mode)
            .ok_or_else(|| Error::validation(format!("no {} clusters in the checkpoint", mode.name())))?;
        let labels = &self.data.as_ref().expect("data loaded").0.labels;
        let mut batches = Vec::with_capacity(groups.len());
        for g in groups {
            let members: Vec<usize> = {
                let mut ids: Vec<usize> = g.clusters.iter().flat_map(|c| c.members()).collect();
                ids.sort_unstable();
                ids.dedup();
                ids
            };
            let group = SampleGroup {
                client_key: g.client_key.clone(),
                members,
            };
            let emb = Self::group_embeddings(tables, &group)?;
            let label_of: HashMap<usize, usize> = group.members.iter().map(|&n| (n, labels[n])).collect();
            let cs = centroids(&g.clusters, &emb, &label_of, self.num_classes())?;
            batches.push(centroid_batch(&cs)?);
        }
        Ok(batches)
    }

    pub fn run_train_server(&mut self) -> Result<()> {
        self.timed(Stage::TrainServer, |e| e.server_stage())
    }

    fn server_stage(&mut self) -> Result<()> {
        self.ensure_clusters()?;
        let graph = self.graph()?;
        let tables = self.train_embeddings()?;
        let gcfg = self.gcn_config();
        let s = &self.cfg.server;
        let fit = FitConfig {
            adam: s.adam,
            batch_size: s.batch_size,
            epochs: s.epochs,
            patience: 0,
        };
        let mut rec = MetricsRecord::new(Stage::TrainServer.name(), &self.fingerprint);
        let mut servers = BTreeMap::new();
        for &mode in &self.cfg.clustering.methods {
            let batches = self.centroid_batches(mode, &tables)?;
            let mut model = GcnModel::new(&gcfg, self.seed(seed_path!["server", "init"]))?;
            let report = model.train_server(&batches, &graph, &fit, self.seed(seed_path!["server", "train"]))?;
            let name = mode.name();
            let count: usize = batches.iter().map(|b| b.len()).sum();
            let mut hits = 0.0;
            for b in &batches {
                hits += model.batch_accuracy(b, &graph)? * b.len() as f64;
            }
            rec.scalar(format!("centroids.{name}"), count as f64);
            rec.scalar(format!("centroid_accuracy.{name}"), hits / count as f64);
            rec.push_series(format!("loss.{name}"), report.train_loss);
            info!("server ({name}): trained on {count} centroids");
            let mut ck = Checkpoint::new("server", &self.fingerprint, json!({"method": mode, "config": gcfg}));
            for (i, p) in model.param_slices().iter().enumerate() {
                ck.push(format!("param.{i}"), vec![p.len()], p);
            }
            ck.save(&self.checkpoint_path(&format!("server_{name}")))?;
            servers.insert(mode, model);
        }
        self.write_metrics(&rec)?;
        self.servers = Some(servers);
        Ok(())
    }

    fn ensure_servers(&mut self) -> Result<()> {
        self.ensure_privacy()?;
        if self.servers.is_some() {
            return Ok(());
        }
        let gcfg = self.gcn_config();
        let mut servers = BTreeMap::new();
        for &mode in &self.cfg.clustering.methods {
            let name = mode.name();
            let ck = self.load_checkpoint(&format!("server_{name}"), &format!("{name} server model"))?;
            let mut model = GcnModel::<T>::new(&gcfg, 0)?;
            for (i, p) in model.param_slices_mut().into_iter().enumerate() {
                let v = ck.vector::<T>(&format!("param.{i}"))?;
                if v.len() != p.len() {
                    return Err(Error::shape(format!("server param {i}"), p.len(), v.len()));
                }
                p.copy_from_slice(&v);
            }
            servers.insert(mode, model);
        }
        self.servers = Some(servers);
        Ok(())
    }

    // ---- evaluation -----------------------------------------------------

    pub fn run_evaluate(&mut self) -> Result<Evaluation> {
        self.timed(Stage::Evaluate, |e| e.evaluate_stage())?;
        Ok(self.evaluation.clone().expect("evaluation stored"))
    }

    fn evaluate_stage(&mut self) -> Result<()> {
        self.ensure_servers()?;
        let num_clients = self.cfg.partition.num_clients;
        let clients = self.clients.as_ref().expect("clients loaded");
        let mut local = Vec::with_capacity(num_clients);
        let mut tables = Vec::with_capacity(num_clients);
        for (m, client) in clients.iter().enumerate() {
            let view = self.client_view(m, Split::Test);
            local.push(client.evaluate_local(&view)?);
            tables.push(embed(m, &client.extractor()?, &view)?);
        }
        let baseline = local.iter().sum::<f64>() / num_clients as f64;
        let p = self.partition.as_ref().expect("partition loaded");
        let grouped = sample_groups(&p.test_client_sets(), false)?;
        let test_labels = &self.data.as_ref().expect("data loaded").1.labels;
        let graph = self.graph()?;
        let covered: usize = grouped.groups.iter().map(|g| g.members.len()).sum();
        let mut methods = BTreeMap::new();
        for (&mode, model) in self.servers.as_ref().expect("servers loaded") {
            let mut hits = 0.0;
            for group in &grouped.groups {
                let emb = Self::group_embeddings(&tables, group)?;
                let probs = model.predict(&emb.per_client, &graph, &group.client_key)?;
                let labels: Vec<usize> = group.members.iter().map(|&n| test_labels[n]).collect();
                hits += accuracy(&probs, &labels)? * labels.len() as f64;
            }
            let acc = if covered == 0 { 0.0 } else { hits / covered as f64 };
            info!("collaborative accuracy ({}): {acc:.4}", mode.name());
            methods.insert(mode, acc);
        }
        let uncovered = grouped.uncovered.len();
        let eval = Evaluation {
            baseline,
            methods,
            test_samples: covered + uncovered,
            uncovered,
        };
        let mut rec = MetricsRecord::new(Stage::Evaluate.name(), &self.fingerprint);
        rec.scalar("accuracy.baseline", eval.baseline);
        for (mode, acc) in &eval.methods {
            rec.scalar(format!("accuracy.{}", mode.name()), *acc);
        }
        rec.scalar("test_samples", eval.test_samples as f64);
        rec.scalar("uncovered", eval.uncovered as f64);
        rec.push_series("local_accuracy", local);
        self.write_metrics(&rec)?;
        self.evaluation = Some(eval);
        Ok(())
    }

    // ---- orchestration --------------------------------------------------

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Partition => self.run_partition(),
            Stage::TrainClients => self.run_train_clients(),
            Stage::PrivacyScore => self.run_privacy_score(),
            Stage::ValidateDelta => self.run_validate_delta(),
            Stage::Cluster => self.run_cluster(),
            Stage::TrainServer => self.run_train_server(),
            Stage::Evaluate => self.run_evaluate().map(|_| ()),
        }
    }

    /// Whether `stage` left a checkpoint and metrics for this configuration.
    fn stage_complete(&self, stage: Stage) -> bool {
        let metrics = self.metrics_dir().join(format!("{}.csv", stage.name()));
        let ok = |name: &str| self.checkpoint_ok(name);
        let done = match stage {
            Stage::Partition => ok("partition"),
            Stage::TrainClients => (0..self.cfg.partition.num_clients).all(|m| ok(&format!("client_{m:03}"))),
            Stage::PrivacyScore => ok("privacy"),
            Stage::ValidateDelta => self.cfg.clustering.validation.is_none() || ok("delta"),
            Stage::Cluster => ok("clusters"),
            Stage::TrainServer => self
                .cfg
                .clustering
                .methods
                .iter()
                .all(|m| ok(&format!("server_{}", m.name()))),
            Stage::Evaluate => false,
        };
        done && (metrics.is_file() || (stage == Stage::ValidateDelta && self.cfg.clustering.validation.is_none()))
    }

    /// Runs every stage in order; with `resume`, stages with valid checkpoints are skipped.
    pub fn run_all(&mut self, resume: bool) -> Result<Evaluation> {
        for stage in Stage::ALL {
            if resume && self.stage_complete(stage) {
                info!("resuming: {} already complete", stage.name());
                self.timings.push(StageTiming {
                    stage: stage.name().to_string(),
                    duration_secs: 0.0,
                    resumed: true,
                });
                continue;
            }
            self.run_stage(stage)?;
        }
        self.write_report()?;
        Ok(self.evaluation.clone().expect("evaluate ran"))
    }

    pub fn write_report(&self) -> Result<Report> {
        report(&self.out)
    }

    fn timed(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<()>) -> Result<()> {
        info!("stage {} started", stage.name());
        let start = Instant::now();
        f(self).map_err(stage_err(stage))?;
        let secs = start.elapsed().as_secs_f64();
        info!("stage {} finished in {secs:.1}s", stage.name());
        self.timings.push(StageTiming {
            stage: stage.name().to_string(),
            duration_secs: secs,
            resumed: false,
        });
        self.write_summary()
    }

    fn write_summary(&self) -> Result<()> {
        let summary = Summary {
            fingerprint: self.fingerprint.clone(),
            seed: self.cfg.seed,
            precision: self.cfg.precision,
            stages: self.timings.clone(),
            evaluation: self.evaluation.clone(),
        };
        let dir = self.metrics_dir();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        fs::write(self.out.join("config.json"), self.cfg.to_json_pretty())?;
        Ok(())
    }
}

/// Row index in `ids` of every member, in member order.
fn rows_of(ids: &[usize], members: &[usize]) -> Result<Vec<usize>> {
    let pos: HashMap<usize, usize> = ids.iter().enumerate().map(|(r, &n)| (n, r)).collect();
    members
        .iter()
        .map(|n| {
            pos.get(n)
                .copied()
                .ok_or_else(|| Error::validation(format!("no embedding for sample {n}")))
        })
        .collect()
}

/// Share of the most common label among a cluster's members.
fn majority_share(cluster: &Cluster, labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for n in cluster.members() {
        *counts.entry(labels[n]).or_default() += 1;
    }
    counts.values().max().copied().unwrap_or(0) as f64 / cluster.len().max(1) as f64
}

/// Runs `f` with the configured precision.
#[macro_export]
macro_rules! with_precision {
    ($precision:expr, $t:ident => $body:expr) => {
        match $precision {
            $crate::pipeline::Precision::F32 => {
                type $t = f32;
                $body
            }
            $crate::pipeline::Precision::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}
