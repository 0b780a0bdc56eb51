//! Per-client local networks: training, splitting into extractor and head, embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClientData;
use crate::error::{Error, Result};
use crate::numcore::{adam_step, argmax, cross_entropy, one_hot, Activation, AdamConfig, AdamState, Matrix, Mlp};
use crate::rng::rng_from;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    /// Units in every hidden layer; also the embedding width.
    pub width: usize,
    pub hidden_layers: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation-loss improvement before stopping; `0` disables early stopping.
    pub patience: usize,
    /// Share of the local training view held out for early stopping and δ-validation.
    pub holdout_frac: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            width: 256,
            hidden_layers: 5,
            adam: AdamConfig::default(),
            batch_size: 128,
            epochs: 30,
            patience: 5,
            holdout_frac: 0.1,
        }
    }
}

/// Mini-batch Adam schedule shared by client, head and server training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
}

impl From<&ClientConfig> for FitConfig {
    fn from(c: &ClientConfig) -> Self {
        Self {
            adam: c.adam,
            batch_size: c.batch_size,
            epochs: c.epochs,
            patience: c.patience,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Trains `net` on soft targets by mini-batch Adam. With a validation set and
/// `patience > 0` the parameters with the lowest validation loss are restored.
pub fn fit_classifier<T: Scalar, R: Rng>(
    net: &mut Mlp<T>,
    inputs: &Matrix<T>,
    targets: &Matrix<T>,
    validation: Option<(&Matrix<T>, &Matrix<T>)>,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    if inputs.rows() == 0 {
        return Err(Error::validation("training set is empty"));
    }
    if inputs.rows() != targets.rows() {
        return Err(Error::shape("fit targets", inputs.rows(), targets.rows()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let mut report = TrainReport::default();
    let mut state = AdamState::new(&cfg.adam);
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    let mut best: Option<(f64, Mlp<T>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs.select_rows(chunk);
            let y = targets.select_rows(chunk);
            let trace = net.forward(&x)?;
            let (loss, grad) = cross_entropy(trace.output(), &y)?;
            total += loss.as_f64() * chunk.len() as f64;
            let grads = net.backward(&trace, &grad)?;
            adam_step(&mut net.param_slices_mut(), &grads.slices(), &mut state)?;
        }
        report.train_loss.push(total / inputs.rows() as f64);
        report.best_epoch = epoch;
        if let (Some((vx, vy)), true) = (validation, cfg.patience > 0) {
            let (vl, _) = cross_entropy(&net.predict(vx)?, vy)?;
            let vl = vl.as_f64();
            report.val_loss.push(vl);
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, net.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, kept)) = best {
        report.best_epoch = report
            .val_loss
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i + 1);
        *net = kept;
    }
    Ok(report)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("accuracy over an empty set"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape("accuracy labels", logits.rows(), labels.len()));
    }
    let hits = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// A client's network over its own features. `split_index` hidden layers form the extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel<T> {
    pub client_id: usize,
    pub net: Mlp<T>,
    pub split_index: usize,
}

/// Embeddings of one client for a list of samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    pub client_id: usize,
    pub sample_ids: Vec<usize>,
    pub vectors: Matrix<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

impl<T: Scalar> ClientModel<T> {
    /// Fresh Glorot-initialised network `input -> width^hidden_layers -> classes`.
    pub fn new(client_id: usize, input_dim: usize, num_classes: usize, cfg: &ClientConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 || cfg.hidden_layers == 0 || cfg.width == 0 {
            return Err(Error::validation(format!(
                "client {client_id}: invalid architecture ({input_dim} inputs, {num_classes} classes, {} x {})",
                cfg.hidden_layers, cfg.width
            )));
        }
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(cfg.width, cfg.hidden_layers));
        dims.push(num_classes);
        let mut rng = rng_from(seed);
        Ok(Self {
            client_id,
            net: Mlp::glorot(&dims, Activation::Relu, Activation::Logits, &mut rng),
            split_index: cfg.hidden_layers,
        })
    }

    pub fn hidden_layers(&self) -> usize {
        self.net.depth() - 1
    }

    pub fn embedding_dim(&self) -> usize {
        self.net.layers[self.split_index - 1].out_dim()
    }

    /// Local training on `train`; `holdout` drives early stopping when given.
    pub fn train_local(
        &mut self,
        train: &ClientData<T>,
        holdout: Option<&ClientData<T>>,
        cfg: &FitConfig,
        seed: u64,
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::validation(format!("client {} has an empty training view", self.client_id)));
        }
        if train.features.cols() != self.net.input_dim() {
            return Err(Error::shape("client training view", self.net.input_dim(), train.features.cols()));
        }
        let targets = one_hot(&train.labels, train.num_classes);
        let val = holdout
            .filter(|h| !h.is_empty())
            .map(|h| (h.features.clone(), one_hot::<T>(&h.labels, h.num_classes)));
        let mut rng = rng_from(seed);
        fit_classifier(
            &mut self.net,
            &train.features,
            &targets,
            val.as_ref().map(|(x, y)| (x, y)),
            cfg,
            &mut rng,
        )
    }

    /// Extractor with the first `j` hidden layers and the head holding the rest.
    pub fn split(&self, j: usize) -> Result<(Mlp<T>, Mlp<T>)> {
        if j == 0 || j > self.hidden_layers() {
            return Err(Error::validation(format!(
                "split index {j} outside 1..={}",
                self.hidden_layers()
            )));
        }
        self.net.split_at(j)
    }

    pub fn extractor(&self) -> Result<Mlp<T>> {
        Ok(self.split(self.split_index)?.0)
    }

    pub fn head(&self) -> Result<Mlp<T>> {
        Ok(self.split(self.split_index)?.1)
    }

    pub fn evaluate_local(&self, data: &ClientData<T>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::validation(format!("client {} has an empty test view", self.client_id)));
        }
        accuracy(&self.net.predict(&data.features)?, &data.labels)
    }
}

/// Runs `extractor` over the client's rows.
pub fn embed<T: Scalar>(client_id: usize, extractor: &Mlp<T>, data: &ClientData<T>) -> Result<EmbeddingTable<T>> {
    if data.features.cols() != extractor.input_dim() {
        return Err(Error::shape("embed input", extractor.input_dim(), data.features.cols()));
    }
    Ok(EmbeddingTable {
        client_id,
        sample_ids: data.sample_ids.clone(),
        vectors: extractor.predict(&data.features)?,
    })
}

/// Seeded `(train, holdout)` split of a local view; the holdout takes `round(frac * n)` rows.
/// Both parts keep ascending sample order.
pub fn holdout_split<T: Scalar>(data: &ClientData<T>, frac: f64, seed: u64) -> (ClientData<T>, ClientData<T>) {
    let n = data.len();
    let k = ((frac * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let (mut hold, mut train) = (order[..k].to_vec(), order[k..].to_vec());
    hold.sort_unstable();
    train.sort_unstable();
    (data.subset(&train), data.subset(&hold))
}
