//! Server-side graph convolutional network.
//!
//! Layer 1 consumes `(h_m, h_l, e_ml)` for every neighbour pair, later layers
//! consume `(z_m, z_l)`, and a pooled linear head produces class logits.
//! The first map is linear, so the neighbour average of `gh(h_m ∘ h_l ∘ e_ml)`
//! equals `gh` applied to `h_m ∘ mean(h_l) ∘ mean(e_ml)`; the forward pass uses that form.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::client::{accuracy, FitConfig, TrainReport};
use crate::error::{Error, Result};
use crate::graph::ClientGraph;
use crate::numcore::{adam_step, axpy, cross_entropy, softmax, Activation, AdamState, DenseLayer, Matrix};
use crate::rng::rng_from;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    /// Total number of graph convolutions `K`.
    pub layers: usize,
    /// Embedding width delivered by the clients.
    pub input_dim: usize,
    /// Output width of every convolution.
    pub width: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnModel<T> {
    /// `width x (2 * input_dim + num_features)`
    pub conv1: DenseLayer<T>,
    /// `width x (2 * width)` each
    pub convs: Vec<DenseLayer<T>>,
    /// `num_classes x width`
    pub head: DenseLayer<T>,
    pub activation: Activation,
    pub pooling: Pooling,
    pub input_dim: usize,
    pub num_features: usize,
}

/// Inputs of one sample group: a `B x d` matrix per client in `client_key`, and `B` soft targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBatch<T> {
    pub client_key: Vec<usize>,
    pub inputs: Vec<Matrix<T>>,
    pub targets: Matrix<T>,
}

impl<T: Scalar> NodeBatch<T> {
    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.rows() == 0
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            client_key: self.client_key.clone(),
            inputs: self.inputs.iter().map(|m| m.select_rows(rows)).collect(),
            targets: self.targets.select_rows(rows),
        }
    }
}

struct LayerTrace<T> {
    /// Per node: own input, neighbour-mean input, pre-activation.
    own: Vec<Matrix<T>>,
    mean: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
}

/// Intermediates of a forward pass over one group.
pub struct GcnTrace<T> {
    /// Neighbour lists as positions into the key.
    nb: Vec<Vec<usize>>,
    edge_means: Vec<Vec<T>>,
    layers: Vec<LayerTrace<T>>,
    outputs: Vec<Matrix<T>>,
    pooled: Matrix<T>,
    pub logits: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct GcnGrads<T> {
    pub conv1: (Matrix<T>, Vec<T>),
    pub convs: Vec<(Matrix<T>, Vec<T>)>,
    pub head: (Matrix<T>, Vec<T>),
}

impl<T: Scalar> GcnGrads<T> {
    fn zeros_like(model: &GcnModel<T>) -> Self {
        let z = |l: &DenseLayer<T>| (Matrix::zeros(l.out_dim(), l.in_dim()), vec![T::zero(); l.out_dim()]);
        Self {
            conv1: z(&model.conv1),
            convs: model.convs.iter().map(z).collect(),
            head: z(&model.head),
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = vec![self.conv1.0.as_slice(), self.conv1.1.as_slice()];
        for (w, b) in &self.convs {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out.push(self.head.0.as_slice());
        out.push(self.head.1.as_slice());
        out
    }

    fn accumulate(&mut self, other: &Self, scale: T) {
        let add = |(w, b): &mut (Matrix<T>, Vec<T>), (ow, ob): &(Matrix<T>, Vec<T>)| {
            axpy(scale, ow.as_slice(), w.as_mut_slice());
            axpy(scale, ob, b);
        };
        add(&mut self.conv1, &other.conv1);
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            add(a, b);
        }
        add(&mut self.head, &other.head);
    }
}

/// Columns `[from, from + len)` of `m`.
fn col_block<T: Scalar>(m: &Matrix<T>, from: usize, len: usize) -> Matrix<T> {
    let idx: Vec<usize> = (from..from + len).collect();
    m.select_cols(&idx)
}

fn add_into_block<T: Scalar>(dst: &mut Matrix<T>, from: usize, src: &Matrix<T>) {
    for i in 0..src.rows() {
        let row = &mut dst.row_mut(i)[from..from + src.cols()];
        for (d, &s) in row.iter_mut().zip(src.row(i)) {
            *d += s;
        }
    }
}

fn mean_rows<T: Scalar>(parts: &[&Matrix<T>], rows: usize, cols: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(rows, cols);
    if parts.is_empty() {
        return out;
    }
    for p in parts {
        axpy(T::one(), p.as_slice(), out.as_mut_slice());
    }
    out.scale_in_place(T::one() / T::of_usize(parts.len()));
    out
}

impl<T: Scalar> GcnModel<T> {
    pub fn new(cfg: &GcnConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 || cfg.width == 0 || cfg.input_dim == 0 || cfg.num_classes < 2 {
            return Err(Error::validation(format!("invalid GCN configuration {cfg:?}")));
        }
        let mut rng = rng_from(seed);
        let conv1 = DenseLayer::glorot(2 * cfg.input_dim + cfg.num_features, cfg.width, Activation::Identity, &mut rng);
        let convs = (1..cfg.layers)
            .map(|_| DenseLayer::glorot(2 * cfg.width, cfg.width, Activation::Identity, &mut rng))
            .collect();
        let head = DenseLayer::glorot(cfg.width, cfg.num_classes, Activation::Logits, &mut rng);
        Ok(Self {
            conv1,
            convs,
            head,
            activation: Activation::Relu,
            pooling: cfg.pooling,
            input_dim: cfg.input_dim,
            num_features: cfg.num_features,
        })
    }

    pub fn layers(&self) -> usize {
        1 + self.convs.len()
    }

    pub fn width(&self) -> usize {
        self.conv1.out_dim()
    }


    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![self.conv1.weights.as_mut_slice(), self.conv1.bias.as_mut_slice()];
        for c in &mut self.convs {
            out.push(c.weights.as_mut_slice());
            out.push(c.bias.as_mut_slice());
        }
        out.push(self.head.weights.as_mut_slice());
        out.push(self.head.bias.as_mut_slice());
        out
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = vec![self.conv1.weights.as_slice(), self.conv1.bias.as_slice()];
        for c in &self.convs {
            out.push(c.weights.as_slice());
            out.push(c.bias.as_slice());
        }
        out.push(self.head.weights.as_slice());
        out.push(self.head.bias.as_slice());
        out
    }

    fn neighbor_positions(graph: &ClientGraph, key: &[usize]) -> Result<Vec<Vec<usize>>> {
        key.iter()
            .map(|&m| {
                let nb = graph.neighbors(m, key)?;
                Ok(nb
                    .iter()
                    .map(|l| key.iter().position(|k| k == l).expect("neighbour drawn from key"))
                    .collect())
            })
            .collect()
    }

    fn check_inputs(&self, inputs: &[Matrix<T>], key: &[usize], width: usize, what: &str) -> Result<usize> {
        if key.is_empty() {
            return Err(Error::validation("empty client set"));
        }
        if inputs.len() != key.len() {
            return Err(Error::validation(format!(
                "{what}: {} input matrices for {} clients",
                inputs.len(),
                key.len()
            )));
        }
        let rows = inputs[0].rows();
        for (m, x) in key.iter().zip(inputs) {
            if x.cols() != width {
                return Err(Error::shape(format!("{what} input of client {m}"), width, x.cols()));
            }
            if x.rows() != rows {
                return Err(Error::shape(format!("{what} rows of client {m}"), rows, x.rows()));
            }
        }
        Ok(rows)
    }

    /// One convolution given the linear layer split into `[own | neighbour | edge]` blocks.
    fn conv_layer(
        &self,
        layer: &DenseLayer<T>,
        inputs: &[Matrix<T>],
        nb: &[Vec<usize>],
        edge_means: Option<&[Vec<T>]>,
    ) -> Result<(LayerTrace<T>, Vec<Matrix<T>>)> {
        let rows = inputs[0].rows();
        let d = inputs[0].cols();
        let w_own = col_block(&layer.weights, 0, d);
        let w_nb = col_block(&layer.weights, d, d);
        let w_edge = edge_means.map(|_| col_block(&layer.weights, 2 * d, layer.in_dim() - 2 * d));
        let mut trace = LayerTrace {
            own: Vec::with_capacity(inputs.len()),
            mean: Vec::with_capacity(inputs.len()),
            pre: Vec::with_capacity(inputs.len()),
        };
        let mut out = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.iter().enumerate() {
            let parts: Vec<&Matrix<T>> = nb[i].iter().map(|&l| &inputs[l]).collect();
            let mean = mean_rows(&parts, rows, d);
            let pre = if nb[i].is_empty() {
                Matrix::zeros(rows, layer.out_dim())
            } else {
                let mut pre = x.matmul_t(&w_own)?;
                pre.add_assign(&mean.matmul_t(&w_nb)?)?;
                let mut shift = layer.bias.clone();
                if let (Some(we), Some(em)) = (&w_edge, edge_means) {
                    for (o, s) in shift.iter_mut().enumerate() {
                        *s += crate::numcore::dot(we.row(o), &em[i]);
                    }
                }
                pre.add_row_broadcast(&shift)?;
                pre
            };
            let act = self.activation;
            out.push(pre.map(|v| act.apply(v)));
            trace.own.push(x.clone());
            trace.mean.push(mean);
            trace.pre.push(pre);
        }
        Ok((trace, out))
    }

    fn edge_means(graph: &ClientGraph, key: &[usize], nb: &[Vec<usize>]) -> Vec<Vec<T>> {
        key.iter()
            .zip(nb)
            .map(|(&m, ls)| {
                let mut v = vec![T::zero(); graph.num_features];
                if ls.is_empty() {
                    return v;
                }
                let w = T::one() / T::of_usize(ls.len());
                for &l in ls {
                    if let Some(ids) = graph.edge_features(m, key[l]) {
                        ids.iter().for_each(|&r| v[r] += w);
                    }
                }
                v
            })
            .collect()
    }

    /// `z¹` for every client in `key`.
    pub fn conv1(&self, inputs: &[Matrix<T>], graph: &ClientGraph, key: &[usize]) -> Result<Vec<Matrix<T>>> {
        self.check_inputs(inputs, key, self.input_dim, "conv1")?;
        self.check_graph(graph)?;
        let nb = Self::neighbor_positions(graph, key)?;
        let em = Self::edge_means(graph, key, &nb);
        Ok(self.conv_layer(&self.conv1, inputs, &nb, Some(&em))?.1)
    }

    /// `z^k` from `z^{k-1}`, `k >= 2`.
    pub fn convk(&self, z: &[Matrix<T>], graph: &ClientGraph, key: &[usize], k: usize) -> Result<Vec<Matrix<T>>> {
        if k < 2 || k > self.layers() {
            return Err(Error::validation(format!("conv index {k} outside 2..={}", self.layers())));
        }
        self.check_inputs(z, key, self.width(), "convk")?;
        let nb = Self::neighbor_positions(graph, key)?;
        Ok(self.conv_layer(&self.convs[k - 2], z, &nb, None)?.1)
    }

    fn pool(&self, z: &[Matrix<T>]) -> Result<Matrix<T>> {
        if z.is_empty() {
            return Err(Error::validation("readout over an empty client set"));
        }
        let refs: Vec<&Matrix<T>> = z.iter().collect();
        let mut pooled = mean_rows(&refs, z[0].rows(), z[0].cols());
        if self.pooling == Pooling::Sum {
            pooled.scale_in_place(T::of_usize(z.len()));
        }
        Ok(pooled)
    }

    /// Class distribution from the last-layer node states.
    pub fn readout(&self, z: &[Matrix<T>]) -> Result<Matrix<T>> {
        let pooled = self.pool(z)?;
        Ok(softmax(&self.head.linear(&pooled)?))
    }

    fn check_graph(&self, graph: &ClientGraph) -> Result<()> {
        if graph.num_features != self.num_features {
            return Err(Error::shape("edge feature length", self.num_features, graph.num_features));
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &[Matrix<T>], graph: &ClientGraph, key: &[usize]) -> Result<GcnTrace<T>> {
        self.check_inputs(inputs, key, self.input_dim, "forward")?;
        self.check_graph(graph)?;
        let nb = Self::neighbor_positions(graph, key)?;
        let edge_means = Self::edge_means(graph, key, &nb);
        let mut layers = Vec::with_capacity(self.layers());
        let (t, mut z) = self.conv_layer(&self.conv1, inputs, &nb, Some(&edge_means))?;
        layers.push(t);
        for conv in &self.convs {
            let (t, next) = self.conv_layer(conv, &z, &nb, None)?;
            layers.push(t);
            z = next;
        }
        let pooled = self.pool(&z)?;
        let logits = self.head.linear(&pooled)?;
        Ok(GcnTrace {
            nb,
            edge_means,
            layers,
            outputs: z,
            pooled,
            logits,
        })
    }

    pub fn backward(&self, trace: &GcnTrace<T>, logit_grad: &Matrix<T>) -> Result<GcnGrads<T>> {
        if logit_grad.shape() != trace.logits.shape() {
            return Err(Error::shape(
                "GCN logit gradient",
                format!("{:?}", trace.logits.shape()),
                format!("{:?}", logit_grad.shape()),
            ));
        }
        let mut grads = GcnGrads::zeros_like(self);
        grads.head.0 = logit_grad.t_matmul(&trace.pooled)?;
        grads.head.1 = logit_grad.col_sums();
        let d_pooled = logit_grad.matmul(&self.head.weights)?;
        let nodes = trace.outputs.len();
        let node_scale = match self.pooling {
            Pooling::Mean => T::one() / T::of_usize(nodes),
            Pooling::Sum => T::one(),
        };
        let mut dz: Vec<Matrix<T>> = (0..nodes).map(|_| d_pooled.scale(node_scale)).collect();
        for k in (0..self.layers()).rev() {
            let layer = if k == 0 { &self.conv1 } else { &self.convs[k - 1] };
            let lt = &trace.layers[k];
            let d = lt.own[0].cols();
            let w_own = col_block(&layer.weights, 0, d);
            let w_nb = col_block(&layer.weights, d, d);
            let (gw, gb) = if k == 0 { &mut grads.conv1 } else { &mut grads.convs[k - 1] };
            let mut d_in: Vec<Matrix<T>> = (0..nodes).map(|_| Matrix::zeros(lt.own[0].rows(), d)).collect();
            for i in 0..nodes {
                if trace.nb[i].is_empty() {
                    continue;
                }
                let act = self.activation;
                let d_pre = dz[i].zip_map(&lt.pre[i], |g, p| g * act.derivative(p));
                add_into_block(gw, 0, &d_pre.t_matmul(&lt.own[i])?);
                add_into_block(gw, d, &d_pre.t_matmul(&lt.mean[i])?);
                let col = d_pre.col_sums();
                if k == 0 {
                    for (o, &c) in col.iter().enumerate() {
                        if c != T::zero() {
                            axpy(c, &trace.edge_means[i], &mut gw.row_mut(o)[2 * d..]);
                        }
                    }
                }
                axpy(T::one(), &col, gb);
                if k > 0 {
                    d_in[i].add_assign(&d_pre.matmul(&w_own)?)?;
                    let d_mean = d_pre.matmul(&w_nb)?;
                    let share = T::one() / T::of_usize(trace.nb[i].len());
                    for &l in &trace.nb[i] {
                        d_in[l].scaled_add_assign(share, &d_mean)?;
                    }
                }
            }
            dz = d_in;
        }
        Ok(grads)
    }

    /// Class distribution for samples held by `key`, from one `B x d` embedding matrix per client.
    pub fn predict(&self, embeddings: &[Matrix<T>], graph: &ClientGraph, key: &[usize]) -> Result<Matrix<T>> {
        Ok(softmax(&self.forward(embeddings, graph, key)?.logits))
    }

    /// Mini-batch Adam on soft-label cross-entropy over all centroid instances.
    pub fn train_server(
        &mut self,
        batches: &[NodeBatch<T>],
        graph: &ClientGraph,
        fit: &FitConfig,
        seed: u64,
    ) -> Result<TrainReport> {
        let instances: Vec<(usize, usize)> = batches
            .iter()
            .enumerate()
            .flat_map(|(b, nb)| (0..nb.len()).map(move |r| (b, r)))
            .collect();
        if instances.is_empty() {
            return Err(Error::validation("no centroids to train the server on"));
        }
        if fit.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        let mut rng = rng_from(seed);
        let mut state = AdamState::new(&fit.adam);
        let mut order = instances;
        let mut report = TrainReport::default();
        for epoch in 1..=fit.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(fit.batch_size) {
                let mut grads = GcnGrads::zeros_like(self);
                let mut by_group: Vec<(usize, Vec<usize>)> = Vec::new();
                for &(b, r) in chunk {
                    match by_group.iter_mut().find(|(g, _)| *g == b) {
                        Some((_, rows)) => rows.push(r),
                        None => by_group.push((b, vec![r])),
                    }
                }
                by_group.sort_by_key(|(g, _)| *g);
                for (b, rows) in &by_group {
                    let sub = batches[*b].select(rows);
                    let trace = self.forward(&sub.inputs, graph, &sub.client_key)?;
                    let (loss, g) = cross_entropy(&trace.logits, &sub.targets)?;
                    let weight = T::of_usize(rows.len()) / T::of_usize(chunk.len());
                    total += loss.as_f64() * rows.len() as f64;
                    grads.accumulate(&self.backward(&trace, &g)?, weight);
                }
                adam_step(&mut self.param_slices_mut(), &grads.slices(), &mut state)?;
            }
            report.train_loss.push(total / order.len() as f64);
            report.best_epoch = epoch;
        }
        Ok(report)
    }

    /// Accuracy of argmax predictions against the argmax of each target row.
    pub fn batch_accuracy(&self, batch: &NodeBatch<T>, graph: &ClientGraph) -> Result<f64> {
        let probs = self.predict(&batch.inputs, graph, &batch.client_key)?;
        let labels: Vec<usize> = batch.targets.row_iter().map(crate::numcore::argmax).collect();
        accuracy(&probs, &labels)
    }
}
