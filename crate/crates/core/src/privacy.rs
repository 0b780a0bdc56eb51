//! Privacy score of a client's feature extractor and the choice of its depth.
//!
//! The score measures how far an input can move while keeping its embedding,
//! under a perturbed extractor: an inner ascent over probe inputs alternates
//! with an outer descent over the extractor copy.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::client::ClientModel;
use crate::data::ClientData;
use crate::error::{Error, Result};
use crate::numcore::{laplace_noise_with, sgd_step, Clip, Matrix, Mlp, SgdState};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::seed_path;

/// Direction of the extractor update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterDirection {
    /// Minimise the embedding penalty.
    ShrinkPenalty,
    /// Minimise the negated penalty, i.e. grow it.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyProbeConfig {
    pub lambda: f64,
    /// Laplace scale of the initial input perturbation; 0 starts exactly at the sample.
    pub laplace_scale: f64,
    pub lr_x: f64,
    pub lr_theta: f64,
    pub clip_x: f64,
    pub clip_theta: f64,
    pub outer_rounds: usize,
    pub inner_steps_x: usize,
    pub inner_steps_theta: usize,
    pub sample_budget: usize,
    pub seed: u64,
    /// Optional box the probe inputs are clamped to after every step.
    pub clamp_inputs: Option<(f64, f64)>,
    pub outer_direction: OuterDirection,
}

impl Default for PrivacyProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e4,
            laplace_scale: 1e-3,
            lr_x: 1e-3,
            lr_theta: 1e-1,
            clip_x: 1e-2,
            clip_theta: 1e-4,
            outer_rounds: 200,
            inner_steps_x: 1,
            inner_steps_theta: 1,
            sample_budget: 256,
            seed: 0,
            clamp_inputs: None,
            outer_direction: OuterDirection::ShrinkPenalty,
        }
    }
}

impl PrivacyProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("lr_x", self.lr_x),
            ("lr_theta", self.lr_theta),
            ("clip_x", self.clip_x),
            ("clip_theta", self.clip_theta),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("privacy probe: {name} must be > 0, got {v}")));
            }
        }
        if !(self.laplace_scale >= 0.0) || !self.laplace_scale.is_finite() {
            return Err(Error::validation("privacy probe: laplace_scale must be ≥ 0"));
        }
        if self.sample_budget == 0 {
            return Err(Error::validation("privacy probe: sample_budget must be ≥ 1"));
        }
        if let Some((lo, hi)) = self.clamp_inputs {
            if !(lo < hi) {
                return Err(Error::validation("privacy probe: empty clamp box"));
            }
        }
        Ok(())
    }
}

/// Mutable state of one probe: the extractor copy, the probe inputs and the frozen targets.
#[derive(Debug, Clone)]
pub struct PrivacyProbeState<T> {
    pub layer: usize,
    pub perturbed: Mlp<T>,
    pub inputs: Matrix<T>,
    pub adversarial: Matrix<T>,
    reference: Matrix<T>,
    checksum: u64,
    /// Size of the population the probed rows were drawn from.
    pub population: usize,
}

fn fingerprint<T: Scalar>(m: &Matrix<T>) -> u64 {
    // FNV-1a over the f64 bit patterns
    m.as_slice().iter().fold(0xcbf2_9ce4_8422_2325, |h, v| {
        (h ^ v.as_f64().to_bits()).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Objective parts summed over the probed rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeObjective {
    /// Σ‖x̄ − x‖².
    pub diameter: f64,
    /// λ Σ‖f̃(x̄) − h‖².
    pub penalty: f64,
}

impl ProbeObjective {
    pub fn value(&self) -> f64 {
        self.diameter - self.penalty
    }
}

impl<T: Scalar> PrivacyProbeState<T> {
    /// Probe of `extractor` around `inputs`; `noise_seed` drives the initial perturbation.
    pub fn new(
        layer: usize,
        extractor: &Mlp<T>,
        inputs: Matrix<T>,
        population: usize,
        cfg: &PrivacyProbeConfig,
        noise_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if inputs.cols() != extractor.input_dim() {
            return Err(Error::shape("probe inputs", extractor.input_dim(), inputs.cols()));
        }
        let reference = extractor.predict(&inputs)?;
        let mut adversarial = inputs.clone();
        if cfg.laplace_scale > 0.0 {
            let mut rng = crate::rng::rng_from(noise_seed);
            let noise = laplace_noise_with(inputs.rows(), inputs.cols(), cfg.laplace_scale, &mut rng)?;
            adversarial.add_assign(&noise)?;
        }
        let mut state = Self {
            layer,
            perturbed: extractor.clone(),
            inputs,
            adversarial,
            checksum: fingerprint(&reference),
            reference,
            population,
        };
        state.clamp(cfg);
        Ok(state)
    }

    pub fn reference(&self) -> &Matrix<T> {
        &self.reference
    }

    fn clamp(&mut self, cfg: &PrivacyProbeConfig) {
        if let Some((lo, hi)) = cfg.clamp_inputs {
            let (lo, hi) = (T::of(lo), T::of(hi));
            self.adversarial.as_mut_slice().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        }
    }

    fn check_reference(&self) -> Result<()> {
        if fingerprint(&self.reference) != self.checksum {
            return Err(Error::contract("reference embeddings changed during a probe"));
        }
        Ok(())
    }

    /// Current objective parts.
    pub fn objective(&self, cfg: &PrivacyProbeConfig) -> Result<ProbeObjective> {
        let out = self.perturbed.predict(&self.adversarial)?;
        Ok(ProbeObjective {
            diameter: self.adversarial.sub(&self.inputs)?.sum_squares().as_f64(),
            penalty: cfg.lambda * out.sub(&self.reference)?.sum_squares().as_f64(),
        })
    }

    /// Gradient `2λ (f̃(x̄) − h)` of the penalty with respect to the extractor output.
    fn penalty_trace(&self, cfg: &PrivacyProbeConfig) -> Result<(crate::numcore::ActivationTrace<T>, Matrix<T>)> {
        let trace = self.perturbed.forward(&self.adversarial)?;
        let grad = trace.output().sub(&self.reference)?.scale(T::of(2.0 * cfg.lambda));
        Ok((trace, grad))
    }

    /// `inner_steps_x` clipped ascent steps on every probe input.
    pub fn inner_ascent(&mut self, cfg: &PrivacyProbeConfig) -> Result<()> {
        let sgd = SgdState::new(cfg.lr_x, Clip::Value(cfg.clip_x))?;
        for _ in 0..cfg.inner_steps_x {
            let (trace, out_grad) = self.penalty_trace(cfg)?;
            let penalty_grad = self.perturbed.backward(&trace, &out_grad)?.input;
            // descend on −(‖x̄ − x‖² − penalty)
            let descent = penalty_grad.sub(&self.adversarial.sub(&self.inputs)?.scale(T::of(2.0)))?;
            sgd_step(&mut [self.adversarial.as_mut_slice()], &[descent.as_slice()], &sgd)?;
            self.clamp(cfg);
        }
        Ok(())
    }

    /// `inner_steps_theta` clipped steps on the extractor copy with the probe inputs fixed.
    pub fn outer_descent(&mut self, cfg: &PrivacyProbeConfig) -> Result<()> {
        let sgd = SgdState::new(cfg.lr_theta, Clip::Value(cfg.clip_theta))?;
        for _ in 0..cfg.inner_steps_theta {
            let (trace, mut out_grad) = self.penalty_trace(cfg)?;
            if cfg.outer_direction == OuterDirection::Literal {
                out_grad.scale_in_place(-T::one());
            }
            let grads = self.perturbed.backward(&trace, &out_grad)?;
            sgd_step(&mut self.perturbed.param_slices_mut(), &grads.slices(), &sgd)?;
        }
        Ok(())
    }

    /// Runs the alternation and returns the objective scaled to the population size.
    pub fn run(&mut self, cfg: &PrivacyProbeConfig) -> Result<f64> {
        for _ in 0..cfg.outer_rounds {
            self.inner_ascent(cfg)?;
            self.outer_descent(cfg)?;
        }
        self.check_reference()?;
        let value = self.objective(cfg)?.value();
        if !value.is_finite() {
            return Err(Error::validation(format!("privacy score for layer {} diverged", self.layer)));
        }
        Ok(value * self.population as f64 / self.inputs.rows() as f64)
    }
}

/// Rows probed for a client: all of them, or `sample_budget` drawn uniformly.
pub fn probe_rows(population: usize, cfg: &PrivacyProbeConfig, client_id: usize) -> Vec<usize> {
    if population <= cfg.sample_budget {
        return (0..population).collect();
    }
    let mut rng = stream(cfg.seed, seed_path!["privacy", client_id, "rows"]);
    let mut rows = index::sample(&mut rng, population, cfg.sample_budget).into_vec();
    rows.sort_unstable();
    rows
}

/// Probe of the first `j` hidden layers of a trained client over its local rows.
pub fn init_probe<T: Scalar>(
    client: &ClientModel<T>,
    data: &ClientData<T>,
    j: usize,
    cfg: &PrivacyProbeConfig,
) -> Result<PrivacyProbeState<T>> {
    if data.is_empty() {
        return Err(Error::validation(format!("client {} has no rows to probe", client.client_id)));
    }
    let (extractor, _) = client.split(j)?;
    let rows = probe_rows(data.len(), cfg, client.client_id);
    let noise_seed = crate::rng::derive_seed(cfg.seed, seed_path!["privacy", client.client_id, "laplace"]);
    PrivacyProbeState::new(j, &extractor, data.features.select_rows(&rows), data.len(), cfg, noise_seed)
}

pub fn privacy_score<T: Scalar>(
    client: &ClientModel<T>,
    data: &ClientData<T>,
    j: usize,
    cfg: &PrivacyProbeConfig,
) -> Result<f64> {
    init_probe(client, data, j, cfg)?.run(cfg)
}

/// How a depth is read off the per-layer scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "tau")]
pub enum LayerRule {
    /// The layer just before the steepest relative decline.
    SteepestDrop,
    /// The deepest layer whose score is at least `tau` times the first.
    Threshold(f64),
}

/// Picks a depth from scores of layers `1..=scores.len()`.
pub fn select_layer(scores: &[f64], rule: LayerRule) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::validation("no layer scores to select from"));
    }
    if scores.len() == 1 {
        return Ok(1);
    }
    match rule {
        LayerRule::SteepestDrop => {
            let mut best: Option<(f64, usize)> = None;
            for j in 2..=scores.len() {
                let (prev, cur) = (scores[j - 2], scores[j - 1]);
                let decline = (prev - cur) / prev.abs().max(1e-12);
                if best.is_none_or(|(d, _)| decline >= d) {
                    best = Some((decline, j));
                }
            }
            Ok(match best {
                Some((d, j)) if d > 0.0 => j - 1,
                _ => scores.len(),
            })
        }
        LayerRule::Threshold(tau) => {
            let bar = tau * scores[0];
            Ok((1..=scores.len()).rev().find(|&j| scores[j - 1] >= bar).unwrap_or(1))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub client_id: usize,
    /// `(j, score)` for every candidate depth.
    pub scores: Vec<(usize, f64)>,
    pub selected: usize,
}

/// Scores every candidate depth `1..=hidden_layers` and selects one.
pub fn privacy_report<T: Scalar>(
    client: &ClientModel<T>,
    data: &ClientData<T>,
    cfg: &PrivacyProbeConfig,
    rule: LayerRule,
) -> Result<PrivacyReport> {
    let scores = (1..=client.hidden_layers())
        .map(|j| Ok((j, privacy_score(client, data, j, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = scores.iter().map(|s| s.1).collect();
    Ok(PrivacyReport {
        client_id: client.client_id,
        selected: select_layer(&values, rule)?,
        scores,
    })
}
