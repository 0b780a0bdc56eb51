use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam moment buffers. Buffers are shaped on the first step.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: &AdamConfig) -> Self {
        Self {
            step: 0,
            lr: T::of(cfg.lr),
            beta1: T::of(cfg.beta1),
            beta2: T::of(cfg.beta2),
            eps: T::of(cfg.eps),
            weight_decay: T::of(cfg.weight_decay),
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

fn check_alignment<T>(params: &[&mut [T]], grads: &[&[T]]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("optimizer parameter groups", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::shape(format!("optimizer group {i}"), p.len(), g.len()));
        }
    }
    Ok(())
}

/// Adam with L2 weight decay folded into the gradient (`g + wd * θ`).
pub fn adam_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>) -> Result<()> {
    check_alignment(params, grads)?;
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::contract("Adam state does not mirror the parameter shapes"));
    }
    state.step += 1;
    let one = T::one();
    let t = state.step as i32;
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    let (b1, b2, lr, eps, wd) = (state.beta1, state.beta2, state.lr, state.eps, state.weight_decay);
    for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[gi];
        let v = &mut state.v[gi];
        for k in 0..p.len() {
            let grad = g[k] + wd * p[k];
            m[k] = b1 * m[k] + (one - b1) * grad;
            v[k] = b2 * v[k] + (one - b2) * grad * grad;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "bound")]
pub enum Clip {
    None,
    /// Clamp every gradient element into `[-bound, bound]`.
    Value(f64),
    /// Rescale the whole gradient so its L2 norm is at most `bound`.
    Norm(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct SgdState<T> {
    pub lr: T,
    pub clip: Clip,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(lr: f64, clip: Clip) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::validation(format!("SGD learning rate must be > 0, got {lr}")));
        }
        match clip {
            Clip::Value(b) | Clip::Norm(b) if !(b > 0.0) => {
                Err(Error::validation(format!("clip bound must be > 0, got {b}")))
            }
            _ => Ok(Self { lr: T::of(lr), clip }),
        }
    }
}

/// `θ ← θ − lr · clip(g)`.
pub fn sgd_step<T: Scalar>(params: &mut [&mut [T]], grads: &[&[T]], state: &SgdState<T>) -> Result<()> {
    check_alignment(params, grads)?;
    let norm_scale = match state.clip {
        Clip::Norm(bound) => {
            let norm = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt();
            let bound = T::of(bound);
            if norm > bound {
                bound / norm
            } else {
                T::one()
            }
        }
        _ => T::one(),
    };
    let bound = match state.clip {
        Clip::Value(b) => Some(T::of(b)),
        _ => None,
    };
    for (p, g) in params.iter_mut().zip(grads) {
        for (pk, &gk) in p.iter_mut().zip(g.iter()) {
            let g = match bound {
                Some(b) => gk.max(-b).min(b),
                None => gk * norm_scale,
            };
            *pk -= state.lr * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(p: f64, g: f64, state: &mut AdamState<f64>) -> f64 {
        let mut p = [p];
        adam_step(&mut [&mut p[..]], &[&[g][..]], state).unwrap();
        p[0]
    }

    /// Direct transcription of the textbook recurrences, kept separate from the implementation.
    fn adam_reference(mut p: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = vec![];
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn adam_zero_gradient_no_decay_is_noop() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamState::new(&cfg);
        assert_eq!(step_scalar(0.25, 0.0, &mut st), 0.25);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        for g in [3.0, -0.02] {
            let mut st = AdamState::new(&cfg);
            let p = step_scalar(1.0, g, &mut st);
            assert!(((p - 1.0) + 1e-3 * g.signum()).abs() < 1e-8, "{p}");
        }
    }

    #[test]
    fn adam_matches_scripted_trajectory() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamState::new(&cfg);
        let p1 = step_scalar(0.5, 0.2, &mut st);
        let p2 = step_scalar(p1, 0.2, &mut st);
        let expect = adam_reference(0.5, &[0.2, 0.2], 1e-3, 0.9, 0.999, 1e-8);
        assert!((p1 - expect[0]).abs() < 1e-15 && (p2 - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn adam_weight_decay_shrinks_toward_zero() {
        let mut st = AdamState::new(&AdamConfig { weight_decay: 0.1, ..Default::default() });
        assert!(step_scalar(2.0, 0.0, &mut st) < 2.0);
    }

    #[test]
    fn adam_rejects_changed_shapes() {
        let mut st = AdamState::<f64>::new(&AdamConfig::default());
        let mut a = [0.0; 2];
        adam_step(&mut [&mut a[..]], &[&[1.0, 1.0][..]], &mut st).unwrap();
        let mut b = [0.0; 3];
        assert!(adam_step(&mut [&mut b[..]], &[&[1.0; 3][..]], &mut st).is_err());
    }

    #[test]
    fn sgd_value_clip() {
        let st = SgdState::<f64>::new(0.1, Clip::Value(0.01)).unwrap();
        let mut p = [1.0, 1.0, 1.0];
        sgd_step(&mut [&mut p[..]], &[&[5.0, 0.0, -0.001][..]], &st).unwrap();
        assert!((p[0] - (1.0 - 0.001)).abs() < 1e-15);
        assert_eq!(p[1], 1.0);
        assert!((p[2] - (1.0 + 1e-4)).abs() < 1e-15);

        let plain = SgdState::<f64>::new(1.0, Clip::None).unwrap();
        let mut q = [1.0];
        sgd_step(&mut [&mut q[..]], &[&[0.75][..]], &plain).unwrap();
        assert_eq!(q[0], 0.25);
    }

    #[test]
    fn sgd_norm_clip_rescales() {
        let st = SgdState::<f64>::new(1.0, Clip::Norm(1.0)).unwrap();
        let mut p = [0.0, 0.0];
        sgd_step(&mut [&mut p[..]], &[&[3.0, 4.0][..]], &st).unwrap();
        assert!((p[0] + 0.6).abs() < 1e-15 && (p[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_bad_config() {
        assert!(SgdState::<f64>::new(0.0, Clip::None).is_err());
        assert!(SgdState::<f64>::new(0.1, Clip::Value(0.0)).is_err());
    }
}
