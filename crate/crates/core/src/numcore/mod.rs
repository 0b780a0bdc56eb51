//! Dense-network numeric engine: matrices, layers, losses, optimizers and noise.

pub mod loss;
pub mod matrix;
pub mod mlp;
pub mod noise;
pub mod optim;

pub use loss::{cross_entropy, mse, one_hot, softmax};
pub use matrix::{argmax, axpy, dot, Matrix};
pub use mlp::{Activation, ActivationTrace, DenseLayer, Gradients, LayerGrads, Mlp};
pub use noise::{laplace_noise, laplace_noise_with, sample_laplace};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, Clip, SgdState};
