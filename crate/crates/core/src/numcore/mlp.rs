use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Raw logits; softmax is folded into the loss.
    Logits,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Identity | Activation::Logits => v,
        }
    }

    /// Derivative evaluated at the pre-activation value. ReLU'(0) = 0.
    #[inline]
    pub fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity | Activation::Logits => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer<T> {
    /// `out_dim x in_dim`
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Matrix<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape("DenseLayer bias", weights.rows(), bias.len()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![T::zero(); out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim).max(1) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| T::of(rng.random_range(-limit..limit)))
            .collect();
        Self {
            weights: Matrix::from_vec(out_dim, in_dim, data).expect("sized by construction"),
            bias: vec![T::zero(); out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Pre-activation `x W^T + b`.
    pub fn linear(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut pre = x.matmul_t(&self.weights)?;
        pre.add_row_broadcast(&self.bias)?;
        Ok(pre)
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

/// Per-layer intermediates retained by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ActivationTrace<T> {
    pub input: Matrix<T>,
    pub pre: Vec<Matrix<T>>,
    pub post: Vec<Matrix<T>>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn output(&self) -> &Matrix<T> {
        self.post.last().unwrap_or(&self.input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrads<T>>,
    pub input: Matrix<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Flat views in the same order as [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.input.is_finite()
            && self
                .layers
                .iter()
                .all(|g| g.weights.is_finite() && g.bias.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    format!("Mlp layer {} -> {}", k, k + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// `dims = [input, hidden..., output]`; hidden layers use `hidden`, the last layer `output`.
    pub fn glorot<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an Mlp needs input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output } else { hidden };
                DenseLayer::glorot(dims[k], dims[k + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    pub fn forward(&self, batch: &Matrix<T>) -> Result<ActivationTrace<T>> {
        let mut trace = ActivationTrace {
            input: batch.clone(),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        for (k, layer) in self.layers.iter().enumerate() {
            let x = trace.post.last().unwrap_or(&trace.input);
            if x.cols() != layer.in_dim() {
                return Err(Error::shape(format!("forward layer {k}"), layer.in_dim(), x.cols()));
            }
            let pre = layer.linear(x)?;
            let post = pre.map(|v| layer.activation.apply(v));
            trace.pre.push(pre);
            trace.post.push(post);
        }
        Ok(trace)
    }

    /// Forward pass without retaining intermediates.
    pub fn predict(&self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        let mut x = batch.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            if x.cols() != layer.in_dim() {
                return Err(Error::shape(format!("forward layer {k}"), layer.in_dim(), x.cols()));
            }
            let mut pre = layer.linear(&x)?;
            let act = layer.activation;
            pre.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            x = pre;
        }
        Ok(x)
    }

    pub fn backward(&self, trace: &ActivationTrace<T>, output_grad: &Matrix<T>) -> Result<Gradients<T>> {
        if trace.pre.len() != self.layers.len() || trace.post.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "trace has {} layers, model has {}",
                trace.pre.len(),
                self.layers.len()
            )));
        }
        if output_grad.shape() != trace.output().shape() {
            return Err(Error::shape(
                "backward output_grad",
                format!("{:?}", trace.output().shape()),
                format!("{:?}", output_grad.shape()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let pre = &trace.pre[k];
            if pre.cols() != layer.out_dim() {
                return Err(Error::contract(format!("trace layer {k} does not match model")));
            }
            let act = layer.activation;
            let delta = upstream.zip_map(pre, |g, p| g * act.derivative(p));
            let input = if k == 0 { &trace.input } else { &trace.post[k - 1] };
            let weights = delta.t_matmul(input)?;
            let bias = delta.col_sums();
            upstream = delta.matmul(&layer.weights)?;
            grads.push(LayerGrads { weights, bias });
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: upstream,
        })
    }

    /// First `j` layers and the remaining ones.
    pub fn split_at(&self, j: usize) -> Result<(Mlp<T>, Mlp<T>)> {
        if j == 0 || j >= self.layers.len() {
            return Err(Error::validation(format!(
                "split index {j} outside 1..{}",
                self.layers.len()
            )));
        }
        Ok((
            Mlp {
                layers: self.layers[..j].to_vec(),
            },
            Mlp {
                layers: self.layers[j..].to_vec(),
            },
        ))
    }

    /// Concatenates two networks (`self` first).
    pub fn compose(&self, next: &Mlp<T>) -> Result<Mlp<T>> {
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        Mlp::new(layers)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: l.weights.cast(),
                    bias: l.bias.iter().map(|&v| U::of(v.as_f64())).collect(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn identity_and_relu_layers() {
        let id = Mlp::new(vec![DenseLayer::new(Matrix::<f64>::identity(2), vec![0.0; 2], Activation::Identity).unwrap()]).unwrap();
        let x = Matrix::from_rows(&[[-1.0, 2.0]]).unwrap();
        assert_eq!(id.predict(&x).unwrap(), x);
        let relu = Mlp::new(vec![DenseLayer::new(Matrix::<f64>::identity(2), vec![0.0; 2], Activation::Relu).unwrap()]).unwrap();
        assert_eq!(relu.predict(&x).unwrap().as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn two_layer_hand_computation() {
        // h = relu([[1,2],[-1,1]] x + [0.5,-1]) ; y = [3,-2] h + 1
        let l1 = DenseLayer::new(
            Matrix::from_rows(&[[1.0, 2.0], [-1.0, 1.0]]).unwrap(),
            vec![0.5, -1.0],
            Activation::Relu,
        )
        .unwrap();
        let l2 = DenseLayer::new(Matrix::from_rows(&[[3.0, -2.0]]).unwrap(), vec![1.0], Activation::Identity).unwrap();
        let net = Mlp::new(vec![l1, l2]).unwrap();
        // x = (1, 0.5): pre1 = (2.5, -1.5) -> h = (2.5, 0) -> y = 8.5
        let y = net.predict(&Matrix::from_rows(&[[1.0, 0.5]]).unwrap()).unwrap();
        assert_eq!(y.as_slice(), &[8.5]);
        let trace = net.forward(&Matrix::from_rows(&[[1.0, 0.5]]).unwrap()).unwrap();
        assert_eq!(trace.output(), &y);
    }

    #[test]
    fn backward_base_cases() {
        let mut rng = rng_from(3);
        let net: Mlp<f64> = Mlp::glorot(&[3, 4, 2], Activation::Relu, Activation::Logits, &mut rng);
        let x = Matrix::from_rows(&[[0.1, -0.2, 0.3], [0.5, 0.5, -1.0]]).unwrap();
        let trace = net.forward(&x).unwrap();
        let g = net.backward(&trace, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));

        let scalar = Mlp::new(vec![DenseLayer::new(Matrix::from_rows(&[[0.7]]).unwrap(), vec![0.0], Activation::Identity).unwrap()]).unwrap();
        let t = scalar.forward(&Matrix::from_rows(&[[1.5]]).unwrap()).unwrap();
        let g = scalar.backward(&t, &Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert_eq!(g.layers[0].weights.as_slice(), &[1.5]);
        assert_eq!(g.input.as_slice(), &[0.7]);
    }

    #[test]
    fn forward_reports_layer_index_on_mismatch() {
        let mut rng = rng_from(1);
        let net: Mlp<f64> = Mlp::glorot(&[3, 4, 2], Activation::Relu, Activation::Logits, &mut rng);
        let err = net.forward(&Matrix::zeros(1, 5)).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn split_compose_is_exact() {
        let mut rng = rng_from(9);
        let net: Mlp<f64> = Mlp::glorot(&[5, 8, 8, 8, 3], Activation::Relu, Activation::Logits, &mut rng);
        let x = Matrix::from_rows(&[[0.3, -0.1, 0.9, -0.7, 0.2]]).unwrap();
        for j in 1..net.depth() {
            let (top, bottom) = net.split_at(j).unwrap();
            assert_eq!(top.layers.len(), j);
            let y = bottom.predict(&top.predict(&x).unwrap()).unwrap();
            assert_eq!(y, net.predict(&x).unwrap());
        }
        assert!(net.split_at(0).is_err());
        assert!(net.split_at(4).is_err());
    }

    #[test]
    fn mismatched_chain_rejected() {
        let a = DenseLayer::<f64>::zeros(2, 3, Activation::Relu);
        let b = DenseLayer::<f64>::zeros(4, 1, Activation::Identity);
        assert!(Mlp::new(vec![a, b]).is_err());
    }
}
