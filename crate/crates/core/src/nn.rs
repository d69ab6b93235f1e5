//! Affine layers and the small MLPs that generate conditioning signals.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{add_row, matmul, Tensor};

/// Nonlinearity applied between MLP layers (never after the last).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

/// tanh-form gelu; the exact erf form needs a special function the
/// standard library does not provide, and forward/backward only have to
/// agree with each other.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let inner = GELU_A * (x + GELU_B * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_prime(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map: weight is [in x out], bias is [out].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearMap {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        weight.require_rank(2, "linear")?;
        bias.require_rank(1, "linear")?;
        if weight.cols() != bias.len() {
            return Err(Error::shape(
                "linear",
                format!(
                    "bias length {} does not match output extent {}",
                    bias.len(),
                    weight.cols()
                ),
            ));
        }
        Ok(LinearMap { weight, bias })
    }

    /// Weights uniform in +-1/sqrt(fan_in), bias zero.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        LinearMap {
            weight: Tensor::uniform(vec![fan_in, fan_out], -bound, bound, rng),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        LinearMap {
            weight: crate::tensor::identity_matrix(dim),
            bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        add_row(&matmul(x, &self.weight)?, &self.bias)
    }
}

/// A chain of affine maps with `activation` between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearMap>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(layers: Vec<LinearMap>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("mlp", "no layers".to_string()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "mlp",
                    format!(
                        "layer dims do not chain: {} -> {}",
                        pair[0].out_dim(),
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        Ok(Mlp { layers, activation })
    }

    /// Initialize from a width chain like [in, hidden, out].
    pub fn init(widths: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least one layer");
        let layers = widths
            .windows(2)
            .map(|pair| LinearMap::init(pair[0], pair[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.require_rank(2, "mlp_forward")?;
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!("input width {} vs layer input {}", x.cols(), self.in_dim()),
            ));
        }
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h = h.map(|v| self.activation.apply(v));
            h = layer.forward(&h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_layer_passes_input_through() {
        let m = Mlp::new(vec![LinearMap::identity(3)], Activation::Gelu).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn affine_hand_case() {
        // weight [[2]], bias [1], input [3] -> [7]
        let layer = LinearMap::new(
            Tensor::from_rows(&[vec![2.0]]).unwrap(),
            Tensor::new(vec![1], vec![1.0]).unwrap(),
        )
        .unwrap();
        let m = Mlp::new(vec![layer], Activation::Identity).unwrap();
        let y = m.forward(&Tensor::from_rows(&[vec![3.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn two_layer_relu_clamps_negative_preactivation() {
        // x=[1], first layer: w=[[-2]], b=[1] -> pre = -1, relu -> 0
        // second layer: w=[[3]], b=[0.5] -> 0.5
        let l1 = LinearMap::new(
            Tensor::from_rows(&[vec![-2.0]]).unwrap(),
            Tensor::new(vec![1], vec![1.0]).unwrap(),
        )
        .unwrap();
        let l2 = LinearMap::new(
            Tensor::from_rows(&[vec![3.0]]).unwrap(),
            Tensor::new(vec![1], vec![0.5]).unwrap(),
        )
        .unwrap();
        let m = Mlp::new(vec![l1, l2], Activation::Relu).unwrap();
        let y = m.forward(&Tensor::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let layer = LinearMap::new(
            Tensor::zeros(vec![3, 2]),
            Tensor::new(vec![2], vec![4.0, -1.0]).unwrap(),
        )
        .unwrap();
        let m = Mlp::new(vec![layer], Activation::Identity).unwrap();
        let y = m
            .forward(&Tensor::from_rows(&[vec![9.0, 9.0, 9.0]]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[4.0, -1.0]);
    }

    #[test]
    fn mismatched_chain_rejected() {
        let l1 = LinearMap::init(2, 3, &mut Rng::from_seed(0));
        let l2 = LinearMap::init(4, 1, &mut Rng::from_seed(1));
        assert!(Mlp::new(vec![l1, l2], Activation::Gelu).is_err());
    }

    #[test]
    fn gelu_prime_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let eps = 1e-6;
            let numeric = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_prime(x) - numeric).abs() < 1e-8, "x={x}");
        }
    }
}
