//! Execution abstraction for the compressor forward pass.
//!
//! The forward computation is written once against [`Evaluator`] and
//! then run by three backends: [`PlainEval`] (values only, honoring the
//! precision mode), the gradient tape in [`crate::autodiff`], and the
//! multiply-add counter in [`crate::accounting`]. This keeps the
//! production path, the differentiated path and the cost model from
//! ever drifting apart.

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tensor::{self, Precision, Tensor};

pub trait Evaluator {
    type Handle: Clone;

    /// Enter a value that gradients never flow into.
    fn constant(&mut self, t: Tensor) -> Self::Handle;
    /// Enter a named learnable tensor.
    fn param(&mut self, name: &str, t: &Tensor) -> Self::Handle;

    fn dims(&self, h: &Self::Handle) -> Vec<usize>;
    fn value(&self, h: &Self::Handle) -> Tensor;

    fn matmul(&mut self, a: &Self::Handle, b: &Self::Handle) -> Result<Self::Handle>;
    fn transpose(&mut self, a: &Self::Handle) -> Result<Self::Handle>;
    fn add(&mut self, a: &Self::Handle, b: &Self::Handle) -> Result<Self::Handle>;
    fn mul(&mut self, a: &Self::Handle, b: &Self::Handle) -> Result<Self::Handle>;
    fn scale(&mut self, a: &Self::Handle, c: f64) -> Result<Self::Handle>;
    fn add_row(&mut self, x: &Self::Handle, row: &Self::Handle) -> Result<Self::Handle>;
    fn activation(&mut self, x: &Self::Handle, act: Activation) -> Result<Self::Handle>;
    fn softmax_rows(&mut self, x: &Self::Handle) -> Result<Self::Handle>;
    fn gather_rows(&mut self, x: &Self::Handle, idx: &[usize]) -> Result<Self::Handle>;
    fn concat_rows(&mut self, parts: &[Self::Handle]) -> Result<Self::Handle>;
    fn reshape(&mut self, x: &Self::Handle, dims: Vec<usize>) -> Result<Self::Handle>;
    fn sum_all(&mut self, x: &Self::Handle) -> Result<Self::Handle>;
    fn cross_entropy_mean(
        &mut self,
        logits: &Self::Handle,
        targets: &[usize],
    ) -> Result<Self::Handle>;

    /// x [m x in] * weight [in x out] + bias.
    fn linear(
        &mut self,
        x: &Self::Handle,
        weight: &Self::Handle,
        bias: &Self::Handle,
    ) -> Result<Self::Handle> {
        let y = self.matmul(x, weight)?;
        self.add_row(&y, bias)
    }
}

/// Handles for one bound affine layer.
#[derive(Clone)]
pub struct BoundLinear<H> {
    pub weight: H,
    pub bias: H,
}

/// Handles for a bound MLP.
#[derive(Clone)]
pub struct BoundMlp<H> {
    pub layers: Vec<BoundLinear<H>>,
    pub activation: Activation,
}

pub fn bind_mlp<E: Evaluator>(ev: &mut E, prefix: &str, mlp: &crate::nn::Mlp) -> BoundMlp<E::Handle> {
    let layers = mlp
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| BoundLinear {
            weight: ev.param(&format!("{prefix}.{i}.weight"), &layer.weight),
            bias: ev.param(&format!("{prefix}.{i}.bias"), &layer.bias),
        })
        .collect();
    BoundMlp {
        layers,
        activation: mlp.activation,
    }
}

pub fn mlp_apply<E: Evaluator>(
    ev: &mut E,
    mlp: &BoundMlp<E::Handle>,
    x: &E::Handle,
) -> Result<E::Handle> {
    let mut h = ev.linear(x, &mlp.layers[0].weight, &mlp.layers[0].bias)?;
    for layer in &mlp.layers[1..] {
        h = ev.activation(&h, mlp.activation)?;
        h = ev.linear(&h, &layer.weight, &layer.bias)?;
    }
    Ok(h)
}

/// Value-only execution. In `fast32` mode every result (and every value
/// entering the graph) is rounded to f32 storage precision.
pub struct PlainEval {
    precision: Precision,
}

impl PlainEval {
    pub fn new(precision: Precision) -> Self {
        PlainEval { precision }
    }

    pub fn verify() -> Self {
        PlainEval {
            precision: Precision::Verify64,
        }
    }

    fn finish(&self, mut t: Tensor) -> Tensor {
        if self.precision == Precision::Fast32 {
            t.round_to_f32();
        }
        t
    }
}

/// Numerically stable mean cross-entropy of row-wise logits.
pub fn cross_entropy_mean_value(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    logits.require_rank(2, "cross_entropy")?;
    if targets.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for {} rows", targets.len(), logits.rows()),
        ));
    }
    let (m, n) = (logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(Error::contract(format!(
                "target class {t} out of range for {n} classes"
            )));
        }
        let row = &logits.data()[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        total += log_z - row[t];
    }
    Ok(total / m as f64)
}

impl Evaluator for PlainEval {
    type Handle = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        self.finish(t)
    }

    fn param(&mut self, _name: &str, t: &Tensor) -> Tensor {
        self.finish(t.clone())
    }

    fn dims(&self, h: &Tensor) -> Vec<usize> {
        h.dims().to_vec()
    }

    fn value(&self, h: &Tensor) -> Tensor {
        h.clone()
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.finish(tensor::matmul(a, b)?))
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(self.finish(tensor::transpose(a)?))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.finish(tensor::add(a, b)?))
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.finish(tensor::mul(a, b)?))
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        Ok(self.finish(tensor::scale(a, c)))
    }

    fn add_row(&mut self, x: &Tensor, row: &Tensor) -> Result<Tensor> {
        Ok(self.finish(tensor::add_row(x, row)?))
    }

    fn activation(&mut self, x: &Tensor, act: Activation) -> Result<Tensor> {
        Ok(self.finish(x.map(|v| act.apply(v))))
    }

    fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.finish(tensor::softmax_rows(x)?))
    }

    fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        Ok(self.finish(tensor::gather_rows(x, idx)?))
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(self.finish(tensor::concat_rows(&refs)?))
    }

    fn reshape(&mut self, x: &Tensor, dims: Vec<usize>) -> Result<Tensor> {
        x.reshape(dims)
    }

    fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(self.finish(Tensor::scalar(tensor::sum_all(x))))
    }

    fn cross_entropy_mean(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        Ok(self.finish(Tensor::scalar(cross_entropy_mean_value(logits, targets)?)))
    }
}
