//! Dense row-major value arrays and the deterministic kernels the
//! compressor is built from.
//!
//! Storage is always `f64`. In `fast32` mode every kernel rounds its
//! output elements to the nearest `f32` (accumulation stays wide, the
//! stored value is exactly representable in 32 bits), which is how the
//! two precision modes share one code path. Reductions run in a fixed
//! left-to-right order so repeated runs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Numeric mode: 64-bit for verification and training, 32-bit rounded
/// for fast inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "verify64")]
    Verify64,
    #[serde(rename = "fast32")]
    Fast32,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::Verify64
    }
}

/// Dense multi-dimensional array, row-major, positive extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {dims:?}"),
            ));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} imply {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        assert!(!dims.is_empty() && n > 0, "zeros: bad dims {dims:?}");
        Tensor {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: Vec<usize>, value: f64) -> Self {
        let mut t = Tensor::zeros(dims);
        t.data.fill(value);
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    /// Row-major matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("tensor", "from_rows: no rows".to_string()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "from_rows: ragged rows".to_string()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn uniform(dims: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// First extent of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Second extent of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.dims[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.dims[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn require_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::shape(
                op,
                format!("expected rank {rank}, got dims {:?}", self.dims),
            ));
        }
        Ok(())
    }

    /// Round every element to the nearest f32 (fast32 storage rule).
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn rounded_to_f32(mut self) -> Self {
        self.round_to_f32();
        self
    }

    /// Same data, new dims; element count must match.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.dims, dims),
            ));
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            op,
            format!("operands differ: {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// Standard matrix product with a fixed left-to-right contraction order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.require_rank(2, "matmul")?;
    b.require_rank(2, "matmul")?;
    let (m, n) = (a.rows(), a.cols());
    let (n2, p) = (b.rows(), b.cols());
    if n != n2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: [{m}x{n}] x [{n2}x{p}]"),
        ));
    }
    let mut out = vec![0.0; m * p];
    // i-k-j loop order: per output element the k terms still accumulate
    // in ascending order, so results match the naive i-j-k triple loop
    // bit for bit while staying cache friendly.
    for i in 0..m {
        let arow = &a.data()[i * n..(i + 1) * n];
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data()[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, p], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    a.require_rank(2, "transpose")?;
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.dims().to_vec(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::new(a.dims().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.dims().to_vec(), data)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

/// Add a rank-1 vector to every row of a rank-2 tensor.
pub fn add_row(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    x.require_rank(2, "add_row")?;
    row.require_rank(1, "add_row")?;
    if x.cols() != row.len() {
        return Err(Error::shape(
            "add_row",
            format!("row width {} vs vector length {}", x.cols(), row.len()),
        ));
    }
    let n = x.cols();
    let mut data = x.data().to_vec();
    for r in 0..x.rows() {
        for j in 0..n {
            data[r * n + j] += row.data()[j];
        }
    }
    Tensor::new(x.dims().to_vec(), data)
}

/// Row-wise softmax, stabilized by subtracting each row's max.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.require_rank(2, "softmax_rows")?;
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Select rows of a rank-2 tensor, in the order given.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    x.require_rank(2, "gather_rows")?;
    let n = x.cols();
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        if i >= x.rows() {
            return Err(Error::shape(
                "gather_rows",
                format!("row index {i} out of range for {} rows", x.rows()),
            ));
        }
        data.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![idx.len(), n], data)
}

/// Stack rank-2 tensors with equal column counts.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_rows", "no parts".to_string()));
    }
    let cols = parts[0].cols();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        p.require_rank(2, "concat_rows")?;
        if p.cols() != cols {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts differ: {} vs {}", cols, p.cols()),
            ));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// Sum of all elements, left to right.
pub fn sum_all(x: &Tensor) -> f64 {
    let mut s = 0.0;
    for &v in x.data() {
        s += v;
    }
    s
}

/// Column sums of a rank-2 tensor (rank-1 result).
pub fn col_sum(x: &Tensor) -> Result<Tensor> {
    x.require_rank(2, "col_sum")?;
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += x.data()[i * n + j];
        }
    }
    Tensor::new(vec![n], out)
}

pub fn identity_matrix(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}
