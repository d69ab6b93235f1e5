//! Independent attention oracle: scalar loops, no shared code with the
//! tensor kernels.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::stc::{cross_attend, StcParams};
use crate::tensor::Tensor;

/// Scaled dot-product attention computed element by element: for each
/// query row, dot products against every key row, a stabilized softmax
/// written out longhand, then a weighted sum of value rows.
pub fn brute_force_attention(q: &Tensor, keys: &Tensor, values: &Tensor) -> Result<Tensor> {
    q.require_rank(2, "brute_force")?;
    keys.require_rank(2, "brute_force")?;
    values.require_rank(2, "brute_force")?;
    if q.cols() != keys.cols() || keys.rows() != values.rows() {
        return Err(Error::shape(
            "brute_force",
            format!(
                "q {:?}, keys {:?}, values {:?}",
                q.dims(),
                keys.dims(),
                values.dims()
            ),
        ));
    }
    let (qn, d) = (q.rows(), q.cols());
    let n = keys.rows();
    let dv = values.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; qn * dv];
    for qi in 0..qn {
        let mut logits = vec![0.0; n];
        for ki in 0..n {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q.data()[qi * d + c] * keys.data()[ki * d + c];
            }
            logits[ki] = dot * scale;
        }
        let mut max = f64::NEG_INFINITY;
        for &l in &logits {
            if l > max {
                max = l;
            }
        }
        let mut weights = vec![0.0; n];
        let mut total = 0.0;
        for ki in 0..n {
            let e = (logits[ki] - max).exp();
            weights[ki] = e;
            total += e;
        }
        for w in &mut weights {
            *w /= total;
        }
        for ki in 0..n {
            for c in 0..dv {
                out[qi * dv + c] += weights[ki] * values.data()[ki * dv + c];
            }
        }
    }
    Tensor::new(vec![qn, dv], out)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    pub matched: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compare the library attention against the brute-force loop on random
/// small instances with identity projections.
pub fn oracle_equivalence(instances: usize, tolerance: f64, seed: u64) -> Result<OracleReport> {
    let mut rng = Rng::from_seed(seed);
    let mut matched = 0;
    let mut max_abs_error: f64 = 0.0;
    for _ in 0..instances {
        let k = 1 + rng.index(4);
        let n = 1 + rng.index(16);
        let d = 1 + rng.index(8);
        let params = StcParams::init(d, 1, true, &mut rng);
        let q = Tensor::uniform(vec![k, d], -2.0, 2.0, &mut rng);
        let x = Tensor::uniform(vec![n, d], -2.0, 2.0, &mut rng);
        let lib = cross_attend(&q, &x, &params)?;
        let brute = brute_force_attention(&q, &x, &x)?;
        let err = lib
            .z_g
            .data()
            .iter()
            .zip(brute.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        max_abs_error = max_abs_error.max(err);
        if err <= tolerance {
            matched += 1;
        }
    }
    Ok(OracleReport {
        instances,
        matched,
        max_abs_error,
        tolerance,
        pass: matched == instances,
    })
}
