//! Single-head scaled dot-product attention over projected (or raw)
//! keys and values, shared by both compression pathways.

use crate::error::Result;
use crate::eval::{BoundLinear, Evaluator};
use crate::nn::LinearMap;

pub(crate) struct BoundProjections<H> {
    pub q: BoundLinear<H>,
    /// Key projection carries no bias: a constant shift added to every
    /// key cancels in the row softmax, so such a parameter would be
    /// untrainable noise.
    pub k_weight: H,
    pub v: BoundLinear<H>,
    pub o: BoundLinear<H>,
}

pub(crate) fn bind_projections<E: Evaluator>(
    ev: &mut E,
    prefix: &str,
    q: &LinearMap,
    k: &LinearMap,
    v: &LinearMap,
    o: &LinearMap,
) -> BoundProjections<E::Handle> {
    let bind = |ev: &mut E, name: &str, layer: &LinearMap| BoundLinear {
        weight: ev.param(&format!("{prefix}.{name}.weight"), &layer.weight),
        bias: ev.param(&format!("{prefix}.{name}.bias"), &layer.bias),
    };
    BoundProjections {
        q: bind(ev, "q_proj", q),
        k_weight: ev.param(&format!("{prefix}.k_proj.weight"), &k.weight),
        v: bind(ev, "v_proj", v),
        o: bind(ev, "o_proj", o),
    }
}

/// queries [q x D] attend over tokens [n x D]; keys and values are both
/// drawn from `tokens`. Scores are scaled by 1/sqrt(D) after the
/// query-key product. With `identity_projections` the four learned
/// projections are skipped entirely, leaving the bare attention read.
///
/// Returns (output [q x D], attention weights [q x n]).
pub(crate) fn build_attention<E: Evaluator>(
    ev: &mut E,
    queries: &E::Handle,
    tokens: &E::Handle,
    proj: &BoundProjections<E::Handle>,
    identity_projections: bool,
    d: usize,
) -> Result<(E::Handle, E::Handle)> {
    let (q, keys, values) = if identity_projections {
        (queries.clone(), tokens.clone(), tokens.clone())
    } else {
        (
            ev.linear(queries, &proj.q.weight, &proj.q.bias)?,
            ev.matmul(tokens, &proj.k_weight)?,
            ev.linear(tokens, &proj.v.weight, &proj.v.bias)?,
        )
    };
    let keys_t = ev.transpose(&keys)?;
    let scores = ev.matmul(&q, &keys_t)?;
    let scaled = ev.scale(&scores, 1.0 / (d as f64).sqrt())?;
    let attn = ev.softmax_rows(&scaled)?;
    let mixed = ev.matmul(&attn, &values)?;
    let out = if identity_projections {
        mixed
    } else {
        ev.linear(&mixed, &proj.o.weight, &proj.o.bias)?
    };
    Ok((out, attn))
}
