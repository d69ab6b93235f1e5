//! Global pathway: a small bank of learnable queries, affinely
//! modulated by the instruction, cross-attends over all visual tokens
//! of a view to produce the global summary.

use crate::attn::{bind_projections, build_attention, BoundProjections};
use crate::conditioning::{FilmParams, PooledInstruction};
use crate::error::{Error, Result};
use crate::eval::{bind_mlp, mlp_apply, BoundMlp, Evaluator, PlainEval};
use crate::nn::{Activation, LinearMap, Mlp};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Learnable state of the global pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct StcParams {
    /// Query bank [k x D].
    pub queries: Tensor,
    pub q_proj: LinearMap,
    /// Key projection; its bias is inert (a per-key constant shift
    /// cancels in the row softmax), stays zero, and is excluded from
    /// training and serialization.
    pub k_proj: LinearMap,
    pub v_proj: LinearMap,
    pub o_proj: LinearMap,
    /// Pooled instruction -> task embedding (D -> 2D -> D, gelu).
    pub mlp_stc: Mlp,
    /// Task embedding -> modulation parameters (D -> 2kD, affine).
    pub mlp_film: Mlp,
    /// Skip all four projections (bare attention read).
    pub identity_projections: bool,
}

/// Single affine modulation layer with the bias pinned to the identity
/// pattern (ones for the scale half, zeros for the shift half) and the
/// weights drawn like any other layer. Modulation therefore starts
/// *near* identity but with a live gradient path; an exactly-zero
/// weight matrix (see [`StcParams::reset_film_to_identity`]) starves
/// the modulation of gradient and never learns to steer at this scale.
pub(crate) fn init_film_mlp(d_in: usize, k: usize, d: usize, rng: &mut Rng) -> Mlp {
    let mut layer = LinearMap::init(d_in, 2 * k * d, rng);
    let mut bias = vec![1.0; k * d];
    bias.extend(vec![0.0; k * d]);
    layer.bias = Tensor::new(vec![2 * k * d], bias).expect("film bias dims");
    Mlp::new(vec![layer], Activation::Identity).expect("film mlp dims")
}

impl StcParams {
    /// Query bank uniform in +-1/sqrt(D); the modulation MLP starts
    /// near the identity (see [`init_film_mlp`]).
    pub fn init(d: usize, k: usize, identity_projections: bool, rng: &mut Rng) -> Self {
        assert!(k >= 1 && d >= 1);
        let bound = 1.0 / (d as f64).sqrt();
        let queries = Tensor::uniform(vec![k, d], -bound, bound, rng);
        let q_proj = LinearMap::init(d, d, rng);
        let k_proj = LinearMap::init(d, d, rng);
        let v_proj = LinearMap::init(d, d, rng);
        let o_proj = LinearMap::init(d, d, rng);
        let mlp_stc = Mlp::init(&[d, 2 * d, d], Activation::Gelu, rng);
        let mlp_film = init_film_mlp(d, k, d, rng);
        StcParams {
            queries,
            q_proj,
            k_proj,
            v_proj,
            o_proj,
            mlp_stc,
            mlp_film,
            identity_projections,
        }
    }

    /// Zero the modulation weights so gamma is exactly 1 and beta
    /// exactly 0 for every instruction: the guided and unguided paths
    /// become bit-identical.
    pub fn reset_film_to_identity(&mut self) {
        let k = self.k();
        let d = self.dim();
        for layer in &mut self.mlp_film.layers {
            layer.weight = Tensor::zeros(layer.weight.dims().to_vec());
        }
        let mut bias = vec![1.0; k * d];
        bias.extend(vec![0.0; k * d]);
        let last = self.mlp_film.layers.last_mut().expect("film has a layer");
        last.bias = Tensor::new(vec![2 * k * d], bias).expect("film bias dims");
    }

    pub fn k(&self) -> usize {
        self.queries.rows()
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }
}

/// Global summary plus the post-softmax weights kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct StcOutput {
    /// [k x D]
    pub z_g: Tensor,
    /// [k x N]
    pub attn: Tensor,
}

pub(crate) struct BoundStc<H> {
    pub queries: H,
    pub proj: BoundProjections<H>,
    pub mlp_stc: BoundMlp<H>,
    pub mlp_film: BoundMlp<H>,
    pub identity_projections: bool,
    pub k: usize,
    pub d: usize,
}

pub(crate) fn bind_stc<E: Evaluator>(ev: &mut E, p: &StcParams) -> BoundStc<E::Handle> {
    let queries = ev.param("stc.queries", &p.queries);
    let proj = bind_projections(ev, "stc", &p.q_proj, &p.k_proj, &p.v_proj, &p.o_proj);
    let mlp_stc = bind_mlp(ev, "stc.mlp_stc", &p.mlp_stc);
    let mlp_film = bind_mlp(ev, "stc.mlp_film", &p.mlp_film);
    BoundStc {
        queries,
        proj,
        mlp_stc,
        mlp_film,
        identity_projections: p.identity_projections,
        k: p.k(),
        d: p.dim(),
    }
}

/// Pooled instruction row -> (gamma, beta), each [k x D].
pub(crate) fn build_film_modulation<E: Evaluator>(
    ev: &mut E,
    b: &BoundStc<E::Handle>,
    pooled_row: &E::Handle,
) -> Result<(E::Handle, E::Handle)> {
    let e_task = mlp_apply(ev, &b.mlp_stc, pooled_row)?;
    let film = mlp_apply(ev, &b.mlp_film, &e_task)?;
    let stacked = ev.reshape(&film, vec![2 * b.k, b.d])?;
    let gamma_idx: Vec<usize> = (0..b.k).collect();
    let beta_idx: Vec<usize> = (b.k..2 * b.k).collect();
    let gamma = ev.gather_rows(&stacked, &gamma_idx)?;
    let beta = ev.gather_rows(&stacked, &beta_idx)?;
    Ok((gamma, beta))
}

/// gamma (*) Q + beta, elementwise.
pub(crate) fn build_condition_queries<E: Evaluator>(
    ev: &mut E,
    queries: &E::Handle,
    gamma: &E::Handle,
    beta: &E::Handle,
) -> Result<E::Handle> {
    let scaled = ev.mul(gamma, queries)?;
    ev.add(&scaled, beta)
}

pub(crate) fn build_stc_forward<E: Evaluator>(
    ev: &mut E,
    b: &BoundStc<E::Handle>,
    x: &E::Handle,
    pooled_row: Option<&E::Handle>,
    guidance: bool,
) -> Result<(E::Handle, E::Handle)> {
    let q_con = if guidance {
        let pooled = pooled_row
            .ok_or_else(|| Error::contract("guided global pathway needs a pooled instruction"))?;
        let (gamma, beta) = build_film_modulation(ev, b, pooled)?;
        build_condition_queries(ev, &b.queries, &gamma, &beta)?
    } else {
        b.queries.clone()
    };
    build_attention(ev, &q_con, x, &b.proj, b.identity_projections, b.d)
}

fn check_visual_tokens(x: &Tensor, d: usize) -> Result<()> {
    x.require_rank(2, "stc")?;
    if x.cols() != d {
        return Err(Error::shape(
            "stc",
            format!(
                "visual tokens have width {}, parameters expect {}",
                x.cols(),
                d
            ),
        ));
    }
    Ok(())
}

/// Apply the modulation to the query bank.
pub fn condition_queries(params: &StcParams, film: &FilmParams) -> Result<Tensor> {
    if film.gamma.dims() != params.queries.dims() || film.beta.dims() != params.queries.dims() {
        return Err(Error::shape(
            "condition_queries",
            format!(
                "modulation {:?}/{:?} vs query bank {:?}",
                film.gamma.dims(),
                film.beta.dims(),
                params.queries.dims()
            ),
        ));
    }
    let scaled = crate::tensor::mul(&film.gamma, &params.queries)?;
    crate::tensor::add(&scaled, &film.beta)
}

/// Cross-attention of already-conditioned queries over a view's tokens.
pub fn cross_attend(q_con: &Tensor, x: &Tensor, params: &StcParams) -> Result<StcOutput> {
    check_visual_tokens(x, params.dim())?;
    q_con.require_rank(2, "cross_attend")?;
    if q_con.cols() != params.dim() {
        return Err(Error::shape(
            "cross_attend",
            format!("query width {} vs D {}", q_con.cols(), params.dim()),
        ));
    }
    let mut ev = PlainEval::verify();
    let b = bind_stc(&mut ev, params);
    let qh = ev.constant(q_con.clone());
    let xh = ev.constant(x.clone());
    let (z_g, attn) = build_attention(&mut ev, &qh, &xh, &b.proj, b.identity_projections, b.d)?;
    Ok(StcOutput { z_g, attn })
}

/// Full global pathway for one view. With guidance the queries pass
/// through the instruction-driven modulation first; without it the raw
/// bank attends directly.
pub fn stc_forward(
    params: &StcParams,
    x: &Tensor,
    pooled: &PooledInstruction,
    guidance: bool,
) -> Result<StcOutput> {
    check_visual_tokens(x, params.dim())?;
    let mut ev = PlainEval::verify();
    let b = bind_stc(&mut ev, params);
    let xh = ev.constant(x.clone());
    let pooled_row = ev.constant(pooled.as_row());
    let (z_g, attn) = build_stc_forward(&mut ev, &b, &xh, Some(&pooled_row), guidance)?;
    Ok(StcOutput { z_g, attn })
}
