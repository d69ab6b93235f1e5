//! Local pathway: the feature grid splits into non-overlapping square
//! windows; each window's mean token, nudged by the instruction
//! injection, attends over the window's original tokens, and the
//! per-window summaries concatenate in row-major window order.

use crate::attn::{bind_projections, build_attention, BoundProjections};
use crate::conditioning::SrcInjection;
use crate::error::{Error, Result};
use crate::eval::{bind_mlp, BoundMlp, Evaluator, PlainEval};
use crate::nn::{Activation, LinearMap, Mlp};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One view's encoder output, kept in its spatial arrangement.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    /// [H x W x D]
    pub grid: Tensor,
    /// View identifier for reports and file names.
    pub provenance: String,
}

impl FeatureGrid {
    pub fn new(grid: Tensor, provenance: impl Into<String>) -> Result<Self> {
        grid.require_rank(3, "feature_grid")?;
        Ok(FeatureGrid {
            grid,
            provenance: provenance.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.grid.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.grid.dims()[2]
    }

    /// Row-major flattening to [N x D] with N = H*W.
    pub fn flatten(&self) -> Tensor {
        self.grid
            .reshape(vec![self.height() * self.width(), self.dim()])
            .expect("rank-3 grid flattens to rank 2")
    }
}

/// Learnable state of the local pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct SrcParams {
    pub q_proj: LinearMap,
    /// Key projection; its bias is inert (a per-key constant shift
    /// cancels in the row softmax), stays zero, and is excluded from
    /// training and serialization.
    pub k_proj: LinearMap,
    pub v_proj: LinearMap,
    pub o_proj: LinearMap,
    /// Pooled instruction -> additive query injection (D -> D, affine).
    pub mlp_src: Mlp,
    /// Window side length.
    pub window: usize,
    /// Skip all four projections (bare attention read).
    pub identity_projections: bool,
}

impl SrcParams {
    pub fn init(d: usize, window: usize, identity_projections: bool, rng: &mut Rng) -> Self {
        assert!(window >= 1 && d >= 1);
        SrcParams {
            q_proj: LinearMap::init(d, d, rng),
            k_proj: LinearMap::init(d, d, rng),
            v_proj: LinearMap::init(d, d, rng),
            o_proj: LinearMap::init(d, d, rng),
            mlp_src: Mlp::init(&[d, d], Activation::Identity, rng),
            window,
            identity_projections,
        }
    }

    pub fn dim(&self) -> usize {
        self.q_proj.in_dim()
    }
}

/// Local summaries plus per-window attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SrcOutput {
    /// [N' x D] with N' = (H/w)*(W/w), row-major window order.
    pub z_l: Tensor,
    /// [N' x w^2]
    pub attn: Tensor,
}

/// Window sizes that divide both grid extents.
pub fn valid_windows(h: usize, w_grid: usize) -> Vec<usize> {
    (1..=h.min(w_grid))
        .filter(|s| h % s == 0 && w_grid % s == 0)
        .collect()
}

fn divisibility_error(h: usize, w_grid: usize, w: usize) -> Error {
    let valid: Vec<String> = valid_windows(h, w_grid)
        .into_iter()
        .map(|v| v.to_string())
        .collect();
    Error::contract(format!(
        "grid {h}x{w_grid} is not divisible by window w={w}; valid w values: {}",
        valid.join(", ")
    ))
}

pub fn check_divisible(h: usize, w_grid: usize, w: usize) -> Result<()> {
    if w == 0 || h % w != 0 || w_grid % w != 0 {
        return Err(divisibility_error(h, w_grid, w));
    }
    Ok(())
}

/// Flattened-row indices of each window, windows in row-major window
/// order, tokens row-major within the window.
pub(crate) fn window_row_indices(h: usize, w_grid: usize, w: usize) -> Vec<Vec<usize>> {
    let mut windows = Vec::with_capacity((h / w) * (w_grid / w));
    for wr in 0..h / w {
        for wc in 0..w_grid / w {
            let mut idx = Vec::with_capacity(w * w);
            for r in 0..w {
                for c in 0..w {
                    idx.push((wr * w + r) * w_grid + (wc * w + c));
                }
            }
            windows.push(idx);
        }
    }
    windows
}

/// Split the grid into (H/w)*(W/w) windows of shape [w x w x D].
/// Fails on indivisible extents; there is no silent padding.
pub fn partition_windows(grid: &FeatureGrid, w: usize) -> Result<Vec<Tensor>> {
    let (h, w_grid, d) = (grid.height(), grid.width(), grid.dim());
    check_divisible(h, w_grid, w)?;
    let flat = grid.flatten();
    window_row_indices(h, w_grid, w)
        .into_iter()
        .map(|idx| crate::tensor::gather_rows(&flat, &idx)?.reshape(vec![w, w, d]))
        .collect()
}

/// Mean over the w^2 window positions, computed as a weighted sum with
/// weight 1/w^2 in row-major position order.
pub fn downsample_window(win: &Tensor) -> Result<Tensor> {
    win.require_rank(3, "downsample")?;
    let (w0, w1, d) = (win.dims()[0], win.dims()[1], win.dims()[2]);
    let rows = win.reshape(vec![w0 * w1, d])?;
    let weights = Tensor::filled(vec![1, w0 * w1], 1.0 / (w0 * w1) as f64);
    crate::tensor::matmul(&weights, &rows)?.reshape(vec![d])
}

pub(crate) struct BoundSrc<H> {
    pub proj: BoundProjections<H>,
    pub mlp_src: BoundMlp<H>,
    pub window: usize,
    pub identity_projections: bool,
    pub d: usize,
}

pub(crate) fn bind_src<E: Evaluator>(ev: &mut E, p: &SrcParams) -> BoundSrc<E::Handle> {
    let proj = bind_projections(ev, "src", &p.q_proj, &p.k_proj, &p.v_proj, &p.o_proj);
    let mlp_src = bind_mlp(ev, "src.mlp_src", &p.mlp_src);
    BoundSrc {
        proj,
        mlp_src,
        window: p.window,
        identity_projections: p.identity_projections,
        d: p.dim(),
    }
}

/// How the raw window query is conditioned on the instruction.
#[derive(Clone)]
pub(crate) enum SrcConditioning<H> {
    /// Raw mean query (guidance off).
    None,
    /// q_raw + injection; the handle is a [1 x D] row.
    Additive(H),
    /// gamma (*) q_raw + beta; handles are [1 x D] rows.
    Film { gamma: H, beta: H },
}

/// One window: mean-pool the tokens into a raw query, condition it,
/// then attend over the original, unmodified window tokens.
pub(crate) fn build_src_window<E: Evaluator>(
    ev: &mut E,
    win_rows: &E::Handle,
    cond: &SrcConditioning<E::Handle>,
    b: &BoundSrc<E::Handle>,
) -> Result<(E::Handle, E::Handle)> {
    let wsq = ev.dims(win_rows)[0];
    let weights = ev.constant(Tensor::filled(vec![1, wsq], 1.0 / wsq as f64));
    let q_raw = ev.matmul(&weights, win_rows)?;
    let q = match cond {
        SrcConditioning::None => q_raw,
        SrcConditioning::Additive(inj) => ev.add(&q_raw, inj)?,
        SrcConditioning::Film { gamma, beta } => {
            let scaled = ev.mul(gamma, &q_raw)?;
            ev.add(&scaled, beta)?
        }
    };
    build_attention(ev, &q, win_rows, &b.proj, b.identity_projections, b.d)
}

/// All windows of one view; z rows land in fixed row-major window
/// slots, so any evaluation order would produce the same output.
pub(crate) fn build_src_forward<E: Evaluator>(
    ev: &mut E,
    x_flat: &E::Handle,
    h: usize,
    w_grid: usize,
    cond: &SrcConditioning<E::Handle>,
    b: &BoundSrc<E::Handle>,
) -> Result<(E::Handle, E::Handle)> {
    check_divisible(h, w_grid, b.window)?;
    let mut z_parts = Vec::new();
    let mut attn_parts = Vec::new();
    for idx in window_row_indices(h, w_grid, b.window) {
        let win = ev.gather_rows(x_flat, &idx)?;
        let (z_w, attn_w) = build_src_window(ev, &win, cond, b)?;
        z_parts.push(z_w);
        attn_parts.push(attn_w);
    }
    let z_l = ev.concat_rows(&z_parts)?;
    let attn = ev.concat_rows(&attn_parts)?;
    Ok((z_l, attn))
}

fn injection_row(injection: &SrcInjection, d: usize) -> Result<Tensor> {
    if injection.vector.len() != d {
        return Err(Error::shape(
            "src",
            format!("injection length {} vs D {}", injection.vector.len(), d),
        ));
    }
    injection.vector.reshape(vec![1, d])
}

/// One window forward; returns (z_w [D], attention weights [w^2]).
pub fn src_window_forward(
    win: &Tensor,
    injection: &SrcInjection,
    params: &SrcParams,
    guidance: bool,
) -> Result<(Tensor, Tensor)> {
    win.require_rank(3, "src_window")?;
    let (w0, w1, d) = (win.dims()[0], win.dims()[1], win.dims()[2]);
    if d != params.dim() {
        return Err(Error::shape(
            "src_window",
            format!("window depth {} vs D {}", d, params.dim()),
        ));
    }
    let mut ev = PlainEval::verify();
    let b = bind_src(&mut ev, params);
    let rows = ev.constant(win.reshape(vec![w0 * w1, d])?);
    let cond = if guidance {
        SrcConditioning::Additive(ev.constant(injection_row(injection, d)?))
    } else {
        SrcConditioning::None
    };
    let (z_w, attn_w) = build_src_window(&mut ev, &rows, &cond, &b)?;
    Ok((z_w.reshape(vec![d])?, attn_w.reshape(vec![w0 * w1])?))
}

/// Full local pathway over one view.
pub fn src_forward(
    grid: &FeatureGrid,
    injection: &SrcInjection,
    params: &SrcParams,
    guidance: bool,
) -> Result<SrcOutput> {
    if grid.dim() != params.dim() {
        return Err(Error::shape(
            "src",
            format!("grid depth {} vs D {}", grid.dim(), params.dim()),
        ));
    }
    let mut ev = PlainEval::verify();
    let b = bind_src(&mut ev, params);
    let x_flat = ev.constant(grid.flatten());
    let cond = if guidance {
        SrcConditioning::Additive(ev.constant(injection_row(injection, grid.dim())?))
    } else {
        SrcConditioning::None
    };
    let (z_l, attn) = build_src_forward(&mut ev, &x_flat, grid.height(), grid.width(), &cond, &b)?;
    Ok(SrcOutput { z_l, attn })
}
