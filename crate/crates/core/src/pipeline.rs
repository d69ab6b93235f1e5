//! End-to-end compressor: configuration, multi-view orchestration,
//! ablation-variant switching, and the canonical parameter registry.
//!
//! Parameters are shared across views; each view is compressed
//! independently and the outputs concatenate as [global; local] per
//! view, views in input order.

use serde::{Deserialize, Serialize};

use crate::conditioning::{pool_instruction, InstructionEmbedding, PooledInstruction};
use crate::error::{Error, Result};
use crate::eval::{bind_mlp, mlp_apply, BoundMlp, Evaluator, PlainEval};
use crate::nn::{Activation, LinearMap, Mlp};
use crate::rng::Rng;
use crate::src::{
    bind_src, build_src_forward, check_divisible, BoundSrc, FeatureGrid, SrcConditioning,
    SrcParams,
};
use crate::stc::{
    bind_stc, build_condition_queries, build_film_modulation, BoundStc, StcParams,
};
use crate::tensor::{Precision, Tensor};

/// The five ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    StcSrc,
    StcSrcFilm,
    NoGuidance,
    StcOnly,
    SrcOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::StcSrc,
        Variant::StcSrcFilm,
        Variant::NoGuidance,
        Variant::StcOnly,
        Variant::SrcOnly,
    ];

    pub fn includes_stc(self) -> bool {
        !matches!(self, Variant::SrcOnly)
    }

    pub fn includes_src(self) -> bool {
        !matches!(self, Variant::StcOnly)
    }

    /// Instruction modulation of the global query bank.
    pub fn stc_guidance(self) -> bool {
        matches!(self, Variant::StcSrc | Variant::StcSrcFilm | Variant::StcOnly)
    }

    /// Additive instruction injection into the local window queries.
    pub fn src_additive_guidance(self) -> bool {
        matches!(self, Variant::StcSrc | Variant::SrcOnly)
    }

    /// Affine modulation of the local window queries instead of the
    /// additive injection (the experimental local-modulation row).
    pub fn src_film_guidance(self) -> bool {
        matches!(self, Variant::StcSrcFilm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::StcSrc => "stc_src",
            Variant::StcSrcFilm => "stc_src_film",
            Variant::NoGuidance => "no_guidance",
            Variant::StcOnly => "stc_only",
            Variant::SrcOnly => "src_only",
        }
    }
}

/// Full compressor configuration. JSON uses exactly these field names;
/// unknown fields are rejected to protect the token-count contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    /// Embedding width.
    #[serde(rename = "D")]
    pub dim: usize,
    /// Global query count.
    pub k: usize,
    /// Local window side length.
    pub w: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    /// Camera views per step.
    pub views: usize,
    pub variant: Variant,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub identity_projections: bool,
    #[serde(default)]
    pub seed: u64,
}

impl CompressionConfig {
    /// The default bench-scale configuration: two 16x16 views at D=8,
    /// k=16 global queries, w=2 windows, both pathways guided.
    pub fn desk() -> Self {
        CompressionConfig {
            dim: 8,
            k: 16,
            w: 2,
            height: 16,
            width: 16,
            views: 2,
            variant: Variant::StcSrc,
            precision: Precision::Verify64,
            identity_projections: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("D", self.dim),
            ("k", self.k),
            ("H", self.height),
            ("W", self.width),
            ("views", self.views),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("config field {name} must be >= 1")));
            }
        }
        check_divisible(self.height, self.width, self.w)
    }

    /// Visual tokens per view before compression.
    pub fn tokens_per_view(&self) -> usize {
        self.height * self.width
    }

    /// Local summaries per view.
    pub fn local_tokens_per_view(&self) -> usize {
        (self.height / self.w) * (self.width / self.w)
    }
}

/// Compressed sequence length: per view, k global tokens when the
/// global pathway runs plus (H/w)*(W/w) local tokens when the local
/// pathway runs, times the view count.
pub fn token_count(config: &CompressionConfig) -> Result<usize> {
    config.validate()?;
    let g = if config.variant.includes_stc() {
        config.k
    } else {
        0
    };
    let l = if config.variant.includes_src() {
        config.local_tokens_per_view()
    } else {
        0
    };
    Ok(config.views * (g + l))
}

pub const PARAMS_VERSION: u16 = 1;

/// Number of tensors in the canonical registry.
pub const PARAM_TENSOR_COUNT: usize = 25;

/// All learnable state, plus the configuration it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorParams {
    pub stc: StcParams,
    pub src: SrcParams,
    /// Pooled instruction -> local query modulation (D -> 2D, affine),
    /// used only by the local-modulation variant. Identity at init.
    pub src_film: Mlp,
    pub config: CompressionConfig,
    pub version: u16,
}

/// Deterministic initialization. The given seed is recorded back into
/// the embedded config. Both modulation MLPs start at the identity so
/// guided and unguided paths coincide at step 0. In fast32 mode every
/// tensor is rounded to f32 storage precision.
pub fn init_params(config: &CompressionConfig, seed: u64) -> Result<CompressorParams> {
    config.validate()?;
    let mut rng = Rng::from_seed(seed);
    let stc = StcParams::init(config.dim, config.k, config.identity_projections, &mut rng);
    let src = SrcParams::init(config.dim, config.w, config.identity_projections, &mut rng);
    let src_film = crate::stc::init_film_mlp(config.dim, 1, config.dim, &mut rng);
    let mut config = config.clone();
    config.seed = seed;
    let mut params = CompressorParams {
        stc,
        src,
        src_film,
        config,
        version: PARAMS_VERSION,
    };
    if params.config.precision == Precision::Fast32 {
        for (_, t) in params.named_tensors_mut() {
            t.round_to_f32();
        }
    }
    Ok(params)
}

impl CompressorParams {
    /// Canonical parameter registry. Everything that serializes,
    /// trains, or binds into a graph walks this order; `from_handles`
    /// below consumes handles positionally in the same order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::with_capacity(25);
        out.push(("stc.queries".into(), &self.stc.queries));
        out.push(("stc.q_proj.weight".into(), &self.stc.q_proj.weight));
        out.push(("stc.q_proj.bias".into(), &self.stc.q_proj.bias));
        // key projections have no learnable bias (inert under softmax)
        out.push(("stc.k_proj.weight".into(), &self.stc.k_proj.weight));
        out.push(("stc.v_proj.weight".into(), &self.stc.v_proj.weight));
        out.push(("stc.v_proj.bias".into(), &self.stc.v_proj.bias));
        out.push(("stc.o_proj.weight".into(), &self.stc.o_proj.weight));
        out.push(("stc.o_proj.bias".into(), &self.stc.o_proj.bias));
        for (i, layer) in self.stc.mlp_stc.layers.iter().enumerate() {
            out.push((format!("stc.mlp_stc.{i}.weight"), &layer.weight));
            out.push((format!("stc.mlp_stc.{i}.bias"), &layer.bias));
        }
        for (i, layer) in self.stc.mlp_film.layers.iter().enumerate() {
            out.push((format!("stc.mlp_film.{i}.weight"), &layer.weight));
            out.push((format!("stc.mlp_film.{i}.bias"), &layer.bias));
        }
        out.push(("src.q_proj.weight".into(), &self.src.q_proj.weight));
        out.push(("src.q_proj.bias".into(), &self.src.q_proj.bias));
        out.push(("src.k_proj.weight".into(), &self.src.k_proj.weight));
        out.push(("src.v_proj.weight".into(), &self.src.v_proj.weight));
        out.push(("src.v_proj.bias".into(), &self.src.v_proj.bias));
        out.push(("src.o_proj.weight".into(), &self.src.o_proj.weight));
        out.push(("src.o_proj.bias".into(), &self.src.o_proj.bias));
        for (i, layer) in self.src.mlp_src.layers.iter().enumerate() {
            out.push((format!("src.mlp_src.{i}.weight"), &layer.weight));
            out.push((format!("src.mlp_src.{i}.bias"), &layer.bias));
        }
        for (i, layer) in self.src_film.layers.iter().enumerate() {
            out.push((format!("src_film.{i}.weight"), &layer.weight));
            out.push((format!("src_film.{i}.bias"), &layer.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::with_capacity(25);
        out.push(("stc.queries".into(), &mut self.stc.queries));
        out.push(("stc.q_proj.weight".into(), &mut self.stc.q_proj.weight));
        out.push(("stc.q_proj.bias".into(), &mut self.stc.q_proj.bias));
        out.push(("stc.k_proj.weight".into(), &mut self.stc.k_proj.weight));
        out.push(("stc.v_proj.weight".into(), &mut self.stc.v_proj.weight));
        out.push(("stc.v_proj.bias".into(), &mut self.stc.v_proj.bias));
        out.push(("stc.o_proj.weight".into(), &mut self.stc.o_proj.weight));
        out.push(("stc.o_proj.bias".into(), &mut self.stc.o_proj.bias));
        for (i, layer) in self.stc.mlp_stc.layers.iter_mut().enumerate() {
            out.push((format!("stc.mlp_stc.{i}.weight"), &mut layer.weight));
            out.push((format!("stc.mlp_stc.{i}.bias"), &mut layer.bias));
        }
        for (i, layer) in self.stc.mlp_film.layers.iter_mut().enumerate() {
            out.push((format!("stc.mlp_film.{i}.weight"), &mut layer.weight));
            out.push((format!("stc.mlp_film.{i}.bias"), &mut layer.bias));
        }
        out.push(("src.q_proj.weight".into(), &mut self.src.q_proj.weight));
        out.push(("src.q_proj.bias".into(), &mut self.src.q_proj.bias));
        out.push(("src.k_proj.weight".into(), &mut self.src.k_proj.weight));
        out.push(("src.v_proj.weight".into(), &mut self.src.v_proj.weight));
        out.push(("src.v_proj.bias".into(), &mut self.src.v_proj.bias));
        out.push(("src.o_proj.weight".into(), &mut self.src.o_proj.weight));
        out.push(("src.o_proj.bias".into(), &mut self.src.o_proj.bias));
        for (i, layer) in self.src.mlp_src.layers.iter_mut().enumerate() {
            out.push((format!("src.mlp_src.{i}.weight"), &mut layer.weight));
            out.push((format!("src.mlp_src.{i}.bias"), &mut layer.bias));
        }
        for (i, layer) in self.src_film.layers.iter_mut().enumerate() {
            out.push((format!("src_film.{i}.weight"), &mut layer.weight));
            out.push((format!("src_film.{i}.bias"), &mut layer.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_param_set(&self) -> crate::autodiff::ParamSet {
        crate::autodiff::ParamSet::new(
            self.named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        )
    }

    /// Copy values back from a parameter set (same names, same order).
    pub fn apply_param_set(&mut self, set: &crate::autodiff::ParamSet) -> Result<()> {
        let mut slots = self.named_tensors_mut();
        if slots.len() > set.entries.len() {
            return Err(Error::Mismatch(format!(
                "parameter set has {} entries, compressor needs {}",
                set.entries.len(),
                slots.len()
            )));
        }
        for (slot, entry) in slots.iter_mut().zip(&set.entries) {
            if slot.0 != entry.0 || slot.1.dims() != entry.1.dims() {
                return Err(Error::Mismatch(format!(
                    "parameter {} does not match slot {}",
                    entry.0, slot.0
                )));
            }
            *slot.1 = entry.1.clone();
        }
        Ok(())
    }

    /// Zero every modulation weight (both the global query modulation
    /// and the local-modulation variant's layer) so instruction
    /// conditioning through those paths is exactly the identity.
    pub fn reset_modulation_to_identity(&mut self) {
        self.stc.reset_film_to_identity();
        let d = self.config.dim;
        for layer in &mut self.src_film.layers {
            layer.weight = Tensor::zeros(layer.weight.dims().to_vec());
        }
        let mut bias = vec![1.0; d];
        bias.extend(vec![0.0; d]);
        let last = self.src_film.layers.last_mut().expect("film has a layer");
        last.bias = Tensor::new(vec![2 * d], bias).expect("film bias dims");
    }

    /// Shape-relevant fields of a requested run config must match the
    /// config these parameters were built for.
    pub fn check_compatible(&self, requested: &CompressionConfig) -> Result<()> {
        let mine = &self.config;
        for (name, a, b) in [
            ("D", mine.dim, requested.dim),
            ("k", mine.k, requested.k),
            ("w", mine.w, requested.w),
        ] {
            if a != b {
                return Err(Error::Mismatch(format!(
                    "params were built with {name}={a} but the requested config has {name}={b}"
                )));
            }
        }
        if mine.identity_projections != requested.identity_projections {
            return Err(Error::Mismatch(format!(
                "params were built with identity_projections={} but the requested config has {}",
                mine.identity_projections, requested.identity_projections
            )));
        }
        Ok(())
    }
}

/// Per-view slice of the compressed output.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewOutput {
    pub z_g: Option<Tensor>,
    pub z_l: Option<Tensor>,
    /// Global attention [k x N].
    pub global_attn: Option<Tensor>,
    /// Local attention [N' x w^2].
    pub local_attn: Option<Tensor>,
}

/// Compressed token sequence plus per-view inspection maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedOutput {
    /// [M x D] with M = token_count(config).
    pub z: Tensor,
    pub views: Vec<ViewOutput>,
}

pub(crate) struct BoundCompressor<H> {
    pub stc: BoundStc<H>,
    pub src: BoundSrc<H>,
    pub src_film: BoundMlp<H>,
}

pub(crate) fn bind_compressor<E: Evaluator>(
    ev: &mut E,
    p: &CompressorParams,
) -> BoundCompressor<E::Handle> {
    BoundCompressor {
        stc: bind_stc(ev, &p.stc),
        src: bind_src(ev, &p.src),
        src_film: bind_mlp(ev, "src_film", &p.src_film),
    }
}

impl<H: Clone> BoundCompressor<H> {
    /// Rebuild the bound structure from handles laid out in
    /// `named_tensors` order (1 query bank + 7 global projection
    /// tensors + 4 task-MLP + 2 modulation-MLP + 7 local projection
    /// tensors + 2 injection-MLP + 2 local-modulation tensors).
    pub(crate) fn from_handles(config: &CompressionConfig, handles: &[H]) -> Result<Self> {
        if handles.len() != PARAM_TENSOR_COUNT {
            return Err(Error::contract(format!(
                "expected {PARAM_TENSOR_COUNT} parameter handles, got {}",
                handles.len()
            )));
        }
        let mut it = handles.iter().cloned();
        let mut next = || it.next().expect("length checked above");
        let queries = next();
        let linear = |next: &mut dyn FnMut() -> H| crate::eval::BoundLinear {
            weight: next(),
            bias: next(),
        };
        let stc_proj = crate::attn::BoundProjections {
            q: linear(&mut next),
            k_weight: next(),
            v: linear(&mut next),
            o: linear(&mut next),
        };
        let mlp_stc = BoundMlp {
            layers: vec![linear(&mut next), linear(&mut next)],
            activation: Activation::Gelu,
        };
        let mlp_film = BoundMlp {
            layers: vec![linear(&mut next)],
            activation: Activation::Identity,
        };
        let src_proj = crate::attn::BoundProjections {
            q: linear(&mut next),
            k_weight: next(),
            v: linear(&mut next),
            o: linear(&mut next),
        };
        let mlp_src = BoundMlp {
            layers: vec![linear(&mut next)],
            activation: Activation::Identity,
        };
        let src_film = BoundMlp {
            layers: vec![linear(&mut next)],
            activation: Activation::Identity,
        };
        Ok(BoundCompressor {
            stc: BoundStc {
                queries,
                proj: stc_proj,
                mlp_stc,
                mlp_film,
                identity_projections: config.identity_projections,
                k: config.k,
                d: config.dim,
            },
            src: BoundSrc {
                proj: src_proj,
                mlp_src,
                window: config.w,
                identity_projections: config.identity_projections,
                d: config.dim,
            },
            src_film,
        })
    }
}

pub(crate) struct ViewGraph<H> {
    pub z_g: Option<H>,
    pub z_l: Option<H>,
    pub global_attn: Option<H>,
    pub local_attn: Option<H>,
}

pub(crate) struct CompressGraph<H> {
    pub z: H,
    pub views: Vec<ViewGraph<H>>,
}

/// The whole forward pass, generic over the executor. Conditioning
/// runs once per call; attention runs per view (and per window).
pub(crate) fn build_compress<E: Evaluator>(
    ev: &mut E,
    b: &BoundCompressor<E::Handle>,
    views: &[E::Handle],
    pooled_row: &E::Handle,
    config: &CompressionConfig,
) -> Result<CompressGraph<E::Handle>> {
    let variant = config.variant;

    let src_cond = if variant.includes_src() {
        if variant.src_additive_guidance() {
            SrcConditioning::Additive(mlp_apply(ev, &b.src.mlp_src, pooled_row)?)
        } else if variant.src_film_guidance() {
            let film = mlp_apply(ev, &b.src_film, pooled_row)?;
            let stacked = ev.reshape(&film, vec![2, config.dim])?;
            let gamma = ev.gather_rows(&stacked, &[0])?;
            let beta = ev.gather_rows(&stacked, &[1])?;
            SrcConditioning::Film { gamma, beta }
        } else {
            SrcConditioning::None
        }
    } else {
        SrcConditioning::None
    };

    let q_con = if variant.includes_stc() {
        Some(if variant.stc_guidance() {
            let (gamma, beta) = build_film_modulation(ev, &b.stc, pooled_row)?;
            build_condition_queries(ev, &b.stc.queries, &gamma, &beta)?
        } else {
            b.stc.queries.clone()
        })
    } else {
        None
    };

    let mut view_graphs = Vec::with_capacity(views.len());
    let mut z_parts = Vec::new();
    for x in views {
        let mut vg = ViewGraph {
            z_g: None,
            z_l: None,
            global_attn: None,
            local_attn: None,
        };
        if let Some(q) = &q_con {
            let (z_g, attn) = crate::attn::build_attention(
                ev,
                q,
                x,
                &b.stc.proj,
                b.stc.identity_projections,
                b.stc.d,
            )?;
            z_parts.push(z_g.clone());
            vg.z_g = Some(z_g);
            vg.global_attn = Some(attn);
        }
        if variant.includes_src() {
            let (z_l, attn) =
                build_src_forward(ev, x, config.height, config.width, &src_cond, &b.src)?;
            z_parts.push(z_l.clone());
            vg.z_l = Some(z_l);
            vg.local_attn = Some(attn);
        }
        view_graphs.push(vg);
    }
    let z = ev.concat_rows(&z_parts)?;
    Ok(CompressGraph {
        z,
        views: view_graphs,
    })
}

fn check_views(views: &[FeatureGrid], config: &CompressionConfig) -> Result<()> {
    if views.len() != config.views {
        return Err(Error::contract(format!(
            "view count mismatch: got {}, config says {}",
            views.len(),
            config.views
        )));
    }
    for (i, v) in views.iter().enumerate() {
        let want = [config.height, config.width, config.dim];
        if v.grid.dims() != want {
            return Err(Error::shape(
                "compress",
                format!(
                    "view {i} ({}) has dims {:?}, config expects {:?}",
                    v.provenance,
                    v.grid.dims(),
                    want
                ),
            ));
        }
    }
    Ok(())
}

/// Compress a set of views under an instruction. The instruction is
/// pooled once; the variant decides which pathways run and how they
/// are conditioned.
pub fn compress(
    params: &CompressorParams,
    views: &[FeatureGrid],
    instr: &InstructionEmbedding,
    config: &CompressionConfig,
) -> Result<CompressedOutput> {
    config.validate()?;
    params.check_compatible(config)?;
    check_views(views, config)?;
    if instr.lang_dim() != config.dim {
        return Err(Error::shape(
            "compress",
            format!(
                "instruction width {} vs D {}",
                instr.lang_dim(),
                config.dim
            ),
        ));
    }
    let pooled = pool_instruction(instr)?;
    compress_pooled(params, views, &pooled, config)
}

pub(crate) fn compress_pooled(
    params: &CompressorParams,
    views: &[FeatureGrid],
    pooled: &PooledInstruction,
    config: &CompressionConfig,
) -> Result<CompressedOutput> {
    let mut ev = PlainEval::new(config.precision);
    run_compress(&mut ev, params, views, pooled, config)
}

/// Bind, build and extract on an arbitrary executor.
pub(crate) fn run_compress<E: Evaluator>(
    ev: &mut E,
    params: &CompressorParams,
    views: &[FeatureGrid],
    pooled: &PooledInstruction,
    config: &CompressionConfig,
) -> Result<CompressedOutput> {
    let bound = bind_compressor(ev, params);
    let view_handles: Vec<E::Handle> = views
        .iter()
        .map(|v| ev.constant(v.flatten()))
        .collect();
    let pooled_row = ev.constant(pooled.as_row());
    let graph = build_compress(ev, &bound, &view_handles, &pooled_row, config)?;
    Ok(CompressedOutput {
        z: ev.value(&graph.z),
        views: graph
            .views
            .iter()
            .map(|vg| ViewOutput {
                z_g: vg.z_g.as_ref().map(|h| ev.value(h)),
                z_l: vg.z_l.as_ref().map(|h| ev.value(h)),
                global_attn: vg.global_attn.as_ref().map(|h| ev.value(h)),
                local_attn: vg.local_attn.as_ref().map(|h| ev.value(h)),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::TapeEval;

    fn desk_config(variant: Variant) -> CompressionConfig {
        CompressionConfig {
            variant,
            ..CompressionConfig::desk()
        }
    }

    fn random_grid(h: usize, w: usize, d: usize, seed: u64, name: &str) -> FeatureGrid {
        let mut rng = Rng::from_seed(seed);
        FeatureGrid::new(Tensor::uniform(vec![h, w, d], -1.0, 1.0, &mut rng), name).unwrap()
    }

    fn random_instr(t: usize, d: usize, seed: u64) -> InstructionEmbedding {
        let mut rng = Rng::from_seed(seed);
        InstructionEmbedding::new(Tensor::uniform(vec![t, d], -1.0, 1.0, &mut rng), None).unwrap()
    }

    #[test]
    fn token_counts_match_published_table() {
        let mut cfg = CompressionConfig::desk();
        // headline configuration
        assert_eq!(token_count(&cfg).unwrap(), 160);
        // component ablations
        cfg.variant = Variant::StcOnly;
        assert_eq!(token_count(&cfg).unwrap(), 32);
        cfg.variant = Variant::SrcOnly;
        assert_eq!(token_count(&cfg).unwrap(), 128);
        cfg.variant = Variant::NoGuidance;
        assert_eq!(token_count(&cfg).unwrap(), 160);
        cfg.variant = Variant::StcSrcFilm;
        assert_eq!(token_count(&cfg).unwrap(), 160);
        // hyperparameter sweep
        cfg.variant = Variant::StcSrc;
        cfg.k = 8;
        assert_eq!(token_count(&cfg).unwrap(), 144);
        cfg.k = 32;
        assert_eq!(token_count(&cfg).unwrap(), 192);
        cfg.k = 16;
        cfg.w = 4;
        assert_eq!(token_count(&cfg).unwrap(), 64);
        cfg.w = 8;
        assert_eq!(token_count(&cfg).unwrap(), 40);
    }

    #[test]
    fn registry_order_matches_bound_names() {
        let params = init_params(&CompressionConfig::desk(), 7).unwrap();
        let mut ev = TapeEval::new();
        bind_compressor(&mut ev, &params);
        let bound_names: Vec<String> = ev
            .tape
            .param_names()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let registry_names: Vec<String> = params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(bound_names, registry_names);
        assert_eq!(registry_names.len(), PARAM_TENSOR_COUNT);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = CompressionConfig::desk();
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 4).unwrap();
        assert_ne!(a.stc.queries, c.stc.queries);
    }

    #[test]
    fn compress_desk_scale_shape() {
        let cfg = CompressionConfig::desk();
        let params = init_params(&cfg, 0).unwrap();
        let views = [
            random_grid(16, 16, 8, 1, "front"),
            random_grid(16, 16, 8, 2, "wrist"),
        ];
        let out = compress(&params, &views, &random_instr(5, 8, 3), &cfg).unwrap();
        assert_eq!(out.z.dims(), &[160, 8]);
        assert!(out.z.is_finite());
        // per view: global tokens first, then local, views in order
        let v0 = &out.views[0];
        let zg = v0.z_g.as_ref().unwrap();
        let zl = v0.z_l.as_ref().unwrap();
        assert_eq!(zg.dims(), &[16, 8]);
        assert_eq!(zl.dims(), &[64, 8]);
        assert_eq!(&out.z.data()[..zg.len()], zg.data());
        assert_eq!(&out.z.data()[zg.len()..zg.len() + zl.len()], zl.data());
    }

    #[test]
    fn compress_is_pure() {
        let cfg = desk_config(Variant::StcSrc);
        let params = init_params(&cfg, 5).unwrap();
        let views = [
            random_grid(16, 16, 8, 6, "a"),
            random_grid(16, 16, 8, 7, "b"),
        ];
        let instr = random_instr(4, 8, 8);
        let once = compress(&params, &views, &instr, &cfg).unwrap();
        let twice = compress(&params, &views, &instr, &cfg).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn no_guidance_ignores_the_instruction() {
        let cfg = desk_config(Variant::NoGuidance);
        let params = init_params(&cfg, 9).unwrap();
        let views = [
            random_grid(16, 16, 8, 10, "a"),
            random_grid(16, 16, 8, 11, "b"),
        ];
        let z1 = compress(&params, &views, &random_instr(4, 8, 12), &cfg).unwrap();
        let z2 = compress(&params, &views, &random_instr(9, 8, 13), &cfg).unwrap();
        assert_eq!(z1.z, z2.z);
    }

    #[test]
    fn identity_modulation_with_zero_injection_equals_no_guidance() {
        let guided_cfg = desk_config(Variant::StcSrc);
        let mut params = init_params(&guided_cfg, 14).unwrap();
        params.reset_modulation_to_identity();
        // kill the additive injection entirely
        for layer in &mut params.src.mlp_src.layers {
            layer.weight = Tensor::zeros(layer.weight.dims().to_vec());
            layer.bias = Tensor::zeros(layer.bias.dims().to_vec());
        }
        let views = [
            random_grid(16, 16, 8, 15, "a"),
            random_grid(16, 16, 8, 16, "b"),
        ];
        let instr = random_instr(6, 8, 17);
        let guided = compress(&params, &views, &instr, &guided_cfg).unwrap();

        let unguided_cfg = desk_config(Variant::NoGuidance);
        let mut unguided_params = params.clone();
        unguided_params.config.variant = Variant::NoGuidance;
        let unguided = compress(&unguided_params, &views, &instr, &unguided_cfg).unwrap();
        assert_eq!(guided.z, unguided.z);
    }

    #[test]
    fn views_are_independent() {
        let cfg = desk_config(Variant::StcSrc);
        let params = init_params(&cfg, 18).unwrap();
        let base = [
            random_grid(16, 16, 8, 19, "a"),
            random_grid(16, 16, 8, 20, "b"),
        ];
        let instr = random_instr(4, 8, 21);
        let out1 = compress(&params, &base, &instr, &cfg).unwrap();

        let changed = [base[0].clone(), random_grid(16, 16, 8, 22, "b2")];
        let out2 = compress(&params, &changed, &instr, &cfg).unwrap();
        assert_eq!(out1.views[0].z_g, out2.views[0].z_g);
        assert_eq!(out1.views[0].z_l, out2.views[0].z_l);
        assert_ne!(out1.views[1].z_g, out2.views[1].z_g);
    }

    #[test]
    fn smoke_matrix_runs_all_variants_and_sweeps() {
        for variant in Variant::ALL {
            for (k, w) in [(8, 2), (16, 2), (32, 2), (16, 4), (16, 8)] {
                let cfg = CompressionConfig {
                    k,
                    w,
                    variant,
                    ..CompressionConfig::desk()
                };
                let params = init_params(&cfg, 23).unwrap();
                let views = [
                    random_grid(16, 16, 8, 24, "a"),
                    random_grid(16, 16, 8, 25, "b"),
                ];
                let out = compress(&params, &views, &random_instr(3, 8, 26), &cfg).unwrap();
                assert_eq!(out.z.rows(), token_count(&cfg).unwrap(), "{variant:?} k={k} w={w}");
                assert!(out.z.is_finite());
            }
        }
    }

    #[test]
    fn view_count_mismatch_is_contract_error() {
        let cfg = CompressionConfig::desk();
        let params = init_params(&cfg, 27).unwrap();
        let views = [random_grid(16, 16, 8, 28, "only")];
        let err = compress(&params, &views, &random_instr(3, 8, 29), &cfg).unwrap_err();
        assert!(err.to_string().contains("view count mismatch"));
    }

    #[test]
    fn incompatible_k_is_a_mismatch_error() {
        let cfg = CompressionConfig::desk();
        let params = init_params(&cfg, 30).unwrap();
        let requested = CompressionConfig {
            k: 32,
            ..CompressionConfig::desk()
        };
        let err = params.check_compatible(&requested).unwrap_err().to_string();
        assert!(err.contains("k=16") && err.contains("k=32"), "{err}");
    }

    #[test]
    fn fast32_output_is_f32_clean_and_pure() {
        let cfg = CompressionConfig {
            precision: Precision::Fast32,
            ..CompressionConfig::desk()
        };
        let params = init_params(&cfg, 31).unwrap();
        let views = [
            random_grid(16, 16, 8, 32, "a"),
            random_grid(16, 16, 8, 33, "b"),
        ];
        let instr = random_instr(4, 8, 34);
        let out = compress(&params, &views, &instr, &cfg).unwrap();
        for &v in out.z.data() {
            assert_eq!(v, v as f32 as f64);
        }
        assert_eq!(out.z, compress(&params, &views, &instr, &cfg).unwrap().z);
    }

    #[test]
    fn config_json_round_trip_and_strictness() {
        let cfg = CompressionConfig::desk();
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"D\":8") && json.contains("\"variant\":\"stc_src\""));
        let back: CompressionConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let with_unknown = json.replace("{", "{\"surprise\":1,");
        assert!(serde_json::from_str::<CompressionConfig>(&with_unknown).is_err());
    }
}
