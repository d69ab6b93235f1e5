//! Parametric FLOPs model.
//!
//! Counting conventions, applied identically by the closed form
//! [`compressor_flops`] and the instrumented [`CountingEval`]:
//!
//! | operation                    | flops                        |
//! |------------------------------|------------------------------|
//! | matmul [m x n][n x p]        | 2 m n p (multiply-accumulate = 2) |
//! | elementwise add / mul / scale| 1 per output element         |
//! | bias (row broadcast) add     | 1 per output element         |
//! | row softmax                  | 5 per element                |
//! | gelu                         | 16 per element               |
//! | relu                         | 1 per element                |
//! | transpose/reshape/gather/concat | 0 (data movement)         |
//! | sum                          | 1 per input element          |
//! | mean cross-entropy           | 8 per logit element          |
//!
//! Instruction pooling happens before the counted region (it is
//! per-task conditioning, not per-frame compression work) and is
//! excluded from both sides. Downstream-consumer cost is modeled as
//! `fixed + linear * M + pair * M^2` over the token budget M; its
//! coefficients are caller-supplied, and no attempt is made to match
//! any particular backbone's absolute figures.

use serde::{Deserialize, Serialize};

use crate::conditioning::{pool_instruction, InstructionEmbedding};
use crate::error::{Error, Result};
use crate::eval::{Evaluator, PlainEval};
use crate::nn::Activation;
use crate::pipeline::{
    run_compress, token_count, CompressedOutput, CompressionConfig, CompressorParams,
};
use crate::src::FeatureGrid;
use crate::tensor::Tensor;

pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;
pub const GELU_FLOPS_PER_ELEMENT: u64 = 16;
pub const RELU_FLOPS_PER_ELEMENT: u64 = 1;
pub const CROSS_ENTROPY_FLOPS_PER_ELEMENT: u64 = 8;

fn activation_flops(act: Activation) -> u64 {
    match act {
        Activation::Gelu => GELU_FLOPS_PER_ELEMENT,
        Activation::Relu => RELU_FLOPS_PER_ELEMENT,
        Activation::Identity => 0,
    }
}

/// Value executor that tallies multiply-adds and elementwise work as it
/// computes, per the table above. Runs in 64-bit mode.
pub struct CountingEval {
    inner: PlainEval,
    pub flops: u64,
}

impl CountingEval {
    pub fn new() -> Self {
        CountingEval {
            inner: PlainEval::verify(),
            flops: 0,
        }
    }
}

impl Default for CountingEval {
    fn default() -> Self {
        Self::new()
    }
}

impl Evaluator for CountingEval {
    type Handle = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        self.inner.constant(t)
    }

    fn param(&mut self, name: &str, t: &Tensor) -> Tensor {
        self.inner.param(name, t)
    }

    fn dims(&self, h: &Tensor) -> Vec<usize> {
        self.inner.dims(h)
    }

    fn value(&self, h: &Tensor) -> Tensor {
        self.inner.value(h)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = self.inner.matmul(a, b)?;
        self.flops += 2 * (a.rows() * a.cols() * b.cols()) as u64;
        Ok(out)
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        self.inner.transpose(a)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = self.inner.add(a, b)?;
        self.flops += out.len() as u64;
        Ok(out)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = self.inner.mul(a, b)?;
        self.flops += out.len() as u64;
        Ok(out)
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = self.inner.scale(a, c)?;
        self.flops += out.len() as u64;
        Ok(out)
    }

    fn add_row(&mut self, x: &Tensor, row: &Tensor) -> Result<Tensor> {
        let out = self.inner.add_row(x, row)?;
        self.flops += out.len() as u64;
        Ok(out)
    }

    fn activation(&mut self, x: &Tensor, act: Activation) -> Result<Tensor> {
        let out = self.inner.activation(x, act)?;
        self.flops += activation_flops(act) * out.len() as u64;
        Ok(out)
    }

    fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.inner.softmax_rows(x)?;
        self.flops += SOFTMAX_FLOPS_PER_ELEMENT * out.len() as u64;
        Ok(out)
    }

    fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        self.inner.gather_rows(x, idx)
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        self.inner.concat_rows(parts)
    }

    fn reshape(&mut self, x: &Tensor, dims: Vec<usize>) -> Result<Tensor> {
        self.inner.reshape(x, dims)
    }

    fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.inner.sum_all(x)?;
        self.flops += x.len() as u64;
        Ok(out)
    }

    fn cross_entropy_mean(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let out = self.inner.cross_entropy_mean(logits, targets)?;
        self.flops += CROSS_ENTROPY_FLOPS_PER_ELEMENT * logits.len() as u64;
        Ok(out)
    }
}

/// Run a full compression while tallying its multiply-adds; the oracle
/// the closed form is checked against.
pub fn counted_compress(
    params: &CompressorParams,
    views: &[FeatureGrid],
    instr: &InstructionEmbedding,
    config: &CompressionConfig,
) -> Result<(CompressedOutput, u64)> {
    let pooled = pool_instruction(instr)?;
    let mut ev = CountingEval::new();
    let out = run_compress(&mut ev, params, views, &pooled, config)?;
    Ok((out, ev.flops))
}

/// affine map applied to `rows` rows: matmul + bias broadcast.
fn linear_flops(rows: u64, fan_in: u64, fan_out: u64) -> u64 {
    2 * rows * fan_in * fan_out + rows * fan_out
}

/// One attention call: queries [q x D] over tokens [n x D].
/// Returns (projection matmul flops, projection bias flops, attention
/// core flops).
fn attention_flops(q: u64, n: u64, d: u64, projections: bool) -> (u64, u64, u64) {
    let (pm, pb) = if projections {
        // q, k, v projections plus the output projection on [q x D];
        // the key projection has no bias term
        (
            2 * q * d * d + 2 * n * d * d + 2 * n * d * d + 2 * q * d * d,
            q * d + n * d + q * d,
        )
    } else {
        (0, 0)
    };
    // scores + scale + softmax + value mix
    let core = 2 * q * n * d + q * n + SOFTMAX_FLOPS_PER_ELEMENT * q * n + 2 * q * n * d;
    (pm, pb, core)
}

/// Closed-form cost components of one compression call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    /// Instruction-side work: conditioning MLPs and query modulation.
    pub conditioning: u64,
    /// The quadratic projection matmuls of both pathways.
    pub projection_matmul: u64,
    /// Projection bias broadcasts.
    pub projection_bias: u64,
    /// Scores, scaling, softmax, value mixing, and window pooling.
    pub attention: u64,
    pub total: u64,
}

/// Analytic multiply-add count of one compression call; equals the
/// [`CountingEval`] tally exactly.
pub fn compressor_flops_breakdown(config: &CompressionConfig) -> Result<FlopsBreakdown> {
    config.validate()?;
    let v = config.views as u64;
    let d = config.dim as u64;
    let k = config.k as u64;
    let n = config.tokens_per_view() as u64;
    let s = (config.w * config.w) as u64;
    let n_windows = config.local_tokens_per_view() as u64;
    let variant = config.variant;
    let projections = !config.identity_projections;

    let mut conditioning = 0u64;
    if variant.includes_src() {
        if variant.src_additive_guidance() {
            conditioning += linear_flops(1, d, d);
        } else if variant.src_film_guidance() {
            conditioning += linear_flops(1, d, 2 * d);
        }
    }
    if variant.includes_stc() && variant.stc_guidance() {
        // task MLP: D -> 2D (gelu) -> D
        conditioning += linear_flops(1, d, 2 * d)
            + GELU_FLOPS_PER_ELEMENT * 2 * d
            + linear_flops(1, 2 * d, d);
        // modulation MLP: D -> 2kD
        conditioning += linear_flops(1, d, 2 * k * d);
        // gamma (*) Q + beta
        conditioning += 2 * k * d;
    }

    let mut projection_matmul = 0u64;
    let mut projection_bias = 0u64;
    let mut attention = 0u64;

    if variant.includes_stc() {
        let (pm, pb, core) = attention_flops(k, n, d, projections);
        projection_matmul += v * pm;
        projection_bias += v * pb;
        attention += v * core;
    }
    if variant.includes_src() {
        let cond_per_window = if variant.src_additive_guidance() {
            d
        } else if variant.src_film_guidance() {
            2 * d
        } else {
            0
        };
        let (pm, pb, core) = attention_flops(1, s, d, projections);
        // window mean pooling is a [1 x s][s x D] matmul
        let per_window_core = 2 * s * d + cond_per_window + core;
        projection_matmul += v * n_windows * pm;
        projection_bias += v * n_windows * pb;
        attention += v * n_windows * per_window_core;
    }

    let total = conditioning + projection_matmul + projection_bias + attention;
    Ok(FlopsBreakdown {
        conditioning,
        projection_matmul,
        projection_bias,
        attention,
        total,
    })
}

pub fn compressor_flops(config: &CompressionConfig) -> Result<u64> {
    Ok(compressor_flops_breakdown(config)?.total)
}

/// Downstream-consumer cost curve: fixed + linear * M + pair * M^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    #[serde(rename = "perTokenLinearCost")]
    pub per_token_linear_cost: f64,
    #[serde(rename = "perTokenPairCost")]
    pub per_token_pair_cost: f64,
    #[serde(rename = "fixedCost")]
    pub fixed_cost: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("perTokenLinearCost", self.per_token_linear_cost),
            ("perTokenPairCost", self.per_token_pair_cost),
            ("fixedCost", self.fixed_cost),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!(
                    "cost model coefficient {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn downstream(&self, tokens: usize) -> f64 {
        let t = tokens as f64;
        self.fixed_cost + self.per_token_linear_cost * t + self.per_token_pair_cost * t * t
    }
}

/// Token budget summary for one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct TokensReport {
    pub config: CompressionConfig,
    pub tokens_baseline: usize,
    pub tokens_compressed: usize,
}

pub fn tokens_report(config: &CompressionConfig) -> Result<TokensReport> {
    Ok(TokensReport {
        config: config.clone(),
        tokens_baseline: config.views * config.tokens_per_view(),
        tokens_compressed: token_count(config)?,
    })
}

/// End-to-end cost comparison under a downstream cost model. The
/// compressed side includes the compressor's own work.
#[derive(Debug, Clone, Serialize)]
pub struct FlopsReport {
    pub config: CompressionConfig,
    pub tokens_baseline: usize,
    pub tokens_compressed: usize,
    pub flops_baseline: f64,
    pub flops_compressed: f64,
    pub ratio: f64,
}

pub fn pipeline_flops(model: &CostModel, config: &CompressionConfig) -> Result<FlopsReport> {
    model.validate()?;
    let tokens = tokens_report(config)?;
    let flops_baseline = model.downstream(tokens.tokens_baseline);
    if flops_baseline <= 0.0 {
        return Err(Error::contract(
            "cost model is identically zero on the baseline; ratio undefined",
        ));
    }
    let flops_compressed =
        model.downstream(tokens.tokens_compressed) + compressor_flops(config)? as f64;
    Ok(FlopsReport {
        config: config.clone(),
        tokens_baseline: tokens.tokens_baseline,
        tokens_compressed: tokens.tokens_compressed,
        flops_baseline,
        flops_compressed,
        ratio: flops_compressed / flops_baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{init_params, Variant};
    use crate::rng::Rng;

    fn random_views(config: &CompressionConfig, seed: u64) -> Vec<FeatureGrid> {
        let mut rng = Rng::from_seed(seed);
        (0..config.views)
            .map(|i| {
                FeatureGrid::new(
                    Tensor::uniform(
                        vec![config.height, config.width, config.dim],
                        -1.0,
                        1.0,
                        &mut rng,
                    ),
                    format!("view{i}"),
                )
                .unwrap()
            })
            .collect()
    }

    fn random_instr(d: usize, seed: u64) -> InstructionEmbedding {
        let mut rng = Rng::from_seed(seed);
        InstructionEmbedding::new(Tensor::uniform(vec![3, d], -1.0, 1.0, &mut rng), None).unwrap()
    }

    #[test]
    fn closed_form_matches_instrumented_counter_exactly() {
        for variant in Variant::ALL {
            for (k, w) in [(8, 2), (16, 2), (32, 2), (16, 4), (16, 8)] {
                let cfg = CompressionConfig {
                    k,
                    w,
                    variant,
                    ..CompressionConfig::desk()
                };
                let params = init_params(&cfg, 1).unwrap();
                let (_, counted) =
                    counted_compress(&params, &random_views(&cfg, 2), &random_instr(8, 3), &cfg)
                        .unwrap();
                let analytic = compressor_flops(&cfg).unwrap();
                assert_eq!(analytic, counted, "{variant:?} k={k} w={w}");
            }
        }
    }

    #[test]
    fn closed_form_matches_counter_with_identity_projections() {
        for variant in [Variant::StcSrc, Variant::NoGuidance, Variant::SrcOnly] {
            let cfg = CompressionConfig {
                variant,
                identity_projections: true,
                ..CompressionConfig::desk()
            };
            let params = init_params(&cfg, 4).unwrap();
            let (_, counted) =
                counted_compress(&params, &random_views(&cfg, 5), &random_instr(8, 6), &cfg)
                    .unwrap();
            assert_eq!(compressor_flops(&cfg).unwrap(), counted, "{variant:?}");
        }
    }

    #[test]
    fn src_only_cost_is_independent_of_k() {
        let mk = |k| CompressionConfig {
            k,
            variant: Variant::SrcOnly,
            ..CompressionConfig::desk()
        };
        assert_eq!(
            compressor_flops(&mk(8)).unwrap(),
            compressor_flops(&mk(32)).unwrap()
        );
    }

    #[test]
    fn doubling_d_quadruples_projection_matmuls() {
        let mk = |d| CompressionConfig {
            dim: d,
            ..CompressionConfig::desk()
        };
        let small = compressor_flops_breakdown(&mk(8)).unwrap();
        let big = compressor_flops_breakdown(&mk(16)).unwrap();
        assert_eq!(big.projection_matmul, 4 * small.projection_matmul);
    }

    #[test]
    fn linear_only_model_ratio_is_token_ratio() {
        let model = CostModel {
            per_token_linear_cost: 1e12,
            per_token_pair_cost: 0.0,
            fixed_cost: 0.0,
        };
        let report = pipeline_flops(&model, &CompressionConfig::desk()).unwrap();
        assert_eq!(report.tokens_baseline, 512);
        assert_eq!(report.tokens_compressed, 160);
        assert!((report.ratio - 0.3125).abs() < 1e-6, "{}", report.ratio);
    }

    #[test]
    fn pair_only_model_ratio_is_squared_token_ratio() {
        let model = CostModel {
            per_token_linear_cost: 0.0,
            per_token_pair_cost: 1e12,
            fixed_cost: 0.0,
        };
        let report = pipeline_flops(&model, &CompressionConfig::desk()).unwrap();
        let expect = (160.0f64 / 512.0).powi(2);
        assert!((report.ratio - expect).abs() < 1e-6);
        assert!((report.ratio - 0.0977).abs() < 1e-4);
    }

    #[test]
    fn ratio_is_monotone_in_token_count() {
        let model = CostModel {
            per_token_linear_cost: 1e6,
            per_token_pair_cost: 1e3,
            fixed_cost: 1e6,
        };
        let mut seen: Vec<(usize, f64)> = Vec::new();
        for (k, w) in [(16, 8), (16, 4), (8, 2), (16, 2), (32, 2)] {
            let cfg = CompressionConfig {
                k,
                w,
                ..CompressionConfig::desk()
            };
            let r = pipeline_flops(&model, &cfg).unwrap();
            seen.push((r.tokens_compressed, r.ratio));
        }
        // configurations above are ordered by token budget: 40 < 64 < 144 < 160 < 192
        for pair in seen.windows(2) {
            assert!(pair[0].0 < pair[1].0);
            assert!(pair[0].1 < pair[1].1, "{seen:?}");
        }
    }

    #[test]
    fn cost_model_json_names() {
        let model: CostModel = serde_json::from_str(
            r#"{"perTokenLinearCost": 2.0, "perTokenPairCost": 0.5, "fixedCost": 10.0}"#,
        )
        .unwrap();
        assert_eq!(model.per_token_linear_cost, 2.0);
        assert!(serde_json::from_str::<CostModel>(r#"{"linear": 1.0}"#).is_err());
        let report = pipeline_flops(&model, &CompressionConfig::desk()).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        for field in [
            "tokens_baseline",
            "tokens_compressed",
            "flops_baseline",
            "flops_compressed",
            "ratio",
        ] {
            assert!(json.contains(field), "{json}");
        }
    }

    #[test]
    fn negative_coefficients_rejected() {
        let model = CostModel {
            per_token_linear_cost: -1.0,
            per_token_pair_cost: 0.0,
            fixed_cost: 0.0,
        };
        assert!(pipeline_flops(&model, &CompressionConfig::desk()).is_err());
    }
}
