//! Instruction conditioning signals.
//!
//! The token-level instruction embeddings are mean-pooled into a single
//! vector, which then drives both compression pathways: through one MLP
//! into per-query affine modulation parameters for the global queries,
//! and through another into an additive injection for the local window
//! queries.

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::Tensor;

/// Token-level language embeddings, optionally masked (padding).
#[derive(Debug, Clone)]
pub struct InstructionEmbedding {
    /// [T x D_lang]
    pub tokens: Tensor,
    /// Valid-token flags, length T. `None` pools everything.
    pub mask: Option<Vec<bool>>,
}

impl InstructionEmbedding {
    pub fn new(tokens: Tensor, mask: Option<Vec<bool>>) -> Result<Self> {
        tokens.require_rank(2, "instruction")?;
        if let Some(m) = &mask {
            if m.len() != tokens.rows() {
                return Err(Error::shape(
                    "instruction",
                    format!("mask length {} vs {} tokens", m.len(), tokens.rows()),
                ));
            }
        }
        Ok(InstructionEmbedding { tokens, mask })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn lang_dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// Mean of the valid instruction tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledInstruction {
    /// [D_lang]
    pub vector: Tensor,
}

impl PooledInstruction {
    /// The pooled vector as a single-row matrix.
    pub fn as_row(&self) -> Tensor {
        self.vector
            .reshape(vec![1, self.vector.len()])
            .expect("rank-1 vector reshapes to a row")
    }
}

/// Per-query affine modulation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    /// [k x D]
    pub gamma: Tensor,
    /// [k x D]
    pub beta: Tensor,
}

/// Additive query injection for the local pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct SrcInjection {
    /// [D]
    pub vector: Tensor,
}

/// Arithmetic mean over valid tokens only. Each valid token is weighted
/// by 1/count and the weighted terms accumulate in token order, so the
/// result is deterministic.
pub fn pool_instruction(emb: &InstructionEmbedding) -> Result<PooledInstruction> {
    let t = emb.token_count();
    let d = emb.lang_dim();
    let valid: Vec<usize> = match &emb.mask {
        Some(mask) => (0..t).filter(|&i| mask[i]).collect(),
        None => (0..t).collect(),
    };
    if valid.is_empty() {
        return Err(Error::contract("no valid instruction tokens"));
    }
    let inv = 1.0 / valid.len() as f64;
    let mut acc = vec![0.0; d];
    for &i in &valid {
        let row = &emb.tokens.data()[i * d..(i + 1) * d];
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += inv * v;
        }
    }
    Ok(PooledInstruction {
        vector: Tensor::new(vec![d], acc)?,
    })
}

/// Task embedding from the pooled instruction.
pub fn compute_task_embedding(pooled: &PooledInstruction, mlp_stc: &Mlp) -> Result<Tensor> {
    let out = mlp_stc.forward(&pooled.as_row())?;
    out.reshape(vec![out.cols()])
}

/// Generate the per-query modulation from the task embedding. The MLP
/// output (width 2kD) splits row-major: the first k*D entries become
/// gamma [k x D], the rest beta [k x D].
pub fn compute_film(task_emb: &Tensor, mlp_film: &Mlp, k: usize, d: usize) -> Result<FilmParams> {
    task_emb.require_rank(1, "film")?;
    let row = task_emb.reshape(vec![1, task_emb.len()])?;
    let out = mlp_film.forward(&row)?;
    if out.cols() != 2 * k * d {
        return Err(Error::shape(
            "film",
            format!(
                "modulation output width {} but expected 2*k*D = {}",
                out.cols(),
                2 * k * d
            ),
        ));
    }
    let flat = out.data();
    let gamma = Tensor::new(vec![k, d], flat[..k * d].to_vec())?;
    let beta = Tensor::new(vec![k, d], flat[k * d..].to_vec())?;
    Ok(FilmParams { gamma, beta })
}

/// Additive injection for the local pathway queries.
pub fn compute_src_injection(pooled: &PooledInstruction, mlp_src: &Mlp) -> Result<SrcInjection> {
    let out = mlp_src.forward(&pooled.as_row())?;
    Ok(SrcInjection {
        vector: out.reshape(vec![out.cols()])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LinearMap};

    fn instr(rows: &[Vec<f64>], mask: Option<Vec<bool>>) -> InstructionEmbedding {
        InstructionEmbedding::new(Tensor::from_rows(rows).unwrap(), mask).unwrap()
    }

    #[test]
    fn pool_is_the_arithmetic_mean() {
        let p = pool_instruction(&instr(&[vec![1.0, 3.0], vec![3.0, 5.0]], None)).unwrap();
        assert_eq!(p.vector.data(), &[2.0, 4.0]);
    }

    #[test]
    fn pool_of_single_token_is_identity() {
        let p = pool_instruction(&instr(&[vec![0.5, -2.0]], None)).unwrap();
        assert_eq!(p.vector.data(), &[0.5, -2.0]);
    }

    #[test]
    fn mask_excludes_tokens() {
        let p = pool_instruction(&instr(
            &[vec![1.0, 1.0], vec![9.0, 9.0]],
            Some(vec![true, false]),
        ))
        .unwrap();
        assert_eq!(p.vector.data(), &[1.0, 1.0]);
    }

    #[test]
    fn all_masked_is_a_contract_error() {
        let err = pool_instruction(&instr(&[vec![1.0, 1.0]], Some(vec![false]))).unwrap_err();
        assert!(err.to_string().contains("no valid instruction tokens"));
    }

    #[test]
    fn wrong_mask_length_rejected() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(InstructionEmbedding::new(t, Some(vec![true, false])).is_err());
    }

    #[test]
    fn task_embedding_identity_mlp() {
        let mlp = Mlp::new(vec![LinearMap::identity(2)], Activation::Gelu).unwrap();
        let pooled = PooledInstruction {
            vector: Tensor::new(vec![2], vec![0.3, -1.0]).unwrap(),
        };
        let e = compute_task_embedding(&pooled, &mlp).unwrap();
        assert_eq!(e, pooled.vector);
    }

    #[test]
    fn task_embedding_zero_weights_yield_bias() {
        let mlp = Mlp::new(
            vec![LinearMap::new(
                Tensor::zeros(vec![2, 3]),
                Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
            )
            .unwrap()],
            Activation::Identity,
        )
        .unwrap();
        let pooled = PooledInstruction {
            vector: Tensor::new(vec![2], vec![5.0, -5.0]).unwrap(),
        };
        let e = compute_task_embedding(&pooled, &mlp).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn task_embedding_hand_affine() {
        // weight [[1,2],[0,1]], bias [1,0]; input [2,3] -> [2+1, 4+3] = [3,7]
        let mlp = Mlp::new(
            vec![LinearMap::new(
                Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap(),
                Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
            )
            .unwrap()],
            Activation::Identity,
        )
        .unwrap();
        let pooled = PooledInstruction {
            vector: Tensor::new(vec![2], vec![2.0, 3.0]).unwrap(),
        };
        let e = compute_task_embedding(&pooled, &mlp).unwrap();
        assert_eq!(e.data(), &[3.0, 7.0]);
    }

    #[test]
    fn film_identity_initialization_shape() {
        // zero weights, bias = ones for the gamma half, zeros for beta
        let (k, d) = (2, 3);
        let mut bias = vec![1.0; k * d];
        bias.extend(vec![0.0; k * d]);
        let mlp = Mlp::new(
            vec![LinearMap::new(
                Tensor::zeros(vec![4, 2 * k * d]),
                Tensor::new(vec![2 * k * d], bias).unwrap(),
            )
            .unwrap()],
            Activation::Identity,
        )
        .unwrap();
        let e = Tensor::new(vec![4], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let film = compute_film(&e, &mlp, k, d).unwrap();
        assert!(film.gamma.data().iter().all(|&v| v == 1.0));
        assert!(film.beta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn film_hand_split() {
        // k=1, D=2: output order is [g00, g01, b00, b01]
        let mlp = Mlp::new(
            vec![LinearMap::new(
                Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 2.0]]).unwrap(),
                Tensor::new(vec![4], vec![0.0, 3.0, -1.0, 0.0]).unwrap(),
            )
            .unwrap()],
            Activation::Identity,
        )
        .unwrap();
        let e = Tensor::new(vec![1], vec![5.0]).unwrap();
        let film = compute_film(&e, &mlp, 1, 2).unwrap();
        assert_eq!(film.gamma.data(), &[5.0, 3.0]);
        assert_eq!(film.beta.data(), &[-1.0, 10.0]);
    }

    #[test]
    fn film_is_linear_in_task_embedding_without_bias() {
        let mlp = Mlp::new(
            vec![LinearMap::new(
                Tensor::from_rows(&[vec![0.5, -1.0, 2.0, 0.25]]).unwrap(),
                Tensor::zeros(vec![4]),
            )
            .unwrap()],
            Activation::Identity,
        )
        .unwrap();
        let e1 = Tensor::new(vec![1], vec![2.0]).unwrap();
        let e2 = Tensor::new(vec![1], vec![4.0]).unwrap();
        let f1 = compute_film(&e1, &mlp, 1, 2).unwrap();
        let f2 = compute_film(&e2, &mlp, 1, 2).unwrap();
        for (a, b) in f1.gamma.data().iter().zip(f2.gamma.data()) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in f1.beta.data().iter().zip(f2.beta.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn film_wrong_width_names_expected() {
        let mlp = Mlp::new(vec![LinearMap::identity(4)], Activation::Identity).unwrap();
        let e = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let err = compute_film(&e, &mlp, 2, 3).unwrap_err().to_string();
        assert!(err.contains("12"), "{err}");
    }

    #[test]
    fn src_injection_identity_and_zero() {
        let pooled = PooledInstruction {
            vector: Tensor::new(vec![2], vec![1.5, -0.5]).unwrap(),
        };
        let ident = Mlp::new(vec![LinearMap::identity(2)], Activation::Identity).unwrap();
        assert_eq!(
            compute_src_injection(&pooled, &ident).unwrap().vector,
            pooled.vector
        );
        let zero = Mlp::new(
            vec![LinearMap::new(Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2])).unwrap()],
            Activation::Identity,
        )
        .unwrap();
        let inj = compute_src_injection(&pooled, &zero).unwrap();
        assert!(inj.vector.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn src_injection_hand_affine() {
        let mlp = Mlp::new(
            vec![LinearMap::new(
                Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, -1.0]]).unwrap(),
                Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(),
            )
            .unwrap()],
            Activation::Identity,
        )
        .unwrap();
        let pooled = PooledInstruction {
            vector: Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
        };
        let inj = compute_src_injection(&pooled, &mlp).unwrap();
        assert_eq!(inj.vector.data(), &[2.5, -1.5]);
    }

    #[test]
    fn split_is_a_bijection() {
        // concat(flatten(gamma), flatten(beta)) reconstructs the MLP output
        let mut rng = crate::rng::Rng::from_seed(11);
        let (k, d) = (3, 4);
        let mlp = Mlp::init(&[5, 2 * k * d], Activation::Identity, &mut rng);
        let e = Tensor::uniform(vec![5], -1.0, 1.0, &mut rng);
        let film = compute_film(&e, &mlp, k, d).unwrap();
        let direct = mlp.forward(&e.reshape(vec![1, 5]).unwrap()).unwrap();
        let mut rebuilt = film.gamma.data().to_vec();
        rebuilt.extend_from_slice(film.beta.data());
        assert_eq!(rebuilt, direct.data());
    }
}
