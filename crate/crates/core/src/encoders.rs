//! Frozen, deterministic visual and text encoders.
//!
//! Both are pure functions of their seed: the visual encoder maps a raw
//! sample vector to M unit-norm patch embeddings through per-patch frozen
//! projections, the text encoder maps a token sequence to a single unit-norm
//! embedding through a frozen mixing matrix. Neither ever receives gradient;
//! the only learnable path through the text encoder is the tokens themselves.

use crate::error::{Error, Result};
use crate::rng::{self, derive, derive_indexed};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub seed: u64,
    pub input_dim: usize,
    pub patches: usize,
    pub dim: usize,
    /// One frozen projection per patch, each input_dim×dim.
    projections: Vec<Tensor>,
}

impl VisualEncoder {
    /// Each patch projection is localized: patch m reads a contiguous window
    /// of input dimensions (half-overlapping, wrapping), mimicking regional
    /// image patches so that different patches carry different evidence.
    pub fn new(seed: u64, input_dim: usize, patches: usize, dim: usize) -> Self {
        let window = (2 * input_dim).div_ceil(patches).max(1).min(input_dim);
        let stride = (input_dim as f64 / patches as f64).max(1.0);
        let projections = (0..patches)
            .map(|m| {
                let mut w = rng::normal_tensor(
                    derive_indexed(seed, "visual-proj", m as u64),
                    &[input_dim, dim],
                    1.0,
                );
                let start = (m as f64 * stride) as usize % input_dim;
                for row in 0..input_dim {
                    let in_window = (0..window).any(|k| (start + k) % input_dim == row);
                    if !in_window {
                        for col in 0..dim {
                            w.set2(row, col, 0.0);
                        }
                    }
                }
                w
            })
            .collect();
        VisualEncoder {
            seed,
            input_dim,
            patches,
            dim,
            projections,
        }
    }

    /// Raw per-patch projections W_mᵀx without normalization.
    pub fn project_raw(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_visual",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        let row = Tensor::row(x.values().to_vec());
        let mut out = Tensor::zeros(&[self.patches, self.dim]);
        for (m, proj) in self.projections.iter().enumerate() {
            let v = tensor::matmul(&row, proj)?;
            for j in 0..self.dim {
                out.set2(m, j, v.values()[j]);
            }
        }
        Ok(out)
    }

    /// Encode a raw sample vector into M unit-norm patch embeddings.
    ///
    /// Entirely off-tape: the projections are frozen and the input carries no
    /// gradient, so the result enters downstream graphs as a constant.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::l2_normalize_rows(&self.project_raw(x)?))
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub seed: u64,
    pub token_dim: usize,
    pub dim: usize,
    /// Frozen token_dim×dim mixing matrix.
    mixing: Tensor,
}

impl TextEncoder {
    pub fn new(seed: u64, token_dim: usize, dim: usize) -> Self {
        let mixing = rng::normal_tensor(derive(seed, "text-mixing"), &[token_dim, dim], 1.0);
        TextEncoder {
            seed,
            token_dim,
            dim,
            mixing,
        }
    }

    /// Encode a T×token_dim token sequence into a unit-norm 1×dim embedding.
    ///
    /// Pooling is a norm-weighted token mean — each token contributes in
    /// proportion to its salience — standing in for attention's emphasis on
    /// content tokens; a plain mean would let shared learnable context drown
    /// the name anchors. The final normalization absorbs the 1/T factor, so
    /// identical tokens still embed exactly like a single token.
    ///
    /// Runs on the tape so gradient reaches any learnable tokens in the
    /// sequence; the mixing matrix enters as a constant and stays frozen.
    pub fn encode(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let shape = tape.value(tokens).shape().to_vec();
        if tape.value(tokens).rows() == 0 || tape.value(tokens).len() == 0 {
            return Err(Error::Contract(
                "encode_text requires at least one token".into(),
            ));
        }
        if tape.value(tokens).cols() != self.token_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_text",
                lhs: shape,
                rhs: vec![self.token_dim],
            });
        }
        let salience = tape.row_norms(tokens);
        let weighted = tape.mul_row_broadcast(salience, tokens)?;
        let pooled = tape.sum_axis(weighted, 0)?;
        let w = tape.constant(self.mixing.clone());
        let mixed = tape.matmul(pooled, w)?;
        Ok(tape.l2_normalize_rows(mixed))
    }

    /// Fixed token for a class or condition name: a deterministic vector with
    /// entries in [-1, 1], identical across runs and platforms.
    pub fn name_tokens(&self, name: &str) -> Tensor {
        let sub = derive(self.seed, "name-token") ^ rng::fnv1a64(name.as_bytes());
        let t = rng::uniform_pm1_tensor(rng::splitmix64(sub), &[self.token_dim]);
        Tensor::row(t.values().to_vec())
    }
}

/// Build a visual/text encoder pair that shares a cross-modal alignment, the
/// stand-in for dual-encoder pretraining: for every vocabulary name, the
/// text embedding of its name token matches the visual signature of that
/// name's concept direction (see [`rng::concept_direction`]).
///
/// The text mixing matrix is the minimum-norm interpolant of the name-token
/// → visual-signature pairs plus a random component in the tokens' null
/// space, so learnable context tokens still steer embeddings freely. Both
/// encoders remain frozen pure functions of (seed, vocabulary).
#[allow(clippy::too_many_arguments)]
pub fn pretrained_pair(
    visual_seed: u64,
    text_seed: u64,
    concept_seed: u64,
    input_dim: usize,
    patches: usize,
    dim: usize,
    token_dim: usize,
    vocabulary: &[String],
    alignment_strength: f64,
) -> Result<(VisualEncoder, TextEncoder)> {
    if vocabulary.len() > token_dim {
        return Err(Error::InvalidParameter(format!(
            "alignment vocabulary ({} names) exceeds token_dim {token_dim}",
            vocabulary.len()
        )));
    }
    if !(0.0..=1.0).contains(&alignment_strength) {
        return Err(Error::InvalidParameter(format!(
            "alignment strength must lie in [0, 1], got {alignment_strength}"
        )));
    }
    let visual = VisualEncoder::new(visual_seed, input_dim, patches, dim);
    let mut text = TextEncoder::new(text_seed, token_dim, dim);

    let n = vocabulary.len();
    // T: name tokens (n×token_dim); V: visual signatures (n×dim)
    let mut t = Tensor::zeros(&[n, token_dim]);
    let mut v = Tensor::zeros(&[n, dim]);
    for (i, name) in vocabulary.iter().enumerate() {
        let tok = text.name_tokens(name);
        for j in 0..token_dim {
            t.set2(i, j, tok.values()[j]);
        }
        // energy-weighted signature: raw responses keep silent patches silent
        let concept = rng::concept_direction(concept_seed, name, input_dim);
        let signature = visual.project_raw(&concept)?.mean_rows();
        let mut sig = tensor::l2_normalize_rows(&signature);
        if alignment_strength < 1.0 {
            // imperfect pretraining: blend with a fixed random direction
            let noise = tensor::l2_normalize_rows(&rng::normal_tensor(
                rng::derive_indexed(text_seed, "align-noise", i as u64),
                &[1, dim],
                1.0,
            ));
            for (sv, nv) in sig.values_mut().iter_mut().zip(noise.values()) {
                *sv = alignment_strength * *sv + (1.0 - alignment_strength) * nv;
            }
            sig = tensor::l2_normalize_rows(&sig);
        }
        for j in 0..dim {
            v.set2(i, j, sig.values()[j]);
        }
    }
    // minimum-norm W with T·W = V:  W = Tᵀ (T Tᵀ)⁻¹ V
    let t_tt = tensor::matmul(&t, &tensor::transpose(&t))?;
    let coeff = tensor::solve_linear(&t_tt, &v)?;
    let w_align = tensor::matmul(&tensor::transpose(&t), &coeff)?;
    // null-space random component: (I − Tᵀ(T Tᵀ)⁻¹T) R
    let t_proj = tensor::solve_linear(&t_tt, &t)?;
    let proj = tensor::matmul(&tensor::transpose(&t), &t_proj)?; // token_dim×token_dim
    let r = rng::normal_tensor(derive(text_seed, "text-null"), &[token_dim, dim], 1.0 / (token_dim as f64).sqrt());
    let pr = tensor::matmul(&proj, &r)?;
    let mut mixing = w_align;
    for ((m, rv), pv) in mixing
        .values_mut()
        .iter_mut()
        .zip(r.values())
        .zip(pr.values())
    {
        *m += rv - pv;
    }
    text.mixing = mixing;
    Ok((visual, text))
}
