//! Single-prompt baseline: shared learnable context tokens, one prompt per
//! class, and patch-aggregated prediction where each patch's class scores are
//! weighted by their per-patch class softmax.

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::prompt::TOKEN_INIT_STD;
use crate::rng::{self, derive};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Context length roughly matching β_cond + β_cls of the conditioned model,
/// so capacity comparisons stay fair.
pub const BASELINE_CONTEXT_TOKENS: usize = 8;

#[derive(Debug, Clone)]
pub struct BaselinePromptBank {
    pub n_classes: usize,
    pub token_dim: usize,
    pub beta: usize,
    ctx_tokens: ParamId,
    class_name_tokens: Vec<Tensor>,
}

impl BaselinePromptBank {
    pub fn new(
        store: &mut ParamStore,
        enc: &TextEncoder,
        class_names: &[String],
        beta: usize,
        init_seed: u64,
    ) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::InvalidParameter(
                "baseline prompt bank needs at least one class".into(),
            ));
        }
        let ctx_tokens = store.register(
            "baseline.ctx",
            rng::normal_tensor(derive(init_seed, "baseline-ctx"), &[beta, enc.token_dim], TOKEN_INIT_STD),
        )?;
        Ok(BaselinePromptBank {
            n_classes: class_names.len(),
            token_dim: enc.token_dim,
            beta,
            ctx_tokens,
            class_name_tokens: class_names.iter().map(|c| enc.name_tokens(c)).collect(),
        })
    }

    /// Text embeddings for every class, stacked C×D.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, enc: &TextEncoder) -> Result<Var> {
        let mut rows = Vec::with_capacity(self.n_classes);
        for c in 0..self.n_classes {
            let ctx = tape.param(store, self.ctx_tokens);
            let name = tape.constant(self.class_name_tokens[c].clone());
            let tokens = tape.concat_rows(&[ctx, name])?;
            rows.push(enc.encode(tape, tokens)?);
        }
        tape.concat_rows(&rows)
    }

    pub fn ctx_token_id(&self) -> ParamId {
        self.ctx_tokens
    }
}

/// P(y_c|x) = Σ_m softmax-over-classes(s_{m,:}/τ)_c · s_{m,c} with
/// s = patches · textᵀ. The softmax applies the frozen similarity logit
/// scale, like the transport pipeline; the aggregated values stay in cosine
/// units. Output scale grows with the patch count; the shared calibration
/// head downstream absorbs that.
pub fn baseline_predict(
    tape: &mut Tape,
    patches: Var,
    text: Var,
    tau: f64,
    sim_scale: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "similarity temperature must be positive, got {tau}"
        )));
    }
    if sim_scale <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "similarity scale must be positive, got {sim_scale}"
        )));
    }
    if tape.value(patches).cols() != tape.value(text).cols() {
        return Err(Error::ShapeMismatch {
            op: "baseline_predict",
            lhs: tape.value(patches).shape().to_vec(),
            rhs: tape.value(text).shape().to_vec(),
        });
    }
    let text_t = tape.transpose(text);
    let s = tape.matmul(patches, text_t)?; // M×C
    let scaled = tape.affine(s, sim_scale, 0.0);
    let w = tape.softmax(scaled, 1, tau)?; // per patch, over classes
    let weighted = tape.mul(w, s)?;
    tape.sum_axis(weighted, 0)
}
