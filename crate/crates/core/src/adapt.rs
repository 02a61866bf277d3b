//! Per-condition low-rank visual adapters and the gating router that mixes
//! per-condition predictions.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::{self, derive_indexed};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Low-rank residual adapter reshaping frozen patch embeddings into one
/// condition's latent space: rows become normalize(x + W↑(W↓x)). The
/// zero-initialized up-projection makes the adapter the identity on
/// unit-norm inputs at the start, preserving the encoders' pretrained
/// alignment. Output rows are re-normalized so downstream cosine similarity
/// stays a plain dot product.
#[derive(Debug, Clone)]
pub struct ConditionAdapter {
    pub condition: usize,
    down: ParamId, // D×D_s
    up: ParamId,   // D_s×D
}

impl ConditionAdapter {
    pub fn new(
        store: &mut ParamStore,
        condition: usize,
        dim: usize,
        down_dim: usize,
        init_seed: u64,
    ) -> Result<Self> {
        if down_dim >= dim {
            return Err(Error::InvalidParameter(format!(
                "adapter rank {down_dim} must lie below the embedding dim {dim}"
            )));
        }
        let down = store.register(
            format!("adapter.{condition}.down"),
            rng::normal_tensor(
                derive_indexed(init_seed, "adapter-down", condition as u64),
                &[dim, down_dim],
                ADAPTER_INIT_STD,
            ),
        )?;
        let up = store.register(
            format!("adapter.{condition}.up"),
            Tensor::zeros(&[down_dim, dim]),
        )?;
        Ok(ConditionAdapter {
            condition,
            down,
            up,
        })
    }

    /// M×D patches → M×D adapted, unit-norm rows.
    pub fn adapt(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        let d = store.value(self.down).shape()[0];
        if tape.value(patches).cols() != d {
            return Err(Error::ShapeMismatch {
                op: "adapt",
                lhs: tape.value(patches).shape().to_vec(),
                rhs: store.value(self.down).shape().to_vec(),
            });
        }
        let down = tape.param(store, self.down);
        let up = tape.param(store, self.up);
        let low = tape.matmul(patches, down)?;
        let delta = tape.matmul(low, up)?;
        let summed = tape.add(patches, delta)?;
        Ok(tape.l2_normalize_rows(summed))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.down, self.up]
    }
}

/// Low-rank router producing softmax mixture weights over conditions.
#[derive(Debug, Clone)]
pub struct GateRouter {
    down: ParamId, // D×D_s
    up: ParamId,   // D_s×N
}

impl GateRouter {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        down_dim: usize,
        n_conditions: usize,
        init_seed: u64,
    ) -> Result<Self> {
        let down = store.register(
            "gate.down",
            rng::normal_tensor(
                derive_indexed(init_seed, "gate-down", 0),
                &[dim, down_dim],
                ADAPTER_INIT_STD,
            ),
        )?;
        // Zero up-projection gives exactly uniform mixing at initialization;
        // unlike the adapters there is no normalization in this path, so the
        // gradient to `up` stays alive.
        let up = store.register("gate.up", Tensor::zeros(&[down_dim, n_conditions]))?;
        Ok(GateRouter { down, up })
    }

    /// Mean-pool patches, project to N logits, softmax at temperature 1.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, patches: &Tensor) -> Result<Var> {
        let pooled = tape.constant(patches.mean_rows());
        let down = tape.param(store, self.down);
        let up = tape.param(store, self.up);
        let hidden = tape.matmul(pooled, down)?;
        let logits = tape.matmul(hidden, up)?;
        tape.softmax(logits, 1, 1.0)
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.down, self.up]
    }
}

/// P′ = Σ_n weights_n · per_condition[n, :], computed as (1×N)·(N×C).
pub fn fuse_predictions(tape: &mut Tape, weights: Var, per_condition: Var) -> Result<Var> {
    if tape.value(weights).cols() != tape.value(per_condition).rows() {
        return Err(Error::ShapeMismatch {
            op: "fuse_predictions",
            lhs: tape.value(weights).shape().to_vec(),
            rhs: tape.value(per_condition).shape().to_vec(),
        });
    }
    tape.matmul(weights, per_condition)
}
