//! Condition prompt bank: per-condition learnable tokens plus class-level
//! tokens shared across all classes, assembled around fixed name tokens in
//! template order
//!
//!   [cond learnable ×β_cond] [cond name] [class learnable ×β_cls] [class name]

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::{self, derive, derive_indexed};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct ConditionPromptBank {
    pub n_conditions: usize,
    pub n_classes: usize,
    pub beta_cond: usize,
    pub beta_cls: usize,
    pub token_dim: usize,
    /// One learnable block per condition, each β_cond×token_dim.
    cond_tokens: Vec<ParamId>,
    /// Single learnable block shared by all classes, β_cls×token_dim.
    cls_tokens: ParamId,
    cond_name_tokens: Vec<Tensor>,
    class_name_tokens: Vec<Tensor>,
}

impl ConditionPromptBank {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        enc: &TextEncoder,
        conditions: &[String],
        class_names: &[String],
        beta_cond: usize,
        beta_cls: usize,
        init_seed: u64,
    ) -> Result<Self> {
        if conditions.is_empty() || class_names.is_empty() {
            return Err(Error::InvalidParameter(
                "prompt bank needs at least one condition and one class".into(),
            ));
        }
        let token_dim = enc.token_dim;
        let mut cond_tokens = Vec::with_capacity(conditions.len());
        for n in 0..conditions.len() {
            let init = rng::normal_tensor(
                derive_indexed(init_seed, "prompt-cond", n as u64),
                &[beta_cond, token_dim],
                TOKEN_INIT_STD,
            );
            cond_tokens.push(store.register(format!("prompt.cond.{n}"), init)?);
        }
        let cls_init = rng::normal_tensor(
            derive(init_seed, "prompt-cls"),
            &[beta_cls, token_dim],
            TOKEN_INIT_STD,
        );
        let cls_tokens = store.register("prompt.cls", cls_init)?;
        Ok(ConditionPromptBank {
            n_conditions: conditions.len(),
            n_classes: class_names.len(),
            beta_cond,
            beta_cls,
            token_dim,
            cond_tokens,
            cls_tokens,
            cond_name_tokens: conditions.iter().map(|c| enc.name_tokens(c)).collect(),
            class_name_tokens: class_names.iter().map(|c| enc.name_tokens(c)).collect(),
        })
    }

    /// Token sequence for condition `n` and class `c`, in template order.
    /// Length is β_cond + 1 + β_cls + 1.
    pub fn assemble_prompt(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        n: usize,
        c: usize,
    ) -> Result<Var> {
        if n >= self.n_conditions || c >= self.n_classes {
            return Err(Error::InvalidParameter(format!(
                "prompt index out of range: condition {n} of {}, class {c} of {}",
                self.n_conditions, self.n_classes
            )));
        }
        let cond = tape.param(store, self.cond_tokens[n]);
        let cond_name = tape.constant(self.cond_name_tokens[n].clone());
        let cls = tape.param(store, self.cls_tokens);
        let cls_name = tape.constant(self.class_name_tokens[c].clone());
        tape.concat_rows(&[cond, cond_name, cls, cls_name])
    }

    /// Text embeddings of every class under condition `n`, stacked C×D.
    pub fn embed_condition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &TextEncoder,
        n: usize,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(self.n_classes);
        for c in 0..self.n_classes {
            let tokens = self.assemble_prompt(tape, store, n, c)?;
            rows.push(enc.encode(tape, tokens)?);
        }
        tape.concat_rows(&rows)
    }

    /// Embeddings for every (condition, class) pair: N entries of C×D.
    pub fn embed_all(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: &TextEncoder,
    ) -> Result<Vec<Var>> {
        (0..self.n_conditions)
            .map(|n| self.embed_condition(tape, store, enc, n))
            .collect()
    }

    pub fn cond_token_ids(&self) -> &[ParamId] {
        &self.cond_tokens
    }

    pub fn cls_token_id(&self) -> ParamId {
        self.cls_tokens
    }

    /// Learnable scalar count: N·β_cond·token_dim + β_cls·token_dim.
    pub fn learnable_scalars(&self) -> usize {
        self.n_conditions * self.beta_cond * self.token_dim + self.beta_cls * self.token_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}_{i}")).collect()
    }

    fn bank(beta_cond: usize, beta_cls: usize, n: usize, c: usize) -> (ParamStore, TextEncoder, ConditionPromptBank) {
        let enc = TextEncoder::new(7, 8, 10);
        let mut store = ParamStore::new();
        let bank = ConditionPromptBank::new(
            &mut store,
            &enc,
            &names("cond", n),
            &names("class", c),
            beta_cond,
            beta_cls,
            99,
        )
        .unwrap();
        (store, enc, bank)
    }

    #[test]
    fn empty_learnable_prompt_is_two_name_tokens() {
        let (store, _enc, bank) = bank(0, 0, 2, 3);
        let mut tape = Tape::new();
        let seq = bank.assemble_prompt(&mut tape, &store, 1, 2).unwrap();
        assert_eq!(tape.value(seq).shape(), &[2, 8]);
    }

    #[test]
    fn default_betas_give_length_ten() {
        let (store, _enc, bank) = bank(4, 4, 2, 2);
        let mut tape = Tape::new();
        let seq = bank.assemble_prompt(&mut tape, &store, 0, 0).unwrap();
        assert_eq!(tape.value(seq).rows(), 10);
    }

    #[test]
    fn class_token_storage_is_shared() {
        let (store, _enc, bank) = bank(2, 3, 2, 4);
        let mut tape = Tape::new();
        let a = bank.assemble_prompt(&mut tape, &store, 0, 1).unwrap();
        let b = bank.assemble_prompt(&mut tape, &store, 0, 3).unwrap();
        // the class-learnable slice (rows 3..6) is identical storage
        let va = tape.value(a).values()[3 * 8..6 * 8].to_vec();
        let vb = tape.value(b).values()[3 * 8..6 * 8].to_vec();
        assert_eq!(va, vb);
    }

    #[test]
    fn out_of_range_indices_error() {
        let (store, _enc, bank) = bank(1, 1, 2, 3);
        let mut tape = Tape::new();
        assert!(bank.assemble_prompt(&mut tape, &store, 2, 0).is_err());
        assert!(bank.assemble_prompt(&mut tape, &store, 0, 3).is_err());
    }

    #[test]
    fn parameter_count_independent_of_class_count() {
        let (store_a, _, bank_a) = bank(3, 5, 4, 2);
        let (store_b, _, bank_b) = bank(3, 5, 4, 11);
        assert_eq!(bank_a.learnable_scalars(), bank_b.learnable_scalars());
        assert_eq!(store_a.scalar_count(), bank_a.learnable_scalars());
        assert_eq!(store_b.scalar_count(), bank_b.learnable_scalars());
        assert_eq!(bank_a.learnable_scalars(), 4 * 3 * 8 + 5 * 8);
    }

    #[test]
    fn singleton_embed_is_unit_norm() {
        let (store, enc, bank) = bank(2, 2, 1, 1);
        let mut tape = Tape::new();
        let embeds = bank.embed_all(&mut tape, &store, &enc).unwrap();
        assert_eq!(embeds.len(), 1);
        let e = tape.value(embeds[0]);
        assert_eq!(e.shape(), &[1, 10]);
        let norm: f64 = e.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
    }

    #[test]
    fn permuting_classes_permutes_embeddings() {
        let enc = TextEncoder::new(7, 8, 10);
        let classes = vec!["ant".to_string(), "bee".to_string(), "cow".to_string()];
        let permuted = vec!["cow".to_string(), "ant".to_string(), "bee".to_string()];

        let mut store_a = ParamStore::new();
        let bank_a =
            ConditionPromptBank::new(&mut store_a, &enc, &names("cond", 2), &classes, 2, 2, 5).unwrap();
        let mut store_b = ParamStore::new();
        let bank_b =
            ConditionPromptBank::new(&mut store_b, &enc, &names("cond", 2), &permuted, 2, 2, 5).unwrap();

        let mut tape_a = Tape::new();
        let ea = bank_a.embed_condition(&mut tape_a, &store_a, &enc, 0).unwrap();
        let mut tape_b = Tape::new();
        let eb = bank_b.embed_condition(&mut tape_b, &store_b, &enc, 0).unwrap();

        let a = tape_a.value(ea);
        let b = tape_b.value(eb);
        // permuted order: row 0 of b == row 2 of a, row 1 of b == row 0 of a, ...
        assert_eq!(b.row_slice(0), a.row_slice(2));
        assert_eq!(b.row_slice(1), a.row_slice(0));
        assert_eq!(b.row_slice(2), a.row_slice(1));
    }

    #[test]
    fn embed_all_is_deterministic() {
        let (store, enc, bank) = bank(2, 2, 3, 4);
        let run = || {
            let mut tape = Tape::new();
            let e = bank.embed_all(&mut tape, &store, &enc).unwrap();
            e.iter().map(|v| tape.value(*v).values().to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_step_on_one_condition_leaves_others_unchanged() {
        let (mut store, enc, bank) = bank(2, 2, 3, 2);
        let before: Vec<Tensor> = bank
            .cond_token_ids()
            .iter()
            .map(|&id| store.value(id).clone())
            .collect();

        // drive a loss through condition 1 only
        let mut tape = Tape::new();
        let e = bank.embed_condition(&mut tape, &store, &enc, 1).unwrap();
        let loss = tape.sum_all(e);
        tape.backward(loss, &mut store).unwrap();
        crate::param::sgd_step(&mut store, 0.05).unwrap();

        for (n, id) in bank.cond_token_ids().iter().enumerate() {
            let now = store.value(*id);
            if n == 1 {
                assert_ne!(now.values(), before[n].values());
            } else {
                assert_eq!(now.values(), before[n].values());
            }
        }
    }
}
