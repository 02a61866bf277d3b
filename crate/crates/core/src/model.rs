//! The two trainable models sharing one calibration head and loss: the
//! conditioned pipeline (prompts → adapters → transport → gating) and the
//! single-prompt patch-aggregation baseline.

use crate::adapt::{fuse_predictions, ConditionAdapter, GateRouter};
use crate::baseline::{baseline_predict, BaselinePromptBank, BASELINE_CONTEXT_TOKENS};
use crate::bundle::ParameterBundle;
use crate::datagen::Sample;
use crate::encoders::{TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::loss::{asl_loss, calibrate, register_calibration, AslConfig};
use crate::param::{ParamId, ParamStore};
use crate::prompt::ConditionPromptBank;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transport::{predict_conditions_with_text, SinkhornOptions};

/// Architecture-level hyperparameters shared by both model kinds.
#[derive(Debug, Clone)]
pub struct ModelHyper {
    pub tau: f64,
    pub lambda: f64,
    /// Frozen logit scale applied to cosine similarities inside softmaxes
    /// (the pretrained-encoder similarity-scale stand-in).
    pub sim_scale: f64,
    pub beta_cond: usize,
    pub beta_cls: usize,
    pub down_dim: usize,
    pub sinkhorn: SinkhornOptions,
    pub asl: AslConfig,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            tau: 4.0,
            lambda: 0.2,
            sim_scale: 30.0,
            beta_cond: 4,
            beta_cls: 4,
            down_dim: 32,
            sinkhorn: SinkhornOptions::default(),
            asl: AslConfig::default(),
        }
    }
}

#[derive(Clone)]
enum ModelKind {
    Conditioned {
        bank: ConditionPromptBank,
        adapters: Vec<ConditionAdapter>,
        gate: GateRouter,
    },
    Baseline {
        bank: BaselinePromptBank,
    },
}

/// A complete model: frozen encoders, learnable parameter store, and one of
/// the two prediction pipelines. Clones share nothing; a clone is a faithful
/// client replica.
#[derive(Clone)]
pub struct Model {
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub hyper: ModelHyper,
    alpha: ParamId,
    bias: ParamId,
    kind: ModelKind,
}

impl Model {
    pub fn conditioned(
        visual: VisualEncoder,
        text: TextEncoder,
        conditions: &[String],
        class_names: &[String],
        hyper: ModelHyper,
        init_seed: u64,
    ) -> Result<Model> {
        hyper.asl.validate()?;
        let mut store = ParamStore::new();
        let bank = ConditionPromptBank::new(
            &mut store,
            &text,
            conditions,
            class_names,
            hyper.beta_cond,
            hyper.beta_cls,
            init_seed,
        )?;
        let adapters = (0..conditions.len())
            .map(|n| ConditionAdapter::new(&mut store, n, visual.dim, hyper.down_dim, init_seed))
            .collect::<Result<Vec<_>>>()?;
        let gate = GateRouter::new(
            &mut store,
            visual.dim,
            hyper.down_dim,
            conditions.len(),
            init_seed,
        )?;
        let (alpha, bias) = register_calibration(&mut store)?;
        Ok(Model {
            store,
            visual,
            text,
            hyper,
            alpha,
            bias,
            kind: ModelKind::Conditioned {
                bank,
                adapters,
                gate,
            },
        })
    }

    pub fn baseline(
        visual: VisualEncoder,
        text: TextEncoder,
        class_names: &[String],
        hyper: ModelHyper,
        init_seed: u64,
    ) -> Result<Model> {
        hyper.asl.validate()?;
        let mut store = ParamStore::new();
        let bank = BaselinePromptBank::new(
            &mut store,
            &text,
            class_names,
            BASELINE_CONTEXT_TOKENS,
            init_seed,
        )?;
        let (alpha, bias) = register_calibration(&mut store)?;
        Ok(Model {
            store,
            visual,
            text,
            hyper,
            alpha,
            bias,
            kind: ModelKind::Baseline { bank },
        })
    }

    pub fn n_classes(&self) -> usize {
        match &self.kind {
            ModelKind::Conditioned { bank, .. } => bank.n_classes,
            ModelKind::Baseline { bank } => bank.n_classes,
        }
    }

    pub fn is_conditioned(&self) -> bool {
        matches!(self.kind, ModelKind::Conditioned { .. })
    }

    /// Text embeddings on the given tape: N entries for the conditioned
    /// model, one for the baseline. Sample-independent, so they are shared
    /// across a batch.
    pub fn embed_text(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        match &self.kind {
            ModelKind::Conditioned { bank, .. } => bank.embed_all(tape, &self.store, &self.text),
            ModelKind::Baseline { bank } => Ok(vec![bank.embed(tape, &self.store, &self.text)?]),
        }
    }

    /// Calibrated probabilities for one sample, on an existing tape with
    /// precomputed text embeddings.
    pub fn probs_on_tape(&self, tape: &mut Tape, text: &[Var], x: &Tensor) -> Result<Var> {
        let patches_t = self.visual.encode(x)?;
        let patches = tape.constant(patches_t.clone());
        let fused = match &self.kind {
            ModelKind::Conditioned { adapters, gate, .. } => {
                let psi = predict_conditions_with_text(
                    tape,
                    &self.store,
                    patches,
                    adapters,
                    text,
                    self.hyper.tau,
                    self.hyper.lambda,
                    self.hyper.sim_scale,
                    &self.hyper.sinkhorn,
                )?;
                let weights = gate.weights(tape, &self.store, &patches_t)?;
                fuse_predictions(tape, weights, psi)?
            }
            ModelKind::Baseline { .. } => {
                let text = *text.first().ok_or_else(|| {
                    Error::Contract("baseline pipeline expects one text embedding".into())
                })?;
                baseline_predict(tape, patches, text, self.hyper.tau, self.hyper.sim_scale)?
            }
        };
        let scale = match &self.kind {
            ModelKind::Conditioned { .. } => (self.n_classes() * self.visual.patches) as f64,
            ModelKind::Baseline { .. } => self.n_classes() as f64,
        };
        calibrate(tape, &self.store, self.alpha, self.bias, fused, scale)
    }

    /// Text embedding values for inference reuse (computed through the same
    /// tape path, then detached).
    pub fn text_embedding_values(&self) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = self.embed_text(&mut tape)?;
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Calibrated class probabilities for one sample (inference path).
    pub fn predict_probs_with_text(&self, text_values: &[Tensor], x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let text: Vec<Var> = text_values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let probs = self.probs_on_tape(&mut tape, &text, x)?;
        Ok(tape.value(probs).values().to_vec())
    }

    pub fn predict_probs(&self, x: &Tensor) -> Result<Vec<f64>> {
        let text = self.text_embedding_values()?;
        self.predict_probs_with_text(&text, x)
    }

    /// Mean asymmetric loss over a batch, with gradients accumulated into
    /// the store. The caller applies the optimizer step.
    pub fn train_batch(&mut self, batch: &[&Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("train_batch needs a nonempty batch".into()));
        }
        let mut tape = Tape::new();
        let text = self.embed_text(&mut tape)?;
        let mut losses = Vec::with_capacity(batch.len());
        for sample in batch {
            let probs = self.probs_on_tape(&mut tape, &text, &sample.input())?;
            losses.push(asl_loss(&mut tape, probs, &sample.y, &self.hyper.asl)?);
        }
        let total = tape.add_all(&losses)?;
        let mean = tape.affine(total, 1.0 / losses.len() as f64, 0.0);
        tape.backward(mean, &mut self.store)?;
        Ok(tape.value(mean).first())
    }

    pub fn bundle(&self) -> ParameterBundle {
        ParameterBundle::from_store(&self.store)
    }

    pub fn load_bundle(&mut self, bundle: &ParameterBundle) -> Result<()> {
        bundle.load_into(&mut self.store)
    }

    pub fn alpha_id(&self) -> ParamId {
        self.alpha
    }
}

/// Default synthetic class names ("class_0", "class_1", ...).
pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class_{i}")).collect()
}
