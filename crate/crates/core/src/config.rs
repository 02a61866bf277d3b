//! Run configuration: a strict TOML document (unknown keys are errors) with
//! per-section defaults matching the simulator's desk-scale setup.

use crate::datagen::{GeneratorSpec, MaskSpec, PartitionSpec};
use crate::error::{Error, Result};
use crate::fedsim::Weighting;
use crate::loss::AslConfig;
use crate::model::ModelHyper;
use crate::rng::derive;
use crate::tensor::Tensor;
use crate::transport::SinkhornOptions;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Fedmpt,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub classes: usize,
    pub input_dim: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub spurious_strength: f64,
    /// Optional explicit C×C co-occurrence matrix; defaults to a mild
    /// uniform off-diagonal coupling.
    pub base_cooccurrence: Option<Vec<Vec<f64>>>,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            classes: 12,
            input_dim: 48,
            train_samples: 2400,
            eval_samples: 600,
            spurious_strength: 0.8,
            base_cooccurrence: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub patches: usize,
    pub dim: usize,
    pub token_dim: usize,
    /// Cross-modal pretraining fidelity in [0, 1]; 1 is perfect alignment.
    pub alignment_strength: f64,
    pub visual_seed: Option<u64>,
    pub text_seed: Option<u64>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            patches: 16,
            dim: 32,
            token_dim: 32,
            alignment_strength: 0.75,
            visual_seed: None,
            text_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub t_percent: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { t_percent: 60.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub mask_percent: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection { mask_percent: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub rounds: usize,
    pub participation: f64,
    pub weighting: Weighting,
}

impl Default for FedSection {
    fn default() -> Self {
        FedSection {
            rounds: 20,
            participation: 1.0,
            weighting: Weighting::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperSection {
    pub tau: f64,
    pub lambda: f64,
    pub beta_cond: usize,
    pub beta_cls: usize,
    pub d_s: usize,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip: f64,
    pub lr: f64,
    pub batch: usize,
    pub local_epochs: usize,
    pub sim_scale: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
}

impl Default for HyperSection {
    fn default() -> Self {
        HyperSection {
            tau: 4.0,
            lambda: 0.2,
            beta_cond: 4,
            beta_cls: 4,
            d_s: 8,
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            clip: 0.05,
            lr: 0.001,
            batch: 32,
            local_epochs: 1,
            sim_scale: 30.0,
            sinkhorn_max_iters: 200,
            sinkhorn_tol: 1e-8,
        }
    }
}

fn default_conditions() -> Vec<String> {
    ["background", "position", "shape", "action"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_model() -> ModelChoice {
    ModelChoice::Fedmpt
}

fn default_eval_interval() -> usize {
    1
}

fn default_output_dir() -> String {
    "runs/out".into()
}

/// Complete experiment configuration; the snapshot embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_model")]
    pub model: ModelChoice,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<String>,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub mask: MaskSection,
    #[serde(default)]
    pub fed: FedSection,
    #[serde(default)]
    pub hyper: HyperSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("at least one condition is required".into()));
        }
        if self.hyper.batch == 0 {
            return Err(Error::Config("hyper.batch must be positive".into()));
        }
        if self.hyper.lr <= 0.0 {
            return Err(Error::Config("hyper.lr must be positive".into()));
        }
        if self.hyper.d_s >= self.encoder.dim {
            return Err(Error::Config(format!(
                "hyper.d_s ({}) must lie below encoder.dim ({})",
                self.hyper.d_s, self.encoder.dim
            )));
        }
        if self.generator.classes + self.conditions.len() > self.encoder.token_dim {
            return Err(Error::Config(format!(
                "alignment vocabulary ({} classes + {} conditions) exceeds encoder.token_dim {}",
                self.generator.classes,
                self.conditions.len(),
                self.encoder.token_dim
            )));
        }
        self.generator_spec(0).validate()?;
        self.mask_spec().validate()?;
        Ok(())
    }

    pub fn cooccurrence_matrix(&self) -> Tensor {
        match &self.generator.base_cooccurrence {
            None => GeneratorSpec::default_cooccurrence(self.generator.classes),
            Some(rows) => {
                let c = self.generator.classes;
                let mut m = Tensor::zeros(&[c, c]);
                for (i, row) in rows.iter().enumerate().take(c) {
                    for (j, &v) in row.iter().enumerate().take(c) {
                        m.set2(i, j, v);
                    }
                }
                m
            }
        }
    }

    /// Generator for the training split (0) or the evaluation split (1).
    pub fn generator_spec(&self, split: u64) -> GeneratorSpec {
        let samples = if split == 0 {
            self.generator.train_samples
        } else {
            self.generator.eval_samples
        };
        GeneratorSpec {
            classes: self.generator.classes,
            input_dim: self.generator.input_dim,
            samples,
            base_cooccurrence: self.cooccurrence_matrix(),
            spurious_strength: self.generator.spurious_strength,
            seed: derive(self.seed, if split == 0 { "train-data" } else { "eval-data" }),
            class_names: crate::model::default_class_names(self.generator.classes),
            concept_seed: self.concept_seed(),
        }
    }

    /// Seed of the shared concept stream tying data generation to the
    /// pretrained encoder alignment.
    pub fn concept_seed(&self) -> u64 {
        derive(self.seed, "pretrain")
    }

    /// Names the encoder pair is aligned on: classes plus conditions.
    pub fn alignment_vocabulary(&self) -> Vec<String> {
        let mut vocab = crate::model::default_class_names(self.generator.classes);
        vocab.extend(self.conditions.iter().cloned());
        vocab
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            t_percent: self.partition.t_percent,
            seed: derive(self.seed, "partition"),
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            mask_percent: self.mask.mask_percent,
            seed: derive(self.seed, "mask"),
        }
    }

    pub fn model_hyper(&self) -> ModelHyper {
        ModelHyper {
            tau: self.hyper.tau,
            lambda: self.hyper.lambda,
            sim_scale: self.hyper.sim_scale,
            beta_cond: self.hyper.beta_cond,
            beta_cls: self.hyper.beta_cls,
            down_dim: self.hyper.d_s,
            sinkhorn: SinkhornOptions {
                max_iters: self.hyper.sinkhorn_max_iters,
                tol: self.hyper.sinkhorn_tol,
            },
            asl: AslConfig {
                gamma_pos: self.hyper.gamma_pos,
                gamma_neg: self.hyper.gamma_neg,
                clip: self.hyper.clip,
                eps: 1e-8,
            },
        }
    }

    pub fn visual_seed(&self) -> u64 {
        self.encoder.visual_seed.unwrap_or_else(|| derive(self.seed, "visual-encoder"))
    }

    pub fn text_seed(&self) -> u64 {
        self.encoder.text_seed.unwrap_or_else(|| derive(self.seed, "text-encoder"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.model, ModelChoice::Fedmpt);
        assert_eq!(cfg.generator.classes, 12);
        assert_eq!(cfg.hyper.tau, 4.0);
        assert_eq!(cfg.hyper.lambda, 0.2);
        assert_eq!(cfg.hyper.batch, 32);
        assert_eq!(cfg.conditions.len(), 4);
    }

    #[test]
    fn unknown_top_level_key_is_rejected_by_name() {
        let err = RunConfig::from_toml("foo = 3").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn unknown_nested_key_is_rejected_by_name() {
        let err = RunConfig::from_toml("[hyper]\nlearning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.model = ModelChoice::Baseline;
        cfg.partition.t_percent = 40.0;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_flags_bad_values() {
        assert!(RunConfig::from_toml("eval_interval = 0").is_err());
        assert!(RunConfig::from_toml("[hyper]\nlr = 0.0").is_err());
        assert!(RunConfig::from_toml("[generator]\nspurious_strength = 2.0").is_err());
    }

    #[test]
    fn split_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.generator_spec(0).seed, cfg.generator_spec(1).seed);
        assert_eq!(cfg.generator_spec(0).samples, 2400);
        assert_eq!(cfg.generator_spec(1).samples, 600);
    }
}
