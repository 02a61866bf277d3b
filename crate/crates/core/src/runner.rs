//! Experiment orchestration: build a federation from a [`RunConfig`], execute
//! it, persist reports, and drive the benchmark sweeps (t%, Mask%, ε) and
//! report comparison.

use crate::bundle::ParameterBundle;
use crate::config::{ModelChoice, RunConfig};
use crate::datagen::{cluster_partition, generate, mask_annotations, Sample};
use crate::encoders::pretrained_pair;
use crate::error::{Error, Result};
use crate::fedsim::{run_experiment, ClientState, EvalRecord, FedConfig, TrainOpts};
use crate::model::{default_class_names, Model};
use crate::report::{RunReport, BUNDLE_FILE, METRICS_FILE, REPORT_FILE};
use crate::rng::derive;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Binarization threshold for CF1/OF1.
pub const F1_THRESHOLD: f64 = 0.5;

/// Environment variable that, when set, becomes the root for relative
/// output directories.
pub const OUTPUT_ROOT_ENV: &str = "FEDMLR_OUTPUT_ROOT";

pub struct PreparedRun {
    pub clients: Vec<ClientState>,
    pub fed: FedConfig,
    pub train_opts: TrainOpts,
    pub eval_set: Vec<Sample>,
    pub eval_interval: usize,
}

/// Build encoders, data, shards, and client replicas from a configuration.
pub fn prepare(config: &RunConfig) -> Result<PreparedRun> {
    config.validate()?;
    let (visual, text) = pretrained_pair(
        config.visual_seed(),
        config.text_seed(),
        config.concept_seed(),
        config.generator.input_dim,
        config.encoder.patches,
        config.encoder.dim,
        config.encoder.token_dim,
        &config.alignment_vocabulary(),
        config.encoder.alignment_strength,
    )?;

    let train = generate(&config.generator_spec(0))?;
    let eval_set = generate(&config.generator_spec(1))?;
    let masked = mask_annotations(&train, &config.mask_spec())?;
    let shards = cluster_partition(&masked, &visual, &config.partition_spec(), config.generator.classes)?;

    let class_names = default_class_names(config.generator.classes);
    let hyper = config.model_hyper();
    let init_seed = derive(config.seed, "model-init");
    let template = match config.model {
        ModelChoice::Fedmpt => Model::conditioned(
            visual.clone(),
            text.clone(),
            &config.conditions,
            &class_names,
            hyper,
            init_seed,
        )?,
        ModelChoice::Baseline => {
            Model::baseline(visual.clone(), text.clone(), &class_names, hyper, init_seed)?
        }
    };

    let clients: Vec<ClientState> = shards
        .into_iter()
        .enumerate()
        .map(|(client_id, shard)| ClientState {
            client_id,
            shard,
            model: template.clone(),
            local_epochs: config.hyper.local_epochs,
        })
        .collect();

    let fed = FedConfig {
        clients: clients.len(),
        rounds: config.fed.rounds,
        participation: config.fed.participation,
        weighting: config.fed.weighting,
        seed: derive(config.seed, "fed"),
    };
    fed.validate()?;
    Ok(PreparedRun {
        clients,
        fed,
        train_opts: TrainOpts {
            lr: config.hyper.lr,
            batch_size: config.hyper.batch,
        },
        eval_set,
        eval_interval: config.eval_interval,
    })
}

/// Execute a configuration end to end without touching the filesystem.
pub fn execute_in_memory(config: &RunConfig) -> Result<(Vec<EvalRecord>, ParameterBundle, Vec<f64>)> {
    let mut run = prepare(config)?;
    run_experiment(
        &mut run.clients,
        &run.fed,
        &run.train_opts,
        &run.eval_set,
        run.eval_interval,
        F1_THRESHOLD,
    )
}

/// Execute a configuration and persist report.json, metrics.csv, and the
/// final bundle under `out_dir`.
pub fn execute_run(config: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    let (records, bundle, wall) = execute_in_memory(config)?;
    let report = RunReport {
        config: config.clone(),
        records,
        round_wall_clock_secs: wall,
        final_bundle: BUNDLE_FILE.into(),
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(REPORT_FILE), report.to_json()?)?;
    std::fs::write(out_dir.join(METRICS_FILE), report.metrics_csv())?;
    std::fs::write(out_dir.join(BUNDLE_FILE), bundle.to_json()?)?;
    Ok(report)
}

/// Resolve a config's output directory against the optional root override.
pub fn resolve_output_dir(config: &RunConfig) -> PathBuf {
    let dir = PathBuf::from(&config.output_dir);
    match std::env::var(OUTPUT_ROOT_ENV) {
        Ok(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

// ── sweeps ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    T,
    Mask,
    Participation,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(SweepAxis::T),
            "mask" => Ok(SweepAxis::Mask),
            "participation" => Ok(SweepAxis::Participation),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected t, mask, or participation)"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::T => "t",
            SweepAxis::Mask => "mask",
            SweepAxis::Participation => "participation",
        }
    }

    /// A copy of the config with this axis set to `value` (seed untouched).
    pub fn apply(&self, config: &RunConfig, value: f64) -> RunConfig {
        let mut cfg = config.clone();
        match self {
            SweepAxis::T => cfg.partition.t_percent = value,
            SweepAxis::Mask => cfg.mask.mask_percent = value,
            SweepAxis::Participation => cfg.fed.participation = value,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub status: String,
    pub error: Option<String>,
    pub final_record: Option<EvalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn csv(&self) -> String {
        let mut out = String::from("axis,value,status,round,map,cf1,of1,mean_train_loss\n");
        for row in &self.rows {
            match &row.final_record {
                Some(r) => {
                    let loss = r.mean_train_loss.map(|l| l.to_string()).unwrap_or_default();
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        self.axis, row.value, row.status, r.round, r.map, r.cf1, r.of1, loss
                    ));
                }
                None => {
                    out.push_str(&format!("{},{},{},,,,,\n", self.axis, row.value, row.status));
                }
            }
        }
        out
    }
}

pub const SWEEP_SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_TABLE_FILE: &str = "summary.csv";

/// One run per axis value with a fixed seed; partial failures are recorded
/// as failed rows and do not abort the sweep.
pub fn sweep(
    config: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    out_root: &Path,
) -> Result<SweepSummary> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let sweep_dir = out_root.join(format!("sweep_{}", axis.name()));
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = axis.apply(config, value);
        let run_dir = sweep_dir.join(format!("v{value}"));
        let row = match execute_run(&cfg, &run_dir) {
            Ok(report) => SweepRow {
                value,
                status: "ok".into(),
                error: None,
                final_record: Some(report.final_record()?.clone()),
            },
            Err(e) => SweepRow {
                value,
                status: "failed".into(),
                error: Some(e.to_string()),
                final_record: None,
            },
        };
        rows.push(row);
    }
    let summary = SweepSummary {
        axis: axis.name().into(),
        rows,
    };
    std::fs::create_dir_all(&sweep_dir)?;
    std::fs::write(
        sweep_dir.join(SWEEP_SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)?,
    )?;
    std::fs::write(sweep_dir.join(SWEEP_TABLE_FILE), summary.csv())?;
    Ok(summary)
}

// ── report comparison ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub round: usize,
    pub map_delta: f64,
    pub cf1_delta: f64,
    pub of1_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub deltas: Vec<MetricDelta>,
    /// final mAP − first mAP of report A.
    pub slope_a: f64,
    /// final mAP − first mAP of report B.
    pub slope_b: f64,
}

impl CompareReport {
    pub fn table(&self) -> String {
        let mut out = String::from("round,map_delta,cf1_delta,of1_delta\n");
        for d in &self.deltas {
            out.push_str(&format!(
                "{},{},{},{}\n",
                d.round, d.map_delta, d.cf1_delta, d.of1_delta
            ));
        }
        out.push_str(&format!("slope_a,{}\nslope_b,{}\n", self.slope_a, self.slope_b));
        out
    }
}

/// Per-evaluation-point metric deltas (A − B) plus each report's mAP
/// degradation slope. Errors when the two eval schedules differ.
pub fn compare(a: &RunReport, b: &RunReport) -> Result<CompareReport> {
    let rounds_a: Vec<usize> = a.records.iter().map(|r| r.round).collect();
    let rounds_b: Vec<usize> = b.records.iter().map(|r| r.round).collect();
    if rounds_a != rounds_b {
        return Err(Error::Contract(format!(
            "evaluation schedules differ: {rounds_a:?} vs {rounds_b:?}"
        )));
    }
    if a.records.is_empty() {
        return Err(Error::Contract("reports contain no records".into()));
    }
    let deltas = a
        .records
        .iter()
        .zip(&b.records)
        .map(|(ra, rb)| MetricDelta {
            round: ra.round,
            map_delta: ra.map - rb.map,
            cf1_delta: ra.cf1 - rb.cf1,
            of1_delta: ra.of1 - rb.of1,
        })
        .collect();
    let slope = |r: &RunReport| r.records.last().unwrap().map - r.records[0].map;
    Ok(CompareReport {
        deltas,
        slope_a: slope(a),
        slope_b: slope(b),
    })
}
