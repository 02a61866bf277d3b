//! The federated protocol: client-local SGD epochs, FedAvg aggregation of
//! parameter bundles, seeded participation sampling, and round scheduling
//! with periodic global-model evaluation.
//!
//! Clients within a round train concurrently (each owns its model and shard
//! exclusively); aggregation walks the returned bundles in client-index
//! order, so results do not depend on thread scheduling.

use crate::bundle::ParameterBundle;
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{f1_scores, mean_average_precision};
use crate::model::Model;
use crate::param::sgd_step;
use crate::rng::{self, derive_indexed};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    SizeWeighted,
}

#[derive(Debug, Clone)]
pub struct FedConfig {
    /// K: total client count.
    pub clients: usize,
    /// φ: communication rounds.
    pub rounds: usize,
    /// ε ∈ (0, 1]: fraction of clients sampled per round.
    pub participation: f64,
    pub weighting: Weighting,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidParameter("need at least one client".into()));
        }
        if !(0.0 < self.participation && self.participation <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "participation rate must lie in (0, 1], got {}",
                self.participation
            )));
        }
        if self.participants_per_round() < 1 {
            return Err(Error::InvalidParameter(
                "participation rate selects zero clients".into(),
            ));
        }
        Ok(())
    }

    /// ⌈ε·K⌉ participants per round.
    pub fn participants_per_round(&self) -> usize {
        (self.participation * self.clients as f64).ceil() as usize
    }
}

/// Everything one client owns: its private shard and its model replica.
pub struct ClientState {
    pub client_id: usize,
    pub shard: Vec<Sample>,
    pub model: Model,
    pub local_epochs: usize,
}

/// Local optimizer settings.
#[derive(Debug, Clone, Copy)]
pub struct TrainOpts {
    pub lr: f64,
    pub batch_size: usize,
}

/// Run `epochs` of mini-batch SGD on the client's shard and return the
/// updated bundle plus the mean batch loss (None when no batch ran).
///
/// The shuffle seed is shared across clients on purpose: symmetric clients
/// (identical shards) must produce identical bundles.
pub fn local_train(
    client: &mut ClientState,
    epochs: usize,
    opts: &TrainOpts,
    shuffle_seed: u64,
) -> Result<(ParameterBundle, Option<f64>)> {
    if client.shard.is_empty() {
        return Err(Error::Contract(format!(
            "client {} has an empty shard",
            client.client_id
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..client.shard.len()).collect();
        shuffle(&mut order, derive_indexed(shuffle_seed, "epoch", epoch as u64));
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &client.shard[i]).collect();
            loss_sum += client.model.train_batch(&batch)?;
            sgd_step(&mut client.model.store, opts.lr)?;
            batches += 1;
        }
    }
    let mean_loss = (batches > 0).then(|| loss_sum / batches as f64);
    Ok((client.model.bundle(), mean_loss))
}

fn shuffle(order: &mut [usize], seed: u64) {
    use rand::seq::SliceRandom;
    let mut rng = rng::chacha(seed);
    order.shuffle(&mut rng);
}

/// Elementwise weighted sum of bundles. Weights must be nonnegative and sum
/// to 1; key sets and shapes must agree exactly.
pub fn fed_average(bundles: &[ParameterBundle], weights: &[f64]) -> Result<ParameterBundle> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Protocol("fed_average over an empty bundle list".into()))?;
    if weights.len() != bundles.len() {
        return Err(Error::Protocol(format!(
            "{} bundles but {} weights",
            bundles.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::InvalidParameter("aggregation weights must be nonnegative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "aggregation weights must sum to 1, got {sum}"
        )));
    }
    for b in bundles.iter().skip(1) {
        let missing: Vec<&str> = first
            .keys()
            .filter(|k| !b.entries.contains_key(*k))
            .collect();
        let extra: Vec<&str> = b.keys().filter(|k| !first.entries.contains_key(*k)).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Protocol(format!(
                "bundle key sets differ: missing {missing:?}, unexpected {extra:?}"
            )));
        }
    }
    let mut entries = std::collections::BTreeMap::new();
    for (name, proto) in &first.entries {
        let mut acc = Tensor::zeros(proto.shape());
        for (bundle, &w) in bundles.iter().zip(weights) {
            let t = &bundle.entries[name];
            if t.shape() != proto.shape() {
                return Err(Error::Protocol(format!(
                    "bundle entry `{name}` shape mismatch: {:?} vs {:?}",
                    t.shape(),
                    proto.shape()
                )));
            }
            for (a, v) in acc.values_mut().iter_mut().zip(t.values()) {
                *a += w * v;
            }
        }
        entries.insert(name.clone(), acc);
    }
    Ok(ParameterBundle {
        schema_version: first.schema_version,
        entries,
    })
}

/// Outcome of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub mean_train_loss: Option<f64>,
}

/// Sample participants, broadcast the global bundle, train them locally (in
/// parallel), aggregate, and hand the new global bundle to every client.
pub fn run_round(
    global: &ParameterBundle,
    clients: &mut [ClientState],
    cfg: &FedConfig,
    opts: &TrainOpts,
    round_idx: usize,
) -> Result<(ParameterBundle, RoundRecord)> {
    cfg.validate()?;
    if clients.len() != cfg.clients {
        return Err(Error::Contract(format!(
            "config says {} clients, got {}",
            cfg.clients,
            clients.len()
        )));
    }
    let k_sel = cfg.participants_per_round();
    let mut participants = sample_without_replacement(cfg.seed ^ round_idx as u64, cfg.clients, k_sel);
    participants.sort_unstable();

    let shuffle_seed = derive_indexed(cfg.seed, "round-shuffle", round_idx as u64);
    let mut selected: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| participants.binary_search(&c.client_id).is_ok())
        .collect();
    let results: Vec<(ParameterBundle, Option<f64>)> = exec::try_map_mut(&mut selected, |client| {
        client.model.load_bundle(global)?;
        let epochs = client.local_epochs;
        local_train(client, epochs, opts, shuffle_seed)
    })?;

    let weights = match cfg.weighting {
        Weighting::Uniform => vec![1.0 / results.len() as f64; results.len()],
        Weighting::SizeWeighted => {
            let sizes: Vec<f64> = selected.iter().map(|c| c.shard.len() as f64).collect();
            let total: f64 = sizes.iter().sum();
            sizes.into_iter().map(|s| s / total).collect()
        }
    };
    let bundles: Vec<ParameterBundle> = results.iter().map(|(b, _)| b.clone()).collect();
    let new_global = fed_average(&bundles, &weights)?;

    let losses: Vec<f64> = results.iter().filter_map(|(_, l)| *l).collect();
    let mean_train_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);

    for client in clients.iter_mut() {
        client.model.load_bundle(&new_global)?;
    }
    Ok((
        new_global,
        RoundRecord {
            round: round_idx,
            participants,
            mean_train_loss,
        },
    ))
}

/// Uniform sample of `k` distinct indices out of `n`, seeded.
pub fn sample_without_replacement(seed: u64, n: usize, k: usize) -> Vec<usize> {
    let mut rng = rng::chacha(seed);
    rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec()
}

/// Global-model quality on an evaluation set.
pub fn evaluate_model(model: &Model, eval_set: &[Sample], f1_threshold: f64) -> Result<(f64, f64, f64)> {
    if eval_set.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let text = model.text_embedding_values()?;
    let rows: Vec<Vec<f64>> =
        exec::try_map_slice(eval_set, |s| model.predict_probs_with_text(&text, &s.input()))?;
    let c = rows[0].len();
    let mut scores = Tensor::zeros(&[eval_set.len(), c]);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            scores.set2(i, j, v);
        }
    }
    let labels: Vec<_> = eval_set.iter().map(|s| s.y.clone()).collect();
    let map = mean_average_precision(&scores, &labels)?;
    let (cf1, of1) = f1_scores(&scores, &labels, f1_threshold)?;
    Ok((map, cf1, of1))
}

/// One evaluation checkpoint of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub round: usize,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub mean_train_loss: Option<f64>,
    pub participants: Vec<usize>,
}

/// Full experiment: a round-0 evaluation, then `cfg.rounds` rounds with an
/// evaluation every `eval_interval` rounds. Returns the evaluation records,
/// the final global bundle, and per-round wall-clock seconds.
pub fn run_experiment(
    clients: &mut [ClientState],
    cfg: &FedConfig,
    opts: &TrainOpts,
    eval_set: &[Sample],
    eval_interval: usize,
    f1_threshold: f64,
) -> Result<(Vec<EvalRecord>, ParameterBundle, Vec<f64>)> {
    if eval_interval == 0 {
        return Err(Error::InvalidParameter("eval interval must be positive".into()));
    }
    cfg.validate()?;
    let mut global = clients
        .first()
        .ok_or_else(|| Error::Contract("experiment needs at least one client".into()))?
        .model
        .bundle();

    let mut records = Vec::new();
    let (map, cf1, of1) = evaluate_model(&clients[0].model, eval_set, f1_threshold)?;
    records.push(EvalRecord {
        round: 0,
        map,
        cf1,
        of1,
        mean_train_loss: None,
        participants: Vec::new(),
    });

    let mut wall = Vec::with_capacity(cfg.rounds);
    for round_idx in 0..cfg.rounds {
        let started = std::time::Instant::now();
        let (new_global, record) = run_round(&global, clients, cfg, opts, round_idx)
            .map_err(|e| e.at_round(round_idx + 1))?;
        global = new_global;
        wall.push(started.elapsed().as_secs_f64());
        if (round_idx + 1) % eval_interval == 0 {
            let (map, cf1, of1) = evaluate_model(&clients[0].model, eval_set, f1_threshold)
                .map_err(|e| e.at_round(round_idx + 1))?;
            records.push(EvalRecord {
                round: round_idx + 1,
                map,
                cf1,
                of1,
                mean_train_loss: record.mean_train_loss,
                participants: record.participants.clone(),
            });
        }
    }
    Ok((records, global, wall))
}
