//! Simulated FedAvg: broadcast, local training, weighted aggregation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ModelParams, NnError, Optimizer};

mod node_task;

pub use node_task::NodeTask;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("no client updates to aggregate")]
    NoUpdates,
    #[error("every client was skipped in round {0}")]
    AllClientsSkipped(u32),
    #[error("invalid federation config: {0}")]
    BadConfig(String),
    #[error("client {client}: {source}")]
    Client { client: usize, source: NnError },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which node count a client reports as its aggregation weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    #[default]
    OriginalOnly,
    OriginalPlusGenerated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub rounds: u32,
    pub local_epochs: u32,
    pub client_fraction: f64,
    pub weight_source: WeightSource,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 100,
            local_epochs: 3,
            client_fraction: 1.0,
            weight_source: WeightSource::OriginalOnly,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.local_epochs < 1 {
            return Err(FedError::BadConfig("local_epochs must be >= 1".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(FedError::BadConfig("client_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A client's local objective.
pub trait LocalTask: Sync {
    fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, ModelParams), NnError>;

    fn has_training_data(&self) -> bool;

    fn weight(&self, source: WeightSource) -> usize;

    /// `(correct, total)` on the validation split, if the task has one.
    fn validation_counts(&self, _params: &ModelParams) -> Option<(usize, usize)> {
        None
    }
}

/// One simulated client: its task plus an optimizer whose state persists
/// across rounds.
pub struct Participant<T> {
    pub id: usize,
    pub task: T,
    pub optimizer: Optimizer,
}

impl<T> Participant<T> {
    pub fn new(id: usize, task: T, optimizer: Optimizer) -> Self {
        Participant { id, task, optimizer }
    }
}

#[derive(Clone, Debug)]
pub struct RoundUpdate {
    pub client: usize,
    /// `θ_global - θ_local` after local training.
    pub delta: ModelParams,
    pub local_params: ModelParams,
    pub weight: usize,
    pub train_loss: f64,
}

/// Trains locally from `global` and reports the parameter delta. Returns
/// `Ok(None)` for clients without training data.
pub fn local_train<T: LocalTask>(
    participant: &mut Participant<T>,
    global: &ModelParams,
    cfg: &FedConfig,
) -> Result<Option<RoundUpdate>, FedError> {
    cfg.validate()?;
    if !participant.task.has_training_data() {
        log::warn!("client {} has no training nodes; skipping", participant.id);
        return Ok(None);
    }
    let wrap = |source| FedError::Client {
        client: participant.id,
        source,
    };
    let mut local = global.clone();
    let mut loss = f64::NAN;
    for _ in 0..cfg.local_epochs {
        let (l, g) = participant.task.loss_and_grad(&local).map_err(wrap)?;
        participant.optimizer.step(&mut local, &g).map_err(wrap)?;
        loss = l;
    }
    Ok(Some(RoundUpdate {
        client: participant.id,
        delta: global.sub(&local)?,
        local_params: local,
        weight: participant.task.weight(cfg.weight_source).max(1),
        train_loss: loss,
    }))
}

/// `|V_i| / Σ_j |V_j|` for every update.
pub fn aggregation_weights(updates: &[RoundUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.weight).sum();
    updates.iter().map(|u| u.weight as f64 / total as f64).collect()
}

/// Node-count weighted mean of `items`, accumulated from the first term.
fn weighted_mean<'a>(items: impl Iterator<Item = &'a ModelParams>, weights: &[f64]) -> Result<ModelParams, FedError> {
    let mut acc: Option<ModelParams> = None;
    for (p, &w) in items.zip(weights) {
        match acc.as_mut() {
            None => {
                let mut first = p.clone();
                first.scale(w);
                acc = Some(first);
            }
            Some(a) => a.add_scaled(p, w)?,
        }
    }
    acc.ok_or(FedError::NoUpdates)
}

/// Weighted mean of the client deltas.
pub fn aggregate(updates: &[RoundUpdate]) -> Result<ModelParams, FedError> {
    let weights = aggregation_weights(updates);
    weighted_mean(updates.iter().map(|u| &u.delta), &weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub id: usize,
    pub loss: f64,
    pub val_acc: Option<f64>,
    pub n_nodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub global_val_acc: Option<f64>,
    pub per_client: Vec<ClientRoundStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inferred_edges: Option<usize>,
}

fn selected_clients(n: usize, cfg: &FedConfig, round: u32) -> Vec<usize> {
    if cfg.client_fraction >= 1.0 {
        return (0..n).collect();
    }
    let m = ((n as f64 * cfg.client_fraction).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(round) << 32));
    let mut picked = sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    picked
}

/// One communication round. The new global model is the weighted mean of
/// the local models, which equals `θ - Σ w_i g_i`.
pub fn run_round<T: LocalTask + Send>(
    global: &ModelParams,
    participants: &mut [Participant<T>],
    cfg: &FedConfig,
    round: u32,
) -> Result<(ModelParams, RoundReport), FedError> {
    cfg.validate()?;
    let chosen = selected_clients(participants.len(), cfg, round);
    let results: Vec<Result<Option<RoundUpdate>, FedError>> = participants
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            if chosen.binary_search(&i).is_ok() {
                local_train(p, global, cfg)
            } else {
                Ok(None)
            }
        })
        .collect();
    let mut updates = Vec::new();
    for r in results {
        if let Some(u) = r? {
            updates.push(u);
        }
    }
    if updates.is_empty() {
        return Err(FedError::AllClientsSkipped(round));
    }
    let weights = aggregation_weights(&updates);
    let next = weighted_mean(updates.iter().map(|u| &u.local_params), &weights)?;

    let mut correct = 0;
    let mut total = 0;
    let mut per_client = Vec::with_capacity(participants.len());
    for p in participants.iter() {
        let counts = p.task.validation_counts(&next);
        if let Some((c, t)) = counts {
            correct += c;
            total += t;
        }
        let loss = updates.iter().find(|u| u.client == p.id).map_or(f64::NAN, |u| u.train_loss);
        per_client.push(ClientRoundStats {
            id: p.id,
            loss,
            val_acc: counts.filter(|&(_, t)| t > 0).map(|(c, t)| c as f64 / t as f64),
            n_nodes: p.task.weight(cfg.weight_source),
        });
    }
    let report = RoundReport {
        round,
        global_val_acc: (total > 0).then(|| correct as f64 / total as f64),
        per_client,
        ..RoundReport::default()
    };
    Ok((next, report))
}

/// Runs `cfg.rounds` rounds from `init`.
pub fn train_federated<T: LocalTask + Send>(
    init: &ModelParams,
    participants: &mut [Participant<T>],
    cfg: &FedConfig,
) -> Result<(ModelParams, Vec<RoundReport>), FedError> {
    let mut params = init.clone();
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    for t in 1..=cfg.rounds {
        let (next, report) = run_round(&params, participants, cfg, t)?;
        params = next;
        reports.push(report);
    }
    Ok((params, reports))
}

/// Plain full-batch training on one task, for comparison with the
/// federated path.
pub fn train_centralized<T: LocalTask>(
    task: &T,
    init: &ModelParams,
    optimizer: &mut Optimizer,
    epochs: u32,
) -> Result<ModelParams, FedError> {
    let mut params = init.clone();
    for _ in 0..epochs {
        let (_, g) = task.loss_and_grad(&params)?;
        optimizer.step(&mut params, &g)?;
    }
    Ok(params)
}

pub fn write_round_log(path: &Path, reports: &[RoundReport]) -> Result<(), FedError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
