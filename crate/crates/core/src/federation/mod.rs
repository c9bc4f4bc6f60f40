//! Federated orchestration: warmup, local client training, FedAvg,
//! personalization layers and threshold filtering.

mod config;
mod filter;
mod runlog;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use config::{DropPolicy, FederationConfig, OptimizerKind};
pub use filter::{filter_step, ClientStatus, FilterEvent, FilterOutcome, FilterRules, FilterState};
pub use runlog::{RunLog, RunLogRow, RUNLOG_HEADER};

use crate::data::Dataset;
use crate::denoiser::{save_checkpoint, DenoiserConfig, UNetView};
use crate::diffusion::{generate, keyed_noise_batch, training_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::MetricsContext;
use crate::numeric::{adam_step, sgd_step, AdamState, NamedTensors, ParamTable};
use crate::rng::{self, STREAM_CLIENT, STREAM_EVAL};

/// Round label used for warmup batches, which precede round 1.
const WARMUP_ROUND: u64 = 0;
const WARMUP_CLIENT: u64 = u64::MAX;

/// The loss a client minimises, evaluated on a batch of sample indices.
/// `round` and `epoch` key any randomness the loss needs.
pub trait LocalObjective: Sync {
    fn loss_and_grad(&self, params: &ParamTable, batch: &[usize], round: u64, epoch: u64) -> Result<(f32, NamedTensors)>;
}

/// DDPM noise-prediction loss over a dataset.
pub struct DiffusionObjective<'a> {
    pub config: &'a DenoiserConfig,
    pub schedule: &'a NoiseSchedule,
    pub data: &'a Dataset,
    pub seed: u64,
}

impl LocalObjective for DiffusionObjective<'_> {
    fn loss_and_grad(&self, params: &ParamTable, batch: &[usize], round: u64, epoch: u64) -> Result<(f32, NamedTensors)> {
        let (x0, steps, noise) =
            keyed_noise_batch(self.data.images(), batch, self.schedule.steps(), self.seed, round, epoch)?;
        let view = UNetView {
            config: self.config,
            params,
        };
        training_loss(&view, self.schedule, &x0, &steps, &noise)?.loss_and_grad(params)
    }
}

/// Scores a client's assembled model; returns (precision, recall).
pub trait ClientEvaluator: Sync {
    fn evaluate(&self, params: &ParamTable, client_id: usize, round: usize) -> Result<(f64, f64)>;
}

/// Generates samples from the client's model and measures k-NN
/// precision/recall against the metric context's reference set.
pub struct SampleEvaluator<'a> {
    pub config: &'a DenoiserConfig,
    pub schedule: &'a NoiseSchedule,
    pub metrics: Option<&'a MetricsContext>,
    pub sample_count: usize,
    pub seed: u64,
}

impl ClientEvaluator for SampleEvaluator<'_> {
    fn evaluate(&self, params: &ParamTable, client_id: usize, round: usize) -> Result<(f64, f64)> {
        let metrics = self
            .metrics
            .ok_or_else(|| Error::Config("client evaluation needs reference features".into()))?;
        let view = UNetView {
            config: self.config,
            params,
        };
        let seed = rng::derive_seed(self.seed, &[STREAM_EVAL, round as u64, client_id as u64]);
        let samples = generate(&view, self.schedule, &self.config.sample_shape(), self.sample_count, seed)?;
        metrics.precision_recall(&samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub data_indices: Vec<usize>,
    /// Empty until the client first trains with personalization on.
    pub personal_params: NamedTensors,
    pub optimizer_state: AdamState,
    /// Seed of this client's private stream, derived from (run seed, id).
    pub stream_seed: u64,
}

impl ClientState {
    pub fn new(id: usize, data_indices: Vec<usize>, config: &FederationConfig) -> Self {
        ClientState {
            id,
            data_indices,
            personal_params: NamedTensors::new(),
            optimizer_state: AdamState::new(config.learning_rate),
            stream_seed: rng::derive_seed(config.seed, &[STREAM_CLIENT, id as u64]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub base_params: NamedTensors,
    pub sample_count: usize,
    pub train_loss: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalOutcome {
    Trained(ClientUpdate),
    /// Non-finite loss; excluded from this round.
    Faulted(String),
    /// No data.
    Skipped,
}

fn batches(indices: &[usize], batch_size: usize, seed: u64, round: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::substream(seed, &[round, epoch]));
    let size = if batch_size == 0 { order.len() } else { batch_size };
    order
        .chunks(size)
        .map(|c| {
            // Sorted so a batch's content, not its shuffle order, fixes the
            // reduction order.
            let mut b = c.to_vec();
            b.sort_unstable();
            b
        })
        .collect()
}

enum StepError {
    Fault(String),
    Other(Error),
}

fn optimise(
    params: &mut ParamTable,
    adam: &mut AdamState,
    objective: &dyn LocalObjective,
    indices: &[usize],
    epochs: usize,
    config: &FederationConfig,
    stream_seed: u64,
    round: u64,
) -> std::result::Result<Vec<f32>, StepError> {
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs as u64 {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for batch in batches(indices, config.batch_size, stream_seed, round, epoch) {
            let (loss, grads) = match objective.loss_and_grad(params, &batch, round, epoch) {
                Ok(v) => v,
                Err(Error::NonFinite { node, op }) => {
                    return Err(StepError::Fault(format!("non-finite value at node {node} ({op})")))
                }
                Err(e) => return Err(StepError::Other(e)),
            };
            if !loss.is_finite() {
                return Err(StepError::Fault(format!("loss {loss} in epoch {epoch}")));
            }
            let step = match config.optimizer {
                OptimizerKind::Adam => adam_step(params, &grads, adam),
                OptimizerKind::Sgd => sgd_step(params, &grads, config.learning_rate),
            };
            match step {
                Ok(()) => {}
                Err(Error::Numeric(m)) => return Err(StepError::Fault(m)),
                Err(e) => return Err(StepError::Other(e)),
            }
            total += loss as f64 * batch.len() as f64;
            count += batch.len();
        }
        epoch_losses.push((total / count as f64) as f32);
    }
    Ok(epoch_losses)
}

/// Trains a fresh global model on the shared pool. Returns the parameters
/// and the mean loss of every epoch.
pub fn warmup_train(
    initial: &ParamTable,
    objective: &dyn LocalObjective,
    shared: &[usize],
    config: &FederationConfig,
) -> Result<(ParamTable, Vec<f32>)> {
    if shared.is_empty() {
        return Err(Error::Argument("warmup needs a non-empty shared pool".into()));
    }
    let mut params = initial.clone();
    let mut adam = AdamState::new(config.learning_rate);
    let seed = rng::derive_seed(config.seed, &[STREAM_CLIENT, WARMUP_CLIENT]);
    let losses = optimise(
        &mut params,
        &mut adam,
        objective,
        shared,
        config.warmup_epochs,
        config,
        seed,
        WARMUP_ROUND,
    )
    .map_err(|e| match e {
        StepError::Fault(m) => Error::Numeric(format!("warmup diverged: {m}")),
        StepError::Other(e) => e,
    })?;
    Ok((params, losses))
}

/// One client's local round: assemble the working model, train, keep the
/// personal block, return the shareable parameters.
pub fn local_train(
    client: &mut ClientState,
    global: &ParamTable,
    objective: &dyn LocalObjective,
    config: &FederationConfig,
    round: usize,
) -> Result<LocalOutcome> {
    if client.data_indices.is_empty() {
        warn!("client {} has no data; skipping round {round}", client.id);
        return Ok(LocalOutcome::Skipped);
    }
    let mut working = assemble(global, client, config)?;
    let mut adam = client.optimizer_state.clone();
    let loss = match optimise(
        &mut working,
        &mut adam,
        objective,
        &client.data_indices,
        config.local_epochs,
        config,
        client.stream_seed,
        round as u64,
    ) {
        Ok(l) => *l.last().expect("local_epochs >= 1"),
        Err(StepError::Fault(m)) => {
            warn!("client {} faulted in round {round}: {m}", client.id);
            return Ok(LocalOutcome::Faulted(m));
        }
        Err(StepError::Other(e)) => return Err(e),
    };
    client.optimizer_state = adam;
    let (base, personal) = working.split();
    let base_params = if config.personalization {
        client.personal_params = personal;
        base
    } else {
        working.to_named()
    };
    Ok(LocalOutcome::Trained(ClientUpdate {
        client_id: client.id,
        base_params,
        sample_count: client.data_indices.len(),
        train_loss: loss,
    }))
}

/// Global parameters with the client's stored personal block swapped in
/// (when personalization is on and the client has trained before).
pub fn assemble(global: &ParamTable, client: &ClientState, config: &FederationConfig) -> Result<ParamTable> {
    let mut working = global.clone();
    if config.personalization && !client.personal_params.is_empty() {
        working.assign(&client.personal_params)?;
    }
    Ok(working)
}

/// Sample-count-weighted mean of every parameter, accumulated in f64 in
/// client-id order.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<NamedTensors> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = sorted
        .first()
        .ok_or_else(|| Error::Argument("fedavg needs at least one update".into()))?;
    let names: BTreeSet<&String> = first.base_params.keys().collect();
    for u in &sorted[1..] {
        let other: BTreeSet<&String> = u.base_params.keys().collect();
        if other != names {
            let diff: Vec<&&String> = names.symmetric_difference(&other).collect();
            return Err(Error::Aggregation(format!(
                "client {} and client {} disagree on parameters {diff:?}",
                first.client_id, u.client_id
            )));
        }
    }
    let total: usize = sorted.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::Argument("fedavg over zero samples".into()));
    }
    let mut out = NamedTensors::new();
    for name in names {
        let shape = first.base_params[name].shape();
        let mut acc = vec![0.0f64; first.base_params[name].numel()];
        for u in &sorted {
            let t = &u.base_params[name];
            if t.shape() != shape {
                return Err(Error::Aggregation(format!(
                    "`{name}` is {:?} at client {} but {shape:?} at client {}",
                    t.shape(),
                    u.client_id,
                    first.client_id
                )));
            }
            let w = u.sample_count as f64;
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += w * v as f64;
            }
        }
        let data = acc.iter().map(|a| (a / total as f64) as f32).collect();
        out.insert(name.clone(), crate::numeric::Tensor::new(shape.to_vec(), data)?);
    }
    Ok(out)
}

fn tensor_bytes(t: &NamedTensors) -> u64 {
    t.values().map(|v| 4 * v.numel() as u64).sum()
}

/// Where per-round checkpoints go, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn to_dir(dir: &Path) -> Self {
        RunOutput {
            dir: Some(dir.to_path_buf()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FederationResult {
    pub global: ParamTable,
    pub clients: Vec<ClientState>,
    pub filter: FilterState,
    pub log: RunLog,
    pub events: Vec<(usize, FilterEvent)>,
}

impl FederationResult {
    /// Client `i`'s model: the global parameters with its personal block.
    pub fn client_model(&self, i: usize, config: &FederationConfig) -> Result<ParamTable> {
        assemble(&self.global, &self.clients[i], config)
    }
}

struct RoundWork {
    outcome: LocalOutcome,
    metrics: Option<(f64, f64)>,
    bytes_down: u64,
    wall_ms: u64,
}

/// Runs `server_rounds` rounds of local training and aggregation over the
/// given client index lists.
pub fn run_federation(
    initial: &ParamTable,
    client_data: &[Vec<usize>],
    objective: &dyn LocalObjective,
    evaluator: Option<&dyn ClientEvaluator>,
    config: &FederationConfig,
    output: &RunOutput,
) -> Result<FederationResult> {
    config.validate()?;
    if client_data.len() != config.client_count {
        return Err(Error::Config(format!(
            "plan has {} clients, config expects {}",
            client_data.len(),
            config.client_count
        )));
    }
    if config.threshold_filtering && evaluator.is_none() {
        return Err(Error::Config("threshold filtering needs a client evaluator".into()));
    }
    if let Some(dir) = &output.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut clients: Vec<ClientState> = client_data
        .iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i, d.clone(), config))
        .collect();
    let mut global = initial.clone();
    let mut filter = FilterState::new(config.client_count, config.drop_policy);
    let rules = FilterRules {
        immediate: config.immediate_disconnect,
        min_active_clients: config.min_active_clients,
    };
    let mut log = RunLog::default();
    let mut events = Vec::new();

    for round in 1..=config.server_rounds {
        let evaluate = config.threshold_filtering && round >= config.eval_start_round;
        let (base_now, personal_now) = global.split();
        let global_ref = &global;
        let work: Vec<Option<RoundWork>> = clients
            .par_iter_mut()
            .map(|client| {
                if !filter.status[client.id].connected() {
                    return Ok(None);
                }
                let started = Instant::now();
                let fresh = client.personal_params.is_empty();
                let bytes_down = if config.personalization && !fresh {
                    tensor_bytes(&base_now)
                } else {
                    tensor_bytes(&base_now) + tensor_bytes(&personal_now)
                };
                let outcome = local_train(client, global_ref, objective, config, round)?;
                let metrics = match (&outcome, evaluator) {
                    (LocalOutcome::Trained(u), Some(ev)) if evaluate => {
                        // The freshly trained local model, before aggregation
                        // replaces its shared block.
                        let mut trained = assemble(global_ref, client, config)?;
                        trained.assign(&u.base_params)?;
                        Some(ev.evaluate(&trained, client.id, round)?)
                    }
                    _ => None,
                };
                let wall_ms = if config.record_wall_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                };
                Ok(Some(RoundWork {
                    outcome,
                    metrics,
                    bytes_down,
                    wall_ms,
                }))
            })
            .collect::<Result<Vec<_>>>()?;

        if evaluate {
            let mut precision = BTreeMap::new();
            let mut excused = BTreeSet::new();
            for (i, w) in work.iter().enumerate() {
                match w {
                    Some(RoundWork { metrics: Some((p, _)), .. }) => {
                        precision.insert(i, *p);
                    }
                    Some(_) => {
                        excused.insert(i);
                    }
                    None => {}
                }
            }
            let outcome = filter_step(&filter, &precision, &excused, rules)?;
            for e in &outcome.events {
                info!("round {round}: {e:?}");
                events.push((round, *e));
            }
            filter = outcome.state;
        }

        let mut updates = Vec::new();
        for (i, w) in work.into_iter().enumerate() {
            let Some(w) = w else {
                log.rows.push(RunLogRow {
                    round,
                    client_id: i,
                    status: ClientStatus::Disconnected.as_str().into(),
                    samples: 0,
                    train_loss: None,
                    precision: None,
                    recall: None,
                    bytes_up: 0,
                    bytes_down: 0,
                    wall_ms: 0,
                });
                continue;
            };
            let (status, samples, loss, bytes_up) = match &w.outcome {
                LocalOutcome::Trained(u) => {
                    let st = filter.status[i].as_str();
                    (st, u.sample_count, Some(u.train_loss), tensor_bytes(&u.base_params))
                }
                LocalOutcome::Faulted(_) => ("faulted", 0, None, 0),
                LocalOutcome::Skipped => ("skipped", 0, None, 0),
            };
            log.rows.push(RunLogRow {
                round,
                client_id: i,
                status: status.into(),
                samples,
                train_loss: loss,
                precision: w.metrics.map(|m| m.0),
                recall: w.metrics.map(|m| m.1),
                bytes_up,
                bytes_down: w.bytes_down,
                wall_ms: w.wall_ms,
            });
            if let LocalOutcome::Trained(u) = w.outcome {
                if filter.status[i].connected() {
                    updates.push(u);
                }
            }
        }
        if updates.is_empty() {
            return Err(Error::Fatal(format!("round {round}: no client produced a usable update")));
        }
        let averaged = fedavg(&updates)?;
        global.assign(&averaged)?;
        debug!("round {round}: aggregated {} updates", updates.len());
        if let Some(dir) = &output.dir {
            save_checkpoint(&dir.join(format!("round_{round}.phxc")), &global)?;
        }
    }

    if let (Some(dir), true) = (&output.dir, config.personalization) {
        for c in &clients {
            let mut table = ParamTable::new();
            for (name, t) in &c.personal_params {
                table.insert(name.clone(), t.clone(), true)?;
            }
            if !table.is_empty() {
                save_checkpoint(&dir.join(format!("client_{}_personal.phxc", c.id)), &table)?;
            }
        }
    }
    Ok(FederationResult {
        global,
        clients,
        filter,
        log,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn update(id: usize, value: f32, count: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            base_params: [("w".to_string(), Tensor::scalar(value))].into(),
            sample_count: count,
            train_loss: 0.0,
        }
    }

    #[test]
    fn fedavg_examples() {
        let one = fedavg(&[update(0, 1.25, 3)]).unwrap();
        assert_eq!(one["w"].item(), 1.25);
        assert_eq!(fedavg(&[update(0, 0.0, 5), update(1, 2.0, 5)]).unwrap()["w"].item(), 1.0);
        assert_eq!(fedavg(&[update(0, 0.0, 1), update(1, 4.0, 3)]).unwrap()["w"].item(), 3.0);
    }

    #[test]
    fn fedavg_rejects_mismatch_and_zero_counts() {
        let mut odd = update(1, 1.0, 1);
        odd.base_params.insert("extra".into(), Tensor::scalar(0.0));
        assert!(matches!(fedavg(&[update(0, 1.0, 1), odd]), Err(Error::Aggregation(_))));
        assert!(matches!(fedavg(&[update(0, 1.0, 0)]), Err(Error::Argument(_))));
        assert!(fedavg(&[]).is_err());
    }
}
