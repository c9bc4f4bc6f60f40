//! End-to-end pipeline behind the command line: partition, warmup, train,
//! generate, evaluate and report. Every command validates its
//! [`RunConfig`] before touching the file system and writes only below
//! `output_dir`.
//!
//! Layout of the output directory:
//!
//! ```text
//! out/
//!   classifier_<key>.phxc        cached evaluation classifier
//!   runs/<run_id>/plan.json      client assignments
//!   runs/<run_id>/class_counts.csv
//!   runs/<run_id>/round_0.phxc   warmup checkpoint (data sharing only)
//!   runs/<run_id>/warmup_loss.csv
//!   runs/<run_id>/round_<r>.phxc
//!   runs/<run_id>/client_<i>_personal.phxc
//!   runs/<run_id>/runlog.csv
//!   runs/<run_id>/summary.json
//!   samples/                     output of `generate`
//!   metrics.json, histogram.csv  output of `evaluate`
//!   report.csv                   output of `report`
//! ```

pub mod cli;
mod config;

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use config::{DatasetSpec, DiffusionSpec, MetricsSpec, ModelSpec, PartitionSpec, RunConfig};

use crate::data::{
    data_sharing_split, load_cifar10, make_toy_dataset, partition_iid, partition_label_skew, DataPlan, Dataset,
    PlanMode, Split,
};
use crate::denoiser::{build_unet, load_checkpoint, load_model, save_checkpoint, DenoiserConfig, UNetView};
use crate::diffusion::{generate, make_schedule, write_image, NoiseSchedule};
use crate::error::{Error, Result};
use crate::federation::{
    run_federation, warmup_train, ClientEvaluator, DiffusionObjective, FederationResult, FilterEvent, RunOutput,
    SampleEvaluator,
};
use crate::metrics::{sorted_histogram_csv, train_eval_classifier, EvalClassifier, MetricsContext, MetricsReport};
use crate::numeric::{load_tensor, save_tensor, ParamTable, Tensor};
use crate::rng::{self, STREAM_CLASSIFIER, STREAM_DATA, STREAM_GENERATE};

pub const PLAN_FILE: &str = "plan.json";
pub const CLASS_COUNTS_FILE: &str = "class_counts.csv";
pub const WARMUP_CHECKPOINT: &str = "round_0.phxc";
pub const WARMUP_LOSS_FILE: &str = "warmup_loss.csv";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_HEADER: &str = "run_id,strategy,beta_pct,alpha_pct,drop_policy,fid,is_mean,is_std,precision,recall,tv_distance";

/// Training data and the held-out reference set metrics compare against.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub reference: Dataset,
}

pub fn load_datasets(config: &RunConfig) -> Result<Datasets> {
    match &config.dataset {
        DatasetSpec::Cifar10 { path } => Ok(Datasets {
            train: load_cifar10(path, Split::Train)?,
            reference: load_cifar10(path, Split::Test)?,
        }),
        DatasetSpec::Toy {
            classes,
            per_class,
            side,
            test_per_class,
        } => Ok(Datasets {
            train: make_toy_dataset(*classes, *per_class, *side, rng::derive_seed(config.seed, &[STREAM_DATA, 0]))?,
            reference: make_toy_dataset(
                *classes,
                *test_per_class,
                *side,
                rng::derive_seed(config.seed, &[STREAM_DATA, 1]),
            )?,
        }),
    }
}

pub fn build_plan(config: &RunConfig, train: &Dataset) -> Result<DataPlan> {
    let k = config.federation.client_count;
    Ok(match config.partition {
        PartitionSpec::Iid => DataPlan::from_partition(&partition_iid(train, k, config.seed)?, config.seed),
        PartitionSpec::LabelSkew { classes_per_client } => {
            DataPlan::from_partition(&partition_label_skew(train, k, classes_per_client, config.seed)?, config.seed)
        }
        PartitionSpec::DataSharing {
            beta_pct,
            alpha_pct,
            classes_per_client,
        } => DataPlan::from_sharing(
            &data_sharing_split(train, k, beta_pct, alpha_pct, classes_per_client, config.seed)?,
            config.seed,
        ),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn schedule_for(config: &RunConfig) -> Result<NoiseSchedule> {
    make_schedule(config.diffusion.schedule, config.diffusion.steps)
}

/// Writes `plan.json` and `class_counts.csv` into the run directory.
pub fn cmd_partition(config: &RunConfig) -> Result<DataPlan> {
    config.validate()?;
    let data = load_datasets(config)?;
    let plan = build_plan(config, &data.train)?;
    let dir = config.run_dir();
    create_dir(&dir)?;
    plan.save(&dir.join(PLAN_FILE))?;
    write_file(
        &dir.join(CLASS_COUNTS_FILE),
        plan.class_count_csv(data.train.labels(), data.train.num_classes()),
    )?;
    info!("wrote {} client lists to {}", plan.client_count(), dir.display());
    Ok(plan)
}

fn load_plan(config: &RunConfig) -> Result<DataPlan> {
    let plan = DataPlan::load(&config.run_dir().join(PLAN_FILE))?;
    if plan.client_count() != config.federation.client_count {
        return Err(Error::Config(format!(
            "plan has {} clients, config expects {}",
            plan.client_count(),
            config.federation.client_count
        )));
    }
    Ok(plan)
}

/// Trains the initial global model on the shared pool of a data-sharing
/// plan and writes it as `round_0.phxc`. Returns the per-epoch losses.
pub fn cmd_warmup(config: &RunConfig) -> Result<Vec<f32>> {
    config.validate()?;
    let plan = load_plan(config)?;
    if plan.mode != PlanMode::DataSharing {
        return Err(Error::Config("warmup needs a data_sharing plan".into()));
    }
    let model_config = config.denoiser()?;
    let data = load_datasets(config)?;
    let schedule = schedule_for(config)?;
    let initial = build_unet(&model_config, config.seed)?;
    let objective = DiffusionObjective {
        config: &model_config,
        schedule: &schedule,
        data: &data.train,
        seed: config.seed,
    };
    let (params, losses) = warmup_train(&initial.params, &objective, &plan.shared_pool, &config.federation)?;
    let dir = config.run_dir();
    save_checkpoint(&dir.join(WARMUP_CHECKPOINT), &params)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", e + 1);
    }
    write_file(&dir.join(WARMUP_LOSS_FILE), csv)?;
    Ok(losses)
}

/// Loads the cached evaluation classifier for this dataset, training and
/// caching it on a miss.
pub fn obtain_classifier(config: &RunConfig, train: &Dataset) -> Result<EvalClassifier> {
    let mut h = DefaultHasher::new();
    serde_json::to_string(&config.dataset)?.hash(&mut h);
    config.seed.hash(&mut h);
    config.metrics.classifier_epochs.hash(&mut h);
    let path = config.output_dir.join(format!("classifier_{:016x}.phxc", h.finish()));
    if path.exists() {
        let clf = EvalClassifier::from_params(load_checkpoint(&path)?)?;
        if clf.num_classes() == train.num_classes() {
            return Ok(clf);
        }
        warn!("ignoring cached classifier {} with the wrong class count", path.display());
    }
    let seed = rng::derive_seed(config.seed, &[STREAM_CLASSIFIER]);
    let (clf, losses) = train_eval_classifier(train, config.metrics.classifier_epochs, seed)?;
    info!("evaluation classifier trained, final loss {:?}", losses.last());
    create_dir(&config.output_dir)?;
    save_checkpoint(&path, clf.params())?;
    Ok(clf)
}

pub fn metrics_context(config: &RunConfig, data: &Datasets) -> Result<MetricsContext> {
    let clf = obtain_classifier(config, &data.train)?;
    let mut ctx = MetricsContext::new(clf, &data.reference, config.metrics.feature_space, config.metrics.k)?;
    ctx.splits = config.metrics.splits;
    Ok(ctx)
}

/// Machine-readable outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub strategy: String,
    pub partition: String,
    pub beta_pct: Option<f64>,
    pub alpha_pct: Option<f64>,
    /// Present only when threshold filtering ran.
    pub drop_policy: Option<String>,
    pub personalization: bool,
    pub seed: u64,
    pub server_rounds: usize,
    pub disconnected: Vec<usize>,
    pub events: Vec<(usize, FilterEvent)>,
    pub report: MetricsReport,
}

/// Samples the final model(s) for the end-of-run report. With
/// personalization the budget is split evenly over the connected clients'
/// own models, lower ids taking the remainder.
pub fn final_samples(
    config: &RunConfig,
    model_config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    result: &FederationResult,
) -> Result<Tensor> {
    let n = config.metrics.eval_samples;
    let shape = model_config.sample_shape();
    if !config.federation.personalization {
        let view = UNetView {
            config: model_config,
            params: &result.global,
        };
        return generate(&view, schedule, &shape, n, rng::derive_seed(config.seed, &[STREAM_GENERATE, 0]));
    }
    let live: Vec<usize> = (0..result.clients.len())
        .filter(|&i| result.filter.status[i].connected())
        .collect();
    let mut parts = Vec::new();
    for (j, &i) in live.iter().enumerate() {
        let count = n / live.len() + usize::from(j < n % live.len());
        if count == 0 {
            continue;
        }
        let params = result.client_model(i, &config.federation)?;
        let view = UNetView {
            config: model_config,
            params: &params,
        };
        let seed = rng::derive_seed(config.seed, &[STREAM_GENERATE, 1, i as u64]);
        parts.push(generate(&view, schedule, &shape, count, seed)?);
    }
    Tensor::stack_rows(&parts)
}

/// Runs federated training from the saved plan (and warmup checkpoint for
/// data sharing), then evaluates the final model and writes the run log,
/// checkpoints and `summary.json`.
pub fn cmd_train(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let plan = load_plan(config)?;
    let dir = config.run_dir();
    let model_config = config.denoiser()?;
    let initial: ParamTable = if plan.mode == PlanMode::DataSharing {
        load_model(&dir.join(WARMUP_CHECKPOINT), &model_config)?.params
    } else {
        build_unet(&model_config, config.seed)?.params
    };
    let data = load_datasets(config)?;
    let schedule = schedule_for(config)?;
    let ctx = metrics_context(config, &data)?;
    let objective = DiffusionObjective {
        config: &model_config,
        schedule: &schedule,
        data: &data.train,
        seed: config.seed,
    };
    let evaluator = SampleEvaluator {
        config: &model_config,
        schedule: &schedule,
        metrics: Some(&ctx),
        sample_count: config.federation.eval_sample_count,
        seed: config.seed,
    };
    let evaluator: Option<&dyn ClientEvaluator> = config.federation.threshold_filtering.then_some(&evaluator as _);
    let result = run_federation(
        &initial,
        &plan.clients,
        &objective,
        evaluator,
        &config.federation,
        &RunOutput::to_dir(&dir),
    )?;
    result.log.save(&dir.join(RUNLOG_FILE))?;

    let samples = final_samples(config, &model_config, &schedule, &result)?;
    let report = ctx.report(&samples)?;
    let summary = RunSummary {
        run_id: config.run_id.clone(),
        strategy: config.strategy_label(),
        partition: config.partition.label().into(),
        beta_pct: plan.beta_pct,
        alpha_pct: plan.alpha_pct,
        drop_policy: config
            .federation
            .threshold_filtering
            .then(|| config.federation.drop_policy.label()),
        personalization: config.federation.personalization,
        seed: config.seed,
        server_rounds: config.federation.server_rounds,
        disconnected: result
            .events
            .iter()
            .filter_map(|(_, e)| match e {
                FilterEvent::Disconnected(i) => Some(*i),
                _ => None,
            })
            .collect(),
        events: result.events.clone(),
        report,
    };
    write_file(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    info!(
        "run {}: fid {:.4} precision {:.3} recall {:.3} tv {:.3}",
        summary.run_id, summary.report.fid, summary.report.precision, summary.report.recall, summary.report.tv_distance
    );
    Ok(summary)
}

/// Partition, warmup when the plan shares data, then train.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    cmd_partition(config)?;
    if matches!(config.partition, PartitionSpec::DataSharing { .. }) {
        cmd_warmup(config)?;
    }
    cmd_train(config)
}

/// Where `generate` puts its files.
pub fn samples_dir(config: &RunConfig) -> PathBuf {
    config.output_dir.join("samples")
}

/// Draws `count` samples from a checkpoint, optionally overlaid with a
/// client's personal block, and writes `samples.phxt` plus one image per
/// sample.
pub fn cmd_generate(config: &RunConfig, checkpoint: &Path, personal: Option<&Path>, count: usize) -> Result<Tensor> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Argument("count must be at least 1".into()));
    }
    let model_config = config.denoiser()?;
    let mut model = load_model(checkpoint, &model_config)?;
    if let Some(p) = personal {
        model.params.assign(&load_checkpoint(p)?.to_named())?;
    }
    let schedule = schedule_for(config)?;
    let samples = generate(
        &model,
        &schedule,
        &model_config.sample_shape(),
        count,
        rng::derive_seed(config.seed, &[STREAM_GENERATE, 2]),
    )?;
    let dir = samples_dir(config);
    create_dir(&dir)?;
    save_tensor(&dir.join("samples.phxt"), &samples)?;
    let [c, h, w] = model_config.sample_shape();
    let ext = if c == 1 { "pgm" } else { "ppm" };
    let per = c * h * w;
    for i in 0..count {
        write_image(
            &dir.join(format!("sample_{i:05}.{ext}")),
            &samples.data()[i * per..(i + 1) * per],
            c,
            h,
            w,
        )?;
    }
    Ok(samples)
}

/// Scores a PHXT sample batch against the configured reference set and
/// writes `metrics.json` and `histogram.csv`.
pub fn cmd_evaluate(config: &RunConfig, samples: &Path, classifier: Option<&Path>) -> Result<MetricsReport> {
    config.validate()?;
    let samples = load_tensor(samples)?;
    let data = load_datasets(config)?;
    let expected = data.reference.sample_shape();
    if samples.rank() != 4 || samples.shape()[1..] != expected {
        return Err(Error::Argument(format!(
            "samples have shape {:?}, reference images are {expected:?}",
            samples.shape()
        )));
    }
    let ctx = match classifier {
        Some(p) => {
            let clf = EvalClassifier::from_params(load_checkpoint(p)?)?;
            let mut ctx = MetricsContext::new(clf, &data.reference, config.metrics.feature_space, config.metrics.k)?;
            ctx.splits = config.metrics.splits;
            ctx
        }
        None => metrics_context(config, &data)?,
    };
    let report = ctx.report(&samples)?;
    create_dir(&config.output_dir)?;
    write_file(&config.output_dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    write_file(
        &config.output_dir.join("histogram.csv"),
        sorted_histogram_csv(&report.class_histogram),
    )?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Collects `summary.json` from each run directory (every directory under
/// `out/runs` when none are given) into `report.csv`, sorted by run id.
pub fn cmd_report(config: &RunConfig, runs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    config.validate()?;
    let dirs: Vec<PathBuf> = if runs.is_empty() {
        let root = config.output_dir.join("runs");
        let entries = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
        entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect()
    } else {
        runs.to_vec()
    };
    if dirs.is_empty() {
        return Err(Error::Config("no run directories to report on".into()));
    }
    let mut summaries = Vec::new();
    for d in dirs {
        let path = d.join(SUMMARY_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str::<RunSummary>(&text) {
                Ok(s) => summaries.push(s),
                Err(e) => warn!("skipping {}: {e}", path.display()),
            },
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    summaries.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for s in &summaries {
        let r = &s.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.run_id,
            s.strategy,
            fmt_opt(s.beta_pct),
            fmt_opt(s.alpha_pct),
            s.drop_policy.as_deref().unwrap_or(""),
            r.fid,
            r.is_mean,
            r.is_std,
            r.precision,
            r.recall,
            r.tv_distance
        );
    }
    create_dir(&config.output_dir)?;
    write_file(&config.output_dir.join(REPORT_FILE), csv)?;
    Ok(summaries)
}
