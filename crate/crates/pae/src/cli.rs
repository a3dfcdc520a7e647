//! Command-line orchestration of the pipeline.
//!
//! Every subcommand validates its inputs, writes its outputs plus a
//! `run_manifest.json` receipt (flags, input hashes, output hashes, seed,
//! timing), and exits nonzero with a machine-readable error category on
//! failure. One `--seed` drives every randomized stage through derived
//! per-unit seeds, and `--workers` never changes results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribank::{self, BankConfig, BankError, EerPooling};
use crate::backends::{
    nb_fit, ovr_fit, tree_fit, BackendError, BackendModel, Classifier, Objective,
};
use crate::dataio::{
    load_embeddings, save_embeddings, AttributeSchema, DataError, EmbeddingDataset, Partition,
    ProtocolSplit, BONAFIDE_LABEL,
};
use crate::explain::{self, ExplainError};
use crate::manifest::RunManifest;
use crate::metrics::{self, MetricsError};
use crate::nnet::{AdamParams, NnetError};
use crate::protogen::{self, ProtoError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema hash mismatch: model carries {model}, data carries {data}")]
    SchemaMismatch { model: String, data: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{path}: {reason}")]
    ParseError { path: PathBuf, reason: String },
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Data(e) => e.category(),
            CliError::Nnet(e) => e.category(),
            CliError::Bank(e) => e.category(),
            CliError::Backend(e) => e.category(),
            CliError::Metrics(e) => e.category(),
            CliError::Explain(e) => e.category(),
            CliError::Proto(e) => e.category(),
            CliError::Io(_) => "Io",
            CliError::SchemaMismatch { .. } => "SchemaMismatch",
            CliError::InvalidArgument(_) => "InvalidArgument",
            CliError::ParseError { .. } => "ParseError",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pae",
    version,
    about = "Probabilistic attribute embeddings for spoofed-speech detection and attribution"
)]
pub struct Cli {
    /// Root seed; every randomized stage derives its own generator from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: available parallelism). Never affects results.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Attribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Nb,
    Dt,
    Lr,
    Svm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapMode {
    Exact,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Averaging {
    Pooled,
    Macro,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a protocol split from utterance metadata and a partition spec.
    Partition {
        /// Rows `utterance_id \t attack \t speaker \t origin`.
        #[arg(long)]
        metadata: PathBuf,
        /// Partition spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate seeded synthetic train/dev/eval embedding datasets.
    Synth {
        /// Synthetic dataset spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the bank of attribute extractors with dev-EER epoch selection.
    TrainExtractors {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Development embeddings (alternative to --protocol).
        #[arg(long)]
        dev_embeddings: Option<PathBuf>,
        #[arg(long)]
        dev_index: Option<PathBuf>,
        /// Protocol file; --embeddings then holds the full corpus and the
        /// train/dev partitions are selected from it.
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.0001)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        /// Development-EER pooling across attribute values.
        #[arg(long, value_enum, default_value_t = Averaging::Pooled)]
        eer_pooling: Averaging,
        /// L2-normalize CM embeddings before use (recorded in the bank).
        #[arg(long, default_value_t = false)]
        normalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract probabilistic attribute embeddings with a trained bank.
    Extract {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Bank directory produced by train-extractors.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a back-end classifier on embeddings.
    TrainBackend {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Protocol file; training uses its train partition.
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long, value_enum, default_value_t = Task::Attribution)]
        task: Task,
        /// Attribute schema; required for nb.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Naive Bayes smoothing constant.
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value_t = 5)]
        max_depth: usize,
        #[arg(long, default_value_t = 1)]
        min_leaf: usize,
        /// Regularization strength for the linear models.
        #[arg(long, default_value_t = 1e-4)]
        reg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a back-end: EER and balanced accuracy to stdout plus a
    /// metrics report.
    Eval {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Protocol file; evaluation uses its eval partition.
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// Model file produced by train-backend.
        #[arg(long)]
        model: PathBuf,
        /// Attribute schema; enables the flow report and grouped accuracy.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Multi-class EER pooling.
        #[arg(long, value_enum, default_value_t = Averaging::Pooled)]
        eer_averaging: Averaging,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shapley-value explanations and rank aggregation.
    Explain {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Background dataset (typically the back-end's training embeddings).
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        background_index: PathBuf,
        /// Background rows sampled (seeded) for coalition values.
        #[arg(long, default_value_t = 100)]
        background_n: usize,
        #[arg(long, value_enum, default_value_t = ShapMode::Sample)]
        shap: ShapMode,
        /// Permutations per explanation in sample mode.
        #[arg(long, default_value_t = 2000)]
        shap_n: usize,
        /// Explain only the first N utterances.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack-confusability Hamming matrix, optionally correlated with a
    /// confusion matrix from an eval report.
    Hamming {
        #[arg(long)]
        schema: PathBuf,
        /// metrics.json from eval; adds a rank-correlation report.
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Sidecar metadata written next to every emitted embedding container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    /// "cm" for raw embeddings, "prob_attr" for extracted ones.
    pub kind: String,
    pub count: usize,
    pub dim: usize,
    pub schema_hash: Option<String>,
}

impl DatasetMeta {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::ParseError {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Serialized back-end together with its evaluation contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub task: Task,
    pub classes: Vec<String>,
    pub schema_hash: Option<String>,
    /// Attribution scores are raw margins/log-scores, never renormalized.
    pub score_normalization: String,
    pub hyperparameters: BTreeMap<String, String>,
    pub seed: u64,
    pub model: BackendModel,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::ParseError {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Evaluation report written by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub task: Task,
    pub classes: Vec<String>,
    pub trials: usize,
    pub skipped_trials: usize,
    pub eer: f64,
    pub eer_threshold: Option<f64>,
    pub eer_averaging: String,
    /// Detection polarity: spoofed trials are the target class.
    pub detection_target: Option<String>,
    pub balanced_accuracy: f64,
    /// Accuracy over configuration-equivalence groups (labels with identical
    /// attack rows merged); needs --schema.
    pub balanced_accuracy_grouped: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub flow: Option<metrics::FlowReport>,
    pub model_hash: String,
}

impl MetricsReport {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::ParseError {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

struct RunContext {
    manifest: RunManifest,
    out: PathBuf,
    start: Instant,
}

impl RunContext {
    fn new(command: &str, out: &Path, seed: u64, workers: usize) -> Result<Self, CliError> {
        std::fs::create_dir_all(out)?;
        Ok(Self {
            manifest: RunManifest::new(command, seed, workers),
            out: out.to_path_buf(),
            start: Instant::now(),
        })
    }

    fn input(&mut self, key: &str, path: &Path) -> Result<(), CliError> {
        self.manifest.arg(key, path.display());
        self.manifest.record_input(path)?;
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.record_output(path)?;
        Ok(())
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.manifest.timing_ms = self.start.elapsed().as_millis() as u64;
        self.manifest.save(&self.out.join("run_manifest.json"))?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("json serialization");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes `<stem>.pae`, `<stem>.idx`, and `<stem>.meta.json`; records all
/// three in the manifest.
fn write_dataset(
    ctx: &mut RunContext,
    stem: &str,
    dataset: &EmbeddingDataset,
    kind: &str,
    schema_hash: Option<String>,
) -> Result<(), CliError> {
    let bin = ctx.out.join(format!("{stem}.pae"));
    let idx = ctx.out.join(format!("{stem}.idx"));
    let meta = ctx.out.join(format!("{stem}.meta.json"));
    save_embeddings(dataset, &bin, &idx)?;
    write_json(
        &meta,
        &DatasetMeta {
            format_version: 1,
            kind: kind.to_string(),
            count: dataset.len(),
            dim: dataset.dim(),
            schema_hash,
        },
    )?;
    ctx.output(&bin)?;
    ctx.output(&idx)?;
    ctx.output(&meta)?;
    Ok(())
}

fn sidecar_path(embeddings: &Path) -> PathBuf {
    embeddings.with_extension("meta.json")
}

fn load_sidecar(embeddings: &Path) -> Result<Option<DatasetMeta>, CliError> {
    let path = sidecar_path(embeddings);
    if path.exists() {
        Ok(Some(DatasetMeta::load(&path)?))
    } else {
        Ok(None)
    }
}

pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let payload = serde_json::json!({
                "category": e.category(),
                "message": e.to_string(),
            });
            eprintln!("{payload}");
            1
        }
    }
}

/// Runs one parsed invocation inside a worker pool of the requested size.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let workers = cli.workers.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::InvalidArgument(e.to_string()))?;
    let seed = cli.seed;
    pool.install(|| dispatch(cli.command, seed, workers))
}

fn dispatch(command: Command, seed: u64, workers: usize) -> Result<(), CliError> {
    match command {
        Command::Partition {
            metadata,
            spec,
            out,
        } => run_partition(&metadata, &spec, &out, seed, workers),
        Command::Synth { spec, schema, out } => run_synth(&spec, &schema, &out, seed, workers),
        Command::TrainExtractors {
            embeddings,
            index,
            dev_embeddings,
            dev_index,
            protocol,
            schema,
            epochs,
            lr,
            batch,
            eer_pooling,
            normalize,
            out,
        } => run_train_extractors(TrainExtractorArgs {
            embeddings,
            index,
            dev_embeddings,
            dev_index,
            protocol,
            schema,
            epochs,
            lr,
            batch,
            eer_pooling,
            normalize,
            out,
            seed,
            workers,
        }),
        Command::Extract {
            embeddings,
            index,
            model,
            out,
        } => run_extract(&embeddings, &index, &model, &out, seed, workers),
        Command::TrainBackend {
            embeddings,
            index,
            protocol,
            model,
            task,
            schema,
            alpha,
            max_depth,
            min_leaf,
            reg,
            out,
        } => run_train_backend(TrainBackendArgs {
            embeddings,
            index,
            protocol,
            model,
            task,
            schema,
            alpha,
            max_depth,
            min_leaf,
            reg,
            out,
            seed,
            workers,
        }),
        Command::Eval {
            embeddings,
            index,
            protocol,
            model,
            schema,
            eer_averaging,
            out,
        } => run_eval(EvalArgs {
            embeddings,
            index,
            protocol,
            model,
            schema,
            eer_averaging,
            out,
            seed,
            workers,
        }),
        Command::Explain {
            embeddings,
            index,
            model,
            schema,
            background,
            background_index,
            background_n,
            shap,
            shap_n,
            limit,
            out,
        } => run_explain(ExplainArgs {
            embeddings,
            index,
            model,
            schema,
            background,
            background_index,
            background_n,
            shap,
            shap_n,
            limit,
            out,
            seed,
            workers,
        }),
        Command::Hamming {
            schema,
            confusion,
            out,
        } => run_hamming(&schema, confusion.as_deref(), &out, seed, workers),
    }
}

fn run_partition(
    metadata_path: &Path,
    spec_path: &Path,
    out: &Path,
    seed: u64,
    workers: usize,
) -> Result<(), CliError> {
    let mut ctx = RunContext::new("partition", out, seed, workers)?;
    ctx.input("metadata", metadata_path)?;
    ctx.input("spec", spec_path)?;

    let metadata = protogen::load_metadata(metadata_path)?;
    let spec = protogen::PartitionSpec::load(spec_path)?;
    let split = protogen::build_attr17(&metadata, &spec)?;

    let protocol_path = ctx.out.join("protocol.txt");
    split.save(&protocol_path)?;
    ctx.output(&protocol_path)?;
    ctx.finish()
}

fn run_synth(
    spec_path: &Path,
    schema_path: &Path,
    out: &Path,
    seed: u64,
    workers: usize,
) -> Result<(), CliError> {
    let mut ctx = RunContext::new("synth", out, seed, workers)?;
    ctx.input("spec", spec_path)?;
    ctx.input("schema", schema_path)?;

    let spec = protogen::SynthSpec::load(spec_path)?;
    let schema = AttributeSchema::load(schema_path)?;
    let generated = protogen::synth_generate(&schema, &spec)?;

    write_dataset(&mut ctx, "train", &generated.train, "cm", None)?;
    write_dataset(&mut ctx, "dev", &generated.dev, "cm", None)?;
    write_dataset(&mut ctx, "eval", &generated.eval, "cm", None)?;
    ctx.finish()
}

struct TrainExtractorArgs {
    embeddings: PathBuf,
    index: PathBuf,
    dev_embeddings: Option<PathBuf>,
    dev_index: Option<PathBuf>,
    protocol: Option<PathBuf>,
    schema: PathBuf,
    epochs: usize,
    lr: f64,
    batch: usize,
    eer_pooling: Averaging,
    normalize: bool,
    out: PathBuf,
    seed: u64,
    workers: usize,
}

fn run_train_extractors(args: TrainExtractorArgs) -> Result<(), CliError> {
    let mut ctx = RunContext::new("train-extractors", &args.out, args.seed, args.workers)?;
    ctx.input("embeddings", &args.embeddings)?;
    ctx.input("index", &args.index)?;
    ctx.input("schema", &args.schema)?;
    ctx.manifest.arg("epochs", args.epochs);
    ctx.manifest.arg("lr", args.lr);
    ctx.manifest.arg("batch", args.batch);
    ctx.manifest.arg("normalize", args.normalize);
    ctx.manifest.arg(
        "eer_pooling",
        match args.eer_pooling {
            Averaging::Pooled => "pooled",
            Averaging::Macro => "macro",
        },
    );

    let schema = AttributeSchema::load(&args.schema)?;
    let full = load_embeddings(&args.embeddings, &args.index)?;
    let (train, dev) = match (&args.protocol, &args.dev_embeddings, &args.dev_index) {
        (Some(protocol_path), None, None) => {
            ctx.input("protocol", protocol_path)?;
            let protocol = ProtocolSplit::load(protocol_path)?;
            (
                protocol.select(&full, Partition::Train),
                protocol.select(&full, Partition::Dev),
            )
        }
        (None, Some(dev_emb), Some(dev_idx)) => {
            ctx.input("dev_embeddings", dev_emb)?;
            ctx.input("dev_index", dev_idx)?;
            (full, load_embeddings(dev_emb, dev_idx)?)
        }
        _ => {
            return Err(CliError::InvalidArgument(
                "pass either --protocol or both --dev-embeddings and --dev-index".into(),
            ))
        }
    };
    let (train, dev) = if args.normalize {
        (train.l2_normalized(), dev.l2_normalized())
    } else {
        (train, dev)
    };

    let cfg = BankConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        adam: AdamParams::with_lr(args.lr),
        eer_pooling: match args.eer_pooling {
            Averaging::Pooled => EerPooling::Pooled,
            Averaging::Macro => EerPooling::MacroPerValue,
        },
    };
    let (mut bank, _) = attribank::train_bank(&train, &dev, &schema, &cfg, args.seed)?;
    bank.train_info.normalized_inputs = args.normalize;

    attribank::save_bank(&bank, &ctx.out)?;
    let mut bank_files: Vec<PathBuf> = std::fs::read_dir(&ctx.out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n != "run_manifest.json"))
        .collect();
    bank_files.sort();
    for path in bank_files {
        ctx.output(&path)?;
    }
    ctx.finish()
}

fn run_extract(
    embeddings: &Path,
    index: &Path,
    bank_dir: &Path,
    out: &Path,
    seed: u64,
    workers: usize,
) -> Result<(), CliError> {
    let mut ctx = RunContext::new("extract", out, seed, workers)?;
    ctx.input("embeddings", embeddings)?;
    ctx.input("index", index)?;
    ctx.input("model", &bank_dir.join("manifest.json"))?;

    let bank = attribank::load_bank(bank_dir)?;
    let dataset = load_embeddings(embeddings, index)?;
    let dataset = if bank.train_info.normalized_inputs {
        dataset.l2_normalized()
    } else {
        dataset
    };
    let rho = attribank::extract_all(&bank, &dataset)?;
    write_dataset(
        &mut ctx,
        "embeddings",
        &rho,
        "prob_attr",
        Some(bank.schema_hash.clone()),
    )?;
    ctx.finish()
}

/// Class list and per-record class indices for a task. Records outside the
/// task's classes (bonafide under attribution) map to `None`.
fn task_classes(task: Task, dataset: &EmbeddingDataset) -> (Vec<String>, Vec<Option<usize>>) {
    match task {
        Task::Detection => {
            let classes = vec![BONAFIDE_LABEL.to_string(), "spoof".to_string()];
            let truths = dataset
                .records()
                .iter()
                .map(|r| Some(if r.is_bonafide() { 0 } else { 1 }))
                .collect();
            (classes, truths)
        }
        Task::Attribution => {
            let mut classes: Vec<String> = dataset
                .records()
                .iter()
                .filter(|r| !r.is_bonafide())
                .map(|r| r.label.clone())
                .collect();
            classes.sort();
            classes.dedup();
            let index: BTreeMap<&str, usize> = classes
                .iter()
                .enumerate()
                .map(|(i, c)| (c.as_str(), i))
                .collect();
            let truths = dataset
                .records()
                .iter()
                .map(|r| {
                    if r.is_bonafide() {
                        None
                    } else {
                        index.get(r.label.as_str()).copied()
                    }
                })
                .collect();
            (classes, truths)
        }
    }
}

struct TrainBackendArgs {
    embeddings: PathBuf,
    index: PathBuf,
    protocol: Option<PathBuf>,
    model: ModelKind,
    task: Task,
    schema: Option<PathBuf>,
    alpha: f64,
    max_depth: usize,
    min_leaf: usize,
    reg: f64,
    out: PathBuf,
    seed: u64,
    workers: usize,
}

fn run_train_backend(args: TrainBackendArgs) -> Result<(), CliError> {
    let mut ctx = RunContext::new("train-backend", &args.out, args.seed, args.workers)?;
    ctx.input("embeddings", &args.embeddings)?;
    ctx.input("index", &args.index)?;

    let sidecar = load_sidecar(&args.embeddings)?;
    let mut dataset = load_embeddings(&args.embeddings, &args.index)?;
    if let Some(protocol_path) = &args.protocol {
        ctx.input("protocol", protocol_path)?;
        let protocol = ProtocolSplit::load(protocol_path)?;
        dataset = protocol.select(&dataset, Partition::Train);
    }

    let schema = match &args.schema {
        Some(path) => {
            ctx.input("schema", path)?;
            Some(AttributeSchema::load(path)?)
        }
        None => None,
    };
    let schema_hash = schema.as_ref().map(|s| s.content_hash());
    if let (Some(meta), Some(hash)) = (&sidecar, &schema_hash) {
        if let Some(data_hash) = &meta.schema_hash {
            if data_hash != hash {
                return Err(CliError::SchemaMismatch {
                    model: hash.clone(),
                    data: data_hash.clone(),
                });
            }
        }
    }

    let (classes, truth_of) = task_classes(args.task, &dataset);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, truth) in truth_of.iter().enumerate() {
        if let Some(t) = truth {
            rows.push(dataset.vector_f64(i));
            labels.push(*t);
        }
    }
    if rows.is_empty() {
        return Err(CliError::Backend(BackendError::EmptyData));
    }

    let mut hyperparameters = BTreeMap::new();
    let model = match args.model {
        ModelKind::Nb => {
            let schema = schema
                .as_ref()
                .ok_or_else(|| CliError::InvalidArgument("--model nb requires --schema".into()))?;
            if dataset.dim() != schema.total_values() {
                return Err(CliError::Backend(BackendError::DimensionMismatch {
                    expected: schema.total_values(),
                    got: dataset.dim(),
                }));
            }
            hyperparameters.insert("alpha".into(), args.alpha.to_string());
            BackendModel::NaiveBayes(nb_fit(
                &rows,
                &labels,
                classes.len(),
                &schema.value_counts(),
                args.alpha,
            )?)
        }
        ModelKind::Dt => {
            hyperparameters.insert("max_depth".into(), args.max_depth.to_string());
            hyperparameters.insert("min_leaf".into(), args.min_leaf.to_string());
            BackendModel::Tree(tree_fit(
                &rows,
                &labels,
                classes.len(),
                args.max_depth,
                args.min_leaf,
                crate::rng::derive_u64(args.seed, "backend-tree", 0),
            )?)
        }
        ModelKind::Lr | ModelKind::Svm => {
            hyperparameters.insert("reg".into(), args.reg.to_string());
            let objective = if args.model == ModelKind::Lr {
                Objective::Logistic
            } else {
                Objective::Hinge
            };
            let (model, _) = ovr_fit(
                &rows,
                &labels,
                classes.len(),
                objective,
                args.reg,
                crate::rng::derive_u64(args.seed, "backend-ovr", 0),
            )?;
            for (c, diag) in model.diagnostics.iter().enumerate() {
                if !diag.converged && objective == Objective::Logistic {
                    eprintln!(
                        "warning: class {c} fit stopped at gradient norm {:.3e} after {} iterations",
                        diag.final_grad_norm, diag.iterations
                    );
                }
            }
            match objective {
                Objective::Logistic => BackendModel::Logistic(model),
                Objective::Hinge => BackendModel::Svm(model),
            }
        }
    };

    let model_file = ModelFile {
        format_version: 1,
        task: args.task,
        classes,
        schema_hash,
        score_normalization: "none".into(),
        hyperparameters,
        seed: args.seed,
        model,
    };
    let model_path = ctx.out.join("model.json");
    write_json(&model_path, &model_file)?;
    ctx.output(&model_path)?;
    ctx.finish()
}

struct EvalArgs {
    embeddings: PathBuf,
    index: PathBuf,
    protocol: Option<PathBuf>,
    model: PathBuf,
    schema: Option<PathBuf>,
    eer_averaging: Averaging,
    out: PathBuf,
    seed: u64,
    workers: usize,
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut ctx = RunContext::new("eval", &args.out, args.seed, args.workers)?;
    ctx.input("embeddings", &args.embeddings)?;
    ctx.input("index", &args.index)?;
    ctx.input("model", &args.model)?;

    let model_file = ModelFile::load(&args.model)?;
    let sidecar = load_sidecar(&args.embeddings)?;
    if let (Some(meta), Some(model_hash)) = (&sidecar, &model_file.schema_hash) {
        if let Some(data_hash) = &meta.schema_hash {
            if data_hash != model_hash {
                return Err(CliError::SchemaMismatch {
                    model: model_hash.clone(),
                    data: data_hash.clone(),
                });
            }
        }
    }

    let mut dataset = load_embeddings(&args.embeddings, &args.index)?;
    if let Some(protocol_path) = &args.protocol {
        ctx.input("protocol", protocol_path)?;
        let protocol = ProtocolSplit::load(protocol_path)?;
        dataset = protocol.select(&dataset, Partition::Eval);
    }

    let schema = match &args.schema {
        Some(path) => {
            ctx.input("schema", path)?;
            Some(AttributeSchema::load(path)?)
        }
        None => None,
    };
    if let (Some(s), Some(model_hash)) = (&schema, &model_file.schema_hash) {
        let hash = s.content_hash();
        if &hash != model_hash {
            return Err(CliError::SchemaMismatch {
                model: model_hash.clone(),
                data: hash,
            });
        }
    }

    let classes = &model_file.classes;
    let class_index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut scores: Vec<Vec<f64>> = Vec::new();
    let mut truths: Vec<usize> = Vec::new();
    let mut eval_labels: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut skipped = 0usize;
    for (i, r) in dataset.records().iter().enumerate() {
        let truth = match model_file.task {
            Task::Detection => Some(if r.is_bonafide() { 0 } else { 1 }),
            Task::Attribution => {
                if r.is_bonafide() {
                    None
                } else {
                    class_index.get(r.label.as_str()).copied()
                }
            }
        };
        let Some(truth) = truth else {
            skipped += 1;
            continue;
        };
        let x = dataset.vector_f64(i);
        scores.push(model_file.model.scores(&x)?);
        truths.push(truth);
        eval_labels.push(r.label.clone());
        rows.push(x);
    }
    if scores.is_empty() {
        return Err(CliError::Metrics(MetricsError::EmptyPool));
    }

    let preds: Vec<usize> = scores
        .iter()
        .map(|s| crate::backends::argmax_lowest(s))
        .collect();
    let cm = metrics::ConfusionMatrix::from_pairs(classes.len(), &truths, &preds)?;
    let balanced_accuracy = metrics::balanced_accuracy(&cm)?;

    let balanced_accuracy_grouped = match (&schema, model_file.task) {
        (Some(s), Task::Attribution) => {
            let groups = s.configuration_groups(classes);
            Some(metrics::balanced_accuracy_grouped(&cm, &groups)?)
        }
        _ => None,
    };

    let (eer, threshold, averaging, detection_target) = match model_file.task {
        Task::Detection => {
            // Spoof-as-target polarity, score = spoof minus bonafide.
            let mut pool = metrics::ScorePool::default();
            for (s, &t) in scores.iter().zip(&truths) {
                let detection_score = s[1] - s[0];
                if t == 1 {
                    pool.target.push(detection_score);
                } else {
                    pool.nontarget.push(detection_score);
                }
            }
            let point = metrics::eer(&pool)?;
            (
                point.eer,
                Some(point.threshold),
                "pooled".to_string(),
                Some("spoof".to_string()),
            )
        }
        Task::Attribution => match args.eer_averaging {
            Averaging::Pooled => {
                let point = metrics::multiclass_eer(&scores, &truths)?;
                (point.eer, Some(point.threshold), "pooled".to_string(), None)
            }
            Averaging::Macro => {
                let eer = metrics::multiclass_eer_macro(&scores, &truths)?;
                (eer, None, "macro".to_string(), None)
            }
        },
    };

    let flow = match &schema {
        Some(s) if dataset.dim() == s.total_values() => {
            Some(metrics::flow_report(&rows, &eval_labels, s)?)
        }
        _ => None,
    };

    let report = MetricsReport {
        format_version: 1,
        task: model_file.task,
        classes: classes.clone(),
        trials: truths.len(),
        skipped_trials: skipped,
        eer,
        eer_threshold: threshold,
        eer_averaging: averaging,
        detection_target,
        balanced_accuracy,
        balanced_accuracy_grouped,
        confusion: cm.counts().to_vec(),
        flow,
        model_hash: crate::manifest::sha256_file(&args.model)?,
    };
    let metrics_path = ctx.out.join("metrics.json");
    write_json(&metrics_path, &report)?;
    ctx.output(&metrics_path)?;

    println!("eer {eer:.6}");
    println!("balanced_accuracy {balanced_accuracy:.6}");
    ctx.finish()
}

struct ExplainArgs {
    embeddings: PathBuf,
    index: PathBuf,
    model: PathBuf,
    schema: PathBuf,
    background: PathBuf,
    background_index: PathBuf,
    background_n: usize,
    shap: ShapMode,
    shap_n: usize,
    limit: Option<usize>,
    out: PathBuf,
    seed: u64,
    workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub utterance_id: String,
    pub label: String,
    pub class: String,
    pub base: f64,
    pub prediction: f64,
    pub phi: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_err: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapleyFile {
    pub format_version: u32,
    pub estimator: String,
    pub background_rows: usize,
    pub feature_names: Vec<String>,
    pub records: Vec<ExplanationRecord>,
}

fn run_explain(args: ExplainArgs) -> Result<(), CliError> {
    use rand::seq::SliceRandom;
    use rayon::prelude::*;

    let mut ctx = RunContext::new("explain", &args.out, args.seed, args.workers)?;
    ctx.input("embeddings", &args.embeddings)?;
    ctx.input("index", &args.index)?;
    ctx.input("model", &args.model)?;
    ctx.input("schema", &args.schema)?;
    ctx.input("background", &args.background)?;
    ctx.manifest.arg("shap_n", args.shap_n);
    ctx.manifest.arg("background_n", args.background_n);
    ctx.manifest.arg("rank_scope", "per-class");

    let model_file = ModelFile::load(&args.model)?;
    let schema = AttributeSchema::load(&args.schema)?;
    if let Some(model_hash) = &model_file.schema_hash {
        let hash = schema.content_hash();
        if &hash != model_hash {
            return Err(CliError::SchemaMismatch {
                model: model_hash.clone(),
                data: hash,
            });
        }
    }
    let dataset = load_embeddings(&args.embeddings, &args.index)?;
    let background_set = load_embeddings(&args.background, &args.background_index)?;
    if background_set.dim() != dataset.dim() {
        return Err(CliError::Backend(BackendError::DimensionMismatch {
            expected: dataset.dim(),
            got: background_set.dim(),
        }));
    }

    // Seeded background subsample.
    let mut background: Vec<Vec<f64>> = (0..background_set.len())
        .map(|i| background_set.vector_f64(i))
        .collect();
    if background.len() > args.background_n {
        let mut rng = crate::rng::derive_rng(args.seed, "explain-background", 0);
        background.shuffle(&mut rng);
        background.truncate(args.background_n);
    }

    let n_utts = args.limit.unwrap_or(dataset.len()).min(dataset.len());
    let n_classes = model_file.classes.len();
    let pairs: Vec<(usize, usize)> = (0..n_utts)
        .flat_map(|u| (0..n_classes).map(move |c| (u, c)))
        .collect();

    let records: Result<Vec<ExplanationRecord>, CliError> = pairs
        .par_iter()
        .map(|&(u, c)| {
            let x = dataset.vector_f64(u);
            let model = &model_file.model;
            let f = |v: &[f64]| model.explanation_score(c, v).unwrap_or(f64::NAN);
            let report = match args.shap {
                ShapMode::Exact => explain::shapley_exact(&f, &x, &background)?,
                ShapMode::Sample => explain::shapley_sample(
                    &f,
                    &x,
                    &background,
                    args.shap_n,
                    crate::rng::derive_u64(
                        args.seed,
                        "explain-report",
                        (u * n_classes + c) as u64,
                    ),
                )?,
            };
            let record = &dataset.records()[u];
            Ok(ExplanationRecord {
                utterance_id: record.utterance_id.clone(),
                label: record.label.clone(),
                class: model_file.classes[c].clone(),
                base: report.base,
                prediction: report.prediction,
                phi: report.phi,
                std_err: report.std_err,
            })
        })
        .collect();
    let records = records?;

    let estimator = match args.shap {
        ShapMode::Exact => "exact".to_string(),
        ShapMode::Sample => format!("permutation({})", args.shap_n),
    };
    let feature_names: Vec<String> = schema
        .attributes()
        .iter()
        .flat_map(|a| a.values.iter().map(move |v| format!("{}.{}", a.name, v)))
        .collect();

    let shapley_path = ctx.out.join("shapley.json");
    write_json(
        &shapley_path,
        &ShapleyFile {
            format_version: 1,
            estimator: estimator.clone(),
            background_rows: background.len(),
            feature_names: feature_names.clone(),
            records: records.clone(),
        },
    )?;
    ctx.output(&shapley_path)?;

    let phi_vectors: Vec<Vec<f64>> = records.iter().map(|r| r.phi.clone()).collect();
    let table = explain::rank_aggregate(&phi_vectors, &schema)?;
    let mut text = String::new();
    text.push_str("schema_version: 1\n");
    text.push_str("kind: shapley-ranking\n");
    text.push_str(&format!("estimator: {estimator}\n"));
    text.push_str("rank_scope: per-class\n");
    text.push_str(&format!("reports: {}\n", table.reports));
    text.push_str("[values]\n");
    for (name, rank) in feature_names.iter().zip(&table.value_ranks) {
        text.push_str(&format!("{name}\t{rank:.6}\n"));
    }
    text.push_str("[attributes]\n");
    for (attr, rank) in schema.attributes().iter().zip(&table.attribute_ranks) {
        text.push_str(&format!("{}\t{rank:.6}\n", attr.name));
    }
    let ranking_path = ctx.out.join("ranking.txt");
    std::fs::write(&ranking_path, text)?;
    ctx.output(&ranking_path)?;
    ctx.finish()
}

fn run_hamming(
    schema_path: &Path,
    confusion: Option<&Path>,
    out: &Path,
    seed: u64,
    workers: usize,
) -> Result<(), CliError> {
    let mut ctx = RunContext::new("hamming", out, seed, workers)?;
    ctx.input("schema", schema_path)?;

    let schema = AttributeSchema::load(schema_path)?;
    let matrix = protogen::hamming_matrix(&schema);

    let mut text = String::new();
    text.push_str("schema_version: 1\n");
    text.push_str("kind: hamming\n");
    text.push_str(&format!("attacks: {}\n", matrix.attacks.join(" ")));
    for row in &matrix.distances {
        let cells: Vec<String> = row.iter().map(|d| d.to_string()).collect();
        text.push_str(&cells.join("\t"));
        text.push('\n');
    }
    let matrix_path = ctx.out.join("hamming.txt");
    std::fs::write(&matrix_path, text)?;
    ctx.output(&matrix_path)?;

    if let Some(confusion_path) = confusion {
        ctx.input("confusion", confusion_path)?;
        let report = MetricsReport::load(confusion_path)?;
        // Rows and columns follow the eval report's class order.
        let mut distances = Vec::with_capacity(report.classes.len());
        for a in &report.classes {
            let row_a = schema.attack_values(a).ok_or_else(|| {
                CliError::InvalidArgument(format!("class {a:?} is not in the schema"))
            })?;
            let row: Vec<u32> = report
                .classes
                .iter()
                .map(|b| {
                    let row_b = schema.attack_values(b).unwrap();
                    2 * row_a.iter().zip(row_b).filter(|(x, y)| x != y).count() as u32
                })
                .collect();
            distances.push(row);
        }
        let confusability = protogen::confusability_check(&report.confusion, &distances)?;
        let confusability_path = ctx.out.join("confusability.json");
        write_json(
            &confusability_path,
            &serde_json::json!({
                "format_version": 1,
                "classes": report.classes,
                "spearman_per_class": confusability.per_attack,
                "spearman_mean": confusability.mean,
            }),
        )?;
        ctx.output(&confusability_path)?;
    }
    ctx.finish()
}
