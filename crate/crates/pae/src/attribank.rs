//! Bank of per-attribute probability extractors.
//!
//! One small MLP per attribute maps a CM embedding of dimension D to a
//! distribution over that attribute's values (`D -> 64 -> 32 -> M_l`,
//! softmax head). Extractors train on spoofed utterances only; the epoch
//! whose development-set value-detection EER is lowest is retained, ties
//! resolved toward the earliest epoch. Stacking the L output distributions
//! gives the probabilistic attribute embedding of an utterance.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{AttributeSchema, DataError, EmbeddingDataset, EmbeddingRecord};
use crate::metrics::{self, MetricsError};
use crate::nnet::{self, Activation, AdamParams, Mlp, NnetError, TrainConfig};

/// Hidden widths shared by every extractor.
pub const HIDDEN_DIMS: [usize; 2] = [64, 32];

#[derive(Debug, Error)]
pub enum BankError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no spoofed utterances with attribute ground truth")]
    NoSpoofedData,
    #[error("attack label {label:?} is not in the schema's attack table")]
    UnknownAttack { label: String },
    #[error("attribute {attribute:?} has a single value in the training data; its EER is undefined")]
    AttributeWithSingleValueInTrain { attribute: String },
    #[error("score pool is degenerate: needs at least one target and one non-target")]
    DegenerateScorePool,
    #[error("expected input of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("block {block} is not a probability simplex")]
    InvalidSimplex { block: usize },
    #[error("extraction failed for utterance {utterance_id:?}")]
    ExtractFailed {
        utterance_id: String,
        #[source]
        source: NnetError,
    },
    #[error("bank manifest: {0}")]
    ManifestParse(String),
    #[error("bank shape: {0}")]
    BankShape(String),
}

impl BankError {
    pub fn category(&self) -> &'static str {
        match self {
            BankError::Data(e) => e.category(),
            BankError::Nnet(e) => e.category(),
            BankError::Metrics(e) => e.category(),
            BankError::Io(_) => "Io",
            BankError::NoSpoofedData => "NoSpoofedData",
            BankError::UnknownAttack { .. } => "UnknownAttack",
            BankError::AttributeWithSingleValueInTrain { .. } => "AttributeWithSingleValueInTrain",
            BankError::DegenerateScorePool => "DegenerateScorePool",
            BankError::DimensionMismatch { .. } => "DimensionMismatch",
            BankError::InvalidSimplex { .. } => "InvalidSimplex",
            BankError::ExtractFailed { .. } => "ExtractFailed",
            BankError::ManifestParse(_) => "ManifestParse",
            BankError::BankShape(_) => "BankShape",
        }
    }
}

/// How development-set value-detection scores are pooled into an EER.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EerPooling {
    /// One pool per attribute: the true value's probability is a target
    /// score, the remaining `M_l - 1` probabilities are non-targets.
    Pooled,
    /// One EER per value, then the mean over values.
    MacroPerValue,
}

#[derive(Debug, Clone)]
pub struct BankConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub eer_pooling: EerPooling,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            adam: AdamParams::default(),
            eer_pooling: EerPooling::Pooled,
        }
    }
}

/// Training provenance stored alongside the extractors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankTrainInfo {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eer_pooling: EerPooling,
    pub normalized_inputs: bool,
}

#[derive(Debug, Clone)]
pub struct ExtractorBank {
    pub input_dim: usize,
    pub schema_hash: String,
    pub attribute_names: Vec<String>,
    pub extractors: Vec<Mlp>,
    /// 1-based epoch retained per attribute.
    pub selected_epoch: Vec<usize>,
    /// Development EER at the retained epoch.
    pub dev_eer: Vec<f64>,
    pub train_info: BankTrainInfo,
}

impl ExtractorBank {
    pub fn num_attributes(&self) -> usize {
        self.extractors.len()
    }

    pub fn output_widths(&self) -> Vec<usize> {
        self.extractors.iter().map(|m| m.output_dim()).collect()
    }

    pub fn total_values(&self) -> usize {
        self.extractors.iter().map(|m| m.output_dim()).sum()
    }
}

/// Per-attribute development EER curve over epochs, for analysis and for
/// checking that the retained epoch is a minimizer.
#[derive(Debug, Clone)]
pub struct BankTrainReport {
    pub dev_eer_curves: Vec<Vec<f64>>,
}

/// Concatenation of L per-attribute probability distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbAttrEmbedding {
    blocks: Vec<Vec<f64>>,
}

impl ProbAttrEmbedding {
    const SIMPLEX_TOL: f64 = 1e-6;

    pub fn from_blocks(blocks: Vec<Vec<f64>>) -> Result<Self, BankError> {
        for (i, block) in blocks.iter().enumerate() {
            let sum: f64 = block.iter().sum();
            if block.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > Self::SIMPLEX_TOL {
                return Err(BankError::InvalidSimplex { block: i });
            }
        }
        Ok(Self { blocks })
    }

    /// Splits a flat length-M vector along the given block widths.
    pub fn from_flat(widths: &[usize], flat: &[f64]) -> Result<Self, BankError> {
        let total: usize = widths.iter().sum();
        if flat.len() != total {
            return Err(BankError::DimensionMismatch {
                expected: total,
                got: flat.len(),
            });
        }
        let mut blocks = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for &w in widths {
            blocks.push(flat[offset..offset + w].to_vec());
            offset += w;
        }
        Self::from_blocks(blocks)
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn block(&self, l: usize) -> &[f64] {
        &self.blocks[l]
    }

    /// Flat view of length M.
    pub fn flat(&self) -> Vec<f64> {
        self.blocks.concat()
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

/// Spoofed subset with per-attribute value truths resolved from the schema.
struct SpoofedView {
    inputs: Vec<Vec<f64>>,
    /// truths[l][n] = value index of attribute l for spoofed utterance n.
    truths: Vec<Vec<usize>>,
}

fn spoofed_view(
    dataset: &EmbeddingDataset,
    schema: &AttributeSchema,
) -> Result<SpoofedView, BankError> {
    let l = schema.num_attributes();
    let mut inputs = Vec::new();
    let mut truths = vec![Vec::new(); l];
    for (i, r) in dataset.records().iter().enumerate() {
        if r.is_bonafide() {
            continue;
        }
        let row = schema
            .attack_values(&r.label)
            .ok_or_else(|| BankError::UnknownAttack {
                label: r.label.clone(),
            })?;
        inputs.push(dataset.vector_f64(i));
        for (t, &m) in truths.iter_mut().zip(row) {
            t.push(m);
        }
    }
    if inputs.is_empty() {
        return Err(BankError::NoSpoofedData);
    }
    Ok(SpoofedView { inputs, truths })
}

/// Trains the L extractors and keeps, per attribute, the epoch snapshot with
/// the lowest development EER (earliest epoch on ties). Bonafide records are
/// filtered out automatically; the attribute trainings run concurrently with
/// seeds derived per attribute.
pub fn train_bank(
    train: &EmbeddingDataset,
    dev: &EmbeddingDataset,
    schema: &AttributeSchema,
    cfg: &BankConfig,
    seed: u64,
) -> Result<(ExtractorBank, BankTrainReport), BankError> {
    let train_view = spoofed_view(train, schema)?;
    let dev_view = spoofed_view(dev, schema)?;
    let dim = train.dim();
    if dev.dim() != dim {
        return Err(BankError::DimensionMismatch {
            expected: dim,
            got: dev.dim(),
        });
    }

    for l in 0..schema.num_attributes() {
        let mut present = train_view.truths[l].clone();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return Err(BankError::AttributeWithSingleValueInTrain {
                attribute: schema.attributes()[l].name.clone(),
            });
        }
    }

    struct AttrResult {
        model: Mlp,
        selected_epoch: usize,
        dev_eer: f64,
        curve: Vec<f64>,
    }

    let results: Vec<Result<AttrResult, BankError>> = (0..schema.num_attributes())
        .into_par_iter()
        .map(|l| {
            let width = schema.value_count(l);
            let mut init_rng = crate::rng::derive_rng(seed, "attribank-init", l as u64);
            let net = Mlp::new(
                &[dim, HIDDEN_DIMS[0], HIDDEN_DIMS[1], width],
                &[Activation::Relu, Activation::Relu, Activation::Softmax],
                &mut init_rng,
            );
            let targets: Vec<Vec<f64>> = train_view.truths[l]
                .iter()
                .map(|&m| {
                    let mut y = vec![0.0; width];
                    y[m] = 1.0;
                    y
                })
                .collect();
            let run = nnet::train(
                &net,
                &train_view.inputs,
                &targets,
                &TrainConfig {
                    epochs: cfg.epochs,
                    batch_size: cfg.batch_size,
                    adam: cfg.adam,
                },
                crate::rng::derive_u64(seed, "attribank-train", l as u64),
            )?;

            let mut curve = Vec::with_capacity(run.snapshots.len());
            let mut best: Option<(usize, f64)> = None;
            for (epoch_idx, snapshot) in run.snapshots.iter().enumerate() {
                let preds: Result<Vec<Vec<f64>>, NnetError> = dev_view
                    .inputs
                    .iter()
                    .map(|x| snapshot.forward(x))
                    .collect();
                let preds = preds?;
                let e = match cfg.eer_pooling {
                    EerPooling::Pooled => attribute_value_eer(&preds, &dev_view.truths[l])?,
                    EerPooling::MacroPerValue => {
                        attribute_value_eer_macro(&preds, &dev_view.truths[l])?
                    }
                };
                curve.push(e);
                if best.is_none_or(|(_, b)| e < b) {
                    best = Some((epoch_idx + 1, e));
                }
            }
            let (selected_epoch, dev_eer) = best.expect("at least one epoch");
            Ok(AttrResult {
                model: run.snapshots[selected_epoch - 1].clone(),
                selected_epoch,
                dev_eer,
                curve,
            })
        })
        .collect();

    let mut extractors = Vec::new();
    let mut selected_epoch = Vec::new();
    let mut dev_eer = Vec::new();
    let mut curves = Vec::new();
    for r in results {
        let r = r?;
        extractors.push(r.model);
        selected_epoch.push(r.selected_epoch);
        dev_eer.push(r.dev_eer);
        curves.push(r.curve);
    }

    Ok((
        ExtractorBank {
            input_dim: dim,
            schema_hash: schema.content_hash(),
            attribute_names: schema
                .attributes()
                .iter()
                .map(|a| a.name.clone())
                .collect(),
            extractors,
            selected_epoch,
            dev_eer,
            train_info: BankTrainInfo {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                lr: cfg.adam.lr,
                seed,
                eer_pooling: cfg.eer_pooling,
                normalized_inputs: false,
            },
        },
        BankTrainReport {
            dev_eer_curves: curves,
        },
    ))
}

/// Pools, over utterances and values, the predicted probability of each
/// value — target when it is the utterance's true value — and returns the
/// EER of the pooled sets.
pub fn attribute_value_eer(predictions: &[Vec<f64>], truths: &[usize]) -> Result<f64, BankError> {
    let pool = metrics::value_score_pool(predictions, truths);
    if pool.target.is_empty() || pool.nontarget.is_empty() {
        return Err(BankError::DegenerateScorePool);
    }
    Ok(metrics::eer(&pool)?.eer)
}

/// Macro variant: one EER per value (when both sides are populated), then
/// the mean over values.
pub fn attribute_value_eer_macro(
    predictions: &[Vec<f64>],
    truths: &[usize],
) -> Result<f64, BankError> {
    let width = predictions.first().map_or(0, |p| p.len());
    let mut sum = 0.0;
    let mut used = 0;
    for m in 0..width {
        let mut pool = metrics::ScorePool::default();
        for (pred, &truth) in predictions.iter().zip(truths) {
            if truth == m {
                pool.target.push(pred[m]);
            } else {
                pool.nontarget.push(pred[m]);
            }
        }
        if pool.target.is_empty() || pool.nontarget.is_empty() {
            continue;
        }
        sum += metrics::eer(&pool)?.eer;
        used += 1;
    }
    if used == 0 {
        return Err(BankError::DegenerateScorePool);
    }
    Ok(sum / used as f64)
}

/// Runs every extractor on one CM embedding; blocks come back in schema
/// attribute order.
pub fn extract(bank: &ExtractorBank, embedding: &[f64]) -> Result<ProbAttrEmbedding, BankError> {
    if embedding.len() != bank.input_dim {
        return Err(BankError::DimensionMismatch {
            expected: bank.input_dim,
            got: embedding.len(),
        });
    }
    let blocks: Result<Vec<Vec<f64>>, NnetError> = bank
        .extractors
        .iter()
        .map(|net| net.forward(embedding))
        .collect();
    ProbAttrEmbedding::from_blocks(blocks?)
}

/// Pure parallel map over a dataset, preserving record order, ids, and
/// labels. Bonafide records are embedded like any other.
pub fn extract_all(
    bank: &ExtractorBank,
    dataset: &EmbeddingDataset,
) -> Result<EmbeddingDataset, BankError> {
    let total = bank.total_values();
    let rows: Result<Vec<EmbeddingRecord>, BankError> = dataset
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let rho = extract(bank, &dataset.vector_f64(i)).map_err(|e| match e {
                BankError::Nnet(source) => BankError::ExtractFailed {
                    utterance_id: r.utterance_id.clone(),
                    source,
                },
                other => other,
            })?;
            Ok(EmbeddingRecord {
                utterance_id: r.utterance_id.clone(),
                label: r.label.clone(),
                speaker_id: r.speaker_id.clone(),
                gender: r.gender,
                vector: rho.flat().iter().map(|&v| v as f32).collect(),
            })
        })
        .collect();
    Ok(EmbeddingDataset::new(total, rows?)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    format_version: u32,
    input_dim: usize,
    schema_hash: String,
    train_info: BankTrainInfo,
    attributes: Vec<BankManifestAttribute>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifestAttribute {
    name: String,
    width: usize,
    selected_epoch: usize,
    dev_eer: f64,
    checkpoint: String,
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes the bank as one checkpoint per attribute plus `manifest.json`.
pub fn save_bank(bank: &ExtractorBank, dir: &Path) -> Result<(), BankError> {
    std::fs::create_dir_all(dir)?;
    let mut attributes = Vec::with_capacity(bank.extractors.len());
    for (l, net) in bank.extractors.iter().enumerate() {
        let checkpoint = format!("attr{:02}_{}.nnet", l, slug(&bank.attribute_names[l]));
        nnet::save_checkpoint(net, &dir.join(&checkpoint))?;
        attributes.push(BankManifestAttribute {
            name: bank.attribute_names[l].clone(),
            width: net.output_dim(),
            selected_epoch: bank.selected_epoch[l],
            dev_eer: bank.dev_eer[l],
            checkpoint,
        });
    }
    let manifest = BankManifest {
        format_version: 1,
        input_dim: bank.input_dim,
        schema_hash: bank.schema_hash.clone(),
        train_info: bank.train_info.clone(),
        attributes,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("bank manifest serialization");
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn load_bank(dir: &Path) -> Result<ExtractorBank, BankError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: BankManifest =
        serde_json::from_str(&text).map_err(|e| BankError::ManifestParse(e.to_string()))?;
    if manifest.format_version != 1 {
        return Err(BankError::ManifestParse(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let mut extractors = Vec::with_capacity(manifest.attributes.len());
    for attr in &manifest.attributes {
        let net = nnet::load_checkpoint(&dir.join(&attr.checkpoint))?;
        if net.output_dim() != attr.width || net.input_dim() != manifest.input_dim {
            return Err(BankError::BankShape(format!(
                "checkpoint {} is {}x{}, manifest says {}x{}",
                attr.checkpoint,
                net.input_dim(),
                net.output_dim(),
                manifest.input_dim,
                attr.width
            )));
        }
        extractors.push(net);
    }
    Ok(ExtractorBank {
        input_dim: manifest.input_dim,
        schema_hash: manifest.schema_hash,
        attribute_names: manifest.attributes.iter().map(|a| a.name.clone()).collect(),
        extractors,
        selected_epoch: manifest
            .attributes
            .iter()
            .map(|a| a.selected_epoch)
            .collect(),
        dev_eer: manifest.attributes.iter().map(|a| a.dev_eer).collect(),
        train_info: manifest.train_info,
    })
}
