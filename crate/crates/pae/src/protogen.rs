//! Protocol construction, attack confusability, and synthetic datasets.
//!
//! The protocol builder repartitions utterances per attack. Attacks whose
//! pools come from the original training data split train/dev by ratio while
//! their original development pool becomes the new evaluation set. Attacks
//! pooled from the original evaluation data send every disjoint-speaker
//! utterance to eval, top eval up with a quota of speaker-common utterances,
//! and split the remaining common pool into train/dev. All integer counts
//! come from largest-remainder rounding; all shuffles are seeded per attack.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{
    AttributeSchema, DataError, EmbeddingDataset, EmbeddingRecord, Partition, ProtocolSplit,
    SpeakerTag, BONAFIDE_LABEL,
};

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("partition spec: {0}")]
    InvalidSpec(String),
    #[error("attack {attack:?} has no partition rule")]
    UnknownAttack { attack: String },
    #[error("speaker {speaker:?} is in neither the common nor the disjoint list")]
    MissingSpeaker { speaker: String },
    #[error("utterance {utterance_id:?} has origin {origin:?}, which its attack's rule does not cover")]
    UnhandledOrigin {
        utterance_id: String,
        origin: &'static str,
    },
    #[error("matrices disagree: {0}")]
    DimensionMismatch(String),
    #[error("{path}:{line}: malformed metadata row: {reason}")]
    MalformedRow {
        path: std::path::PathBuf,
        line: usize,
        reason: String,
    },
}

impl ProtoError {
    pub fn category(&self) -> &'static str {
        match self {
            ProtoError::Data(e) => e.category(),
            ProtoError::Io(_) => "Io",
            ProtoError::InvalidSpec(_) => "InvalidSpec",
            ProtoError::UnknownAttack { .. } => "UnknownAttack",
            ProtoError::MissingSpeaker { .. } => "MissingSpeaker",
            ProtoError::UnhandledOrigin { .. } => "UnhandledOrigin",
            ProtoError::DimensionMismatch(_) => "DimensionMismatch",
            ProtoError::MalformedRow { .. } => "MalformedRow",
        }
    }
}

/// One utterance of the corpus to be repartitioned, with its original
/// protocol partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceMeta {
    pub utterance_id: String,
    pub attack: String,
    pub speaker: String,
    pub origin: Partition,
}

/// Reads `utterance_id \t attack \t speaker \t origin` rows.
pub fn load_metadata(path: &Path) -> Result<Vec<UtteranceMeta>, ProtoError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(ProtoError::MalformedRow {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let origin = Partition::parse(fields[3]).ok_or_else(|| ProtoError::MalformedRow {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: format!("bad origin {:?}", fields[3]),
        })?;
        rows.push(UtteranceMeta {
            utterance_id: fields[0].to_string(),
            attack: fields[1].to_string(),
            speaker: fields[2].to_string(),
            origin,
        });
    }
    Ok(rows)
}

const SPEC_VERSION: u32 = 1;

/// Per-attack-group splitting rule. Exactly one of `eval_from` (route a
/// whole origin pool to eval) or `eval_frac` (carve eval out of the source
/// pool) must be set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionRule {
    pub attacks: Vec<String>,
    /// Origin pool that feeds the new train/dev partitions.
    pub source: Partition,
    pub train_frac: f64,
    pub dev_frac: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_from: Option<Partition>,
    /// Speaker-common utterances to place in eval, per attack. Overrides the
    /// count derived from `eval_frac`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_common_quota: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub disjoint_speakers: BTreeSet<String>,
    /// Optional closed list; when non-empty, every non-disjoint speaker must
    /// appear here.
    #[serde(default)]
    pub common_speakers: BTreeSet<String>,
    #[serde(rename = "rule")]
    pub rules: Vec<PartitionRule>,
}

impl PartitionSpec {
    pub fn load(path: &Path) -> Result<Self, ProtoError> {
        let text = std::fs::read_to_string(path)?;
        let spec: PartitionSpec =
            toml::from_str(&text).map_err(|e| ProtoError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ProtoError> {
        if self.schema_version != SPEC_VERSION {
            return Err(ProtoError::InvalidSpec(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if !self.disjoint_speakers.is_disjoint(&self.common_speakers) {
            return Err(ProtoError::InvalidSpec(
                "speaker lists overlap".to_string(),
            ));
        }
        let mut seen = BTreeSet::new();
        for rule in &self.rules {
            if rule.attacks.is_empty() {
                return Err(ProtoError::InvalidSpec("rule with no attacks".into()));
            }
            for attack in &rule.attacks {
                if !seen.insert(attack.clone()) {
                    return Err(ProtoError::InvalidSpec(format!(
                        "attack {attack:?} appears in more than one rule"
                    )));
                }
            }
            match (rule.eval_from, rule.eval_frac) {
                (Some(_), None) => {
                    let total = rule.train_frac + rule.dev_frac;
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(ProtoError::InvalidSpec(format!(
                            "train:dev ratio sums to {total}, expected 1"
                        )));
                    }
                }
                (None, Some(ef)) => {
                    let total = rule.train_frac + rule.dev_frac + ef;
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(ProtoError::InvalidSpec(format!(
                            "train:dev:eval ratio sums to {total}, expected 1"
                        )));
                    }
                }
                _ => {
                    return Err(ProtoError::InvalidSpec(
                        "rule must set exactly one of eval_from or eval_frac".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ProtoError> {
        let text = toml::to_string(self).expect("partition spec serialization");
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Apportions `n` into integer counts proportional to `fracs` (which sum to
/// one): floors first, then leftover units by descending fractional
/// remainder, ties toward the lowest index.
pub fn largest_remainder(fracs: &[f64], n: usize) -> Vec<usize> {
    let targets: Vec<f64> = fracs.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|&t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fracs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..n.saturating_sub(assigned) {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Builds a repartitioning protocol from utterance metadata and a spec.
pub fn build_attr17(
    metadata: &[UtteranceMeta],
    spec: &PartitionSpec,
) -> Result<ProtocolSplit, ProtoError> {
    spec.validate()?;
    let mut rule_of: BTreeMap<&str, &PartitionRule> = BTreeMap::new();
    for rule in &spec.rules {
        for attack in &rule.attacks {
            rule_of.insert(attack, rule);
        }
    }

    let mut pools: BTreeMap<&str, Vec<&UtteranceMeta>> = BTreeMap::new();
    for meta in metadata {
        pools.entry(&meta.attack).or_default().push(meta);
    }

    let mut split = ProtocolSplit::new(spec.name.clone());
    for (attack, mut pool) in pools {
        let rule = rule_of
            .get(attack)
            .copied()
            .ok_or_else(|| ProtoError::UnknownAttack {
                attack: attack.to_string(),
            })?;
        // Deterministic regardless of metadata row order.
        pool.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        let mut rng = crate::rng::derive_rng(spec.seed, &format!("partition/{attack}"), 0);

        match (rule.eval_from, rule.eval_frac) {
            (Some(eval_origin), None) => {
                let mut source: Vec<&UtteranceMeta> = Vec::new();
                for meta in pool {
                    if meta.origin == rule.source {
                        source.push(meta);
                    } else if meta.origin == eval_origin {
                        split.assign(
                            meta.utterance_id.clone(),
                            Partition::Eval,
                            SpeakerTag::NotApplicable,
                        )?;
                    } else {
                        return Err(ProtoError::UnhandledOrigin {
                            utterance_id: meta.utterance_id.clone(),
                            origin: meta.origin.as_str(),
                        });
                    }
                }
                source.shuffle(&mut rng);
                let counts = largest_remainder(&[rule.train_frac, rule.dev_frac], source.len());
                for (i, meta) in source.into_iter().enumerate() {
                    let partition = if i < counts[0] {
                        Partition::Train
                    } else {
                        Partition::Dev
                    };
                    split.assign(
                        meta.utterance_id.clone(),
                        partition,
                        SpeakerTag::NotApplicable,
                    )?;
                }
            }
            (None, Some(eval_frac)) => {
                let mut disjoint = 0usize;
                let mut common: Vec<&UtteranceMeta> = Vec::new();
                let pool_size = pool.len();
                for meta in pool {
                    if meta.origin != rule.source {
                        return Err(ProtoError::UnhandledOrigin {
                            utterance_id: meta.utterance_id.clone(),
                            origin: meta.origin.as_str(),
                        });
                    }
                    if spec.disjoint_speakers.contains(&meta.speaker) {
                        disjoint += 1;
                        split.assign(
                            meta.utterance_id.clone(),
                            Partition::Eval,
                            SpeakerTag::Disjoint,
                        )?;
                    } else {
                        if !spec.common_speakers.is_empty()
                            && !spec.common_speakers.contains(&meta.speaker)
                        {
                            return Err(ProtoError::MissingSpeaker {
                                speaker: meta.speaker.clone(),
                            });
                        }
                        common.push(meta);
                    }
                }
                let quota = match rule.eval_common_quota {
                    Some(q) => q as usize,
                    None => {
                        let lr = largest_remainder(
                            &[rule.train_frac, rule.dev_frac, eval_frac],
                            pool_size,
                        );
                        lr[2].saturating_sub(disjoint)
                    }
                }
                .min(common.len());

                common.shuffle(&mut rng);
                let rest = common.split_off(quota);
                for meta in common {
                    split.assign(
                        meta.utterance_id.clone(),
                        Partition::Eval,
                        SpeakerTag::Common,
                    )?;
                }
                let ratio_total = rule.train_frac + rule.dev_frac;
                let counts = largest_remainder(
                    &[rule.train_frac / ratio_total, rule.dev_frac / ratio_total],
                    rest.len(),
                );
                for (i, meta) in rest.into_iter().enumerate() {
                    let partition = if i < counts[0] {
                        Partition::Train
                    } else {
                        Partition::Dev
                    };
                    split.assign(meta.utterance_id.clone(), partition, SpeakerTag::Common)?;
                }
            }
            _ => unreachable!("validated"),
        }
    }
    Ok(split)
}

/// Pairwise Hamming distances between the attacks' concatenated one-hot
/// attribute vectors: twice the number of attributes on which they differ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HammingMatrix {
    pub attacks: Vec<String>,
    pub distances: Vec<Vec<u32>>,
}

pub fn hamming_matrix(schema: &AttributeSchema) -> HammingMatrix {
    let attacks: Vec<String> = schema.attack_labels().map(String::from).collect();
    let rows: Vec<&[usize]> = attacks
        .iter()
        .map(|a| schema.attack_values(a).unwrap())
        .collect();
    let distances = rows
        .iter()
        .map(|a| {
            rows.iter()
                .map(|b| 2 * a.iter().zip(b.iter()).filter(|(x, y)| x != y).count() as u32)
                .collect()
        })
        .collect();
    HammingMatrix { attacks, distances }
}

/// Spearman rank correlation with average ranks on ties; zero when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = crate::explain::ranks_descending(a);
    let rb = crate::explain::ranks_descending(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Per-attack correlation between assignment frequency and closeness
/// (negative Hamming distance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusabilityReport {
    pub per_attack: Vec<f64>,
    pub mean: f64,
}

/// `assignments[i][j]` counts utterances of attack `i` assigned to known
/// class `j`; `distances[i][j]` is the corresponding Hamming distance.
pub fn confusability_check(
    assignments: &[Vec<u64>],
    distances: &[Vec<u32>],
) -> Result<ConfusabilityReport, ProtoError> {
    if assignments.len() != distances.len() {
        return Err(ProtoError::DimensionMismatch(format!(
            "{} assignment rows vs {} distance rows",
            assignments.len(),
            distances.len()
        )));
    }
    let mut per_attack = Vec::with_capacity(assignments.len());
    for (counts, dists) in assignments.iter().zip(distances) {
        if counts.len() != dists.len() {
            return Err(ProtoError::DimensionMismatch(format!(
                "{} assignment columns vs {} distance columns",
                counts.len(),
                dists.len()
            )));
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let closeness: Vec<f64> = dists.iter().map(|&d| -(d as f64)).collect();
        per_attack.push(spearman(&freq, &closeness));
    }
    let mean = per_attack.iter().sum::<f64>() / per_attack.len().max(1) as f64;
    Ok(ConfusabilityReport { per_attack, mean })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
}

/// Seeded synthetic embedding generator. Each attack's cluster mean derives
/// from its one-hot attribute row (scaled by `separation`, padded or
/// projected to `dim`); bonafide uses a reserved mean away from every
/// attack. Identical attack rows yield identical cluster means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub schema_version: u32,
    pub name: String,
    pub sigma: f64,
    pub dim: usize,
    pub seed: u64,
    pub separation: f64,
    pub include_bonafide: bool,
    pub counts: PartitionCounts,
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self, ProtoError> {
        let text = std::fs::read_to_string(path)?;
        let spec: SynthSpec =
            toml::from_str(&text).map_err(|e| ProtoError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ProtoError> {
        if self.schema_version != SPEC_VERSION {
            return Err(ProtoError::InvalidSpec(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(ProtoError::InvalidSpec("sigma must be positive".into()));
        }
        if self.counts.train < 1 || self.counts.dev < 1 || self.counts.eval < 1 {
            return Err(ProtoError::InvalidSpec(
                "per-partition counts must be at least 1".into(),
            ));
        }
        if self.dim == 0 {
            return Err(ProtoError::InvalidSpec("dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: EmbeddingDataset,
    pub dev: EmbeddingDataset,
    pub eval: EmbeddingDataset,
}

/// Per-attribute value indices of the reserved bonafide pattern: the value
/// least used across the attack table, ties toward the lowest index. The
/// pattern stays on the one-hot manifold the extractors are trained on
/// while differing from every attack row on several attributes.
pub fn bonafide_pattern(schema: &AttributeSchema) -> Vec<usize> {
    let attacks: Vec<&[usize]> = schema
        .attack_labels()
        .map(|a| schema.attack_values(a).unwrap())
        .collect();
    (0..schema.num_attributes())
        .map(|l| {
            let mut usage = vec![0usize; schema.value_count(l)];
            for row in &attacks {
                usage[row[l]] += 1;
            }
            usage
                .iter()
                .enumerate()
                .min_by_key(|&(i, &count)| (count, i))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

/// Mean vector of a class in embedding space.
fn class_mean(schema: &AttributeSchema, spec: &SynthSpec, label: &str) -> Vec<f64> {
    let m = schema.total_values();
    let u: Vec<f64> = if label == BONAFIDE_LABEL {
        let pattern = bonafide_pattern(schema);
        let mut u = vec![0.0; m];
        for (l, &v) in pattern.iter().enumerate() {
            u[schema.block_range(l).start + v] = 1.0;
        }
        u
    } else {
        schema.one_hot_flat(label).expect("attack label")
    };
    let scaled: Vec<f64> = u.iter().map(|v| v * spec.separation).collect();
    if spec.dim >= m {
        let mut mean = scaled;
        mean.resize(spec.dim, 0.0);
        mean
    } else {
        // Seeded Gaussian projection M -> dim, entries N(0, 1/dim).
        let mut rng = crate::rng::derive_rng(spec.seed, "synth-projection", 0);
        let normal = Normal::new(0.0, (1.0 / spec.dim as f64).sqrt()).unwrap();
        let projection: Vec<f64> = (0..spec.dim * m).map(|_| normal.sample(&mut rng)).collect();
        (0..spec.dim)
            .map(|d| {
                scaled
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| projection[d * m + j] * v)
                    .sum()
            })
            .collect()
    }
}

pub fn synth_generate(
    schema: &AttributeSchema,
    spec: &SynthSpec,
) -> Result<SynthOutput, ProtoError> {
    spec.validate()?;
    let mut labels: Vec<String> = schema.attack_labels().map(String::from).collect();
    if spec.include_bonafide {
        labels.push(BONAFIDE_LABEL.to_string());
    }

    let mut partitions = Vec::new();
    for (partition, count) in [
        (Partition::Train, spec.counts.train),
        (Partition::Dev, spec.counts.dev),
        (Partition::Eval, spec.counts.eval),
    ] {
        let mut records = Vec::new();
        for label in &labels {
            let mean = class_mean(schema, spec, label);
            let scope = format!("synth/{}/{}", partition.as_str(), label);
            let mut rng = crate::rng::derive_rng(spec.seed, &scope, 0);
            let normal = Normal::new(0.0, spec.sigma).unwrap();
            for i in 0..count {
                let vector: Vec<f32> = mean
                    .iter()
                    .map(|&mu| (mu + normal.sample(&mut rng)) as f32)
                    .collect();
                records.push(EmbeddingRecord {
                    utterance_id: format!("{}-{}-{:05}", label, partition.as_str(), i),
                    label: label.clone(),
                    speaker_id: format!("SPK-{:02}", i % 10),
                    gender: None,
                    vector,
                });
            }
        }
        partitions.push(EmbeddingDataset::new(spec.dim, records)?);
    }
    let mut it = partitions.into_iter();
    Ok(SynthOutput {
        train: it.next().unwrap(),
        dev: it.next().unwrap(),
        eval: it.next().unwrap(),
    })
}
