//! Dataset, schema, and protocol file handling.
//!
//! Three on-disk artifacts live here: embedding containers (binary, see
//! [`load_embeddings`]/[`save_embeddings`]), attribute schemas (TOML), and
//! protocol splits (line-oriented text). All writers emit canonical bytes so
//! a load-then-save round trip is byte-identical.

mod binary;
mod protocol;
mod schema;

pub use binary::{load_embeddings, save_embeddings, EMBEDDING_MAGIC};

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use thiserror::Error;

/// Label used for genuine (non-spoofed) utterances. Bonafide records carry
/// no attribute ground truth.
pub const BONAFIDE_LABEL: &str = "bonafide";

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: not an embedding container (bad magic)")]
    MagicMismatch { path: PathBuf },
    #[error("{path}: index lists {index_rows} rows but container holds {records} records")]
    CountMismatch {
        path: PathBuf,
        index_rows: usize,
        records: usize,
    },
    #[error("vector for {utterance_id:?} has {got} components, expected {expected}")]
    DimensionMismatch {
        utterance_id: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite component in vector for {utterance_id:?}")]
    NonFiniteValue { utterance_id: String },
    #[error("duplicate utterance id {utterance_id:?}")]
    DuplicateUtteranceId { utterance_id: String },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("schema parse error: {0}")]
    SchemaParse(String),
    #[error("attack {attack:?} references unknown value {value:?} for attribute {attribute:?}")]
    UnknownValueName {
        attack: String,
        attribute: String,
        value: String,
    },
    #[error("attack {attack:?} lists {got} values, schema has {expected} attributes")]
    MissingAttribute {
        attack: String,
        expected: usize,
        got: usize,
    },
    #[error("attribute {attribute:?} has duplicate value name {value:?}")]
    DuplicateValueName { attribute: String, value: String },
    #[error("no attribute ground truth for label {label:?}")]
    NoAttributeGroundTruth { label: String },
    #[error("utterance {utterance_id:?} assigned to more than one partition")]
    OverlappingPartitions { utterance_id: String },
    #[error("unsupported schema_version {0}")]
    UnsupportedVersion(u32),
}

impl DataError {
    pub fn category(&self) -> &'static str {
        match self {
            DataError::Io(_) => "Io",
            DataError::MagicMismatch { .. } => "MagicMismatch",
            DataError::CountMismatch { .. } => "CountMismatch",
            DataError::DimensionMismatch { .. } => "DimensionMismatch",
            DataError::NonFiniteValue { .. } => "NonFiniteValue",
            DataError::DuplicateUtteranceId { .. } => "DuplicateUtteranceId",
            DataError::MalformedRow { .. } => "MalformedRow",
            DataError::SchemaParse(_) => "SchemaParse",
            DataError::UnknownValueName { .. } => "UnknownValueName",
            DataError::MissingAttribute { .. } => "MissingAttribute",
            DataError::DuplicateValueName { .. } => "DuplicateValueName",
            DataError::NoAttributeGroundTruth { .. } => "NoAttributeGroundTruth",
            DataError::OverlappingPartitions { .. } => "OverlappingPartitions",
            DataError::UnsupportedVersion(_) => "UnsupportedVersion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gender {
    F,
    M,
}

/// One utterance: id, class label (attack id or `bonafide`), speaker, and
/// its fixed-dimension embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub utterance_id: String,
    pub label: String,
    pub speaker_id: String,
    pub gender: Option<Gender>,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn is_bonafide(&self) -> bool {
        self.label == BONAFIDE_LABEL
    }
}

/// Immutable collection of embedding records sharing one dimensionality.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingDataset {
    /// Validates dimensionality, finiteness, and utterance-id uniqueness.
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.vector.len() != dim {
                return Err(DataError::DimensionMismatch {
                    utterance_id: r.utterance_id.clone(),
                    expected: dim,
                    got: r.vector.len(),
                });
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteValue {
                    utterance_id: r.utterance_id.clone(),
                });
            }
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(DataError::DuplicateUtteranceId {
                    utterance_id: r.utterance_id.clone(),
                });
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    /// Order-preserving filtered copy. Cannot violate the invariants.
    pub fn subset<F: Fn(&EmbeddingRecord) -> bool>(&self, keep: F) -> Self {
        Self {
            dim: self.dim,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Vector of one record as `f64`, for use with the numeric code.
    pub fn vector_f64(&self, idx: usize) -> Vec<f64> {
        self.records[idx].vector.iter().map(|&v| v as f64).collect()
    }

    /// Copy with every vector L2-normalized; zero vectors stay as they are.
    pub fn l2_normalized(&self) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| {
                let norm = r
                    .vector
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                let vector = if norm > 0.0 {
                    r.vector.iter().map(|&v| (v as f64 / norm) as f32).collect()
                } else {
                    r.vector.clone()
                };
                EmbeddingRecord {
                    vector,
                    ..r.clone()
                }
            })
            .collect();
        Self {
            dim: self.dim,
            records,
        }
    }
}

/// One attribute: a name and its ordered value vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeDef {
    pub name: String,
    pub values: Vec<String>,
}

/// Ordered attribute list plus the per-attack ground-truth value assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSchema {
    name: String,
    attributes: Vec<AttributeDef>,
    attack_table: BTreeMap<String, Vec<usize>>,
}

impl AttributeSchema {
    /// Builds a schema, resolving attack rows given as value names.
    pub fn new(
        name: String,
        attributes: Vec<AttributeDef>,
        attack_rows: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, DataError> {
        for attr in &attributes {
            let mut seen = HashSet::new();
            for v in &attr.values {
                if !seen.insert(v.as_str()) {
                    return Err(DataError::DuplicateValueName {
                        attribute: attr.name.clone(),
                        value: v.clone(),
                    });
                }
            }
        }
        let mut attack_table = BTreeMap::new();
        for (attack, row) in attack_rows {
            if row.len() != attributes.len() {
                return Err(DataError::MissingAttribute {
                    attack,
                    expected: attributes.len(),
                    got: row.len(),
                });
            }
            let mut indices = Vec::with_capacity(row.len());
            for (attr, value) in attributes.iter().zip(&row) {
                match attr.values.iter().position(|v| v == value) {
                    Some(i) => indices.push(i),
                    None => {
                        return Err(DataError::UnknownValueName {
                            attack,
                            attribute: attr.name.clone(),
                            value: value.clone(),
                        })
                    }
                }
            }
            attack_table.insert(attack, indices);
        }
        Ok(Self {
            name,
            attributes,
            attack_table,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DataError> {
        schema::load_schema(path)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DataError> {
        std::fs::write(path, self.canonical_toml())?;
        Ok(())
    }

    /// Canonical serialized form; also the hashing input.
    pub fn canonical_toml(&self) -> String {
        schema::to_canonical_toml(self)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        crate::manifest::sha256_hex(self.canonical_toml().as_bytes())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn attributes(&self) -> &[AttributeDef] {
        &self.attributes
    }

    /// Number of attributes, L.
    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    /// Number of values of attribute `l`.
    pub fn value_count(&self, l: usize) -> usize {
        self.attributes[l].values.len()
    }

    /// Per-attribute value counts.
    pub fn value_counts(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.values.len()).collect()
    }

    /// Total value count M = sum of the per-attribute counts.
    pub fn total_values(&self) -> usize {
        self.attributes.iter().map(|a| a.values.len()).sum()
    }

    /// Index range of attribute `l` inside a flat length-M vector.
    pub fn block_range(&self, l: usize) -> std::ops::Range<usize> {
        let start: usize = self.attributes[..l].iter().map(|a| a.values.len()).sum();
        start..start + self.attributes[l].values.len()
    }

    pub fn attack_labels(&self) -> impl Iterator<Item = &str> {
        self.attack_table.keys().map(|s| s.as_str())
    }

    pub fn num_attacks(&self) -> usize {
        self.attack_table.len()
    }

    /// Ground-truth value indices of an attack, one per attribute.
    pub fn attack_values(&self, label: &str) -> Option<&[usize]> {
        self.attack_table.get(label).map(|v| v.as_slice())
    }

    /// Ground-truth one-hot target vectors of a label, one per attribute.
    /// Bonafide and unknown labels carry no ground truth.
    pub fn one_hot_targets(&self, label: &str) -> Result<Vec<Vec<f64>>, DataError> {
        let row = self
            .attack_values(label)
            .ok_or_else(|| DataError::NoAttributeGroundTruth {
                label: label.to_string(),
            })?;
        Ok(row
            .iter()
            .enumerate()
            .map(|(l, &m)| {
                let mut v = vec![0.0; self.value_count(l)];
                v[m] = 1.0;
                v
            })
            .collect())
    }

    /// Concatenated one-hot encoding of an attack, length M.
    pub fn one_hot_flat(&self, label: &str) -> Result<Vec<f64>, DataError> {
        Ok(self.one_hot_targets(label)?.concat())
    }

    /// Groups class labels by identical attack rows; labels without a row
    /// each get their own group. Returns one group id per input label.
    pub fn configuration_groups(&self, labels: &[String]) -> Vec<usize> {
        let mut groups: Vec<usize> = Vec::with_capacity(labels.len());
        let mut seen: Vec<(Option<&[usize]>, usize)> = Vec::new();
        for (i, label) in labels.iter().enumerate() {
            let row = self.attack_values(label);
            let found = row.and_then(|r| {
                seen.iter()
                    .find(|(other, _)| other.is_some_and(|o| o == r))
                    .map(|&(_, g)| g)
            });
            match found {
                Some(g) => groups.push(g),
                None => {
                    seen.push((row, i));
                    groups.push(i);
                }
            }
        }
        groups
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Eval,
}

impl Partition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Dev => "dev",
            Partition::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "dev" => Some(Partition::Dev),
            "eval" => Some(Partition::Eval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerTag {
    Common,
    Disjoint,
    NotApplicable,
}

impl SpeakerTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpeakerTag::Common => "common",
            SpeakerTag::Disjoint => "disjoint",
            SpeakerTag::NotApplicable => "na",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "common" => Some(SpeakerTag::Common),
            "disjoint" => Some(SpeakerTag::Disjoint),
            "na" => Some(SpeakerTag::NotApplicable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub partition: Partition,
    pub speaker_tag: SpeakerTag,
}

/// Assignment of utterance ids to train/dev/eval partitions. The map keying
/// makes partitions disjoint by construction; inserting an id twice fails.
#[derive(Debug, Clone)]
pub struct ProtocolSplit {
    name: String,
    assignments: BTreeMap<String, Assignment>,
}

impl ProtocolSplit {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            assignments: BTreeMap::new(),
        }
    }

    /// Builds a split from explicit id lists; overlapping lists are an error.
    pub fn from_lists(
        name: impl Into<String>,
        train: &[String],
        dev: &[String],
        eval: &[String],
    ) -> Result<Self, DataError> {
        let mut split = Self::new(name);
        for (ids, partition) in [
            (train, Partition::Train),
            (dev, Partition::Dev),
            (eval, Partition::Eval),
        ] {
            for id in ids {
                split.assign(id.clone(), partition, SpeakerTag::NotApplicable)?;
            }
        }
        Ok(split)
    }

    pub fn assign(
        &mut self,
        utterance_id: String,
        partition: Partition,
        speaker_tag: SpeakerTag,
    ) -> Result<(), DataError> {
        match self.assignments.entry(utterance_id) {
            std::collections::btree_map::Entry::Occupied(e) => {
                Err(DataError::OverlappingPartitions {
                    utterance_id: e.key().clone(),
                })
            }
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(Assignment {
                    partition,
                    speaker_tag,
                });
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn assignment(&self, utterance_id: &str) -> Option<Assignment> {
        self.assignments.get(utterance_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Assignment)> {
        self.assignments.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn partition_len(&self, partition: Partition) -> usize {
        self.assignments
            .values()
            .filter(|a| a.partition == partition)
            .count()
    }

    /// Records of `dataset` assigned to `partition`, in dataset order.
    pub fn select(&self, dataset: &EmbeddingDataset, partition: Partition) -> EmbeddingDataset {
        dataset.subset(|r| {
            self.assignment(&r.utterance_id)
                .is_some_and(|a| a.partition == partition)
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DataError> {
        protocol::load_protocol(path)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DataError> {
        std::fs::write(path, protocol::to_canonical_text(self))?;
        Ok(())
    }

    pub fn canonical_text(&self) -> String {
        protocol::to_canonical_text(self)
    }
}
