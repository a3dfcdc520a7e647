//! Back-end classifiers over probabilistic attribute embeddings or raw CM
//! embeddings: categorical naive Bayes, CART decision tree, and one-vs-rest
//! linear models (logistic and hinge). All four expose the same
//! score/predict contract, so swapping back-ends changes no pipeline code.

mod linear;
mod naive_bayes;
mod tree;

pub use linear::{ovr_fit, FitDiagnostics, LinearOvRModel, Objective};
pub use naive_bayes::{nb_fit, CategoricalModel};
pub use tree::{tree_fit, tree_predict, TreeModel, TreeNode};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("class {0} has no training utterances")]
    EmptyClass(usize),
    #[error("model and features disagree on the attribute layout")]
    SchemaMismatch,
    #[error("one-vs-rest needs at least two classes")]
    SingleClass,
    #[error("expected feature vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyData,
    #[error("length mismatch: {0} rows vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("negative component in feature row {row}")]
    NegativeFeature { row: usize },
    #[error("class label {got} out of range for {classes} classes")]
    ClassOutOfRange { got: usize, classes: usize },
}

impl BackendError {
    pub fn category(&self) -> &'static str {
        match self {
            BackendError::EmptyClass(_) => "EmptyClass",
            BackendError::SchemaMismatch => "SchemaMismatch",
            BackendError::SingleClass => "SingleClass",
            BackendError::DimensionMismatch { .. } => "DimensionMismatch",
            BackendError::EmptyData => "EmptyData",
            BackendError::LengthMismatch(..) => "LengthMismatch",
            BackendError::NegativeFeature { .. } => "NegativeFeature",
            BackendError::ClassOutOfRange { .. } => "ClassOutOfRange",
        }
    }
}

/// Index of the largest score, ties resolved toward the lowest class index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Common score/predict contract of the four back-ends.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn feature_dim(&self) -> usize;

    /// Per-class scores; higher means more likely. Naive Bayes may emit
    /// `-inf` sentinels for classes with zero likelihood.
    fn scores(&self, x: &[f64]) -> Result<Vec<f64>, BackendError>;

    fn predict(&self, x: &[f64]) -> Result<usize, BackendError> {
        Ok(argmax_lowest(&self.scores(x)?))
    }

    /// Score used when attributing a prediction to features. Defaults to the
    /// classifier score; back-ends override it where the raw score is not
    /// finite everywhere.
    fn explanation_score(&self, class: usize, x: &[f64]) -> Result<f64, BackendError> {
        Ok(self.scores(x)?[class])
    }
}

/// Serialized back-end, tagged by kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum BackendModel {
    #[serde(rename = "nb")]
    NaiveBayes(CategoricalModel),
    #[serde(rename = "dt")]
    Tree(TreeModel),
    #[serde(rename = "lr")]
    Logistic(LinearOvRModel),
    #[serde(rename = "svm")]
    Svm(LinearOvRModel),
}

impl BackendModel {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendModel::NaiveBayes(_) => "nb",
            BackendModel::Tree(_) => "dt",
            BackendModel::Logistic(_) => "lr",
            BackendModel::Svm(_) => "svm",
        }
    }

    fn inner(&self) -> &dyn Classifier {
        match self {
            BackendModel::NaiveBayes(m) => m,
            BackendModel::Tree(m) => m,
            BackendModel::Logistic(m) => m,
            BackendModel::Svm(m) => m,
        }
    }
}

impl Classifier for BackendModel {
    fn num_classes(&self) -> usize {
        self.inner().num_classes()
    }

    fn feature_dim(&self) -> usize {
        self.inner().feature_dim()
    }

    fn scores(&self, x: &[f64]) -> Result<Vec<f64>, BackendError> {
        self.inner().scores(x)
    }

    fn explanation_score(&self, class: usize, x: &[f64]) -> Result<f64, BackendError> {
        self.inner().explanation_score(class, x)
    }
}
