//! Binary destination classifiers: a random forest and a fixed-architecture
//! fully connected network (204 -> 128 -> 64 -> 32 -> 1, rectifier hidden
//! activations, logistic output). Scores above 0.5 mean essential; the tie
//! at exactly 0.5 resolves to non-essential.

mod forest;
mod mlp;
mod store;

pub use forest::{predict_forest, train_forest, DecisionTree, ForestConfig, ForestModel, Node};
pub use mlp::{
    init_mlp, predict_mlp, train_mlp, train_mlp_with_validation, MlpConfig, MlpGradients,
    MlpModel, LAYER_WIDTHS,
};
pub use store::{load_model, save_model};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureVector, FEATURE_COUNT};
use crate::labeling::Label;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training set needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate training set: only one class present")]
    DegenerateTrainingSet,
    #[error("feature vector has {got} values, expected {expected}")]
    FeatureLengthMismatch { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch} (loss {loss}); lower the learning rate")]
    DivergedTraining { epoch: usize, loss: f64 },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("model file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("model file {path} has a bad magic header")]
    BadMagic { path: String },
    #[error("model file {path} has unsupported format version {found}")]
    UnsupportedVersion { path: String, found: String },
    #[error("model file {path} names unknown model kind {kind}")]
    UnknownModelKind { path: String, kind: String },
    #[error("model file {path} was built for a different feature layout")]
    LayoutHashMismatch { path: String },
    #[error("model file {path} is truncated or malformed: {reason}")]
    Malformed { path: String, reason: String },
}

/// Which classifier family a model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Forest,
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Forest => f.write_str("forest"),
            ModelKind::Mlp => f.write_str("mlp"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forest" | "rfc" => Ok(ModelKind::Forest),
            "mlp" | "ann" => Ok(ModelKind::Mlp),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

/// Classifier output: an essential-class score in [0, 1] and the label it
/// implies under the strict 0.5 threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub score: f64,
    pub label: Label,
}

impl Prediction {
    pub fn from_score(score: f64) -> Self {
        let label = if score > 0.5 {
            Label::Essential
        } else {
            Label::NonEssential
        };
        Self { score, label }
    }
}

/// A trained classifier of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Forest(ForestModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Forest(_) => ModelKind::Forest,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn predict(&self, vector: &FeatureVector) -> Result<Prediction, ModelError> {
        match self {
            Model::Forest(m) => predict_forest(m, vector),
            Model::Mlp(m) => predict_mlp(m, vector),
        }
    }
}

fn check_vector_len(vector: &FeatureVector) -> Result<(), ModelError> {
    if vector.len() != FEATURE_COUNT {
        return Err(ModelError::FeatureLengthMismatch {
            expected: FEATURE_COUNT,
            got: vector.len(),
        });
    }
    Ok(())
}
