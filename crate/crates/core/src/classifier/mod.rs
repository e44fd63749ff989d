//! Per-abnormality binary classifiers and their segment routing.

mod train;
mod tune;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::Ratio;
use crate::exec::ExecMode;
use crate::imaging::{GrayImage, Segment};
use crate::neuralnet::{Network, NnError, Tensor, INPUT_SHAPE};
use crate::optimizer::OptimizerConfig;

pub use train::{train, EpochRecord};
pub use tune::{
    apply_assignment, standard_factors, tune_ofat, tune_training, CandidateResult, Factor, HyperValue,
    TuneError, TuneReport, TuneStep,
};

/// Decision threshold; a probability equal to it counts as positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Abnormality {
    Cardiomegaly,
    Effusion,
    Consolidation,
}

impl Abnormality {
    /// Result-code order.
    pub const ALL: [Abnormality; 3] = [Abnormality::Cardiomegaly, Abnormality::Effusion, Abnormality::Consolidation];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Segment each model reads.
    pub fn segment(self) -> Segment {
        match self {
            Abnormality::Cardiomegaly | Abnormality::Effusion => Segment::II,
            Abnormality::Consolidation => Segment::III,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Abnormality::Cardiomegaly => "cardiomegaly",
            Abnormality::Effusion => "effusion",
            Abnormality::Consolidation => "consolidation",
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Abnormality::ALL.get(i).copied()
    }
}

impl fmt::Display for Abnormality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Abnormality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cardiomegaly" => Ok(Abnormality::Cardiomegaly),
            "effusion" | "lung_effusion" | "lung-effusion" => Ok(Abnormality::Effusion),
            "consolidation" => Ok(Abnormality::Consolidation),
            other => Err(format!("unknown abnormality {other:?}")),
        }
    }
}

/// Base filter count of the first convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchWidth {
    Small,
    Large,
}

impl ArchWidth {
    pub fn filters(self) -> usize {
        match self {
            ArchWidth::Small => 8,
            ArchWidth::Large => 16,
        }
    }
}

impl fmt::Display for ArchWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchWidth::Small => "small",
            ArchWidth::Large => "large",
        })
    }
}

impl FromStr for ArchWidth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(ArchWidth::Small),
            "large" => Ok(ArchWidth::Large),
            other => Err(format!("unknown width {other:?} (expected small or large)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub arch_width: ArchWidth,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            arch_width: ArchWidth::Small,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.epochs == 0 {
            return Err(ClassifierError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::InvalidConfig("batch size must be at least 1".into()));
        }
        self.optimizer.validate().map_err(ClassifierError::InvalidConfig)
    }
}

/// One segment image and its 0/1 label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub label: u8,
}

impl Example {
    pub fn new(input: Tensor, label: u8) -> Result<Self, ClassifierError> {
        if label > 1 {
            return Err(ClassifierError::BadLabel(label));
        }
        input.expect_shape(&INPUT_SHAPE, "example")?;
        Ok(Example { input, label })
    }

    pub fn from_segment(image: &GrayImage, label: u8) -> Result<Self, ClassifierError> {
        Example::new(segment_tensor(image), label)
    }
}

/// `[1, height, width]` tensor view of a grayscale image.
pub fn segment_tensor(image: &GrayImage) -> Tensor {
    Tensor::new(vec![1, image.height(), image.width()], image.data().to_vec()).expect("image is well formed")
}

/// Anything that maps a segment tensor to a probability.
pub trait Scorer: Sync {
    fn probability(&self, input: &Tensor) -> Result<f64, NnError>;

    fn threshold(&self) -> f64 {
        DEFAULT_THRESHOLD
    }
}

impl Scorer for Network {
    fn probability(&self, input: &Tensor) -> Result<f64, NnError> {
        Network::probability(self, input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub abnormality: Abnormality,
    pub threshold: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub abnormality: Abnormality,
    pub network: Network,
    pub threshold: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub config: Option<TrainConfig>,
}

impl TrainedModel {
    /// Wraps an untrained or externally built network.
    pub fn from_network(abnormality: Abnormality, network: Network) -> Self {
        TrainedModel {
            abnormality,
            network,
            threshold: DEFAULT_THRESHOLD,
            train_accuracy: 0.0,
            test_accuracy: 0.0,
            config: None,
        }
    }

    pub fn metadata(&self) -> ModelMetadata {
        ModelMetadata {
            abnormality: self.abnormality,
            threshold: self.threshold,
            train_accuracy: self.train_accuracy,
            test_accuracy: self.test_accuracy,
            config: self.config,
        }
    }

    pub fn segment(&self) -> Segment {
        self.abnormality.segment()
    }
}

impl Scorer for TrainedModel {
    fn probability(&self, input: &Tensor) -> Result<f64, NnError> {
        self.network.probability(input)
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub abnormality: Abnormality,
    pub probability: f64,
    pub label: bool,
}

pub fn build_model(width: ArchWidth, seed: u64) -> Network {
    Network::default_architecture(width.filters(), seed)
}

/// Scores one already-sliced segment.
pub fn predict(model: &TrainedModel, segment_image: &GrayImage) -> Result<Prediction, ClassifierError> {
    let probability = model.network.probability(&segment_tensor(segment_image))?;
    Ok(Prediction {
        abnormality: model.abnormality,
        probability,
        label: probability >= model.threshold,
    })
}

pub fn evaluate_accuracy<S: Scorer>(model: &S, data: &[Example]) -> Result<Ratio, ClassifierError> {
    evaluate_accuracy_with(model, data, ExecMode::default())
}

/// Batch inference over `data`; the result does not depend on `exec`.
pub fn evaluate_accuracy_with<S: Scorer>(model: &S, data: &[Example], exec: ExecMode) -> Result<Ratio, ClassifierError> {
    if data.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    let threshold = model.threshold();
    let hits = exec.map(data, |ex| -> Result<bool, NnError> {
        let p = model.probability(&ex.input)?;
        Ok((p >= threshold) == (ex.label == 1))
    });
    let mut correct = 0;
    for hit in hits {
        correct += usize::from(hit?);
    }
    Ok(Ratio {
        correct,
        total: data.len(),
    })
}
