//! End-to-end inference: image bytes to result code and report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::ModelBundle;
use crate::classifier::{predict, Abnormality, ClassifierError};
use crate::evaluation::LabeledTriple;
use crate::imaging::{self, ImageFormat, ImagingError, PreprocessOutput, Segment};
use crate::reportgen::{aggregate, generate_report, ResultCode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Image(#[from] ImagingError),
    #[error("bundle has no model for {}", .0.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(", "))]
    IncompleteBundle(Vec<Abnormality>),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

impl PipelineError {
    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Image(e) => e.code(),
            PipelineError::IncompleteBundle(_) => "IncompleteBundle",
            PipelineError::Classifier(_) => "ModelError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub abnormality: Abnormality,
    /// 0 or 1.
    pub label: u8,
    pub probability: f64,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub result_code: ResultCode,
    /// Cardiomegaly, effusion, consolidation.
    pub findings: Vec<Finding>,
    pub report_text: String,
}

impl PredictionResponse {
    pub fn labels(&self) -> LabeledTriple {
        self.result_code.into()
    }
}

/// Format from the byte signature; bytes matching neither are malformed.
pub fn sniff_format(bytes: &[u8]) -> Result<ImageFormat, ImagingError> {
    ImageFormat::detect(bytes).ok_or_else(|| ImagingError::MalformedImage("not a PNG or PGM file".into()))
}

pub fn predict_pipeline(bundle: &ModelBundle, bytes: &[u8]) -> Result<PredictionResponse, PipelineError> {
    let format = sniff_format(bytes)?;
    predict_pipeline_as(bundle, bytes, format)
}

pub fn predict_pipeline_as(
    bundle: &ModelBundle,
    bytes: &[u8],
    format: ImageFormat,
) -> Result<PredictionResponse, PipelineError> {
    check_complete(bundle)?;
    predict_preprocessed(bundle, &imaging::preprocess(bytes, format)?)
}

fn check_complete(bundle: &ModelBundle) -> Result<(), PipelineError> {
    let missing = bundle.missing();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::IncompleteBundle(missing))
    }
}

/// Routes each model to its segment, aggregates and renders the report.
pub fn predict_preprocessed(bundle: &ModelBundle, pre: &PreprocessOutput) -> Result<PredictionResponse, PipelineError> {
    check_complete(bundle)?;
    let mut findings = Vec::with_capacity(3);
    for abnormality in Abnormality::ALL {
        let model = bundle.model(abnormality).expect("bundle is complete");
        let p = predict(model, pre.segment(model.segment()))?;
        findings.push(Finding {
            abnormality,
            label: u8::from(p.label),
            probability: p.probability,
            segment: model.segment(),
        });
    }
    let code = aggregate([0, 1, 2].map(|i| findings[i].label == 1));
    Ok(PredictionResponse {
        result_code: code,
        report_text: generate_report(code, &bundle.master_text).text(),
        findings,
    })
}
