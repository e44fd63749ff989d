//! Per-model and strict system accuracy, plus independent-error propagation.
//!
//! Under the independence assumption the system is correct only when all
//! three models are correct, so
//!
//! ```text
//! P(all correct) = Pa · Pb · Pc
//! P(any error)   = Ea + Eb + Ec − EaEb − EaEc − EbEc + EaEbEc,   Ei = 1 − Pi
//! ```
//!
//! The union is evaluated term by term (seven terms) rather than as the
//! complement of the product, which keeps `joint + union = 1` a real
//! cross-check of the two formulas.

use std::fmt;

use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Abnormality;
use crate::exec::ExecMode;
use crate::reportgen::ResultCode;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{predictions} predictions for {truths} ground-truth labels")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("probability {0} is outside [0, 1]")]
    OutOfRange(f64),
}

/// Ground truth or prediction for (cardiomegaly, effusion, consolidation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LabeledTriple(pub [bool; 3]);

impl LabeledTriple {
    pub fn from_bits(cardiomegaly: u8, effusion: u8, consolidation: u8) -> Option<Self> {
        let bit = |v: u8| match v {
            0 => Some(false),
            1 => Some(true),
            _ => None,
        };
        Some(LabeledTriple([bit(cardiomegaly)?, bit(effusion)?, bit(consolidation)?]))
    }

    pub fn get(self, abnormality: Abnormality) -> bool {
        self.0[abnormality.index()]
    }
}

impl From<ResultCode> for LabeledTriple {
    fn from(code: ResultCode) -> Self {
        LabeledTriple(code.bits())
    }
}

impl From<LabeledTriple> for ResultCode {
    fn from(t: LabeledTriple) -> Self {
        ResultCode::new(t.0)
    }
}

/// Exact count ratio, rendered with four decimals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub correct: usize,
    pub total: usize,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ({}/{})", self.value(), self.correct, self.total)
    }
}

fn check_lengths(preds: &[LabeledTriple], truths: &[LabeledTriple]) -> Result<usize, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    Ok(preds.len())
}

/// A sample counts only when all three labels match.
pub fn strict_system_accuracy(preds: &[LabeledTriple], truths: &[LabeledTriple]) -> Result<Ratio, EvalError> {
    let total = check_lengths(preds, truths)?;
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(Ratio { correct, total })
}

/// Accuracy of each bit position on its own.
pub fn per_model_accuracy(preds: &[LabeledTriple], truths: &[LabeledTriple]) -> Result<[Ratio; 3], EvalError> {
    let total = check_lengths(preds, truths)?;
    Ok([0, 1, 2].map(|k| Ratio {
        correct: preds.iter().zip(truths).filter(|(p, t)| p.0[k] == t.0[k]).count(),
        total,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorAnalysis {
    pub p_correct: [f64; 3],
    pub p_error: [f64; 3],
    pub p_joint_correct: f64,
    pub p_union_error: f64,
}

impl ErrorAnalysis {
    /// Aligned plain-text table with four-decimal values.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16}{:>10}{:>10}\n", "model", "P(correct)", "P(error)"));
        for abn in Abnormality::ALL {
            let k = abn.index();
            out.push_str(&format!(
                "{:<16}{:>10.4}{:>10.4}\n",
                abn.to_string(),
                self.p_correct[k],
                self.p_error[k]
            ));
        }
        out.push_str(&format!("{:<26}{:>10.4}\n", "P(all correct)", self.p_joint_correct));
        out.push_str(&format!("{:<26}{:>10.4}\n", "P(any error)", self.p_union_error));
        out
    }
}

pub fn error_analysis(p_correct: [f64; 3]) -> Result<ErrorAnalysis, EvalError> {
    if let Some(&bad) = p_correct.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(EvalError::OutOfRange(bad));
    }
    let p_error = p_correct.map(|p| 1.0 - p);
    let [a, b, c] = p_correct;
    let [ea, eb, ec] = p_error;
    Ok(ErrorAnalysis {
        p_correct,
        p_error,
        p_joint_correct: a * b * c,
        p_union_error: ea + eb + ec - ea * eb - ea * ec - eb * ec + ea * eb * ec,
    })
}

/// Trials per independently seeded work unit.
const SIM_CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct SimCounts {
    correct: [u64; 3],
    joint_correct: u64,
    union_error: u64,
}

/// Monte-Carlo estimate of [`error_analysis`] with three independent
/// Bernoulli models per trial.
pub fn simulate_error_analysis(p_correct: [f64; 3], n_trials: u64, seed: u64) -> Result<ErrorAnalysis, EvalError> {
    simulate_error_analysis_with(p_correct, n_trials, seed, ExecMode::default())
}

/// As [`simulate_error_analysis`]; the result does not depend on `exec`.
pub fn simulate_error_analysis_with(
    p_correct: [f64; 3],
    n_trials: u64,
    seed: u64,
    exec: ExecMode,
) -> Result<ErrorAnalysis, EvalError> {
    error_analysis(p_correct)?;
    if n_trials == 0 {
        return Err(EvalError::EmptyDataset);
    }
    let chunks = n_trials.div_ceil(SIM_CHUNK) as usize;
    let parts = exec.map_range(chunks, |chunk| {
        let mut rng = rng::stream(seed, chunk as u64);
        let trials = SIM_CHUNK.min(n_trials - chunk as u64 * SIM_CHUNK);
        let mut counts = SimCounts::default();
        for _ in 0..trials {
            let hits = p_correct.map(|p| rng.random::<f64>() < p);
            for (c, hit) in counts.correct.iter_mut().zip(hits) {
                *c += u64::from(hit);
            }
            if hits.iter().all(|&h| h) {
                counts.joint_correct += 1;
            } else {
                counts.union_error += 1;
            }
        }
        counts
    });
    let total = parts.into_iter().fold(SimCounts::default(), |mut acc, c| {
        for k in 0..3 {
            acc.correct[k] += c.correct[k];
        }
        acc.joint_correct += c.joint_correct;
        acc.union_error += c.union_error;
        acc
    });
    let n = n_trials as f64;
    let p = total.correct.map(|c| c as f64 / n);
    Ok(ErrorAnalysis {
        p_correct: p,
        p_error: total.correct.map(|c| (n_trials - c) as f64 / n),
        p_joint_correct: total.joint_correct as f64 / n,
        p_union_error: total.union_error as f64 / n,
    })
}
