//! One-factor-at-a-time tuning.
//!
//! Factors are visited in order. While factor k is swept, factors before it
//! are pinned to their winners and factors after it stay at their defaults.
//! The winner is the candidate with the highest test accuracy; ties go to the
//! higher train accuracy, then to the earlier candidate.

use std::fmt;

use thiserror::Error;

use super::{build_model, train, Abnormality, ArchWidth, ClassifierError, Example, TrainConfig};
use crate::exec::ExecMode;
use crate::optimizer::{OptimizerKind, LEARNING_RATE_GRID};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TuneError {
    #[error("factor {0:?} has no candidates")]
    NoCandidates(String),
    #[error("default of factor {0:?} is not among its candidates")]
    DefaultNotCandidate(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor<V> {
    pub name: String,
    pub candidates: Vec<V>,
    pub default: V,
}

impl<V> Factor<V> {
    pub fn new(name: impl Into<String>, candidates: Vec<V>, default: V) -> Self {
        Factor {
            name: name.into(),
            candidates,
            default,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResult<V> {
    pub value: V,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneStep<V> {
    pub factor: String,
    pub results: Vec<CandidateResult<V>>,
    /// Index into `results`.
    pub winner: usize,
}

impl<V> TuneStep<V> {
    pub fn winner(&self) -> &CandidateResult<V> {
        &self.results[self.winner]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport<V> {
    pub steps: Vec<TuneStep<V>>,
    /// Winning value of every factor, in factor order.
    pub final_assignment: Vec<V>,
}

impl<V: fmt::Display> TuneReport<V> {
    /// `factor,candidate,train_acc,test_acc,winner` rows, one per candidate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("factor,candidate,train_acc,test_acc,winner\n");
        for step in &self.steps {
            for (i, r) in step.results.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{:.4},{:.4},{}\n",
                    step.factor,
                    r.value,
                    r.train_accuracy,
                    r.test_accuracy,
                    u8::from(i == step.winner)
                ));
            }
        }
        out
    }
}

fn pick_winner<V>(results: &[CandidateResult<V>]) -> usize {
    let mut best = 0;
    for (i, r) in results.iter().enumerate().skip(1) {
        let b = &results[best];
        if r.test_accuracy > b.test_accuracy || (r.test_accuracy == b.test_accuracy && r.train_accuracy > b.train_accuracy) {
            best = i;
        }
    }
    best
}

/// Runs the sweep. `eval` receives the full assignment (one value per factor)
/// and the candidate's index within its step, and returns (train, test)
/// accuracy. Candidates of one step may be evaluated concurrently.
pub fn tune_ofat<V, F>(factors: &[Factor<V>], eval: F, exec: ExecMode) -> Result<TuneReport<V>, TuneError>
where
    V: Clone + PartialEq + Send + Sync,
    F: Fn(&[V], usize) -> Result<(f64, f64), TuneError> + Sync + Send,
{
    for f in factors {
        if f.candidates.is_empty() {
            return Err(TuneError::NoCandidates(f.name.clone()));
        }
        if !f.candidates.contains(&f.default) {
            return Err(TuneError::DefaultNotCandidate(f.name.clone()));
        }
    }
    let mut assignment: Vec<V> = factors.iter().map(|f| f.default.clone()).collect();
    let mut steps = Vec::with_capacity(factors.len());
    for (k, factor) in factors.iter().enumerate() {
        let trials: Vec<Vec<V>> = factor
            .candidates
            .iter()
            .map(|c| {
                let mut a = assignment.clone();
                a[k] = c.clone();
                a
            })
            .collect();
        let indexed: Vec<(usize, &Vec<V>)> = trials.iter().enumerate().collect();
        let scores = exec.map(&indexed, |(i, a)| eval(a, *i));
        let mut results = Vec::with_capacity(trials.len());
        for (value, score) in factor.candidates.iter().zip(scores) {
            let (train_accuracy, test_accuracy) = score?;
            results.push(CandidateResult {
                value: value.clone(),
                train_accuracy,
                test_accuracy,
            });
        }
        let winner = pick_winner(&results);
        assignment[k] = results[winner].value.clone();
        steps.push(TuneStep {
            factor: factor.name.clone(),
            results,
            winner,
        });
    }
    Ok(TuneReport {
        steps,
        final_assignment: assignment,
    })
}

/// Candidate value of one of the standard training factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperValue {
    LearningRate(f64),
    Optimizer(OptimizerKind),
    Width(ArchWidth),
}

impl fmt::Display for HyperValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HyperValue::LearningRate(lr) => write!(f, "{lr:e}"),
            HyperValue::Optimizer(k) => write!(f, "{k}"),
            HyperValue::Width(w) => write!(f, "{w}"),
        }
    }
}

/// Learning rate, then optimizer, then architecture width.
pub fn standard_factors() -> Vec<Factor<HyperValue>> {
    vec![
        Factor::new(
            "learning_rate",
            LEARNING_RATE_GRID.iter().map(|&lr| HyperValue::LearningRate(lr)).collect(),
            HyperValue::LearningRate(1e-3),
        ),
        Factor::new(
            "optimizer",
            vec![HyperValue::Optimizer(OptimizerKind::Adam), HyperValue::Optimizer(OptimizerKind::Sgd)],
            HyperValue::Optimizer(OptimizerKind::Adam),
        ),
        Factor::new(
            "width",
            vec![HyperValue::Width(ArchWidth::Small), HyperValue::Width(ArchWidth::Large)],
            HyperValue::Width(ArchWidth::Small),
        ),
    ]
}

pub fn apply_assignment(base: &TrainConfig, assignment: &[HyperValue]) -> TrainConfig {
    let mut cfg = *base;
    for v in assignment {
        match *v {
            HyperValue::LearningRate(lr) => cfg.optimizer.learning_rate = lr,
            HyperValue::Optimizer(kind) => cfg.optimizer = cfg.optimizer.with_kind(kind),
            HyperValue::Width(w) => cfg.arch_width = w,
        }
    }
    cfg
}

/// Tunes the standard factors by actually training each candidate. Candidate
/// `i` of a step trains with seed `base.seed + i`.
pub fn tune_training(
    abnormality: Abnormality,
    factors: &[Factor<HyperValue>],
    train_set: &[Example],
    test_set: &[Example],
    base: &TrainConfig,
    exec: ExecMode,
) -> Result<TuneReport<HyperValue>, TuneError> {
    tune_ofat(
        factors,
        |assignment, index| {
            let mut cfg = apply_assignment(base, assignment);
            cfg.seed = base.seed.wrapping_add(index as u64);
            let net = build_model(cfg.arch_width, cfg.seed);
            let (model, _) = train(abnormality, net, train_set, test_set, &cfg)?;
            Ok((model.train_accuracy, model.test_accuracy))
        },
        exec,
    )
}
