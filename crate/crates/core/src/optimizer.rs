//! Plain SGD and bias-corrected Adam.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::neuralnet::{Gradients, Network, NnError, Tensor};

/// Learning rates swept during tuning.
pub const LEARNING_RATE_GRID: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..OptimizerConfig::adam(learning_rate)
        }
    }

    pub fn with_kind(self, kind: OptimizerKind) -> Self {
        OptimizerConfig { kind, ..self }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(format!("{name} must lie in (0,1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

fn check_lengths(params: usize, grads: usize) -> Result<(), NnError> {
    if params == grads {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch(format!(
            "{params} parameters but {grads} gradients"
        )))
    }
}

/// `p ← p − lr·g`
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NnError> {
    check_lengths(params.len(), grads.len())?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &OptimizerConfig) -> Result<(), NnError> {
    check_lengths(params.len(), grads.len())?;
    check_lengths(state.m.len(), grads.len())?;
    check_lengths(state.v.len(), grads.len())?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Optimizer bound to one network's parameter layout.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    adam: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, net: &Network) -> Self {
        let adam = match cfg.kind {
            OptimizerKind::Adam => net.params().iter().map(|t| AdamState::new(t.len())).collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer { cfg, adam }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<(), NnError> {
        let params = net.params_mut();
        check_lengths(params.len(), grads.tensors().len())?;
        for (i, (p, g)) in params.into_iter().zip(grads.tensors()).enumerate() {
            step_tensor(&self.cfg, self.adam.get_mut(i), p, g)?;
        }
        Ok(())
    }
}

fn step_tensor(cfg: &OptimizerConfig, state: Option<&mut AdamState>, p: &mut Tensor, g: &Tensor) -> Result<(), NnError> {
    if p.shape() != g.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "parameter {:?} vs gradient {:?}",
            p.shape(),
            g.shape()
        )));
    }
    match (cfg.kind, state) {
        (OptimizerKind::Sgd, _) => sgd_step(p.data_mut(), g.data(), cfg.learning_rate),
        (OptimizerKind::Adam, Some(state)) => adam_step(p.data_mut(), g.data(), state, cfg),
        (OptimizerKind::Adam, None) => Err(NnError::ShapeMismatch("no Adam state for parameter".into())),
    }
}
