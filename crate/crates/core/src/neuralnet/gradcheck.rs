use rand::seq::index;

use super::{bce_loss, Network, NnError, Tensor};
use crate::exec::ExecMode;
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the number of checked parameters.
    pub min_samples: usize,
    /// Parameters drawn from each tensor before topping up to `min_samples`.
    pub per_tensor: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            min_samples: 200,
            per_tensor: 40,
            seed: 0x6772_6164,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Worst relative error per parameter tensor (0 for tensors with no samples).
    pub per_tensor: Vec<f64>,
    /// (tensor, index, analytic, numeric) for every checked parameter.
    pub samples: Vec<(usize, usize, f64, f64)>,
    /// Candidates skipped because the ±step stencil crossed a ReLU or
    /// max-pool kink, where the loss is not differentiable.
    pub kinked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between backprop and central finite differences over a
/// fixed sample of at least 200 parameters.
pub fn grad_check(net: &Network, input: &Tensor, label: u8) -> Result<f64, NnError> {
    Ok(grad_check_with(net, input, label, &GradCheckConfig::default())?.max_relative_error)
}

enum Probe {
    Smooth(f64),
    Kinked,
}

pub fn grad_check_with(net: &Network, input: &Tensor, label: u8, cfg: &GradCheckConfig) -> Result<GradCheckReport, NnError> {
    let (_, cache) = net.forward(input)?;
    let analytic = net.backward(&cache, label)?;
    let (_, base_pattern) = net.probability_with_pattern(input)?;

    let probe_batch = |batch: &[(usize, usize)]| -> Result<Vec<Probe>, NnError> {
        const CHUNKS: usize = 16;
        let chunk_len = batch.len().div_ceil(CHUNKS).max(1);
        let chunks: Vec<&[(usize, usize)]> = batch.chunks(chunk_len).collect();
        let results: Vec<Result<Vec<Probe>, NnError>> = cfg.exec.map(&chunks, |chunk| {
            let mut probe = net.clone();
            chunk
                .iter()
                .map(|&(t, i)| {
                    let original = probe.params()[t].data()[i];
                    probe.params_mut()[t].data_mut()[i] = original + cfg.step;
                    let (p_plus, pat_plus) = probe.probability_with_pattern(input)?;
                    probe.params_mut()[t].data_mut()[i] = original - cfg.step;
                    let (p_minus, pat_minus) = probe.probability_with_pattern(input)?;
                    probe.params_mut()[t].data_mut()[i] = original;
                    if pat_plus != base_pattern || pat_minus != base_pattern {
                        return Ok(Probe::Kinked);
                    }
                    let diff = bce_loss(p_plus, label) - bce_loss(p_minus, label);
                    Ok(Probe::Smooth(diff / (2.0 * cfg.step)))
                })
                .collect()
        });
        Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().flatten().collect())
    };

    let sizes: Vec<usize> = net.params().iter().map(|t| t.len()).collect();
    let mut rng = rng::seeded(cfg.seed);
    // candidate order per tensor; huge tensors only expose a bounded prefix
    let candidates: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&size| index::sample(&mut rng, size, size.min(64 * cfg.per_tensor.max(1))).into_vec())
        .collect();
    let mut cursor = vec![0usize; sizes.len()];
    let mut accepted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); sizes.len()];
    let mut kinked = 0;
    let target = cfg.min_samples.min(sizes.iter().sum());
    let mut quota = cfg.per_tensor.max(1);

    loop {
        for t in 0..sizes.len() {
            let want = quota.min(sizes[t]);
            while accepted[t].len() < want && cursor[t] < candidates[t].len() {
                let take = (want - accepted[t].len()).min(candidates[t].len() - cursor[t]);
                let batch: Vec<(usize, usize)> =
                    candidates[t][cursor[t]..cursor[t] + take].iter().map(|&i| (t, i)).collect();
                cursor[t] += take;
                for (&(_, i), probe) in batch.iter().zip(probe_batch(&batch)?) {
                    match probe {
                        Probe::Smooth(n) => accepted[t].push((i, n)),
                        Probe::Kinked => kinked += 1,
                    }
                }
            }
        }
        let total: usize = accepted.iter().map(Vec::len).sum();
        let exhausted = (0..sizes.len()).all(|t| cursor[t] >= candidates[t].len());
        if total >= target || exhausted {
            break;
        }
        quota += cfg.per_tensor.max(1);
    }

    let mut per_tensor = vec![0.0f64; sizes.len()];
    let mut samples = Vec::new();
    for (t, list) in accepted.iter_mut().enumerate() {
        list.sort_by_key(|&(i, _)| i);
        for &(i, n) in list.iter() {
            let a = analytic.tensors()[t].data()[i];
            per_tensor[t] = per_tensor[t].max(relative_error(a, n));
            samples.push((t, i, a, n));
        }
    }
    Ok(GradCheckReport {
        max_relative_error: per_tensor.iter().copied().fold(0.0, f64::max),
        per_tensor,
        samples,
        kinked,
    })
}
