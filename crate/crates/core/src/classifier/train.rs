use rand::seq::SliceRandom;
use serde::Serialize;

use super::{evaluate_accuracy, Abnormality, ClassifierError, Example, TrainConfig, TrainedModel, DEFAULT_THRESHOLD};
use crate::neuralnet::{bce_loss, Gradients, Network};
use crate::optimizer::Optimizer;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Mini-batch training with a per-epoch seeded shuffle.
///
/// The network is trained in place from its current parameters. Gradients are
/// averaged over each batch; the last batch of an epoch may be short.
pub fn train(
    abnormality: Abnormality,
    mut net: Network,
    train_set: &[Example],
    test_set: &[Example],
    config: &TrainConfig,
) -> Result<(TrainedModel, Vec<EpochRecord>), ClassifierError> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(ClassifierError::EmptyDataset);
    }
    for ex in train_set.iter().chain(test_set) {
        ex.input.expect_shape(net.input_shape(), "training example")?;
    }

    let mut optimizer = Optimizer::new(config.optimizer, &net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = rng::stream(config.seed, 0x7472_6169_6e);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffler);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&net);
            for &i in batch {
                let ex = &train_set[i];
                let (p, cache) = net.forward(&ex.input)?;
                loss_sum += bce_loss(p, ex.label);
                grads.accumulate(&net.backward(&cache, ex.label)?);
            }
            grads.scale(1.0 / batch.len() as f64);
            optimizer.step(&mut net, &grads)?;
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            train_accuracy: evaluate_accuracy(&net, train_set)?.value(),
            test_accuracy: evaluate_accuracy(&net, test_set)?.value(),
        });
    }

    let last = *history.last().expect("at least one epoch");
    Ok((
        TrainedModel {
            abnormality,
            network: net,
            threshold: DEFAULT_THRESHOLD,
            train_accuracy: last.train_accuracy,
            test_accuracy: last.test_accuracy,
            config: Some(*config),
        },
        history,
    ))
}
