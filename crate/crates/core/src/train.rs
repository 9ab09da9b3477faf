//! Batch-size-one training with momentum SGD on the joint loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::model::JrnNetwork;
use crate::optim::{sgd_momentum_step, OptimizerState};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{ConvParams, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Base learning rate of every convolution.
    pub learning_rate: f64,
    /// Global multiplier on the base rate.
    pub lr_scale: f64,
    pub momentum: f64,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 1, learning_rate: 0.001, lr_scale: 5.0, momentum: 0.9, seed: 0 }
    }
}

impl TrainConfig {
    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate * self.lr_scale
    }
}

/// One training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub sample: String,
    pub depth_loss: f64,
    pub semantic_loss: f64,
}

impl LossRecord {
    pub fn joint(&self) -> f64 {
        self.depth_loss + self.semantic_loss
    }
}

/// Joint loss of one sample and its parameter gradients.
pub fn loss_and_gradients<T: Scalar>(
    network: &JrnNetwork<T>,
    sample: &Sample<T>,
) -> Result<(f64, f64, Vec<ConvParams<T>>)> {
    let mut tape = Tape::new();
    let d = tape.input(sample.input.depth.clone());
    let s = tape.input(sample.input.semantics.clone());
    let heads = network.record(&mut tape, d, s)?;
    let ld = tape.depth_loss(heads.depth, &sample.gt)?;
    let ls = tape.semantic_loss(heads.logits, &sample.gt)?;
    let total = tape.add(ld, ls)?;
    let depth_loss = tape.value(ld)?.data()[0].widen();
    let semantic_loss = tape.value(ls)?.data()[0].widen();
    let grads = tape.backward(total, Tensor::scalar(T::one()))?;
    Ok((depth_loss, semantic_loss, grads.into_params()))
}

/// Visits every sample once per epoch in a seeded shuffled order, taking one
/// optimizer step per sample. `on_step` sees each record as it is produced.
pub fn train_with<T: Scalar>(
    network: &mut JrnNetwork<T>,
    dataset: &[Sample<T>],
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if dataset.is_empty() {
        return Err(Error::Usage("training needs at least one sample".into()));
    }
    let k = network.num_classes();
    for s in dataset {
        if s.num_classes() != k {
            return Err(Error::Config(format!(
                "sample `{}` has {} classes, network expects {k}",
                s.id,
                s.num_classes()
            )));
        }
        if s.gt.mask().count() == 0 {
            return Err(Error::Data(format!("sample `{}` has no valid pixels", s.id)));
        }
    }
    let mut state = OptimizerState::new(network.params(), config.effective_learning_rate(), config.momentum)?;
    let mut trace = Vec::with_capacity(config.epochs * dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for &i in &order {
            let sample = &dataset[i];
            let (depth_loss, semantic_loss, grads) = loss_and_gradients(network, sample)?;
            let record =
                LossRecord { iteration: trace.len(), epoch, sample: sample.id.clone(), depth_loss, semantic_loss };
            if !record.joint().is_finite() {
                return Err(Error::Diverged {
                    iteration: record.iteration,
                    message: format!(
                        "non-finite loss on sample `{}` (depth {depth_loss}, semantic {semantic_loss})",
                        sample.id
                    ),
                });
            }
            sgd_momentum_step(network.params_mut(), &grads, &mut state)?;
            on_step(&record);
            trace.push(record);
        }
    }
    Ok(trace)
}

pub fn train<T: Scalar>(
    network: &mut JrnNetwork<T>,
    dataset: &[Sample<T>],
    config: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    train_with(network, dataset, config, |_| {})
}

/// Mean joint loss over `records`.
pub fn mean_joint_loss(records: &[LossRecord]) -> f64 {
    records.iter().map(LossRecord::joint).sum::<f64>() / records.len() as f64
}
