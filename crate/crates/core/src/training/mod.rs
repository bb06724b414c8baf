//! Losses, optimizers, the training loop and evaluation.
//!
//! Each batch item runs its own forward/backward on a private tape (in
//! parallel); per-item gradients are then summed in item order so results do
//! not depend on the thread schedule.

mod loss;
mod optim;

pub use loss::{cross_entropy, cross_entropy_value, dice_loss, dice_loss_value, CE_FLOOR};
pub use optim::{Optimizer, OptimizerKind, ParamGrads, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::network::{ForwardMode, Network, NetworkError};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("missing gradient for layer {layer}, tensor {tensor}")]
    MissingGradient { layer: usize, tensor: usize },
    #[error("class index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("target does not match the loss: {0}")]
    TargetMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Dice,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    /// Dice smoothing term.
    pub smooth_eps: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            loss: LossKind::Dice,
            smooth_eps: 1.0,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.smooth_eps > 0.0 && self.smooth_eps.is_finite()) {
            return bad(format!(
                "smooth_eps must be positive, got {}",
                self.smooth_eps
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Binary mask with the network's output shape.
    Mask(Tensor),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

impl EpochReport {
    /// Equality ignoring wall-clock time.
    pub fn same_losses(&self, other: &EpochReport) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_loss.to_bits() == other.val_loss.to_bits()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_loss: f64,
    /// Fraction of items whose argmax equals the label (classification only).
    pub accuracy: Option<f64>,
}

/// Deterministic seeded split into `(train, validation)` index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::derive(seed, &[0x5711]).shuffle(&mut idx);
    let n_val =
        ((n as f64 * val_fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn item_loss(
    tape: &mut Tape,
    net: &Network,
    example: &Example,
    config: &TrainConfig,
    rng: &mut RngStream,
    mode: ForwardMode,
    param_grads: bool,
) -> Result<(crate::autodiff::Var, Vec<Vec<crate::autodiff::Var>>), TrainError> {
    let x = tape.constant(example.input.clone());
    let trace = net.forward_on_tape(tape, x, mode, rng, param_grads)?;
    let loss = match (&example.target, config.loss) {
        (Target::Mask(mask), LossKind::Dice) => {
            dice_loss(tape, trace.output, mask, config.smooth_eps)?
        }
        (Target::Class(c), LossKind::CrossEntropy) => cross_entropy(tape, trace.output, *c)?,
        (t, l) => return Err(TrainError::TargetMismatch(format!("{l:?} loss with {t:?}"))),
    };
    Ok((loss, trace.params))
}

/// Loss and parameter gradients for one example under stochastic forward.
fn item_gradients(
    net: &Network,
    example: &Example,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(f64, ParamGrads), TrainError> {
    let mut tape = Tape::new();
    let (loss, params) = item_loss(
        &mut tape,
        net,
        example,
        config,
        rng,
        ForwardMode::Stochastic,
        true,
    )?;
    tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|ps| {
            ps.iter()
                .map(|&p| tape.grad(p).map(<[f64]>::to_vec))
                .collect()
        })
        .collect();
    Ok((tape.value(loss).data()[0], grads))
}

/// Trains `net` in place, calling `on_epoch` after every epoch.
pub fn train_with(
    net: &mut Network,
    data: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (train_idx, val_idx) = split_indices(data.len(), config.val_fraction, config.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let val: Vec<Example> = val_idx.iter().map(|&i| data[i].clone()).collect();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order = train_idx.clone();
        RngStream::derive(config.seed, &[0xE90C, epoch as u64]).shuffle(&mut order);
        // Indexed by dataset position so the epoch mean is summed in a fixed order.
        let mut item_losses = vec![0.0; data.len()];
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let frozen_net = &*net;
            let results: Vec<Result<(f64, ParamGrads), TrainError>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = RngStream::derive(
                        config.seed,
                        &[0xD809, epoch as u64, step as u64, k as u64],
                    );
                    item_gradients(frozen_net, &data[i], config, &mut rng)
                })
                .collect();
            let mut total: Option<ParamGrads> = None;
            for (r, &i) in results.into_iter().zip(batch) {
                let (loss, grads) = r?;
                item_losses[i] = loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => add_grads(acc, &grads),
                }
            }
            let mut total = total.expect("batches are nonempty");
            let scale = 1.0 / batch.len() as f64;
            for g in total.iter_mut().flatten().flatten() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            optimizer.step(net, &total)?;
        }
        let val_report = evaluate(net, &val, config.loss, config.smooth_eps)?;
        net.set_epochs_trained(net.epochs_trained() + 1);
        let report = EpochReport {
            epoch: epoch + 1,
            train_loss: train_idx.iter().map(|&i| item_losses[i]).sum::<f64>()
                / train_idx.len() as f64,
            val_loss: val_report.mean_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
    }
    Ok(reports)
}

pub fn train(
    net: &mut Network,
    data: &[Example],
    config: &TrainConfig,
) -> Result<Vec<EpochReport>, TrainError> {
    train_with(net, data, config, |_| {})
}

fn add_grads(acc: &mut ParamGrads, other: &ParamGrads) {
    for (a_layer, o_layer) in acc.iter_mut().zip(other) {
        for (a, o) in a_layer.iter_mut().zip(o_layer) {
            match (a.as_mut(), o) {
                (Some(a), Some(o)) => a.iter_mut().zip(o).for_each(|(x, y)| *x += y),
                (None, Some(o)) => *a = Some(o.clone()),
                _ => {}
            }
        }
    }
}

/// Mean loss under deterministic forward; accuracy for class targets.
pub fn evaluate(
    net: &Network,
    data: &[Example],
    loss: LossKind,
    smooth_eps: f64,
) -> Result<EvalReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let per_item: Vec<Result<(f64, Option<bool>), TrainError>> = data
        .par_iter()
        .map(|example| {
            let out = net.forward(
                &example.input,
                ForwardMode::Deterministic,
                &mut RngStream::new(0),
            )?;
            match (&example.target, loss) {
                (Target::Mask(mask), LossKind::Dice) => {
                    if mask.shape() != out.shape() {
                        return Err(TensorError::ShapeMismatch(format!(
                            "prediction {:?} vs mask {:?}",
                            out.shape(),
                            mask.shape()
                        ))
                        .into());
                    }
                    Ok((dice_loss_value(out.data(), mask.data(), smooth_eps), None))
                }
                (Target::Class(c), LossKind::CrossEntropy) => {
                    let l = cross_entropy_value(out.data(), *c)?;
                    Ok((l, Some(argmax(out.data()) == *c)))
                }
                (t, l) => Err(TrainError::TargetMismatch(format!("{l:?} loss with {t:?}"))),
            }
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut classified = 0usize;
    for r in per_item {
        let (l, hit) = r?;
        loss_sum += l;
        if let Some(hit) = hit {
            classified += 1;
            correct += usize::from(hit);
        }
    }
    Ok(EvalReport {
        count: data.len(),
        mean_loss: loss_sum / data.len() as f64,
        accuracy: (classified > 0).then(|| correct as f64 / classified as f64),
    })
}

/// Index of the largest element; first wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Trains every layer of a classifier on a pretext task, then re-freezes the
/// conv stack. The caller typically swaps in a new head afterwards.
pub fn pretrain_features(
    net: &mut Network,
    pretext: &[Example],
    config: &TrainConfig,
) -> Result<Vec<EpochReport>, TrainError> {
    net.set_conv_trainable(true);
    let result = train(net, pretext, config);
    net.set_conv_trainable(false);
    result
}
