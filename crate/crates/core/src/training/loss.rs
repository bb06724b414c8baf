//! Soft Dice loss and cross-entropy, as plain functions and as tape ops.

use crate::autodiff::{CustomBackward, Tape, Var};
use crate::tensor::{Tensor, TensorError};

use super::TrainError;

/// Floor added inside the logarithm of cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

/// `1 - (2·Σ p·t + eps) / (Σ p + Σ t + eps)`.
pub fn dice_loss_value(pred: &[f64], target: &[f64], smooth_eps: f64) -> f64 {
    let (inter, total) = dice_terms(pred, target);
    1.0 - (2.0 * inter + smooth_eps) / (total + smooth_eps)
}

/// Both sums are taken over sorted terms, so the loss depends only on the
/// multiset of `(p, t)` pairs: permuting pixels leaves it bit-unchanged.
fn dice_terms(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let sorted_sum = |mut terms: Vec<f64>| {
        terms.sort_unstable_by(f64::total_cmp);
        terms.into_iter().sum::<f64>()
    };
    let inter = sorted_sum(pred.iter().zip(target).map(|(p, t)| p * t).collect());
    let total = sorted_sum(pred.iter().zip(target).map(|(p, t)| p + t).collect());
    (inter, total)
}

pub fn cross_entropy_value(pred: &[f64], target_class: usize) -> Result<f64, TrainError> {
    let p = pred.get(target_class).ok_or(TrainError::IndexOutOfRange {
        index: target_class,
        len: pred.len(),
    })?;
    Ok(-(p + CE_FLOOR).ln())
}

struct DiceRule {
    target: Vec<f64>,
    smooth_eps: f64,
}

impl CustomBackward for DiceRule {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>> {
        let pred = inputs[0].data();
        let (inter, total) = dice_terms(pred, &self.target);
        let num = 2.0 * inter + self.smooth_eps;
        let den = total + self.smooth_eps;
        let g = upstream[0];
        // d/dp_i of -(num/den) = -(2 t_i den - num) / den^2
        vec![self
            .target
            .iter()
            .map(|t| -g * (2.0 * t * den - num) / (den * den))
            .collect()]
    }
}

/// Dice loss recorded on `tape`, differentiable w.r.t. `pred`.
pub fn dice_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    smooth_eps: f64,
) -> Result<Var, TrainError> {
    let p = tape.value(pred);
    if p.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            p.shape(),
            target.shape()
        ))
        .into());
    }
    if smooth_eps <= 0.0 {
        return Err(TrainError::InvalidConfig(format!(
            "smooth_eps must be positive, got {smooth_eps}"
        )));
    }
    let value = dice_loss_value(p.data(), target.data(), smooth_eps);
    let rule = DiceRule {
        target: target.data().to_vec(),
        smooth_eps,
    };
    Ok(tape.custom(&[pred], Tensor::scalar(value), Box::new(rule))?)
}

struct CrossEntropyRule {
    class: usize,
}

impl CustomBackward for CrossEntropyRule {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>> {
        let pred = inputs[0].data();
        let mut grad = vec![0.0; pred.len()];
        grad[self.class] = -upstream[0] / (pred[self.class] + CE_FLOOR);
        vec![grad]
    }
}

/// `-ln(pred[target_class] + 1e-12)` recorded on `tape`.
pub fn cross_entropy(tape: &mut Tape, pred: Var, target_class: usize) -> Result<Var, TrainError> {
    let value = cross_entropy_value(tape.value(pred).data(), target_class)?;
    Ok(tape.custom(
        &[pred],
        Tensor::scalar(value),
        Box::new(CrossEntropyRule {
            class: target_class,
        }),
    )?)
}
