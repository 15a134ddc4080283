//! Segmentation losses: binary focal, soft Dice and their sum.
//!
//! Every loss takes sigmoid probabilities and a binary target of the same
//! shape and reduces to a single mean value over the whole batch.

use crate::autograd::{Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crate::autograd::{FocalParams, DICE_SMOOTH};

fn check(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(())
}

/// Mean binary focal loss
/// `−y·α·(1−p)^γ·ln p − (1−y)·α·p^γ·ln(1−p)`, with `p` clamped away from 0
/// and 1.
pub fn binary_focal(pred: &Tensor, target: &Tensor, params: FocalParams) -> Result<f64> {
    check(pred, target)?;
    Ok(crate::autograd::focal_value(pred.data(), target.data(), params))
}

/// Global soft Dice loss `1 − (2·Σyp + s) / (Σy + Σp + s)`.
pub fn dice(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check(pred, target)?;
    Ok(crate::autograd::dice_value(pred.data(), target.data()))
}

/// Binary focal loss plus Dice loss.
pub fn hybrid(pred: &Tensor, target: &Tensor, params: FocalParams) -> Result<f64> {
    Ok(binary_focal(pred, target, params)? + dice(pred, target)?)
}

/// Hybrid loss of `sigmoid(logits)` with the sigmoid and everything after it
/// in double precision. Near-saturated probabilities keep their accuracy,
/// which matters when the loss is differenced numerically.
pub fn hybrid_from_logits(logits: &Tensor, target: &Tensor, params: FocalParams) -> Result<f64> {
    check(logits, target)?;
    let p = || logits.data().iter().map(|&z| 1.0 / (1.0 + (-(z as f64)).exp()));
    Ok(crate::autograd::focal_value_f64(p(), target.data(), params)
        + crate::autograd::dice_value_f64(p(), target.data()))
}

/// Records the hybrid loss of `pred` on `tape`.
pub fn hybrid_on_tape(tape: &mut Tape, pred: VarId, target: &Tensor, params: FocalParams) -> Result<VarId> {
    let f = tape.focal_loss(pred, target, params)?;
    let d = tape.dice_loss(pred, target)?;
    tape.add(f, d)
}
