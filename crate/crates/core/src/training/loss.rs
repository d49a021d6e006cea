use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 1.0, dice: 1.0 }
    }
}

/// Mean pixelwise binary cross-entropy from logits:
/// `max(x, 0) - x*y + log(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((logits.relu()? - (logits * targets)?)? + softplus)?;
    Ok(per.mean_all()?)
}

/// Soft Dice loss per sample, averaged over the batch.
pub fn dice_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let p = sigmoid(logits)?.flatten_from(1)?;
    let y = targets.flatten_from(1)?;
    let inter = (&p * &y)?.sum(D::Minus1)?;
    let denom = ((p.sum(D::Minus1)? + y.sum(D::Minus1)?)? + DICE_SMOOTH)?;
    let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    Ok(dice.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

/// `bce * BCE + dice * Dice` over `(batch, H, W)` logits and 0/1 targets.
pub fn segmentation_loss(logits: &Tensor, targets: &Tensor, w: &LossWeights) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} and targets {:?} differ",
            logits.dims(),
            targets.dims()
        )));
    }
    let bce = (bce_with_logits(logits, targets)? * w.bce)?;
    let dice = (dice_loss(logits, targets)? * w.dice)?;
    Ok((bce + dice)?)
}
