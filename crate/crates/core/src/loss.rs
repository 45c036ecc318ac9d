//! Segmentation objective: focal + 10 · dice + squared IoU-prediction error.

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::metrics;
use crate::tensor::{Tape, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const DICE_WEIGHT: f64 = 10.0;
pub const DICE_EPS: f64 = 1.0;

/// Component values of one evaluation, for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub focal: f64,
    pub dice: f64,
    pub mse: f64,
    /// IoU of the logits thresholded at 0, the regression target of the IoU head.
    pub actual_iou: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.focal + DICE_WEIGHT * self.dice + self.mse
    }
}

/// Builds the loss on `tape`. `gt` must be a 0/1 tensor shaped like `logits`.
pub fn loss_seg(tape: &mut Tape<'_>, logits: Var, gt: &Tensor, predicted_iou: Var) -> Result<(Var, LossParts)> {
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("ground truth must be binary, found {v}")));
    }
    let shape = tape.shape(logits).to_vec();
    let (h, w) = match shape[..] {
        [h, w] => (h, w),
        _ => return Err(Error::dim("loss_seg", &shape, gt.shape())),
    };
    if gt.shape() != [h, w] {
        return Err(Error::dim("loss_seg", &shape, gt.shape()));
    }
    if tape.value(predicted_iou).len() != 1 {
        return Err(Error::dim("loss_seg iou", tape.shape(predicted_iou), &[1]));
    }
    let pred = Mask::from_logits(h, w, tape.value(logits).data())?;
    let gt_mask = Mask::new(h, w, gt.data().iter().map(|&v| v == 1.0).collect())?;
    let actual = metrics::iou(&pred, &gt_mask)?;

    let focal = tape.focal_loss(logits, gt, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let dice = tape.dice_loss(logits, gt, DICE_EPS)?;
    let diff = tape.add_scalar(predicted_iou, -actual);
    let sq = tape.mul(diff, diff)?;
    let mse = tape.sum(sq);
    let parts = LossParts {
        focal: tape.value(focal).data()[0],
        dice: tape.value(dice).data()[0],
        mse: tape.value(mse).data()[0],
        actual_iou: actual,
    };
    let d10 = tape.scale(dice, DICE_WEIGHT);
    let s = tape.add(focal, d10)?;
    Ok((tape.add(s, mse)?, parts))
}
