//! Base pre-training on the reserved base domain.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::SegModel;
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::loss::loss_seg;
use crate::metrics::SegScores;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng;
use crate::synth::Sample;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Held-out mIoU the base must reach.
    pub min_miou: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 0.003,
            train_samples: 400,
            test_samples: 80,
            min_miou: 0.7,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Validation("pretrain epochs, batch and sample counts must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Validation("pretrain learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub heldout: SegScores,
    pub fingerprint: String,
    pub param_count: usize,
}

/// Mean scores of `model` (optionally adapted) over `samples`.
pub fn evaluate(model: &SegModel, adapters: Option<&AdapterSet>, samples: &[Sample]) -> Result<SegScores> {
    let scores = samples
        .iter()
        .map(|s| {
            let out = model.predict(&s.image, &s.prompts, adapters)?;
            score_logits(&out.logits, &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    SegScores::mean(&scores)
}

/// Thresholded-mask IoU/F1 and sigmoid-probability MAE of one prediction.
pub fn score_logits(logits: &Tensor, gt: &Mask) -> Result<SegScores> {
    let pred = Mask::from_logits(gt.height, gt.width, logits.data())?;
    let prob: Vec<f64> = logits.data().iter().map(|&z| crate::tensor::sigmoid(z)).collect();
    SegScores::of(&pred, &prob, gt)
}

/// Trains every base weight on `train`, checks `test`, and freezes the model.
pub fn pretrain_base(
    mut model: SegModel,
    train: &[Sample],
    test: &[Sample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(SegModel, PretrainReport)> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("pretraining needs train and test samples".into()));
    }
    let mc = model.config().clone();
    let n_params = model.weights().named().len();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &model.weights().named().iter().map(|(_, t)| t.len()).collect::<Vec<_>>(),
    );
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let prepared: Vec<(Tensor, Tensor, Tensor)> = train
        .iter()
        .map(|s| {
            let heat = model.heatmap(&s.prompts)?;
            let gt = Tensor::new(vec![mc.image_size, mc.image_size], s.mask.to_f64())?;
            Ok((model.patchify(&s.image)?, model.heat_tensor(&heat)?, gt))
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(&[rng::tag::PRETRAIN, seed, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Tensor> = model.weights().named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            for &i in batch {
                let (patches, heat, gt) = &prepared[i];
                let mut tape = Tape::new();
                let vars = model.register(&mut tape, true);
                let p = tape.constant(patches);
                let h = tape.constant(heat);
                let x = model.embed_on(&mut tape, &vars, p)?;
                let x = model.blocks_on(&mut tape, &vars, x, 0..mc.num_blocks, None, None, None)?;
                let f = model.final_norm_on(&mut tape, &vars, x)?;
                let (logits, iou) = model.decode_on(&mut tape, &vars, f, h)?;
                let (loss, _) = loss_seg(&mut tape, logits, gt, iou)?;
                epoch_loss += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                for (a, &v) in acc.iter_mut().zip(&vars.all) {
                    if let Some(g) = grads.raw(v) {
                        for (x, y) in a.data_mut().iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let acc: Vec<Tensor> = acc.into_iter().map(|t| t.scale(inv)).collect();
            let lr = cosine_lr(cfg.lr, step, total);
            let mut params = model.weights_mut()?.tensors_mut();
            debug_assert_eq!(params.len(), n_params);
            opt.step(&mut params, &acc, lr)?;
            step += 1;
        }
        let mean = epoch_loss / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingFailure(format!("loss diverged in epoch {epoch}")));
        }
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    model.freeze();
    let heldout = evaluate(&model, None, test)?;
    let report = PretrainReport {
        epoch_losses,
        heldout,
        fingerprint: model.fingerprint(),
        param_count: model.weights().param_count(),
    };
    if heldout.iou < cfg.min_miou {
        return Err(Error::TrainingFailure(format!(
            "held-out base mIoU {:.4} below required {:.2} after {} epochs",
            heldout.iou, cfg.min_miou, cfg.epochs
        )));
    }
    Ok((model, report))
}
