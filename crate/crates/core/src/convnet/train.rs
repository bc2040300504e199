//! Mini-batch training with Adam.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::adam::{AdamConfig, AdamState};
use super::net::{ConvNetModel, DropoutMasks};
use super::{ConvNetError, Image};
use crate::metrics::argmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// L2 coefficient on the weight tensors.
    pub gamma: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            adam: AdamConfig::default(),
            gamma: 1e-4,
            dropout: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's mini-batches.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV with columns `epoch,train_loss,train_acc,val_loss,val_acc`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,train_loss,train_acc,val_loss,val_acc")?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        for r in &self.epochs {
            writeln!(
                w,
                "{},{:.6},{:.6},{},{}",
                r.epoch,
                r.train_loss,
                r.train_acc,
                opt(r.val_loss),
                opt(r.val_acc)
            )?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ConvNetError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(&'static str),
    #[error("training diverged in epoch {epoch}: {cause}")]
    Diverged {
        epoch: usize,
        cause: ConvNetError,
        history: TrainHistory,
    },
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate(
    model: &ConvNetModel,
    images: &[Image],
    labels: &[usize],
) -> Result<(f64, f64), ConvNetError> {
    if images.is_empty() {
        return Err(ConvNetError::EmptyBatch);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (img, &label) in images.iter().zip(labels) {
        let probs = model.forward(img)?.probs;
        loss -= probs[label].max(1e-300).ln();
        if argmax(probs.iter().copied()) == label {
            correct += 1;
        }
    }
    let n = images.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `model` in place and returns the per-epoch history.
///
/// Sample order is reshuffled every epoch from a generator seeded with
/// `cfg.seed`; dropout masks come from the same generator. Batch-norm running
/// statistics are updated after every step and used for validation.
pub fn train(
    model: &mut ConvNetModel,
    train_set: (&[Image], &[usize]),
    val_set: (&[Image], &[usize]),
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let (images, labels) = train_set;
    if images.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if images.len() != labels.len() || val_set.0.len() != val_set.1.len() {
        return Err(ConvNetError::Shape("image and label counts differ".into()).into());
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(TrainError::Config("epochs and batch size must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(TrainError::Config("dropout must lie in [0, 1)"));
    }
    model.dropout = cfg.dropout;
    let hidden = model.arch.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.tensor_sizes());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..images.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let masks = DropoutMasks::sample(chunk.len(), hidden, cfg.dropout, &mut rng);
            let out = match model.training_loss(&batch, &batch_labels, cfg.gamma, &masks) {
                Ok(out) if out.loss.is_finite() => out,
                Ok(_) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        cause: ConvNetError::NonFinite { layer: "loss" },
                        history,
                    })
                }
                Err(cause @ ConvNetError::NonFinite { .. }) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        cause,
                        history,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            loss_sum += out.data_loss * chunk.len() as f64;
            correct += out
                .probs
                .iter()
                .zip(&batch_labels)
                .filter(|(p, &l)| argmax(p.iter().copied()) == l)
                .count();

            let grads: Vec<&[f64]> = out.grads.tensors.iter().map(Vec::as_slice).collect();
            adam.step(&mut model.tensors_mut(), &grads, &cfg.adam)?;
            model
                .bn
                .update_running(&out.bn_mean, &out.bn_var, out.bn_count);
        }
        let (val_loss, val_acc) = if val_set.0.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(model, val_set.0, val_set.1)?;
            (Some(l), Some(a))
        };
        let n = images.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        });
        log::debug!(
            "epoch {epoch}: train loss {:.4} val acc {:?}",
            loss_sum / n,
            val_acc
        );
    }
    model.mark_trained();
    Ok(history)
}
