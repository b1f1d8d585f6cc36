//! The full optimization recipe: mini-batch Adam with a cosine schedule,
//! per-epoch validation Dice, early stopping with a small improvement
//! threshold, and best-checkpoint selection. Single-threaded and
//! deterministic: shuffling and augmentation streams derive from the run
//! seed, sample index, and epoch alone.

pub mod loss;
pub mod optim;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentPolicy};
use crate::data::{sample_seed, SegmentationSample};
use crate::error::{Error, Result};
use crate::metrics::{argmax_masks, evaluate, LabelMask, MetricsRecord};
use crate::network::Network;
use crate::tensor::{Ctx, ParamStore, Tape};
use loss::{combined_loss, one_hot_target, supervised_loss};
use optim::{cosine_lr, Adam};

/// Index salt separating the epoch-shuffle stream from per-sample
/// augmentation streams.
const SHUFFLE_STREAM: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-Dice improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    /// Average the loss over all supervision heads (otherwise train on
    /// the fused output alone).
    pub deep_supervision_loss: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 300,
            patience: 100,
            seed: 0,
            dice_weight: 1.0,
            ce_weight: 1.0,
            deep_supervision_loss: true,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::config(format!(
                "patience must be in 1..=max_epochs ({}), got {}",
                self.max_epochs, self.patience
            )));
        }
        if self.dice_weight < 0.0 || self.ce_weight < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    CompletedMaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch with the highest validation Dice.
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// Line-delimited JSON, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "epochs_run": self.records.len(),
            "best_epoch": self.best_epoch,
            "best_val_dice": self.best_val_dice,
            "stop_reason": self.stop_reason,
        }))
        .expect("summary serializes")
    }
}

/// Early stopping on validation Dice: improvement means strictly greater
/// than the best by at least `min_delta`; stop once `patience`
/// consecutive epochs fail to improve.
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: usize,
    streak: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, min_delta: 1e-5, best: f64::NEG_INFINITY, best_epoch: 0, streak: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_dice: f64) -> Verdict {
        if val_dice > self.best + self.min_delta {
            self.best = val_dice;
            self.best_epoch = epoch;
            self.streak = 0;
            Verdict { improved: true, stop: false }
        } else {
            self.streak += 1;
            Verdict { improved: false, stop: self.streak >= self.patience }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_value(&self) -> f64 {
        self.best
    }
}

/// Stack samples into network input (B,1,H,W) and one-hot target tensors.
fn batch_tensors(
    samples: &[SegmentationSample],
    num_classes: usize,
) -> Result<(Array4<f32>, Array4<f32>)> {
    let (h, w) = samples[0].image.dim();
    let mut input = Array4::zeros((samples.len(), 1, h, w));
    for (bi, s) in samples.iter().enumerate() {
        if s.image.dim() != (h, w) || s.mask.dim() != (h, w) {
            return Err(Error::usage(format!(
                "sample {} has shape {:?}/{:?}, batch expects {:?}",
                s.identifier,
                s.image.dim(),
                s.mask.dim(),
                (h, w)
            )));
        }
        input.slice_mut(ndarray::s![bi, 0, .., ..]).assign(&s.image);
    }
    let masks: Vec<&LabelMask> = samples.iter().map(|s| &s.mask).collect();
    let target = one_hot_target(&masks, num_classes)?;
    Ok((input, target))
}

/// Run the network over a sample set without gradients: mean loss,
/// aggregated metrics, and the predicted masks in input order.
pub fn evaluate_network(
    net: &Network,
    ps: &mut ParamStore<f32>,
    samples: &[SegmentationSample],
    batch_size: usize,
    config: &TrainConfig,
) -> Result<(f64, MetricsRecord, Vec<LabelMask>)> {
    if samples.is_empty() {
        return Err(Error::usage("evaluation set is empty"));
    }
    let classes = net.spec.num_classes;
    let mut losses = Vec::new();
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let (input, target) = batch_tensors(chunk, classes)?;
        let tape: Tape<f32> = Tape::new(false);
        let x = tape.leaf(input);
        let t = tape.leaf(target);
        let mut ctx = Ctx { tape: &tape, ps, train: false };
        let out = net.forward(&mut ctx, x)?;
        let loss = if config.deep_supervision_loss && out.heads.len() > 1 {
            supervised_loss(&tape, &out.heads, t, config.dice_weight, config.ce_weight)?
        } else {
            combined_loss(&tape, out.fused, t, config.dice_weight, config.ce_weight)?
        };
        losses.push(tape.value(loss)[(0, 0, 0, 0)] as f64);
        preds.extend(argmax_masks(&tape.value(out.fused)));
    }
    let gts: Vec<LabelMask> = samples.iter().map(|s| s.mask.clone()).collect();
    let record = evaluate(&preds, &gts, classes)?;
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((mean_loss, record, preds))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Weights and batch-norm statistics from the best-validation epoch.
    pub best_params: ParamStore<f32>,
}

/// Train `net` in place; `ps` holds the final weights, the returned
/// outcome carries the best-epoch snapshot and full history.
pub fn train(
    net: &Network,
    ps: &mut ParamStore<f32>,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    config: &TrainConfig,
    policy: &AugmentPolicy,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::usage("validation set is empty"));
    }
    let classes = net.spec.num_classes;
    let mut adam: Adam<f32> = Adam::new();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_params = ps.clone();
    let mut records = Vec::new();
    let mut stop_reason = StopReason::CompletedMaxEpochs;

    for epoch in 1..=config.max_epochs {
        let lr = cosine_lr(epoch - 1, config.max_epochs, config.learning_rate);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(sample_seed(config.seed, SHUFFLE_STREAM, epoch));
        order.shuffle(&mut shuffle_rng);

        let mut batch_losses = Vec::new();
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<SegmentationSample> = chunk
                .iter()
                .map(|&idx| {
                    if config.augment {
                        augment(&train_set[idx], policy, sample_seed(config.seed, idx, epoch))
                    } else {
                        train_set[idx].clone()
                    }
                })
                .collect();
            let (input, target) = batch_tensors(&batch, classes)?;
            let tape: Tape<f32> = Tape::new(true);
            let x = tape.leaf(input);
            let t = tape.leaf(target);
            let mut ctx = Ctx { tape: &tape, ps, train: true };
            let out = net.forward(&mut ctx, x)?;
            let loss = if config.deep_supervision_loss && out.heads.len() > 1 {
                supervised_loss(&tape, &out.heads, t, config.dice_weight, config.ce_weight)?
            } else {
                combined_loss(&tape, out.fused, t, config.dice_weight, config.ce_weight)?
            };
            let loss_value = tape.value(loss)[(0, 0, 0, 0)] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite { epoch, batch: bi, lr });
            }
            let grads = tape.backward(loss);
            adam.step(&tape, ps, &grads, lr);
            batch_losses.push(loss_value);
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;

        let (val_loss, val_metrics, _) =
            evaluate_network(net, ps, val_set, config.batch_size, config)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { epoch, batch: 0, lr });
        }
        let val_dice = val_metrics.mean_dice;
        records.push(EpochRecord { epoch, train_loss, val_loss, val_dice, lr });

        let verdict = stopper.observe(epoch, val_dice);
        if verdict.improved {
            best_params = ps.clone();
        }
        if verdict.stop {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    let history = TrainHistory {
        records,
        best_epoch: stopper.best_epoch(),
        best_val_dice: stopper.best_value(),
        stop_reason,
    };
    Ok(TrainOutcome { history, best_params })
}
