//! Minibatch training with AdamW, cosine decay and best-val checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::search::{evaluate_accuracy, evaluate_subnet, Partition};
use crate::supernet::{sandwich_train_step, Subnet, Supernet};
use crate::tensor::{cosine_lr, AdamW, Mode, Tape, Tensor};

use super::data::{augment, Dataset, Split, Subset};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate for a batch of 1024; scaled linearly with the
    /// actual batch size.
    pub lr_per_1024: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub drop_path_rate: f64,
    /// Stop after this many optimizer steps; 0 runs every epoch in full.
    pub max_steps: usize,
    /// Std of the per-channel brightness offset; 0 disables augmentation.
    pub augment_noise: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr_per_1024: 0.032,
            weight_decay: 0.05,
            seed: 0,
            drop_path_rate: 0.0,
            max_steps: 0,
            augment_noise: 0.1,
            eval_batch: 200,
        }
    }
}

impl TrainConfig {
    pub fn peak_lr(&self) -> f64 {
        self.lr_per_1024 * self.batch_size as f64 / 1024.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("epochs, batch_size and eval_batch must be positive"));
        }
        if !(self.lr_per_1024.is_finite() && self.lr_per_1024 > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr_per_1024)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate)));
        }
        if !(self.augment_noise >= 0.0 && self.augment_noise.is_finite()) {
            return Err(Error::config("augment_noise must be non-negative"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr_per_1024".into(), format!("{:?}", self.lr_per_1024)),
            ("weight_decay".into(), format!("{:?}", self.weight_decay)),
            ("seed".into(), self.seed.to_string()),
            ("drop_path_rate".into(), format!("{:?}", self.drop_path_rate)),
            ("max_steps".into(), self.max_steps.to_string()),
            ("augment_noise".into(), format!("{:?}", self.augment_noise)),
            ("eval_batch".into(), self.eval_batch.to_string()),
        ]
    }

    /// Override defaults with the given pairs; unknown keys are rejected.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in pairs {
            let bad = || Error::config(format!("invalid value '{v}' for training key '{k}'"));
            match k.as_str() {
                "epochs" => c.epochs = v.parse().map_err(|_| bad())?,
                "batch_size" => c.batch_size = v.parse().map_err(|_| bad())?,
                "lr_per_1024" => c.lr_per_1024 = v.parse().map_err(|_| bad())?,
                "weight_decay" => c.weight_decay = v.parse().map_err(|_| bad())?,
                "seed" => c.seed = v.parse().map_err(|_| bad())?,
                "drop_path_rate" => c.drop_path_rate = v.parse().map_err(|_| bad())?,
                "max_steps" => c.max_steps = v.parse().map_err(|_| bad())?,
                "augment_noise" => c.augment_noise = v.parse().map_err(|_| bad())?,
                "eval_batch" => c.eval_batch = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::config(format!("unknown training key '{k}'"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Something [`train_classifier`] can optimize.
pub trait Trainable {
    /// One optimizer step on a batch; returns the loss(es) of the step.
    fn train_step(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        opt: &AdamW,
        lr: f64,
        drop_path_rate: f64,
        seed: u64,
    ) -> Result<Vec<f64>>;

    fn val_accuracy(&self, part: &Partition<'_, f32>, batch: usize) -> Result<f64>;

    fn save_checkpoint(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()>;
}

/// Sandwich training of a supernet; validation scores the mean accuracy of
/// its smallest and largest subnets.
impl Trainable for Supernet<f32> {
    fn train_step(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        opt: &AdamW,
        lr: f64,
        drop_path_rate: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        Ok(sandwich_train_step(self, images, labels, opt, lr, drop_path_rate, seed)?
            .as_array()
            .to_vec())
    }

    fn val_accuracy(&self, part: &Partition<'_, f32>, batch: usize) -> Result<f64> {
        let lo = evaluate_accuracy(self, &self.space.min_config(), part, batch)?;
        let hi = evaluate_accuracy(self, &self.space.max_config(), part, batch)?;
        Ok((lo + hi) / 2.0)
    }

    fn save_checkpoint(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        self.save(path, meta, true)
    }
}

/// A standalone network, optionally distilled from a teacher's hard
/// predictions (the loss is then the mean of the label and teacher terms).
pub struct SubnetTrainer<'a> {
    pub net: Subnet<f32>,
    pub teacher: Option<&'a Subnet<f32>>,
}

impl<'a> SubnetTrainer<'a> {
    pub fn new(net: Subnet<f32>) -> Self {
        SubnetTrainer { net, teacher: None }
    }
}

impl Trainable for SubnetTrainer<'_> {
    fn train_step(
        &mut self,
        images: &Tensor<f32>,
        labels: &[usize],
        opt: &AdamW,
        lr: f64,
        drop_path_rate: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let teacher_labels = match self.teacher {
            Some(t) => {
                let logits = t.logits(images)?;
                let k = logits.shape()[1];
                Some(
                    logits
                        .data()
                        .chunks(k)
                        .map(|row| (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b }))
                        .collect::<Vec<_>>(),
                )
            }
            None => None,
        };
        self.net.set_drop_path(drop_path_rate);
        let mut tape = Tape::with_seed(Mode::Train, seed);
        let x = tape.input(images.clone())?;
        let logits = self.net.forward(&mut tape, x)?;
        let mut loss = tape.cross_entropy(logits, labels)?;
        if let Some(t) = &teacher_labels {
            let distill = tape.cross_entropy(logits, t)?;
            let sum = tape.add(loss, distill)?;
            loss = tape.scale(sum, 0.5)?;
        }
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite training loss {value}")));
        }
        self.net.weights.params.zero_grad();
        tape.backward(loss, &mut self.net.weights.params)?;
        tape.commit_stats(&mut self.net.weights.stats);
        opt.step(&mut self.net.weights.params, lr)?;
        Ok(vec![value])
    }

    fn val_accuracy(&self, part: &Partition<'_, f32>, batch: usize) -> Result<f64> {
        evaluate_subnet(&self.net, part, batch)
    }

    fn save_checkpoint(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        self.net.save(path, meta, true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's steps of the mean step loss.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Loss(es) of every optimizer step.
    pub step_losses: Vec<Vec<f64>>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Train on the train split, validating on val after every epoch. When
/// `checkpoint` is given, the model is written there whenever validation
/// accuracy improves; a failing step leaves the last written file intact.
pub fn train_classifier<M: Trainable>(
    model: &mut M,
    data: &Dataset,
    cfg: &TrainConfig,
    checkpoint: Option<(&Path, &BTreeMap<String, String>)>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    let train = data.subset(Split::Train)?;
    let val = data.subset(Split::Val)?;
    if train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let val_part = Partition::new(&val.images, &val.labels)?;
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut total = per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let opt = AdamW::new((0.9, 0.999), cfg.weight_decay);
    let peak = cfg.peak_lr();
    let mut log = TrainLog {
        best_val_accuracy: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if step >= total {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut lr = peak;
        for idx in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let Subset { mut images, labels } = train.gather(idx)?;
            if cfg.augment_noise > 0.0 {
                augment(&mut images, cfg.augment_noise, &mut rng);
            }
            lr = cosine_lr(step, total, peak);
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64);
            let losses = model.train_step(&images, &labels, &opt, lr, cfg.drop_path_rate, seed)?;
            loss_sum += losses.iter().sum::<f64>() / losses.len() as f64;
            log.step_losses.push(losses);
            steps += 1;
            step += 1;
        }
        let val_accuracy = model.val_accuracy(&val_part, cfg.eval_batch)?;
        let entry = EpochLog {
            epoch,
            steps,
            train_loss: loss_sum / steps.max(1) as f64,
            val_accuracy,
            lr,
        };
        on_epoch(&entry);
        if val_accuracy > log.best_val_accuracy {
            log.best_val_accuracy = val_accuracy;
            log.best_epoch = epoch;
            if let Some((path, meta)) = checkpoint {
                let mut meta = meta.clone();
                meta.insert("epoch".into(), epoch.to_string());
                meta.insert("val_accuracy".into(), format!("{val_accuracy:?}"));
                model.save_checkpoint(path, &meta)?;
            }
        }
        log.epochs.push(entry);
    }
    Ok(log)
}
