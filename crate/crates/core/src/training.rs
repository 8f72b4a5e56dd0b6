//! Soft-DICE training of the U-Nets with AdamW.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augmentation::{random_affine, AffineSampler};
use crate::error::{Error, Result};
use crate::evaluation::per_class_dice;
use crate::network::{
    argmax_labels, backward, forward_with_tape, normalize_input, save_checkpoint, unet_forward,
    ForwardOptions, Gradients, HuWindow, ModelParams, Tensor,
};
use crate::rng;
use crate::volume::{LabelMask, Volume3D};

pub const DEFAULT_DICE_EPSILON: f64 = 1e-5;

/// One labelled training ROI. `patient_id` names the source patient, so
/// augmented copies share it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    pub volume: Volume3D,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(patient_id: impl Into<String>, volume: Volume3D, mask: LabelMask) -> Result<Self> {
        volume
            .grid()
            .check_same_frame(mask.grid(), "training sample")?;
        Ok(Sample {
            patient_id: patient_id.into(),
            volume,
            mask,
        })
    }
}

/// One-hot encoding `num_classes x dims`.
pub fn one_hot(labels: &[u8], dims: [usize; 3], num_classes: usize) -> Result<Tensor> {
    let n = dims[0] * dims[1] * dims[2];
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} voxels",
            labels.len()
        )));
    }
    let mut t = Tensor::zeros(num_classes, dims);
    for (p, &l) in labels.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(Error::invalid(format!(
                "label {l} outside {num_classes} classes"
            )));
        }
        t.data[l as usize * n + p] = 1.0;
    }
    Ok(t)
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.channels != gt.channels || pred.dims != gt.dims {
        return Err(Error::shape(format!(
            "prediction {}x{:?} vs ground truth {}x{:?}",
            pred.channels, pred.dims, gt.channels, gt.dims
        )));
    }
    if pred.channels < 2 {
        return Err(Error::shape(
            "soft DICE needs at least one foreground class",
        ));
    }
    Ok(())
}

/// `1 - mean_c (2 Σ p_c g_c + ε) / (Σ p_c + Σ g_c + ε)` over foreground
/// classes `c >= 1`.
pub fn soft_dice_loss(pred: &Tensor, gt: &Tensor, epsilon: f64) -> Result<f64> {
    Ok(soft_dice_loss_grad(pred, gt, epsilon)?.0)
}

/// Loss and its gradient with respect to `pred`.
pub fn soft_dice_loss_grad(pred: &Tensor, gt: &Tensor, epsilon: f64) -> Result<(f64, Tensor)> {
    check_pair(pred, gt)?;
    let fg = (pred.channels - 1) as f64;
    let mut grad = Tensor::zeros(pred.channels, pred.dims);
    let mut total = 0.0;
    for c in 1..pred.channels {
        let (p, g) = (pred.channel(c), gt.channel(c));
        let mut inter = 0.0;
        let mut sum = 0.0;
        for (a, b) in p.iter().zip(g) {
            inter += a * b;
            sum += a + b;
        }
        let den = sum + epsilon;
        let num = 2.0 * inter + epsilon;
        total += num / den;
        // d(num/den)/dp = (2 g den - num) / den^2
        for (d, b) in grad.channel_mut(c).iter_mut().zip(g) {
            *d = -(2.0 * b * den - num) / (den * den) / fg;
        }
    }
    Ok((1.0 - total / fg, grad))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / b1t) / ((*vi / b2t).sqrt() + self.eps) + self.weight_decay * *w;
                *w -= lr * update;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random in-plane affine per sample and epoch.
    pub augment_online: bool,
    /// Save a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Cosine decay of the learning rate to zero over `epochs`.
    pub cosine_schedule: bool,
    pub dice_epsilon: f64,
    pub window: HuWindow,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            batch_size: 2,
            epochs: 600,
            seed: 0,
            augment_online: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
            cosine_schedule: false,
            dice_epsilon: DEFAULT_DICE_EPSILON,
            window: HuWindow::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "learning_rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidSpec(
                "batch_size and epochs must be >= 1".into(),
            ));
        }
        if !(self.dice_epsilon > 0.0) {
            return Err(Error::InvalidSpec("dice_epsilon must be > 0".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::InvalidSpec(
                "checkpoint_every needs checkpoint_dir".into(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_schedule {
            let t = (epoch - 1) as f64 / self.epochs as f64;
            0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.learning_rate
        }
    }
}

/// Hard DICE per foreground class and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_class: Vec<f64>,
    pub combined: f64,
}

impl DiceScores {
    fn from_sums(sums: Vec<f64>, n: usize) -> Self {
        let per_class: Vec<f64> = sums.into_iter().map(|s| s / n as f64).collect();
        let combined = per_class.iter().sum::<f64>() / per_class.len() as f64;
        DiceScores {
            per_class,
            combined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    /// Argmax DICE of the training forward passes within the epoch.
    pub train: DiceScores,
    pub valid: Option<DiceScores>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// `epoch,loss,dice_lumen,dice_wall,dice_combined,train_dice_combined`,
    /// validation scores; wall is empty for single-foreground models.
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("epoch,loss,dice_lumen,dice_wall,dice_combined,train_dice_combined\n");
        for r in &self.records {
            let (lumen, wall, comb) = match &r.valid {
                Some(v) => (
                    v.per_class
                        .first()
                        .map(|x| x.to_string())
                        .unwrap_or_default(),
                    v.per_class
                        .get(1)
                        .map(|x| x.to_string())
                        .unwrap_or_default(),
                    v.combined.to_string(),
                ),
                None => Default::default(),
            };
            let _ = writeln!(
                s,
                "{},{},{lumen},{wall},{comb},{}",
                r.epoch, r.loss, r.train.combined
            );
        }
        s
    }
}

fn check_no_leakage(train_set: &[Sample], valid_set: &[Sample]) -> Result<()> {
    let train_ids: BTreeSet<&str> = train_set.iter().map(|s| s.patient_id.as_str()).collect();
    let shared: Vec<&str> = valid_set
        .iter()
        .map(|s| s.patient_id.as_str())
        .filter(|id| train_ids.contains(id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(format!(
            "patients in both training and validation sets: {}",
            shared.join(", ")
        )))
    }
}

/// Hard DICE of argmax predictions, averaged over samples. Does not
/// modify the model.
pub fn validate(model: &ModelParams, dataset: &[Sample], window: HuWindow) -> Result<DiceScores> {
    if dataset.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let classes = model.spec().num_classes;
    let mut sums = vec![0.0; classes - 1];
    for s in dataset {
        let x = normalize_input(&s.volume, window)?;
        let probs = unet_forward(model, &x, ForwardOptions::default())?;
        let d = per_class_dice(&argmax_labels(&probs), s.mask.labels(), classes)?;
        for (a, b) in sums.iter_mut().zip(d) {
            *a += b;
        }
    }
    Ok(DiceScores::from_sums(sums, dataset.len()))
}

/// Trains from `model` and returns the parameters with the best validation
/// combined DICE (the last epoch when there is no validation set).
pub fn train(
    model: ModelParams,
    train_set: &[Sample],
    valid_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    train_with(model, train_set, valid_set, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut model: ModelParams,
    train_set: &[Sample],
    valid_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    check_no_leakage(train_set, valid_set)?;
    let classes = model.spec().num_classes;
    for s in train_set.iter().chain(valid_set) {
        if let Some(&bad) = s.mask.labels().iter().find(|&&l| l as usize >= classes) {
            return Err(Error::invalid(format!(
                "sample {} has label {bad} but the model has {classes} classes",
                s.patient_id
            )));
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut opt = AdamW::new(&model, cfg.weight_decay);
    let mut shuffle_rng = rng::stream(cfg.seed, "train/shuffle");
    let mut aug_rng = rng::stream(cfg.seed, "train/augment");
    let sampler = AffineSampler::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut dice_sums = vec![0.0; classes - 1];
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&model);
            for &i in batch {
                let s = &train_set[i];
                let (vol, mask) = if cfg.augment_online {
                    let (v, m, _) = random_affine(&s.volume, &s.mask, &sampler, &mut aug_rng)?;
                    (v, m)
                } else {
                    (s.volume.clone(), s.mask.clone())
                };
                let x = normalize_input(&vol, cfg.window)?;
                let gt = one_hot(mask.labels(), mask.dims(), classes)?;
                let tape = forward_with_tape(&model, &x, ForwardOptions::default())?;
                let (loss, dprobs) = soft_dice_loss_grad(tape.probs(), &gt, cfg.dice_epsilon)?;
                loss_sum += loss;
                let d = per_class_dice(&argmax_labels(tape.probs()), mask.labels(), classes)?;
                for (a, b) in dice_sums.iter_mut().zip(d) {
                    *a += b;
                }
                grads.add_assign(&backward(&model, &tape, &dprobs)?);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut model, &grads, lr);
        }
        model.epoch = epoch as u64;
        let valid = if valid_set.is_empty() {
            None
        } else {
            Some(validate(&model, valid_set, cfg.window)?)
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            learning_rate: lr,
            train: DiceScores::from_sums(dice_sums, train_set.len()),
            valid,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} train dice {:.4}",
            record.loss,
            record.train.combined
        );
        let score = record.valid.as_ref().map(|v| v.combined);
        if let Some(score) = score {
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, model.clone()));
                history.best_epoch = epoch;
                if let Some(dir) = &cfg.checkpoint_dir {
                    save_checkpoint(dir.join("best.ckpt"), &model)?;
                }
            }
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(dir.join(format!("epoch_{epoch:05}.ckpt")), &model)?;
            }
        }
        on_epoch(&record);
        history.records.push(record);
    }
    match best {
        Some((_, params)) => Ok((params, history)),
        None => {
            history.best_epoch = cfg.epochs;
            Ok((model, history))
        }
    }
}
