//! Training protocols: the local patch segmenter, the obstacle-free
//! generator, and the semantic differentiator.

mod differentiator;
mod generator;
mod local;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use differentiator::train_differentiator;
pub use generator::{train_generator, GanStep};
pub use local::train_local;

use crate::checkpoint::{ModelCheckpoint, TrainingMeta};
use crate::error::{Error, Result};
use crate::forge::{image_to_tensor, RailwayScene};
use crate::losses::{masked_bce, LossConfig};
use crate::nn::optim::Sgd;
use crate::nn::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Local,
    Generator,
    Differentiator,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Local => "local",
            Protocol::Generator => "generator",
            Protocol::Differentiator => "differentiator",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenLoss {
    Mse,
    Ssim,
    Gan,
    GanHist,
}

impl GenLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            GenLoss::Mse => "mse",
            GenLoss::Ssim => "ssim",
            GenLoss::Gan => "gan",
            GenLoss::GanHist => "gan_hist",
        }
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, GenLoss::Gan | GenLoss::GanHist)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub protocol: Protocol,
    /// Generator objective; ignored by the other protocols.
    pub gen_loss: GenLoss,
    pub batch_size: usize,
    pub lr: f64,
    /// SGD momentum, or Adam's beta1 for the adversarial generator losses.
    pub momentum_or_beta1: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Zero-based epochs from which the learning rate is multiplied by
    /// `lr_drop_factor` once more.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Share of each local/differentiator batch drawn from railway scenes.
    pub railway_fraction: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            protocol: Protocol::Local,
            gen_loss: GenLoss::Mse,
            batch_size: 32,
            lr: 0.1,
            momentum_or_beta1: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            lr_drop_epochs: vec![10, 20, 25],
            lr_drop_factor: 0.1,
            railway_fraction: 0.5,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Generator settings for one loss variant: SGD at lr 0.1 for the
    /// pixel losses, Adam at 1e-4 with beta1 0.5 for the adversarial ones,
    /// 200 epochs without drops.
    pub fn generator(gen_loss: GenLoss) -> Self {
        let adversarial = gen_loss.is_adversarial();
        TrainConfig {
            protocol: Protocol::Generator,
            gen_loss,
            batch_size: if gen_loss == GenLoss::GanHist { 16 } else { 64 },
            lr: if adversarial { 1e-4 } else { 0.1 },
            momentum_or_beta1: if adversarial { 0.5 } else { 0.9 },
            epochs: 200,
            lr_drop_epochs: Vec::new(),
            ..TrainConfig::default()
        }
    }

    pub fn differentiator() -> Self {
        TrainConfig { protocol: Protocol::Differentiator, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.railway_fraction > 0.0 && self.railway_fraction < 1.0) {
            return Err(Error::Config(format!("railway_fraction must lie in (0, 1), got {}", self.railway_fraction)));
        }
        if self.lr_drop_factor.is_nan() || self.lr_drop_factor <= 0.0 {
            return Err(Error::Config("lr_drop_factor must be positive".into()));
        }
        self.loss.validate()
    }

    /// Learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * self.lr_drop_factor.powi(passed as i32)
    }

    fn expect(&self, protocol: Protocol) -> Result<()> {
        if self.protocol != protocol {
            return Err(Error::Config(format!(
                "config is for the {} protocol, not {}",
                self.protocol.as_str(),
                protocol.as_str()
            )));
        }
        self.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches of each loss term.
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Where the final checkpoint was written, once it has been.
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Values of one loss term across epochs.
    pub fn curve(&self, term: &str) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.losses.get(term).copied()).collect()
    }
}

/// Running per-term sums for one epoch.
#[derive(Default)]
struct EpochAccumulator {
    sums: BTreeMap<String, f64>,
    batches: usize,
}

impl EpochAccumulator {
    fn add(&mut self, epoch: usize, terms: &[(&str, f64)]) -> Result<()> {
        for &(name, v) in terms {
            if !v.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            *self.sums.entry(name.to_string()).or_default() += v;
        }
        self.batches += 1;
        Ok(())
    }

    fn finish(self, epoch: usize, lr: f64) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord { epoch, lr, losses: self.sums.into_iter().map(|(k, v)| (k, v / n)).collect() }
    }
}

fn common_size(scenes: &[RailwayScene], images: &[Array3<f32>]) -> Result<(usize, usize)> {
    let first = scenes.first().ok_or(Error::EmptyInput("no railway scenes to train on"))?;
    let size = (first.height(), first.width());
    for s in scenes {
        if (s.height(), s.width()) != size {
            return Err(Error::ShapeMismatch(format!("scene {} is {:?}, expected {size:?}", s.scene_id, (s.height(), s.width()))));
        }
    }
    for (i, im) in images.iter().enumerate() {
        if (im.dim().0, im.dim().1) != size || im.dim().2 != 3 {
            return Err(Error::ShapeMismatch(format!("non-railway image {i} is {:?}, expected {size:?}x3", im.dim())));
        }
    }
    Ok(size)
}

/// `[N, 3, H, W]` network input from images in `[0, 1]`.
fn stack_images(images: &[&Array3<f32>]) -> Array4<f32> {
    let views: Vec<Array4<f32>> = images.iter().map(|im| image_to_tensor(im)).collect();
    let views: Vec<ArrayView4<f32>> = views.iter().map(|v| v.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("images share a size")
}

fn stack_masks(masks: &[&Array2<bool>]) -> Array3<bool> {
    let views: Vec<_> = masks.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("masks share a size")
}

fn widen(x: &Array4<f32>) -> Array4<f64> {
    x.mapv(f64::from)
}

fn narrow(x: &Array4<f64>) -> Array4<f32> {
    x.mapv(|v| v as f32)
}

/// Railway-stream order for one epoch, cut into chunks of `per_batch`.
fn shuffled_chunks(n: usize, per_batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(per_batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn pick(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

/// One SGD step of masked two-class cross-entropy; returns the batch loss.
fn segmentation_step(
    model: &mut Model,
    opt: &mut Sgd,
    x: &Array4<f32>,
    labels: &Array3<bool>,
    valid: &Array3<bool>,
    lr: f64,
) -> Result<f64> {
    let tape = model.forward_train(x)?;
    let (n, _, h, w) = x.dim();
    if tape.output().dim() != (n, 2, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "`{}` maps {:?} to {:?}; segmentation needs two full-resolution channels",
            model.spec().name,
            x.dim(),
            tape.output().dim()
        )));
    }
    let (loss, grad) = masked_bce(widen(tape.output()).view(), labels.view(), valid.view());
    let (grads, _) = model.backward(&tape, &narrow(&grad));
    opt.step(model, &grads, lr as f32);
    Ok(loss)
}

fn checkpoint(model: Model, cfg: &TrainConfig, report: &TrainReport, primary: &str) -> ModelCheckpoint {
    let meta = TrainingMeta {
        protocol: cfg.protocol.as_str().to_string(),
        epoch: report.epochs.len(),
        loss_curve: report.curve(primary),
        seed: cfg.seed,
    };
    ModelCheckpoint::new(model, meta)
}
