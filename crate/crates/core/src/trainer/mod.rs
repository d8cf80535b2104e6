//! SGD training of the reference architectures, producing source models whose
//! BN layers carry EMA running statistics.

mod backprop;

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImage;
use crate::error::{ensure, Error, Result};
use crate::model::{build_reference_model, Arch, BnLayerMode, ModelGraph};
use crate::normalization::ChannelStats;
use crate::tensor::{softmax, Tensor};

pub use backprop::{
    avg_pool2d_backward, backward, backward_pass_count, bn_train_backward, bn_train_forward, conv2d_backward,
    global_avg_pool_backward, linear_backward, max_pool2d_backward, relu_backward, train_forward, BnTrainCache,
    ConvGrads, Tape,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// EMA factor `m` in `running ← (1−m)·running + m·batch`.
    pub bn_momentum: f32,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            bn_momentum: 0.1,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs > 0, Config, "epochs must be positive");
        ensure!(self.batch_size > 0, Config, "batch_size must be positive");
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be finite and non-negative"
        );
        ensure!((0.0..1.0).contains(&self.momentum), Config, "momentum must lie in [0, 1)");
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay must be non-negative");
        ensure!(
            self.bn_momentum > 0.0 && self.bn_momentum < 1.0,
            Config,
            "bn_momentum must lie in (0, 1)"
        );
        Ok(())
    }

    /// Learning rate for optimizer step `step` of `total`.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f32 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                (f64::from(self.learning_rate) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
        }
    }
}

/// Per-epoch training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// `−ln softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f32], label: usize) -> Result<f32> {
    ensure!(
        label < logits.len(),
        InvalidArgument,
        "label {label} out of range for {} classes",
        logits.len()
    );
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = f64::from(max)
        + logits
            .iter()
            .map(|&v| f64::from(v - max).exp())
            .sum::<f64>()
            .ln();
    Ok((lse - f64::from(logits[label])).max(0.0) as f32)
}

/// Mean cross-entropy over a batch and its gradient with respect to the logits.
pub fn cross_entropy_batch(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.rows();
    ensure!(labels.len() == n, Shape, "{n} logit rows but {} labels", labels.len());
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    let k = logits.len() / n;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row_data(i);
        total += f64::from(cross_entropy(row, label)?);
        let probs = softmax(row)?;
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, (gj, p)) in g.iter_mut().zip(probs).enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            *gj = (p - target) / n as f32;
        }
    }
    Ok((total / n as f64, grad))
}

/// Momentum SGD with decoupled-from-momentum weight decay:
/// `v ← μ·v + g`, `p ← p − lr·(v + wd·p)`. Decay applies to conv and linear
/// weights only.
pub fn sgd_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    velocity: &mut BTreeMap<String, Vec<f32>>,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Invariant(format!("gradient for unknown parameter `{name}`")))?;
        ensure!(p.shape() == g.shape(), Shape, "gradient shape mismatch for `{name}`");
        let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let wd = if name.ends_with(".weight") { weight_decay } else { 0.0 };
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * (*vv + wd * *pv);
        }
    }
    Ok(())
}

/// EMA update of one BN layer's running statistics.
pub fn update_running_stats(running: &mut ChannelStats, batch: &ChannelStats, momentum: f32) {
    let m = f64::from(momentum);
    let ema = |r: &mut f32, b: f32| *r = ((1.0 - m) * f64::from(*r) + m * f64::from(b)) as f32;
    for (r, &b) in running.mean.iter_mut().zip(&batch.mean) {
        ema(r, b);
    }
    for (r, &b) in running.variance.iter_mut().zip(&batch.variance) {
        ema(r, b);
    }
}

fn check_dataset(dataset: &[LabeledImage], class_count: usize) -> Result<()> {
    ensure!(!dataset.is_empty(), Data, "training set is empty");
    let shape = dataset[0].image.shape();
    for (i, item) in dataset.iter().enumerate() {
        ensure!(
            item.label < class_count,
            Data,
            "image {i} has label {} but there are {class_count} classes",
            item.label
        );
        ensure!(item.image.shape() == shape, Data, "image {i} has shape {:?}, expected {shape:?}", item.image.shape());
    }
    Ok(())
}

/// One SGD step on a batch; returns (mean loss, correct count).
pub fn train_step(
    model: &mut ModelGraph,
    batch: &Tensor,
    labels: &[usize],
    velocity: &mut BTreeMap<String, Vec<f32>>,
    lr: f32,
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    let (logits, tape) = train_forward(model, batch)?;
    let (loss, grad) = cross_entropy_batch(&logits, labels)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row_data(i)) == l)
        .count();
    let stats: Vec<(String, ChannelStats)> = tape
        .batch_stats(model)
        .map(|(name, s)| (name.to_string(), s.clone()))
        .collect();
    let (grads, _) = backward(model, tape, &grad)?;
    sgd_step(&mut model.params, &grads, velocity, lr, cfg.momentum, cfg.weight_decay)?;
    for (name, s) in stats {
        let running = model
            .bn_stats
            .get_mut(&name)
            .ok_or_else(|| Error::Invariant(format!("no running stats for `{name}`")))?;
        update_running_stats(running, &s, cfg.bn_momentum);
    }
    Ok((loss, correct))
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place; batches are drawn from a seeded shuffle per epoch.
pub fn train_model(model: &mut ModelGraph, dataset: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(dataset, model.class_count())?;
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut velocity = BTreeMap::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor> = idx.iter().map(|&i| dataset[i].image.clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| dataset[i].label).collect();
            let batch = Tensor::concat_rows(&images)?;
            let lr = cfg.learning_rate_at(step, total);
            let (loss, ok) = train_step(model, &batch, &labels, &mut velocity, lr, cfg)?;
            loss_sum += loss * idx.len() as f64;
            correct += ok;
            step += 1;
        }
        report.epoch_loss.push(loss_sum / dataset.len() as f64);
        report.epoch_accuracy.push(correct as f64 / dataset.len() as f64);
    }
    Ok(report)
}

/// Builds a reference model seeded by `cfg.seed` and trains it on `dataset`.
/// The returned model has every BN layer marked AugBN, ready for adaptation;
/// Source-mode inference ignores the mask.
pub fn train_source_model(
    arch: Arch,
    class_count: usize,
    dataset: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<(ModelGraph, TrainReport)> {
    cfg.validate()?;
    check_dataset(dataset, class_count)?;
    let mut model = build_reference_model(arch, class_count, cfg.seed)?;
    let report = train_model(&mut model, dataset, cfg)?;
    Ok((model.with_all_bn(BnLayerMode::AugBn), report))
}

#[cfg(test)]
mod tests;
