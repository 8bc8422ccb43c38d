//! Training at `train_res`, then the FixRes stage: batch-norm recalibration
//! and a short fine-tune of the chosen scope at the test resolution.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_harness::{self, Metrics, SweepCurve};
use crate::image_pipeline::{center_crop_preproc, random_resized_crop, AugmentConfig, LabeledDataset, TestPreproc};
use crate::model::{batch_from_images, MicroNet, Scope};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor_core::{sgd_step, BnMode, SgdConfig, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
    /// Multiply by `gamma` at each milestone epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(passed as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let LrSchedule::Step { milestones, gamma } = self {
            if !(*gamma > 0.0 && *gamma <= 1.0) {
                return Err(Error::invalid(format!("step gamma must be in (0, 1], got {gamma}")));
            }
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid("step milestones must be strictly increasing"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing_epsilon: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.1,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing_epsilon: 0.1,
            augment: AugmentConfig::default().with_out_size(32),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        check_common(self.batch_size, self.label_smoothing_epsilon)?;
        self.sgd(self.lr).validate()?;
        self.lr_schedule.validate()?;
        self.augment.validate()
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

fn check_common(batch_size: usize, eps: f64) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch_size must be at least 2, got {batch_size}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("label_smoothing_epsilon must be in [0, 1), got {eps}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub target_res: usize,
    pub scope: Scope,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing_epsilon: f64,
    pub recalibrate_bn: bool,
    /// Batches used for recalibration; the whole dataset when absent.
    #[serde(default)]
    pub recalibration_batches: Option<usize>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::at(32)
    }
}

impl FinetuneConfig {
    /// Defaults for a given target resolution. The augmentation keeps most
    /// of the image, close to the test-time region.
    pub fn at(target_res: usize) -> Self {
        Self {
            target_res,
            scope: Scope::Classifier,
            epochs: 10,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            label_smoothing_epsilon: 0.1,
            recalibrate_bn: true,
            recalibration_batches: None,
            augment: AugmentConfig {
                area_fraction_range: (0.6, 0.9),
                aspect_ratio_range: (3.0 / 4.0, 4.0 / 3.0),
                flip_probability: 0.5,
                out_size: target_res,
            },
            seed: 0,
        }
    }

    pub fn with_target_res(mut self, target_res: usize) -> Self {
        self.target_res = target_res;
        self.augment.out_size = target_res;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.label_smoothing_epsilon)?;
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
        .validate()?;
        self.augment.validate()?;
        if self.augment.out_size != self.target_res {
            return Err(Error::invalid(format!(
                "fine-tune augmentation out_size {} differs from target_res {}",
                self.augment.out_size, self.target_res
            )));
        }
        if self.recalibration_batches == Some(0) {
            return Err(Error::invalid("recalibration_batches must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn final_top1(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.top1)
    }

    /// `epoch,loss,top1,seconds` CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn check_classes<T: Scalar>(model: &MicroNet<T>, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyBatch { op: "dataset" });
    }
    let cfg = model.config();
    if data.num_classes() != cfg.num_classes || data.channels() != cfg.in_channels {
        return Err(Error::invalid(format!(
            "dataset has {} classes x {} channels, model expects {} x {}",
            data.num_classes(),
            data.channels(),
            cfg.num_classes,
            cfg.in_channels
        )));
    }
    Ok(())
}

/// Settings shared by the initial training and fine-tuning loops.
struct Loop<'a> {
    epochs: usize,
    batch_size: usize,
    eps: f64,
    augment: &'a AugmentConfig,
    seed: u64,
    sgd: Box<dyn Fn(usize) -> SgdConfig + 'a>,
}

fn run_loop<T: Scalar>(model: &mut MicroNet<T>, data: &LabeledDataset, cfg: &Loop<'_>) -> Result<TrainLog> {
    let n = data.len();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let sgd = (cfg.sgd)(epoch);
        let mut rng = rng::stream(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // a single-sample batch has no batch statistics to speak of
            if chunk.len() < 2 {
                continue;
            }
            let mut crops = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (im, label) = data.get(i);
                crops.push(random_resized_crop(im, &mut rng, cfg.augment)?);
                labels.push(label);
            }
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, batch_from_images(&crops)?, None)?;
            let loss = tape.smoothed_cross_entropy(logits, &labels, cfg.eps)?;
            let value = tape.value(loss).data()[0].to_f64_lossy();
            let m = eval_harness::score_logits(tape.value(logits), &labels)?;
            tape.backward(loss)?;
            model.absorb_grads(&tape)?;
            sgd_step(model.params_mut().into_iter().filter(|p| p.is_trainable()), &sgd)?;
            loss_sum += value * chunk.len() as f64;
            hits += m.top1_hits;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::EmptyBatch { op: "train" });
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            top1: hits as f64 / seen as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        debug!(
            "epoch {} lr {:.4} loss {:.4} top1 {:.3} ({:.1}s)",
            epoch, sgd.lr, record.loss, record.top1, record.seconds
        );
        log.epochs.push(record);
    }
    Ok(log)
}

/// Trains every parameter with random-resized crops at
/// `config.augment.out_size`, smoothed cross-entropy and momentum SGD.
pub fn train<T: Scalar>(model: &mut MicroNet<T>, data: &LabeledDataset, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    check_classes(model, data)?;
    if config.augment.out_size != model.config().train_res {
        return Err(Error::invalid(format!(
            "training crop size {} differs from the model's train_res {}",
            config.augment.out_size,
            model.config().train_res
        )));
    }
    model.config().check_resolution(config.augment.out_size)?;
    model.unfreeze_all();
    let log = run_loop(
        model,
        data,
        &Loop {
            epochs: config.epochs,
            batch_size: config.batch_size,
            eps: config.label_smoothing_epsilon,
            augment: &config.augment,
            seed: config.seed,
            sgd: Box::new(|epoch| config.sgd(config.lr_schedule.lr_at(config.lr, epoch, config.epochs))),
        },
    )?;
    if let Some(last) = log.epochs.last() {
        info!("trained {} epochs: loss {:.4}, train top-1 {:.3}", config.epochs, last.loss, last.top1);
    }
    Ok(log)
}

/// Replaces every BN layer's running statistics with the exact mean and
/// population variance of its inputs over center crops at `target_res`.
/// Layers normalise with batch statistics during the pass. Weights are not
/// touched. `num_batches` limits the pass to the first batches of `data`.
pub fn recalibrate_batchnorm<T: Scalar>(
    model: &mut MicroNet<T>,
    data: &LabeledDataset,
    target_res: usize,
    batch_size: usize,
    num_batches: Option<usize>,
    crop_ratio: f64,
) -> Result<()> {
    check_classes(model, data)?;
    model.config().check_resolution(target_res)?;
    if batch_size == 0 || num_batches == Some(0) {
        return Err(Error::invalid("recalibration needs at least one non-empty batch"));
    }
    let preproc = TestPreproc {
        crop_ratio,
        out_size: target_res,
    };
    let saved_modes: Vec<BnMode> = model.batch_norms().iter().map(|b| b.mode).collect();
    for bn in model.batch_norms_mut() {
        bn.begin_recalibration();
    }
    let limit = num_batches.unwrap_or(usize::MAX);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size).take(limit) {
        let crops = chunk
            .iter()
            .map(|&i| center_crop_preproc(data.get(i).0, &preproc))
            .collect::<Result<Vec<_>>>()?;
        model.forward_untracked(batch_from_images(&crops)?)?;
    }
    for (bn, mode) in model.batch_norms_mut().into_iter().zip(saved_modes) {
        bn.finish_recalibration()?;
        bn.mode = mode;
    }
    Ok(())
}

/// FixRes fine-tuning: optional BN recalibration at `target_res`, then a
/// short run that updates only the parameters in `config.scope`. Frozen
/// layers use their running statistics and receive no gradients.
pub fn finetune_fixres<T: Scalar>(
    model: &mut MicroNet<T>,
    data: &LabeledDataset,
    config: &FinetuneConfig,
) -> Result<TrainLog> {
    config.validate()?;
    check_classes(model, data)?;
    model.config().check_resolution(config.target_res)?;
    if config.recalibrate_bn {
        recalibrate_batchnorm(
            model,
            data,
            config.target_res,
            config.batch_size,
            config.recalibration_batches,
            TestPreproc::default().crop_ratio,
        )?;
    }
    model.apply_scope(config.scope);
    let sgd = SgdConfig {
        lr: config.lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
    };
    let log = run_loop(
        model,
        data,
        &Loop {
            epochs: config.epochs,
            batch_size: config.batch_size,
            eps: config.label_smoothing_epsilon,
            augment: &config.augment,
            seed: config.seed,
            sgd: Box::new(move |_| sgd),
        },
    );
    // momentum buffers belong to this run only
    for p in model.params_mut() {
        p.momentum_buffer = None;
    }
    model.unfreeze_all();
    let log = log?;
    info!(
        "fine-tuned scope {} at {} for {} epochs",
        config.scope, config.target_res, config.epochs
    );
    Ok(log)
}

/// Index of the best score; ties go to the earliest entry.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Picks the resolution with the highest top-1; ties go to the smaller
/// resolution.
pub fn choose_resolution(points: &[(usize, Metrics)]) -> Result<usize> {
    let mut sorted: Vec<&(usize, Metrics)> = points.iter().collect();
    sorted.sort_by_key(|(r, _)| *r);
    let scores: Vec<f64> = sorted.iter().map(|(_, m)| m.top1).collect();
    argmax_first(&scores)
        .map(|i| sorted[i].0)
        .ok_or_else(|| Error::invalid("resolution grid is empty"))
}

/// Sweeps `grid` on a validation split and returns the chosen resolution
/// with the full curve.
pub fn select_test_resolution<T: Scalar>(
    model: &MicroNet<T>,
    val: &LabeledDataset,
    grid: &[usize],
    preproc: &TestPreproc,
) -> Result<(usize, SweepCurve)> {
    if grid.is_empty() {
        return Err(Error::invalid("resolution grid is empty"));
    }
    let curve = eval_harness::resolution_sweep(model, val, grid, preproc)?;
    Ok((choose_resolution(curve.points())?, curve))
}

/// `train_res` times {0.75, 1, 1.25, 1.5, 1.75, 2}, rounded to multiples
/// of 8 and deduplicated.
pub fn default_grid(train_res: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = [0.75, 1.0, 1.25, 1.5, 1.75, 2.0]
        .iter()
        .map(|f| (((train_res as f64 * f) / 8.0).round() as usize * 8).max(8))
        .collect();
    grid.dedup();
    grid
}
