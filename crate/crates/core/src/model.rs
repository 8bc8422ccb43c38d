//! MicroNet: stem conv, `num_stages` stride-2 stages of conv-BN-SiLU
//! blocks, global average pooling and a linear classifier.
//!
//! Global pooling makes the logits shape independent of the input side, so
//! a single set of weights can be evaluated at many test resolutions.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_pipeline::{Image, PIXEL_MEAN, PIXEL_STD};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor_core::{BatchNormState, BnMode, NamedTensor, Parameter, Tape, Tensor, Var};

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width_mult: f64,
    pub depth_mult: f64,
    pub base_channels: usize,
    pub base_blocks: usize,
    pub num_stages: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub train_res: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width_mult: 1.0,
            depth_mult: 1.0,
            base_channels: 8,
            base_blocks: 1,
            num_stages: 3,
            num_classes: 8,
            in_channels: 1,
            train_res: 32,
        }
    }
}

impl ModelConfig {
    /// Smallest accepted input side: `2^(num_stages + 1)`.
    pub fn min_res(&self) -> usize {
        1usize << (self.num_stages + 1).min(usize::BITS as usize - 1)
    }

    pub fn max_res(&self) -> usize {
        4 * self.train_res
    }

    pub fn stem_channels(&self) -> usize {
        (self.base_channels as f64 * self.width_mult).round() as usize
    }

    /// Channels of stage `s`: `round(base * 2^(s+1) * width_mult)`.
    pub fn stage_channels(&self, s: usize) -> usize {
        (self.base_channels as f64 * (2u64 << s) as f64 * self.width_mult).round() as usize
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth_mult * self.base_blocks as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return bad(format!("width_mult must be > 0, got {}", self.width_mult));
        }
        if !(self.depth_mult > 0.0 && self.depth_mult.is_finite()) {
            return bad(format!("depth_mult must be > 0, got {}", self.depth_mult));
        }
        if !(2..=12).contains(&self.num_stages) {
            return bad(format!("num_stages must be in [2, 12], got {}", self.num_stages));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.base_blocks == 0 || self.blocks_per_stage() == 0 {
            return bad("blocks per stage must be >= 1".into());
        }
        if self.stem_channels() == 0 {
            return bad("derived channel count is zero; raise base_channels or width_mult".into());
        }
        if self.train_res < self.min_res() {
            return bad(format!(
                "train_res {} below min_res {} for {} stages",
                self.train_res,
                self.min_res(),
                self.num_stages
            ));
        }
        Ok(())
    }

    pub fn check_resolution(&self, side: usize) -> Result<()> {
        if side < self.min_res() || side > self.max_res() {
            return Err(Error::UnsupportedResolution {
                side,
                min: self.min_res(),
                max: self.max_res(),
            });
        }
        Ok(())
    }

    fn to_meta(&self) -> Vec<f32> {
        [
            self.width_mult,
            self.depth_mult,
            self.base_channels as f64,
            self.base_blocks as f64,
            self.num_stages as f64,
            self.num_classes as f64,
            self.in_channels as f64,
            self.train_res as f64,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    fn from_meta(v: &[f32]) -> Result<Self> {
        let &[w, d, base, blocks, stages, classes, inc, res] = v else {
            return Err(Error::invalid("malformed model metadata in checkpoint"));
        };
        // multipliers were narrowed to f32; six decimals recover the
        // original config values
        let mult = |x: f32| (x as f64 * 1e6).round() / 1e6;
        let cfg = Self {
            width_mult: mult(w),
            depth_mult: mult(d),
            base_channels: base as usize,
            base_blocks: blocks as usize,
            num_stages: stages as usize,
            num_classes: classes as usize,
            in_channels: inc as usize,
            train_res: res as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fine-tuning scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    /// Only the final linear layer.
    #[serde(rename = "classifier")]
    Classifier,
    /// Final linear layer plus every block of the last stage.
    #[serde(rename = "classifier+top_block")]
    ClassifierTopBlock,
    #[serde(rename = "all")]
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(Scope::Classifier),
            "classifier+top_block" => Ok(Scope::ClassifierTopBlock),
            "all" => Ok(Scope::All),
            other => Err(Error::UnknownScope(other.to_owned())),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Classifier => "classifier",
            Scope::ClassifierTopBlock => "classifier+top_block",
            Scope::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock<T> {
    weight: Parameter<T>,
    bn: BatchNormState<T>,
    stride: usize,
}

impl<T: Scalar> ConvBlock<T> {
    fn new<R: Rng>(prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Result<Self> {
        // Kaiming normal, fan-out mode
        let fan_out = (cout * KERNEL * KERNEL) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("positive std");
        let data: Vec<f64> = (0..cout * cin * KERNEL * KERNEL)
            .map(|_| normal.sample(rng))
            .collect();
        Ok(Self {
            weight: Parameter::new(
                format!("{prefix}.conv.weight"),
                Tensor::from_f64(vec![cout, cin, KERNEL, KERNEL], &data)?,
            )?,
            bn: BatchNormState::new(&format!("{prefix}.bn"), cout)?,
            stride,
        })
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, track: bool) -> Result<Var> {
        let w = record(tape, &self.weight, track)?;
        let y = tape.conv2d(x, w, None, self.stride, KERNEL / 2)?;
        let g = record(tape, &self.bn.gamma, track)?;
        let b = record(tape, &self.bn.beta, track)?;
        let y = tape.batch_norm(y, g, b, &mut self.bn)?;
        tape.silu(y)
    }
}

fn record<T: Scalar>(tape: &mut Tape<T>, p: &Parameter<T>, track: bool) -> Result<Var> {
    if track {
        tape.param(p)
    } else {
        tape.constant(p.tensor.detached())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet<T> {
    config: ModelConfig,
    stem: ConvBlock<T>,
    stages: Vec<Vec<ConvBlock<T>>>,
    classifier_weight: Parameter<T>,
    classifier_bias: Parameter<T>,
}

/// Builds a freshly initialised model; identical seeds give identical weights.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<MicroNet<T>> {
    MicroNet::new(config, seed)
}

/// Stacks images into an `N x C x H x W` tensor with the standard
/// pixel normalisation. All images must share one geometry.
pub fn batch_from_images<'a, T: Scalar>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<T>> {
    let images: Vec<&Image> = images.into_iter().collect();
    let first = images
        .first()
        .ok_or(Error::EmptyBatch { op: "batch_from_images" })?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let per = h * w * c;
    let mut data = vec![T::zero(); images.len() * per];
    for (im, out) in images.iter().zip(data.chunks_exact_mut(per)) {
        if (im.height(), im.width(), im.channels()) != (h, w, c) {
            return Err(Error::ShapeMismatch {
                op: "batch_from_images",
                lhs: vec![h, w, c],
                rhs: vec![im.height(), im.width(), im.channels()],
            });
        }
        im.write_chw(PIXEL_MEAN, PIXEL_STD, out);
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

impl<T: Scalar> MicroNet<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, 0);
        let stem_c = config.stem_channels();
        let stem = ConvBlock::new("stem", config.in_channels, stem_c, 1, &mut rng)?;
        let mut stages = Vec::with_capacity(config.num_stages);
        let mut cin = stem_c;
        for s in 0..config.num_stages {
            let cout = config.stage_channels(s);
            let blocks = (0..config.blocks_per_stage())
                .map(|b| {
                    let (i, stride) = if b == 0 { (cin, 2) } else { (cout, 1) };
                    ConvBlock::new(&format!("stage{s}.block{b}"), i, cout, stride, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            cin = cout;
        }
        let bound = 1.0 / (cin as f64).sqrt();
        let w: Vec<f64> = (0..config.num_classes * cin)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            classifier_weight: Parameter::new(
                "classifier.weight",
                Tensor::from_f64(vec![config.num_classes, cin], &w)?,
            )?,
            classifier_bias: Parameter::new("classifier.bias", Tensor::zeros(&[config.num_classes]))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBlock<T>> {
        std::iter::once(&self.stem).chain(self.stages.iter().flatten())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock<T>> {
        std::iter::once(&mut self.stem).chain(self.stages.iter_mut().flatten())
    }

    /// Every parameter, in a fixed canonical order.
    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        for b in self.blocks() {
            out.extend([&b.weight, &b.bn.gamma, &b.bn.beta]);
        }
        out.extend([&self.classifier_weight, &self.classifier_bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        for b in std::iter::once(&mut self.stem).chain(self.stages.iter_mut().flatten()) {
            out.push(&mut b.weight);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormState<T>> {
        self.blocks().map(|b| &b.bn).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        self.blocks_mut().map(|b| &mut b.bn).collect()
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for bn in self.batch_norms_mut() {
            bn.mode = mode;
        }
    }

    /// Exact scalar parameter count (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Partitions parameter names into `(frozen, trainable)` for `scope`.
    pub fn split_scope(&self, scope: Scope) -> (Vec<String>, Vec<String>) {
        let top = self.top_block_names();
        self.params()
            .into_iter()
            .map(|p| p.name.clone())
            .partition(|name| !Self::in_scope(name, scope, &top))
    }

    fn top_block_names(&self) -> HashSet<String> {
        self.stages
            .last()
            .into_iter()
            .flatten()
            .flat_map(|b| [&b.weight.name, &b.bn.gamma.name, &b.bn.beta.name])
            .cloned()
            .collect()
    }

    fn in_scope(name: &str, scope: Scope, top: &HashSet<String>) -> bool {
        let classifier = name.starts_with("classifier.");
        match scope {
            Scope::Classifier => classifier,
            Scope::ClassifierTopBlock => classifier || top.contains(name),
            Scope::All => true,
        }
    }

    /// Marks in-scope parameters trainable and the rest frozen. BN layers of
    /// frozen blocks are put in eval mode, trainable ones in train mode.
    pub fn apply_scope(&mut self, scope: Scope) {
        let top = self.top_block_names();
        for b in self.blocks_mut() {
            let trainable = Self::in_scope(&b.weight.name, scope, &top);
            b.weight.set_trainable(trainable);
            b.bn.gamma.set_trainable(trainable);
            b.bn.beta.set_trainable(trainable);
            b.bn.mode = if trainable { BnMode::Train } else { BnMode::Eval };
        }
        self.classifier_weight.set_trainable(true);
        self.classifier_bias.set_trainable(true);
    }

    /// Makes every parameter trainable and every BN layer train-mode.
    pub fn unfreeze_all(&mut self) {
        self.apply_scope(Scope::All);
    }

    /// Records the forward pass on `tape` and returns the logits node.
    /// `mode`, when given, is applied to every BN layer first; otherwise the
    /// per-layer modes already on the model are used.
    pub fn forward(&mut self, tape: &mut Tape<T>, batch: Tensor<T>, mode: Option<BnMode>) -> Result<Var> {
        self.forward_impl(tape, batch, mode, true)
    }

    fn forward_impl(
        &mut self,
        tape: &mut Tape<T>,
        batch: Tensor<T>,
        mode: Option<BnMode>,
        track: bool,
    ) -> Result<Var> {
        let &[_, c, h, w] = batch.shape() else {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: batch.shape().to_vec(),
                rhs: vec![0, self.config.in_channels, 0, 0],
            });
        };
        if c != self.config.in_channels || h != w {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: batch.shape().to_vec(),
                rhs: vec![0, self.config.in_channels, h, h],
            });
        }
        self.config.check_resolution(h)?;
        if let Some(mode) = mode {
            self.set_bn_mode(mode);
        }
        let mut x = tape.constant(batch)?;
        for block in self.blocks_mut() {
            x = block.forward(tape, x, track)?;
        }
        let pooled = tape.global_avg_pool(x)?;
        let w = record(tape, &self.classifier_weight, track)?;
        let b = record(tape, &self.classifier_bias, track)?;
        tape.linear(pooled, w, b)
    }

    /// Eval-mode logits without gradient bookkeeping; `self` is untouched.
    pub fn predict(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let logits = scratch.forward_impl(&mut tape, batch, Some(BnMode::Eval), false)?;
        Ok(tape.value(logits).detached())
    }

    /// Forward pass with the current per-layer BN modes and no gradient
    /// tracking; used for recalibration passes.
    pub fn forward_untracked(&mut self, batch: Tensor<T>) -> Result<Tape<T>> {
        let mut tape = Tape::new();
        self.forward_impl(&mut tape, batch, None, false)?;
        Ok(tape)
    }

    /// Copies gradients of tracked parameters from a backpropagated tape
    /// onto the parameters themselves.
    pub fn absorb_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        for p in self.params_mut() {
            if !p.is_trainable() {
                continue;
            }
            match tape.param_grad(&p.name) {
                Some(g) => p.tensor.set_grad(g.to_vec())?,
                None => p.tensor.clear_grad(),
            }
        }
        Ok(())
    }

    /// Parameters, BN running statistics and the model config as FXCK
    /// entries.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let f32s = |v: &[T]| v.iter().map(|x| x.to_f64_lossy() as f32).collect::<Vec<f32>>();
        let mut out = vec![NamedTensor {
            name: "meta.model_config".into(),
            shape: vec![8],
            data: self.config.to_meta(),
        }];
        for p in self.params() {
            out.push(NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: f32s(p.tensor.data()),
            });
        }
        for bn in self.batch_norms() {
            let prefix = bn.gamma.name.trim_end_matches(".gamma");
            let c = bn.channels();
            out.push(NamedTensor {
                name: format!("{prefix}.running_mean"),
                shape: vec![c],
                data: f32s(&bn.running_mean),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.running_var"),
                shape: vec![c],
                data: f32s(&bn.running_var),
            });
        }
        out
    }

    /// Rebuilds a model from checkpoint entries; every expected tensor must
    /// be present with the right shape, and nothing else.
    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))
        };
        let config = ModelConfig::from_meta(&find("meta.model_config")?.data)?;
        let mut model = Self::new(&config, 0)?;
        let mut used = 1;
        let load = |dst: &mut [T], name: &str, shape: &[usize]| -> Result<()> {
            let t = find(name)?;
            if t.shape != shape {
                return Err(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    lhs: shape.to_vec(),
                    rhs: t.shape.clone(),
                });
            }
            for (d, &s) in dst.iter_mut().zip(&t.data) {
                *d = T::of(s as f64);
            }
            Ok(())
        };
        for p in model.params_mut() {
            let shape = p.tensor.shape().to_vec();
            load(p.tensor.data_mut(), &p.name.clone(), &shape)?;
            used += 1;
        }
        for bn in model.batch_norms_mut() {
            let prefix = bn.gamma.name.trim_end_matches(".gamma").to_owned();
            let c = bn.channels();
            load(&mut bn.running_mean, &format!("{prefix}.running_mean"), &[c])?;
            load(&mut bn.running_var, &format!("{prefix}.running_var"), &[c])?;
            bn.check_invariants()?;
            used += 2;
        }
        if used != tensors.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, model expects {used}",
                tensors.len()
            )));
        }
        Ok(model)
    }

    /// Converts every weight and statistic to another precision.
    pub fn cast<U: Scalar>(&self) -> Result<MicroNet<U>> {
        let mut out = MicroNet::<U>::new(&self.config, 0)?;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.tensor = src.tensor.cast();
        }
        for (dst, src) in out.batch_norms_mut().into_iter().zip(self.batch_norms()) {
            dst.running_mean = src.running_mean.iter().map(|v| U::of(v.to_f64_lossy())).collect();
            dst.running_var = src.running_var.iter().map(|v| U::of(v.to_f64_lossy())).collect();
            dst.mode = src.mode;
        }
        Ok(out)
    }
}
