//! Residual network of EIM blocks with an expandable linear classifier.
//!
//! Topology: a plain 3×3 stem convolution, then stages of basic residual
//! blocks (`relu(eim) -> eim -> + shortcut -> relu`), global average
//! pooling, and a linear head over the pooled features. The first block of
//! every stage after the first downsamples by 2 and projects its shortcut
//! with a 1×1 convolution.
//!
//! Besides the class head the model owns a rotation head with `3·K` rows
//! used only while training with rotation augmentation: row `K·r + y`
//! (offset by the `K` class rows) scores "class `y` rotated by `r·90°`".

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand_distr::{Distribution, Normal};

use crate::eim::{he_normal, plain_conv_macs, plain_conv_params, EimLayer, EimVars};
use crate::error::{Error, Result};
use crate::numeric::{Gradients, Tape, Tensor, Var};
use crate::{seeded_rng, Rng};

/// Number of non-identity rotations (90°, 180°, 270°).
pub const ROTATIONS: usize = 3;

const STEM_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// `(c, h, w)`
    pub input_shape: [usize; 3],
    pub feature_dim: usize,
    /// Output/intrinsic channel ratio `s` of every EIM.
    pub ratio: usize,
}

impl Default for ModelConfig {
    /// Desk-scale network for 16×16 RGB tiles.
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            input_shape: [3, 16, 16],
            feature_dim: 64,
            ratio: 2,
        }
    }
}

impl ModelConfig {
    /// ResNet-18 layout for 32×32 inputs (CIFAR-style 3×3 stem, no max-pool).
    pub fn resnet18_cifar() -> Self {
        Self {
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            input_shape: [3, 32, 32],
            feature_dim: 512,
            ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stage_channels.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return fail(format!(
                "{} stage widths but {} block counts",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.blocks_per_stage.contains(&0) {
            return fail("every stage needs at least one block".into());
        }
        if self.ratio < 2 {
            return fail(format!("ratio s must be >= 2, got {}", self.ratio));
        }
        if let Some(c) = self
            .stage_channels
            .iter()
            .find(|&&c| c == 0 || c % self.ratio != 0)
        {
            return fail(format!(
                "stage width {c} is not a positive multiple of s={}",
                self.ratio
            ));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be > 0".into());
        }
        if Some(&self.feature_dim) != self.stage_channels.last() {
            return fail(format!(
                "feature_dim {} must equal the last stage width {:?}",
                self.feature_dim,
                self.stage_channels.last()
            ));
        }
        if self.input_shape.contains(&0) {
            return fail(format!("input shape {:?}", self.input_shape));
        }
        Ok(())
    }

    fn total_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    /// `(in_channels, out_channels, stride)` for every residual block.
    fn block_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut in_ch = self.stage_channels[0];
        for (stage, (&ch, &count)) in self.stage_channels.iter().zip(&self.blocks_per_stage).enumerate() {
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                plan.push((in_ch, ch, stride));
                in_ch = ch;
            }
        }
        plan
    }
}

/// Dense convolution with bias (stem and shortcut projections).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            weight: he_normal(&[out_ch, in_ch, k, k], in_ch * k * k, rng).trainable(true),
            bias: Tensor::zeros(&[out_ch]).trainable(true),
            stride,
            pad: k / 2,
        }
    }

    fn forward_on(&self, tape: &mut Tape<'_>, vars: (Var, Var), x: Var) -> Result<Var> {
        tape.conv2d(x, vars.0, vars.1, self.stride, self.pad)
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    fn mac_count(&self, h: usize, w: usize) -> usize {
        let (oh, ow) = self.out_hw(h, w);
        self.weight.numel() * oh * ow
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub first: EimLayer,
    pub second: EimLayer,
    pub projection: Option<Conv>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub first: EimVars,
    pub second: EimVars,
    pub projection: Option<(Var, Var)>,
}

/// Linear head `[K, d]` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn new(rows: usize, dim: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("positive std");
        let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::new(&[rows, dim], data).expect("finite").trainable(true),
            bias: Tensor::zeros(&[rows]).trainable(true),
        }
    }

    pub fn rows(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    /// Inserts `count` zero rows before row `at` of every block of
    /// `block_rows` rows.
    fn grow_blocks(&mut self, block_rows: usize, count: usize) {
        let d = self.dim();
        let blocks = self.rows() / block_rows;
        let new_rows = blocks * (block_rows + count);
        let mut w = Vec::with_capacity(new_rows * d);
        let mut b = Vec::with_capacity(new_rows);
        for blk in 0..blocks {
            let rows = blk * block_rows..(blk + 1) * block_rows;
            w.extend_from_slice(&self.weight.data()[rows.start * d..rows.end * d]);
            w.extend(std::iter::repeat_n(0.0, count * d));
            b.extend_from_slice(&self.bias.data()[rows]);
            b.extend(std::iter::repeat_n(0.0, count));
        }
        let (wg, bg) = (self.weight.requires_grad, self.bias.requires_grad);
        self.weight = Tensor::new(&[new_rows, d], w).expect("finite").trainable(wg);
        self.bias = Tensor::new(&[new_rows], b).expect("finite").trainable(bg);
    }
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub stem: (Var, Var),
    pub blocks: Vec<BlockVars>,
    pub classifier: (Var, Var),
    pub rotation_head: (Var, Var),
}

impl ModelVars {
    /// Same order as [`Model::params_mut`].
    pub fn flat(&self) -> Vec<Var> {
        let mut v = vec![self.stem.0, self.stem.1];
        for b in &self.blocks {
            v.extend(b.first.flat());
            v.extend(b.second.flat());
            if let Some((w, bias)) = b.projection {
                v.extend([w, bias]);
            }
        }
        v.extend([self.classifier.0, self.classifier.1]);
        v.extend([self.rotation_head.0, self.rotation_head.1]);
        v
    }

    /// Inverse of [`ModelVars::flat`] for `model`'s structure. Lets a
    /// model run on tensors bound elsewhere (e.g. by a gradient check).
    pub fn from_flat(model: &Model, vars: &[Var]) -> Result<Self> {
        let expected = model.named_params().len();
        if vars.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "model has {expected} parameter tensors, got {} variables",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut pair = || (it.next().unwrap(), it.next().unwrap());
        let stem = pair();
        let mut blocks = Vec::with_capacity(model.blocks.len());
        for b in &model.blocks {
            let mut eim = |layer: &EimLayer| {
                let (intrinsic_kernel, intrinsic_bias) = pair();
                let (cheap_kernel, cheap_bias) = pair();
                EimVars {
                    intrinsic_kernel,
                    intrinsic_bias,
                    cheap_kernel,
                    cheap_bias,
                    adapter: layer.has_adapter().then(&mut pair),
                }
            };
            let first = eim(&b.first);
            let second = eim(&b.second);
            let projection = b.projection.is_some().then(&mut pair);
            blocks.push(BlockVars {
                first,
                second,
                projection,
            });
        }
        let classifier = pair();
        let rotation_head = pair();
        Ok(Self {
            stem,
            blocks,
            classifier,
            rotation_head,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub stem: Conv,
    pub blocks: Vec<ResidualBlock>,
    pub classifier: Linear,
    pub rotation_head: Linear,
}

impl Model {
    /// Deterministic He-initialised model with all parameters trainable.
    pub fn build(config: &ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::InvalidArgument("a model needs at least one class".into()));
        }
        let mut rng = seeded_rng(seed);
        let [c_in, _, _] = config.input_shape;
        let stem = Conv::new(c_in, config.stage_channels[0], STEM_KERNEL, 1, &mut rng);
        // Without normalisation the residual sum grows with depth; shrinking
        // the second branch keeps activations O(1) at initialisation.
        let damp = 1.0 / (config.total_blocks() as f64).sqrt();
        let mut blocks = Vec::new();
        for (in_ch, out_ch, stride) in config.block_plan() {
            let first = EimLayer::new(in_ch, out_ch, 3, stride, config.ratio, &mut rng)?;
            let mut second = EimLayer::new(out_ch, out_ch, 3, 1, config.ratio, &mut rng)?;
            second
                .intrinsic_kernel
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= damp);
            let projection =
                (stride != 1 || in_ch != out_ch).then(|| Conv::new(in_ch, out_ch, 1, stride, &mut rng));
            blocks.push(ResidualBlock {
                first,
                second,
                projection,
            });
        }
        let d = config.feature_dim;
        let classifier = Linear::new(num_classes, d, &mut rng);
        let rotation_head = Linear::new(ROTATIONS * num_classes, d, &mut rng);
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            classifier,
            rotation_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn eim_layers(&self) -> impl Iterator<Item = &EimLayer> {
        self.blocks.iter().flat_map(|b| [&b.first, &b.second])
    }

    fn eim_layers_mut(&mut self) -> impl Iterator<Item = &mut EimLayer> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.first, &mut b.second])
    }

    pub fn has_adapters(&self) -> bool {
        self.eim_layers().any(EimLayer::has_adapter)
    }

    /// Adds a zero adapter to every EIM and freezes everything except the
    /// adapters and the two heads.
    pub fn spawn_adapters(&mut self) -> Result<()> {
        if self.has_adapters() {
            return Err(Error::Adapter("model already has live adapters".into()));
        }
        for layer in self.eim_layers_mut() {
            layer.spawn_adapter()?;
        }
        self.stem.weight.requires_grad = false;
        self.stem.bias.requires_grad = false;
        for p in self.blocks.iter_mut().filter_map(|b| b.projection.as_mut()) {
            p.weight.requires_grad = false;
            p.bias.requires_grad = false;
        }
        Ok(())
    }

    /// Folds every adapter into its cheap kernel.
    pub fn fuse_adapters(&mut self) -> Result<()> {
        if !self.has_adapters() {
            return Err(Error::Adapter("model has no adapters to fuse".into()));
        }
        for layer in self.eim_layers_mut() {
            layer.fuse()?;
        }
        Ok(())
    }

    /// Marks every parameter trainable (initial-stage training).
    pub fn unfreeze_all(&mut self) {
        for p in self.params_mut() {
            p.requires_grad = true;
        }
    }

    /// Grows both heads by `new_classes`; existing rows are kept bit-exact
    /// and new rows start at zero.
    pub fn expand_classifier(&mut self, new_classes: usize) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::InvalidArgument(
                "expand_classifier needs >= 1 class".into(),
            ));
        }
        let k = self.num_classes();
        self.classifier.grow_blocks(k, new_classes);
        self.rotation_head.grow_blocks(k, new_classes);
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Parameters in binding order (see [`ModelVars::flat`]).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            v.extend(b.first.params_mut());
            v.extend(b.second.params_mut());
            if let Some(p) = &mut b.projection {
                v.extend([&mut p.weight, &mut p.bias]);
            }
        }
        v.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        v.extend([&mut self.rotation_head.weight, &mut self.rotation_head.bias]);
        v
    }

    /// Checkpoint names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("stem.weight".to_string(), &self.stem.weight),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (part, layer) in [("first", &b.first), ("second", &b.second)] {
                for (name, t) in layer.named_params() {
                    v.push((format!("blocks.{i}.{part}.{name}"), t));
                }
            }
            if let Some(p) = &b.projection {
                v.push((format!("blocks.{i}.projection.weight"), &p.weight));
                v.push((format!("blocks.{i}.projection.bias"), &p.bias));
            }
        }
        v.push(("classifier.weight".into(), &self.classifier.weight));
        v.push(("classifier.bias".into(), &self.classifier.bias));
        v.push(("rotation_head.weight".into(), &self.rotation_head.weight));
        v.push(("rotation_head.bias".into(), &self.rotation_head.bias));
        v
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Result<ModelVars> {
        let stem = (tape.param(&self.stem.weight)?, tape.param(&self.stem.bias)?);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push(BlockVars {
                first: b.first.bind(tape)?,
                second: b.second.bind(tape)?,
                projection: match &b.projection {
                    Some(p) => Some((tape.param(&p.weight)?, tape.param(&p.bias)?)),
                    None => None,
                },
            });
        }
        Ok(ModelVars {
            stem,
            blocks,
            classifier: (
                tape.param(&self.classifier.weight)?,
                tape.param(&self.classifier.bias)?,
            ),
            rotation_head: (
                tape.param(&self.rotation_head.weight)?,
                tape.param(&self.rotation_head.bias)?,
            ),
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != self.config.input_shape {
            return Err(Error::shape(
                "model input",
                format!("expected {:?}, got {shape:?}", self.config.input_shape),
            ));
        }
        Ok(())
    }

    /// Pre-classifier feature vector `[feature_dim]`.
    pub fn features_on(
        &self,
        tape: &mut Tape<'_>,
        vars: &ModelVars,
        x: Var,
        adapters_enabled: bool,
    ) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        let s = self.stem.forward_on(tape, vars.stem, x)?;
        let mut h = tape.relu(s)?;
        for (block, bv) in self.blocks.iter().zip(&vars.blocks) {
            let a = block.first.forward_on(tape, &bv.first, h, adapters_enabled)?;
            let a = tape.relu(a)?;
            let a = block.second.forward_on(tape, &bv.second, a, adapters_enabled)?;
            let shortcut = match (&block.projection, bv.projection) {
                (Some(p), Some(pv)) => p.forward_on(tape, pv, h)?,
                _ => h,
            };
            let sum = tape.add(a, shortcut)?;
            h = tape.relu(sum)?;
        }
        tape.global_avg_pool(h)
    }

    /// Class logits `[K]` from features.
    pub fn logits_on(&self, tape: &mut Tape<'_>, vars: &ModelVars, features: Var) -> Result<Var> {
        tape.linear(features, vars.classifier.0, vars.classifier.1)
    }

    /// Class logits followed by rotation logits: `[4K]`.
    pub fn rotation_logits_on(&self, tape: &mut Tape<'_>, vars: &ModelVars, features: Var) -> Result<Var> {
        let main = self.logits_on(tape, vars, features)?;
        let rot = tape.linear(features, vars.rotation_head.0, vars.rotation_head.1)?;
        tape.concat(&[main, rot])
    }

    /// Features with adapters enabled iff the model has them.
    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        self.features_with(x, self.has_adapters())
    }

    pub fn features_with(&self, x: &Tensor, adapters_enabled: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let xv = tape.param(x)?;
        let f = self.features_on(&mut tape, &vars, xv, adapters_enabled)?;
        Ok(tape.value(f).clone())
    }

    /// Class logits `[K]` (rotation head excluded).
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        self.classify_with(x, self.has_adapters())
    }

    pub fn classify_with(&self, x: &Tensor, adapters_enabled: bool) -> Result<Tensor> {
        let f = self.features_with(x, adapters_enabled)?;
        self.classify_features(&f)
    }

    /// Applies the class head to a precomputed feature vector.
    pub fn classify_features(&self, features: &Tensor) -> Result<Tensor> {
        crate::numeric::linear(features, &self.classifier.weight, &self.classifier.bias)
    }

    /// Accumulates tape gradients into each trainable parameter's `grad`.
    pub fn attach_gradients(&mut self, vars: &ModelVars, grads: &Gradients) -> Result<()> {
        let flat = vars.flat();
        let params = self.params_mut();
        if flat.len() != params.len() {
            return Err(Error::InvalidArgument(
                "variables were bound to a model with a different structure".into(),
            ));
        }
        for (p, v) in params.into_iter().zip(flat) {
            grads.attach(v, p)?;
        }
        Ok(())
    }

    /// Parameters of the inference network: backbone plus class head.
    /// The training-only rotation head is reported by
    /// [`Model::rotation_head_params`].
    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self
                .blocks
                .iter()
                .map(|b| {
                    b.first.param_count()
                        + b.second.param_count()
                        + b.projection.as_ref().map_or(0, Conv::param_count)
                })
                .sum::<usize>()
            + self.classifier.param_count()
    }

    pub fn rotation_head_params(&self) -> usize {
        self.rotation_head.param_count()
    }

    /// Multiply-accumulates of one inference pass.
    pub fn mac_count(&self) -> usize {
        let [_, mut h, mut w] = self.config.input_shape;
        let mut macs = self.stem.mac_count(h, w);
        (h, w) = self.stem.out_hw(h, w);
        for b in &self.blocks {
            macs += b.first.mac_count(h, w);
            if let Some(p) = &b.projection {
                macs += p.mac_count(h, w);
            }
            (h, w) = b.first.output_hw(h, w);
            macs += b.second.mac_count(h, w);
        }
        macs + self.classifier.weight.numel()
    }

    /// True when both models have identical layer shapes (ignoring heads
    /// and adapters).
    pub fn same_backbone(&self, other: &Model) -> bool {
        let shapes = |m: &Model| -> Vec<Vec<usize>> {
            m.named_params()
                .into_iter()
                .filter(|(n, _)| {
                    !n.contains("adapter") && !n.contains("classifier") && !n.contains("rotation")
                })
                .map(|(_, t)| t.shape().to_vec())
                .collect()
        };
        self.config == other.config && shapes(self) == shapes(other)
    }
}

/// Complexity of the same topology with every EIM replaced by a dense
/// convolution producing the same number of channels.
pub fn plain_network_counts(config: &ModelConfig, num_classes: usize) -> Result<(usize, usize)> {
    config.validate()?;
    let [c_in, mut h, mut w] = config.input_shape;
    let stem_out = config.stage_channels[0];
    let mut params = plain_conv_params(c_in, stem_out, STEM_KERNEL);
    let mut macs = plain_conv_macs(c_in, stem_out, STEM_KERNEL, h, w);
    for (in_ch, out_ch, stride) in config.block_plan() {
        let (oh, ow) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
        params += plain_conv_params(in_ch, out_ch, 3) + plain_conv_params(out_ch, out_ch, 3);
        macs += plain_conv_macs(in_ch, out_ch, 3, oh, ow) + plain_conv_macs(out_ch, out_ch, 3, oh, ow);
        if stride != 1 || in_ch != out_ch {
            params += plain_conv_params(in_ch, out_ch, 1);
            macs += plain_conv_macs(in_ch, out_ch, 1, oh, ow);
        }
        (h, w) = (oh, ow);
    }
    params += num_classes * config.feature_dim + num_classes;
    macs += num_classes * config.feature_dim;
    Ok((params, macs))
}
