//! The full classifier: backbone prefix, stem, stack of residual attention
//! blocks, and a 1x1-conv / average-pool / dense head with a sigmoid output.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    lookup_backbone, truncate_backbone, BackboneSource, MobileNetV1, SUPPORTED_STRIDES,
};
use crate::blocks::{BlockConfig, Rdab};
use crate::error::{Error, Result};
use crate::nn::{
    join, BatchNorm2d, Conv2d, Conv2dConfig, GlobalAvgPool, LayerKind, Linear, MaxPool2d, Mode,
    Module, Param, Relu,
};
use crate::tensor::{expect_channels, sigmoid, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub backbone_name: String,
    pub truncate_at_stride: usize,
    pub freeze_backbone_epochs: usize,
    pub stem_channels: usize,
    pub num_rdab_stages: usize,
    pub m: usize,
    /// `block.channels` and `block.m` must agree with `stem_channels` and `m`.
    pub block: BlockConfig,
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 212,
            backbone_name: "mobilenet_v1".to_string(),
            truncate_at_stride: 16,
            freeze_backbone_epochs: 5,
            stem_channels: 256,
            num_rdab_stages: 3,
            m: 1,
            block: BlockConfig::default(),
            head_channels: 128,
        }
    }
}

impl ModelConfig {
    /// The comparison network: no backbone, six blocks at the same width.
    pub fn standalone_drda() -> Self {
        Self {
            backbone_name: "none".to_string(),
            freeze_backbone_epochs: 0,
            num_rdab_stages: 6,
            ..Self::default()
        }
    }

    /// Sets the stem width and keeps the block width in step.
    pub fn with_stem_channels(mut self, channels: usize) -> Self {
        self.stem_channels = channels;
        self.block.channels = channels;
        self
    }

    /// Sets `m` and keeps the block config in step.
    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self.block.m = m;
        self
    }

    pub fn has_backbone(&self) -> bool {
        self.backbone_name != "none"
    }

    /// Spatial size of the map entering the stem.
    pub fn backbone_output_size(&self) -> usize {
        if !self.has_backbone() {
            return self.input_size;
        }
        let mut n = self.input_size;
        let mut s = 1;
        while s < self.truncate_at_stride {
            n = n.div_ceil(2);
            s *= 2;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 32 {
            return Err(Error::config(format!(
                "input_size must be >= 32, got {}",
                self.input_size
            )));
        }
        if self.num_rdab_stages < 1 {
            return Err(Error::config("num_rdab_stages must be >= 1"));
        }
        if self.m < 1 {
            return Err(Error::config("m must be >= 1"));
        }
        if self.stem_channels < 1 || self.head_channels < 1 {
            return Err(Error::config(
                "stem_channels and head_channels must be >= 1",
            ));
        }
        if self.block.channels != self.stem_channels {
            return Err(Error::config(format!(
                "block.channels ({}) must equal stem_channels ({})",
                self.block.channels, self.stem_channels
            )));
        }
        if self.block.m != self.m {
            return Err(Error::config(format!(
                "block.m ({}) must equal m ({})",
                self.block.m, self.m
            )));
        }
        self.block.validate()?;
        lookup_backbone(&self.backbone_name)?;
        if self.has_backbone() && !SUPPORTED_STRIDES.contains(&self.truncate_at_stride) {
            return Err(Error::config(format!(
                "truncate_at_stride must be one of {SUPPORTED_STRIDES:?}, got {}",
                self.truncate_at_stride
            )));
        }
        if self.backbone_output_size() < 2 {
            return Err(Error::config(format!(
                "input_size {} leaves a {}x{} map, too small for the stem max-pool",
                self.input_size,
                self.backbone_output_size(),
                self.backbone_output_size()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stem<T> {
    conv: Conv2d<T>,
    pool: MaxPool2d,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

impl<T: Scalar> Stem<T> {
    fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let y = self.pool.infer(&self.conv.infer(x)?)?;
        Ok(self.relu.infer(&self.bn.infer(&y)?))
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.pool.forward(&y, mode)?;
        let y = self.bn.forward(&y, mode)?;
        Ok(self.relu.forward(&y, mode))
    }

    fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let d = self.relu.backward(dy)?;
        let d = self.bn.backward(&d)?;
        let d = self.pool.backward(&d)?;
        self.conv.backward(&d)
    }
}

impl<T: Scalar> Module<T> for Stem<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        self.conv.layer_kinds(out);
        out.push(LayerKind::MaxPool);
        self.bn.layer_kinds(out);
        out.push(LayerKind::Relu);
    }
}

#[derive(Debug, Clone)]
struct Head<T> {
    conv: Conv2d<T>,
    pool: GlobalAvgPool,
    fc: Linear<T>,
}

impl<T: Scalar> Head<T> {
    fn infer(&self, x: &Array4<T>) -> Result<Array1<T>> {
        let pooled = self.pool.infer(&self.conv.infer(x)?);
        Ok(self.fc.infer(&pooled)?.index_axis_move(Axis(1), 0))
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array1<T>> {
        let y = self.conv.forward(x, mode)?;
        let pooled = self.pool.forward(&y);
        Ok(self.fc.forward(&pooled)?.index_axis_move(Axis(1), 0))
    }

    fn backward(&mut self, dlogits: &Array1<T>) -> Result<Array4<T>> {
        let d: Array2<T> = dlogits.clone().insert_axis(Axis(1));
        let d = self.fc.backward(&d)?;
        let d = self.pool.backward(&d)?;
        self.conv.backward(&d)
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.fc.visit_params_mut(&join(prefix, "fc"), f);
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        self.conv.layer_kinds(out);
        out.push(LayerKind::GlobalAvgPool);
        self.fc.layer_kinds(out);
    }
}

/// Backbone prefix followed by the stem, `num_rdab_stages` residual blocks
/// and the classification head.
///
/// The backbone's batch-norm layers always use their pretrained running
/// statistics. While the backbone is frozen it runs through the cache-free
/// path and receives no gradient.
#[derive(Debug, Clone)]
pub struct HybridModel<T> {
    config: ModelConfig,
    backbone: Option<MobileNetV1<T>>,
    backbone_frozen: bool,
    backbone_cached: bool,
    stem: Stem<T>,
    stages: Vec<Rdab<T>>,
    head: Head<T>,
}

/// Builds a model from `cfg`, drawing all random initialisation from `seed`.
pub fn build_model<T: Scalar>(
    cfg: &ModelConfig,
    source: &BackboneSource,
    seed: u64,
) -> Result<HybridModel<T>> {
    HybridModel::new(cfg, source, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl<T: Scalar> HybridModel<T> {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        source: &BackboneSource,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let backbone = if cfg.has_backbone() {
            Some(truncate_backbone(
                &cfg.backbone_name,
                cfg.truncate_at_stride,
                source,
                rng,
            )?)
        } else {
            None
        };
        let in_channels = backbone.as_ref().map_or(3, |b| b.out_channels());
        let stem = Stem {
            conv: Conv2d::new(
                Conv2dConfig::new(in_channels, cfg.stem_channels, 3).padding(1),
                rng,
            )?,
            pool: MaxPool2d::new(),
            bn: BatchNorm2d::new(cfg.stem_channels),
            relu: Relu::new(),
        };
        let stages = (0..cfg.num_rdab_stages)
            .map(|_| Rdab::new(cfg.block, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Head {
            conv: Conv2d::new(
                Conv2dConfig::new(cfg.stem_channels, cfg.head_channels, 1).bias(true),
                rng,
            )?,
            pool: GlobalAvgPool::new(),
            fc: Linear::new(cfg.head_channels, 1, rng),
        };
        Ok(Self {
            config: cfg.clone(),
            backbone_frozen: backbone.is_some() && cfg.freeze_backbone_epochs > 0,
            backbone,
            backbone_cached: false,
            stem,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> Option<&MobileNetV1<T>> {
        self.backbone.as_ref()
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.backbone_frozen = frozen && self.backbone.is_some();
    }

    /// Whether the named parameter receives optimizer updates right now.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.backbone_frozen && name.starts_with("backbone."))
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        expect_channels(x, 3, "the model")?;
        let (_, _, h, w) = x.dim();
        if h != self.config.input_size || w != self.config.input_size {
            return Err(Error::invalid(format!(
                "model expects {0}x{0} input, got {h}x{w}",
                self.config.input_size
            )));
        }
        Ok(())
    }

    /// Feature map entering the residual stack.
    pub fn features(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check_input(x)?;
        let y = match &self.backbone {
            Some(b) => b.infer(x)?,
            None => x.clone(),
        };
        let mut y = self.stem.infer(&y)?;
        for stage in &self.stages {
            y = stage.infer(&y)?;
        }
        Ok(y)
    }

    /// Pre-sigmoid scores; thread-safe and cache-free.
    pub fn logits(&self, x: &Array4<T>) -> Result<Array1<T>> {
        self.head.infer(&self.features(x)?)
    }

    /// Malignancy probabilities, one per image. Saturated values are kept
    /// one machine epsilon inside the open interval (0, 1).
    pub fn predict(&self, x: &Array4<T>) -> Result<Array1<T>> {
        let eps = T::epsilon();
        Ok(self
            .logits(x)?
            .mapv(|z| sigmoid(z).max(eps).min(T::one() - eps)))
    }

    /// Training forward pass returning logits; caches for [`Self::backward`].
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array1<T>> {
        self.check_input(x)?;
        self.backbone_cached = false;
        let y = match &mut self.backbone {
            Some(b) if self.backbone_frozen => b.infer(x)?,
            Some(b) => {
                self.backbone_cached = true;
                b.forward(x, Mode::Eval)?
            }
            None => x.clone(),
        };
        let mut y = self.stem.forward(&y, mode)?;
        for stage in &mut self.stages {
            y = stage.forward(&y, mode)?;
        }
        self.head.forward(&y, mode)
    }

    /// Accumulates parameter gradients for the loss gradient w.r.t. logits.
    pub fn backward(&mut self, dlogits: &Array1<T>) -> Result<()> {
        let mut d = self.head.backward(dlogits)?;
        for stage in self.stages.iter_mut().rev() {
            d = stage.backward(&d)?;
        }
        let d = self.stem.backward(&d)?;
        if self.backbone_cached {
            if let Some(b) = &mut self.backbone {
                b.backward(&d)?;
            }
        }
        Ok(())
    }

    /// Sets the final dense layer to zero so every output is exactly 0.5.
    pub fn zero_head(&mut self) {
        self.head.fc.weight_mut().value.fill(T::zero());
        self.head.fc.bias_mut().value.fill(T::zero());
    }

    /// Layer kinds outside the backbone, in execution order.
    pub fn head_layer_kinds(&self) -> Vec<LayerKind> {
        let mut out = Vec::new();
        self.stem.layer_kinds(&mut out);
        for stage in &self.stages {
            stage.layer_kinds(&mut out);
        }
        self.head.layer_kinds(&mut out);
        out.push(LayerKind::Sigmoid);
        out
    }
}

impl<T: Scalar> Module<T> for HybridModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(b) = &self.backbone {
            b.visit_params(&join(prefix, "backbone"), f);
        }
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.visit_params(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(b) = &mut self.backbone {
            b.visit_params_mut(&join(prefix, "backbone"), f);
        }
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit_params_mut(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        if let Some(b) = &self.backbone {
            b.layer_kinds(out);
        }
        out.extend(self.head_layer_kinds());
    }
}

/// Number of learnable scalars; buffers such as running statistics are not
/// counted. With `trainable_only`, a frozen backbone is excluded as well.
pub fn count_parameters<T: Scalar>(model: &HybridModel<T>, trainable_only: bool) -> usize {
    let mut total = 0;
    model.visit_params("", &mut |name, p| {
        if !p.is_buffer() && (!trainable_only || model.is_trainable(name)) {
            total += p.len();
        }
    });
    total
}
