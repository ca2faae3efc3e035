//! Channel shuffle, channel attention and the residual dual-shuffle
//! attention blocks built from them.
//!
//! A DRA unit is a ShuffleNet-style bottleneck capped by channel attention:
//!
//! ```text
//! x -> 1x1 grouped conv -> BN -> ReLU -> shuffle
//!   -> 3x3 depthwise conv -> BN
//!   -> 1x1 grouped conv -> BN -> ReLU -> shuffle
//!   -> channel attention
//! ```
//!
//! An RDAB chains `m` DRA units with dense connectivity (unit `i` sees the
//! channel concatenation of the block input and every earlier unit output,
//! projected back to `channels` by a 1x1 conv) and adds the block input to
//! the last unit's output.

use ndarray::{concatenate, s, Array2, Array4, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, BatchNorm2d, Conv2d, Conv2dConfig, GlobalAvgPool, LayerKind, Linear, Mode, Module, Param,
    Relu,
};
use crate::tensor::{expect_channels, sigmoid, FeatureMapSpec, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub channels: usize,
    pub groups: usize,
    pub attention_reduction: usize,
    pub m: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            groups: 4,
            attention_reduction: 4,
            m: 1,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let Self {
            channels,
            groups,
            attention_reduction,
            m,
        } = *self;
        if channels == 0 || groups == 0 || attention_reduction == 0 {
            return Err(Error::config(format!(
                "degenerate block configuration {self:?}"
            )));
        }
        if channels % groups != 0 {
            return Err(Error::config(format!(
                "block channels {channels} not divisible by groups {groups}"
            )));
        }
        if channels % attention_reduction != 0 {
            return Err(Error::config(format!(
                "block channels {channels} not divisible by attention reduction {attention_reduction}"
            )));
        }
        if m == 0 {
            return Err(Error::config("m (DRA units per RDAB) must be at least 1"));
        }
        Ok(())
    }
}

/// Interleaves channels across `groups`: output channel `c` reads input
/// channel `(c % groups) * (C / groups) + c / groups`.
pub fn channel_shuffle<T: Clone>(x: &Array4<T>, groups: usize) -> Result<Array4<T>> {
    let spec = FeatureMapSpec::of(x);
    spec.check_groups(groups)?;
    let per_group = spec.channels / groups;
    let mut out = x.clone();
    for c_out in 0..spec.channels {
        let c_in = (c_out % groups) * per_group + c_out / groups;
        out.slice_mut(s![.., c_out, .., ..])
            .assign(&x.slice(s![.., c_in, .., ..]));
    }
    Ok(out)
}

/// Gradient of [`channel_shuffle`]: the inverse permutation, which is the
/// shuffle with `C / groups` groups.
pub fn channel_shuffle_backward<T: Clone>(dy: &Array4<T>, groups: usize) -> Result<Array4<T>> {
    let channels = dy.dim().1;
    FeatureMapSpec::of(dy).check_groups(groups)?;
    channel_shuffle(dy, channels / groups)
}

#[derive(Debug, Clone)]
struct AttentionCache<T> {
    input: Array4<T>,
    hidden_pre: Array2<T>,
    gates: Array2<T>,
}

/// Squeeze-and-excitation gate: global average pool, bottleneck FC + ReLU,
/// expanding FC, sigmoid, per-channel rescale.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    channels: usize,
    reduce: Linear<T>,
    excite: Linear<T>,
    pool: GlobalAvgPool,
    cache: Option<AttentionCache<T>>,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::invalid(format!(
                "{channels} channels not divisible by attention reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduce: Linear::new(channels, hidden, rng),
            excite: Linear::new(hidden, channels, rng),
            pool: GlobalAvgPool::new(),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Per-channel spatial mean, the "squeeze" stage.
    pub fn squeeze(&self, x: &Array4<T>) -> Result<Array2<T>> {
        expect_channels(x, self.channels, "channel attention")?;
        Ok(self.pool.infer(x))
    }

    /// Excitation logits (pre-sigmoid) for each sample and channel.
    pub fn logits(&self, x: &Array4<T>) -> Result<Array2<T>> {
        let s = self.squeeze(x)?;
        let h = self.reduce.infer(&s)?.mapv(|v| v.max(T::zero()));
        self.excite.infer(&h)
    }

    /// Channel weights in (0, 1).
    pub fn gates(&self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.logits(x)?.mapv(sigmoid))
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let gates = self.gates(x)?;
        Ok(scale_channels(x, &gates))
    }

    pub fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Result<Array4<T>> {
        expect_channels(x, self.channels, "channel attention")?;
        let s = self.pool.forward(x);
        let hidden_pre = self.reduce.forward(&s)?;
        let h = hidden_pre.mapv(|v| v.max(T::zero()));
        let gates = self.excite.forward(&h)?.mapv(sigmoid);
        let y = scale_channels(x, &gates);
        self.cache = Some(AttentionCache {
            input: x.clone(),
            hidden_pre,
            gates,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("attention backward called before forward"))?;
        if dy.dim() != cache.input.dim() {
            return Err(Error::invalid("attention gradient shape mismatch"));
        }
        // direct path through the rescale
        let mut dx = scale_channels(dy, &cache.gates);
        // path through the gates
        let (n, c, _, _) = dy.dim();
        let dgate = Array2::from_shape_fn((n, c), |(i, j)| {
            let g = dy.slice(s![i, j, .., ..]);
            let x = cache.input.slice(s![i, j, .., ..]);
            g.iter().zip(x.iter()).map(|(&a, &b)| a * b).sum::<T>()
        });
        let dlogit = &dgate * &cache.gates.mapv(|w| w * (T::one() - w));
        let mut dh = self.excite.backward(&dlogit)?;
        dh.zip_mut_with(&cache.hidden_pre, |d, &z| {
            if z <= T::zero() {
                *d = T::zero();
            }
        });
        let ds = self.reduce.backward(&dh)?;
        dx += &self.pool.backward(&ds)?;
        self.cache = Some(cache);
        Ok(dx)
    }
}

fn scale_channels<T: Scalar>(x: &Array4<T>, gates: &Array2<T>) -> Array4<T> {
    let mut y = x.to_owned();
    for ((i, j), &w) in gates.indexed_iter() {
        y.slice_mut(s![i, j, .., ..]).mapv_inplace(|v| v * w);
    }
    y
}

impl<T: Scalar> Module<T> for ChannelAttention<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.reduce.visit_params(&join(prefix, "fc1"), f);
        self.excite.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.reduce.visit_params_mut(&join(prefix, "fc1"), f);
        self.excite.visit_params_mut(&join(prefix, "fc2"), f);
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        out.push(LayerKind::ChannelAttention);
    }
}

/// The dual-shuffle attention unit.
#[derive(Debug, Clone)]
pub struct DraBlock<T> {
    cfg: BlockConfig,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    dwconv: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm2d<T>,
    relu3: Relu<T>,
    attention: ChannelAttention<T>,
}

impl<T: Scalar> DraBlock<T> {
    pub fn new<R: Rng + ?Sized>(cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            cfg,
            conv1: Conv2d::new(Conv2dConfig::new(c, c, 1).groups(cfg.groups), rng)?,
            bn1: BatchNorm2d::new(c),
            relu1: Relu::new(),
            dwconv: Conv2d::new(Conv2dConfig::new(c, c, 3).padding(1).groups(c), rng)?,
            bn2: BatchNorm2d::new(c),
            conv3: Conv2d::new(Conv2dConfig::new(c, c, 1).groups(cfg.groups), rng)?,
            bn3: BatchNorm2d::new(c),
            relu3: Relu::new(),
            attention: ChannelAttention::new(c, cfg.attention_reduction, rng)?,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn attention(&self) -> &ChannelAttention<T> {
        &self.attention
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        expect_channels(x, self.cfg.channels, "DRA block")?;
        let g = self.cfg.groups;
        let y = self.bn1.infer(&self.conv1.infer(x)?)?;
        let y = channel_shuffle(&self.relu1.infer(&y), g)?;
        let y = self.bn2.infer(&self.dwconv.infer(&y)?)?;
        let y = self.bn3.infer(&self.conv3.infer(&y)?)?;
        let y = channel_shuffle(&self.relu3.infer(&y), g)?;
        self.attention.infer(&y)
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        expect_channels(x, self.cfg.channels, "DRA block")?;
        let g = self.cfg.groups;
        let y = self.conv1.forward(x, mode)?;
        let y = self.bn1.forward(&y, mode)?;
        let y = channel_shuffle(&self.relu1.forward(&y, mode), g)?;
        let y = self.dwconv.forward(&y, mode)?;
        let y = self.bn2.forward(&y, mode)?;
        let y = self.conv3.forward(&y, mode)?;
        let y = self.bn3.forward(&y, mode)?;
        let y = channel_shuffle(&self.relu3.forward(&y, mode), g)?;
        self.attention.forward(&y, mode)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let g = self.cfg.groups;
        let d = self.attention.backward(dy)?;
        let d = self.relu3.backward(&channel_shuffle_backward(&d, g)?)?;
        let d = self.bn3.backward(&d)?;
        let d = self.conv3.backward(&d)?;
        let d = self.bn2.backward(&d)?;
        let d = self.dwconv.backward(&d)?;
        let d = self.relu1.backward(&channel_shuffle_backward(&d, g)?)?;
        let d = self.bn1.backward(&d)?;
        self.conv1.backward(&d)
    }
}

impl<T: Scalar> Module<T> for DraBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.dwconv.visit_params(&join(prefix, "dwconv"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        self.conv3.visit_params(&join(prefix, "conv3"), f);
        self.bn3.visit_params(&join(prefix, "bn3"), f);
        self.attention.visit_params(&join(prefix, "attention"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_params_mut(&join(prefix, "bn1"), f);
        self.dwconv.visit_params_mut(&join(prefix, "dwconv"), f);
        self.bn2.visit_params_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_params_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_params_mut(&join(prefix, "bn3"), f);
        self.attention
            .visit_params_mut(&join(prefix, "attention"), f);
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        self.conv1.layer_kinds(out);
        self.bn1.layer_kinds(out);
        out.extend([LayerKind::Relu, LayerKind::ChannelShuffle]);
        self.dwconv.layer_kinds(out);
        self.bn2.layer_kinds(out);
        self.conv3.layer_kinds(out);
        self.bn3.layer_kinds(out);
        out.extend([LayerKind::Relu, LayerKind::ChannelShuffle]);
        self.attention.layer_kinds(out);
    }
}

/// Residual dual-shuffle attention block.
#[derive(Debug, Clone)]
pub struct Rdab<T> {
    cfg: BlockConfig,
    units: Vec<DraBlock<T>>,
    /// `projections[i]` maps the `(i + 2) * C` dense concatenation feeding
    /// unit `i + 1` back to `C` channels.
    projections: Vec<Conv2d<T>>,
}

impl<T: Scalar> Rdab<T> {
    pub fn new<R: Rng + ?Sized>(cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut units = Vec::with_capacity(cfg.m);
        let mut projections = Vec::with_capacity(cfg.m.saturating_sub(1));
        for i in 0..cfg.m {
            if i > 0 {
                projections.push(Conv2d::new(
                    Conv2dConfig::new((i + 1) * c, c, 1).bias(true),
                    rng,
                )?);
            }
            units.push(DraBlock::new(cfg, rng)?);
        }
        Ok(Self {
            cfg,
            units,
            projections,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn units(&self) -> &[DraBlock<T>] {
        &self.units
    }

    /// Zeroes every learnable parameter on the residual branch, leaving
    /// the block an exact identity map.
    pub fn zero_branch(&mut self) {
        self.zero_parameters();
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        expect_channels(x, self.cfg.channels, "RDAB")?;
        let mut feats: Vec<Array4<T>> = vec![x.clone()];
        for (i, unit) in self.units.iter().enumerate() {
            let out = if i == 0 {
                unit.infer(x)?
            } else {
                let cat = concat_channels(&feats)?;
                unit.infer(&self.projections[i - 1].infer(&cat)?)?
            };
            feats.push(out);
        }
        let mut y = feats.pop().expect("m >= 1");
        y += x;
        Ok(y)
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        expect_channels(x, self.cfg.channels, "RDAB")?;
        let mut feats: Vec<Array4<T>> = vec![x.clone()];
        for i in 0..self.units.len() {
            let out = if i == 0 {
                self.units[0].forward(x, mode)?
            } else {
                let cat = concat_channels(&feats)?;
                let projected = self.projections[i - 1].forward(&cat, mode)?;
                self.units[i].forward(&projected, mode)?
            };
            feats.push(out);
        }
        let mut y = feats.pop().expect("m >= 1");
        y += x;
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let c = self.cfg.channels;
        let m = self.units.len();
        // dfeats[0] is the block input, dfeats[j] the output of unit j - 1.
        let mut dfeats: Vec<Option<Array4<T>>> = vec![None; m + 1];
        dfeats[0] = Some(dy.clone());
        dfeats[m] = Some(dy.clone());
        for i in (0..m).rev() {
            let dout = dfeats[i + 1]
                .take()
                .ok_or_else(|| Error::invalid("RDAB backward: missing unit gradient"))?;
            let dinp = self.units[i].backward(&dout)?;
            if i == 0 {
                accumulate(&mut dfeats[0], dinp.view());
            } else {
                let dcat = self.projections[i - 1].backward(&dinp)?;
                for (j, slot) in dfeats.iter_mut().enumerate().take(i + 1) {
                    accumulate(slot, dcat.slice(s![.., j * c..(j + 1) * c, .., ..]));
                }
            }
        }
        dfeats[0]
            .take()
            .ok_or_else(|| Error::invalid("RDAB backward: missing input gradient"))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array4<T>>, g: ArrayView4<'_, T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g.to_owned()),
    }
}

fn concat_channels<T: Scalar>(feats: &[Array4<T>]) -> Result<Array4<T>> {
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    concatenate(Axis(1), &views)
        .map_err(|e| Error::invalid(format!("dense concatenation failed: {e}")))
}

impl<T: Scalar> Module<T> for Rdab<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, unit) in self.units.iter().enumerate() {
            if i > 0 {
                self.projections[i - 1].visit_params(&join(prefix, &format!("proj.{i}")), f);
            }
            unit.visit_params(&join(prefix, &format!("dra.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, unit) in self.units.iter_mut().enumerate() {
            if i > 0 {
                self.projections[i - 1].visit_params_mut(&join(prefix, &format!("proj.{i}")), f);
            }
            unit.visit_params_mut(&join(prefix, &format!("dra.{i}")), f);
        }
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        for (i, unit) in self.units.iter().enumerate() {
            if i > 0 {
                out.push(LayerKind::Concat);
                self.projections[i - 1].layer_kinds(out);
            }
            unit.layer_kinds(out);
        }
        out.push(LayerKind::ResidualAdd);
    }
}
