//! MobileNet-V1 feature extractor, truncated at a requested output stride.
//!
//! Pretrained weights are read from a safetensors file whose keys follow the
//! common PyTorch layout:
//!
//! ```text
//! conv_stem.weight                       [32a, 3, 3, 3]
//! bn1.{weight,bias,running_mean,running_var}
//! blocks.<stage>.<i>.conv_dw.weight      [c, 1, 3, 3]
//! blocks.<stage>.<i>.bn1.*
//! blocks.<stage>.<i>.conv_pw.weight      [c_out, c, 1, 1]
//! blocks.<stage>.<i>.bn2.*
//! ```
//!
//! Tensors past the truncation point (and any classifier) are ignored.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Conv2dConfig, LayerKind, Mode, Module, Param, Relu};
use crate::tensor::Scalar;

/// (output channels, stride of the first block, repeats) per stage.
const MOBILENET_V1_STAGES: [(usize, usize, usize); 5] = [
    (64, 1, 1),
    (128, 2, 2),
    (256, 2, 2),
    (512, 2, 6),
    (1024, 2, 2),
];

const STEM_CHANNELS: usize = 32;

pub const SUPPORTED_STRIDES: [usize; 3] = [8, 16, 32];

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneSource {
    /// ImageNet weights in a safetensors file.
    Pretrained(PathBuf),
    /// Explicit opt-in to a randomly initialised backbone.
    RandomInit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneSpec {
    pub width_multiplier: f64,
}

/// Registry of known backbone names. `none` means "no backbone".
pub fn lookup_backbone(name: &str) -> Result<Option<BackboneSpec>> {
    let width = match name {
        "none" => return Ok(None),
        "mobilenet_v1" | "mobilenet_v1_1.0" => 1.0,
        "mobilenet_v1_0.75" => 0.75,
        "mobilenet_v1_0.5" => 0.5,
        "mobilenet_v1_0.25" => 0.25,
        other => {
            return Err(Error::config(format!(
                "unknown backbone `{other}` (known: mobilenet_v1, mobilenet_v1_0.75, \
                 mobilenet_v1_0.5, mobilenet_v1_0.25, none)"
            )))
        }
    };
    Ok(Some(BackboneSpec {
        width_multiplier: width,
    }))
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = (((v + d / 2.0) / d).floor() * d).max(d);
    if out < 0.9 * v {
        out += d;
    }
    out as usize
}

#[derive(Debug, Clone)]
struct DepthwiseSeparable<T> {
    conv_dw: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    conv_pw: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu<T>,
}

impl<T: Scalar> DepthwiseSeparable<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv_dw: Conv2d::new(
                Conv2dConfig::new(cin, cin, 3)
                    .stride(stride)
                    .padding(1)
                    .groups(cin),
                rng,
            )?,
            bn1: BatchNorm2d::new(cin),
            relu1: Relu::new(),
            conv_pw: Conv2d::new(Conv2dConfig::new(cin, cout, 1), rng)?,
            bn2: BatchNorm2d::new(cout),
            relu2: Relu::new(),
        })
    }

    fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let y = self.relu1.infer(&self.bn1.infer(&self.conv_dw.infer(x)?)?);
        Ok(self.relu2.infer(&self.bn2.infer(&self.conv_pw.infer(&y)?)?))
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let y = self.conv_dw.forward(x, mode)?;
        let y = self.bn1.forward(&y, mode)?;
        let y = self.relu1.forward(&y, mode);
        let y = self.conv_pw.forward(&y, mode)?;
        let y = self.bn2.forward(&y, mode)?;
        Ok(self.relu2.forward(&y, mode))
    }

    fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let d = self.relu2.backward(dy)?;
        let d = self.bn2.backward(&d)?;
        let d = self.conv_pw.backward(&d)?;
        let d = self.relu1.backward(&d)?;
        let d = self.bn1.backward(&d)?;
        self.conv_dw.backward(&d)
    }
}

impl<T: Scalar> Module<T> for DepthwiseSeparable<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv_dw.visit_params(&join(prefix, "conv_dw"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv_pw.visit_params(&join(prefix, "conv_pw"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv_dw.visit_params_mut(&join(prefix, "conv_dw"), f);
        self.bn1.visit_params_mut(&join(prefix, "bn1"), f);
        self.conv_pw.visit_params_mut(&join(prefix, "conv_pw"), f);
        self.bn2.visit_params_mut(&join(prefix, "bn2"), f);
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        self.conv_dw.layer_kinds(out);
        self.bn1.layer_kinds(out);
        out.push(LayerKind::Relu);
        self.conv_pw.layer_kinds(out);
        self.bn2.layer_kinds(out);
        out.push(LayerKind::Relu);
    }
}

/// A MobileNet-V1 prefix ending at a fixed output stride.
#[derive(Debug, Clone)]
pub struct MobileNetV1<T> {
    name: String,
    conv_stem: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu: Relu<T>,
    blocks: Vec<(String, DepthwiseSeparable<T>)>,
    out_channels: usize,
    output_stride: usize,
}

impl<T: Scalar> MobileNetV1<T> {
    fn build<R: Rng + ?Sized>(
        name: &str,
        spec: BackboneSpec,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let alpha = spec.width_multiplier;
        let mut cin = make_divisible(STEM_CHANNELS as f64 * alpha, 8);
        let conv_stem = Conv2d::new(Conv2dConfig::new(3, cin, 3).stride(2).padding(1), rng)?;
        let bn1 = BatchNorm2d::new(cin);
        let mut current = 2;
        let mut blocks = Vec::new();
        'stages: for (stage, &(channels, first_stride, repeats)) in
            MOBILENET_V1_STAGES.iter().enumerate()
        {
            let cout = make_divisible(channels as f64 * alpha, 8);
            for i in 0..repeats {
                let s = if i == 0 { first_stride } else { 1 };
                if current * s > stride {
                    break 'stages;
                }
                current *= s;
                blocks.push((
                    format!("blocks.{stage}.{i}"),
                    DepthwiseSeparable::new(cin, cout, s, rng)?,
                ));
                cin = cout;
            }
        }
        Ok(Self {
            name: name.to_string(),
            conv_stem,
            bn1,
            relu: Relu::new(),
            blocks,
            out_channels: cin,
            output_stride: current,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_stride(&self) -> usize {
        self.output_stride
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Spatial size of the output for a square `input`-pixel image.
    pub fn output_size(&self, input: usize) -> usize {
        // every stride-2 layer is a 3x3 conv with padding 1: ceil(n / 2)
        let mut n = input;
        let mut s = 1;
        while s < self.output_stride {
            n = n.div_ceil(2);
            s *= 2;
        }
        n
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let mut y = self.relu.infer(&self.bn1.infer(&self.conv_stem.infer(x)?)?);
        for (_, block) in &self.blocks {
            y = block.infer(&y)?;
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let y = self.conv_stem.forward(x, mode)?;
        let y = self.bn1.forward(&y, mode)?;
        let mut y = self.relu.forward(&y, mode);
        for (_, block) in &mut self.blocks {
            y = block.forward(&y, mode)?;
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let mut d = dy.clone();
        for (_, block) in self.blocks.iter_mut().rev() {
            d = block.backward(&d)?;
        }
        let d = self.relu.backward(&d)?;
        let d = self.bn1.backward(&d)?;
        self.conv_stem.backward(&d)
    }

    /// Copies every backbone tensor from a safetensors file.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<()> {
        let unavailable = |reason: String| Error::PretrainedUnavailable {
            backbone: self.name.clone(),
            reason,
            remediation: remediation(),
        };
        if path.as_os_str().is_empty() {
            return Err(unavailable("no weights file was given".to_string()));
        }
        let bytes = std::fs::read(path)
            .map_err(|e| unavailable(format!("cannot read {}: {e}", path.display())))?;
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| {
            unavailable(format!("{} is not a safetensors file: {e}", path.display()))
        })?;
        let mut loaded: HashMap<String, ArrayD<T>> = HashMap::new();
        let mut problems = Vec::new();
        self.visit_params("", &mut |name, p| match tensors.tensor(name) {
            Ok(view) => match decode_tensor::<T>(view.dtype(), view.shape(), view.data()) {
                Ok(arr) if arr.shape() == p.value.shape() => {
                    loaded.insert(name.to_string(), arr);
                }
                Ok(arr) => problems.push(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    arr.shape(),
                    p.value.shape()
                )),
                Err(e) => problems.push(format!("tensor `{name}`: {e}")),
            },
            Err(_) => problems.push(format!("missing tensor `{name}`")),
        });
        if let Some(first) = problems.first() {
            return Err(unavailable(format!(
                "{} does not match {} ({first}; {} problem(s) total)",
                path.display(),
                self.name,
                problems.len()
            )));
        }
        self.visit_params_mut("", &mut |name, p| {
            if let Some(v) = loaded.remove(name) {
                p.value = v;
            }
        });
        Ok(())
    }
}

fn remediation() -> String {
    "pass a safetensors file with ImageNet weights (`--backbone-weights <file>` or \
     `backbone_weights` in the config file), or opt in to random initialisation \
     explicitly with `--random-backbone`"
        .to_string()
}

pub(crate) fn decode_tensor<T: Scalar>(
    dtype: Dtype,
    shape: &[usize],
    data: &[u8],
) -> Result<ArrayD<T>> {
    let values: Vec<T> = match dtype {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect(),
        other => {
            return Err(Error::invalid(format!(
                "unsupported tensor dtype {other:?}"
            )))
        }
    };
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::invalid(format!("tensor data does not match shape {shape:?}: {e}")))
}

impl<T: Scalar> Module<T> for MobileNetV1<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv_stem.visit_params(&join(prefix, "conv_stem"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        for (name, block) in &self.blocks {
            block.visit_params(&join(prefix, name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv_stem
            .visit_params_mut(&join(prefix, "conv_stem"), f);
        self.bn1.visit_params_mut(&join(prefix, "bn1"), f);
        for (name, block) in &mut self.blocks {
            block.visit_params_mut(&join(prefix, name), f);
        }
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        self.conv_stem.layer_kinds(out);
        self.bn1.layer_kinds(out);
        out.push(LayerKind::Relu);
        for (_, block) in &self.blocks {
            block.layer_kinds(out);
        }
    }
}

/// Builds the named backbone cut at `truncate_at_stride` and loads its
/// weights from `source`.
pub fn truncate_backbone<T: Scalar, R: Rng + ?Sized>(
    backbone_name: &str,
    truncate_at_stride: usize,
    source: &BackboneSource,
    rng: &mut R,
) -> Result<MobileNetV1<T>> {
    let spec = lookup_backbone(backbone_name)?
        .ok_or_else(|| Error::config("backbone `none` has nothing to truncate"))?;
    if !SUPPORTED_STRIDES.contains(&truncate_at_stride) {
        return Err(Error::config(format!(
            "truncate_at_stride must be one of {SUPPORTED_STRIDES:?}, got {truncate_at_stride}"
        )));
    }
    let mut net = MobileNetV1::build(backbone_name, spec, truncate_at_stride, rng)?;
    match source {
        BackboneSource::Pretrained(path) => net.load_pretrained(path)?,
        BackboneSource::RandomInit => {}
    }
    Ok(net)
}
