//! Minimal CPU layer engine: explicit forward/backward per layer.
//!
//! `forward` caches whatever `backward` needs; `infer` is the cache-free
//! inference path and takes `&self`, so a trained model can serve several
//! threads at once.

mod conv;
mod layers;
mod loss;
mod norm;

pub use conv::{Conv2d, Conv2dConfig};
pub use layers::{GlobalAvgPool, Linear, MaxPool2d, Relu};
pub use loss::{bce_with_logits, BceOutput};
pub use norm::BatchNorm2d;

use ndarray::ArrayD;

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics.
    Eval,
}

/// A learnable tensor (or a non-learnable buffer such as running statistics)
/// together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    is_buffer: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            is_buffer: false,
        }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Self {
            grad: ArrayD::zeros(ndarray::IxDyn(&[0])),
            value,
            is_buffer: true,
        }
    }

    pub fn is_buffer(&self) -> bool {
        self.is_buffer
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if !self.is_buffer {
            self.grad.fill(T::zero());
        }
    }
}

/// Coarse layer taxonomy used for structural assertions about a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    GroupedConv,
    DepthwiseConv,
    BatchNorm,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Linear,
    ChannelShuffle,
    ChannelAttention,
    Concat,
    ResidualAdd,
    Sigmoid,
}

/// Parameter traversal shared by every layer and block.
///
/// Names are dot-separated paths (`stages.0.dra.0.conv1.weight`); the
/// traversal order is fixed, which the optimizer and checkpoint code rely on.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn layer_kinds(&self, out: &mut Vec<LayerKind>);

    /// Learnable scalars, buffers excluded.
    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if !p.is_buffer() {
                n += p.len();
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    /// Sets every learnable parameter to zero (buffers untouched).
    fn zero_parameters(&mut self) {
        self.visit_params_mut("", &mut |_, p| {
            if !p.is_buffer() {
                p.value.fill(T::zero());
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
