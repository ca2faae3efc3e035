//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

use std::path::Path;

use ndarray::Array4;
use shuffle_histo::blocks::{BlockConfig, ChannelAttention, DraBlock, Rdab};
use shuffle_histo::data::{scan_dataset, synth_dataset, DatasetManifest, Magnification, SynthSpec};
use shuffle_histo::model::ModelConfig;
use shuffle_histo::nn::{Mode, Module};
use shuffle_histo::tensor::Scalar;
use shuffle_histo::training::{TensorDataset, TrainConfig};

/// Small hybrid model that trains on one CPU core in well under a minute.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 64,
        backbone_name: "mobilenet_v1_0.25".into(),
        stem_channels: 32,
        head_channels: 16,
        block: BlockConfig {
            channels: 32,
            ..BlockConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

/// 100 images per class at 40X, written under `root`.
pub fn synth_200(root: &Path) -> DatasetManifest {
    let spec = SynthSpec::default();
    synth_dataset(root, &spec).expect("synthetic dataset");
    scan_dataset(root).expect("scan synthetic dataset")
}

pub fn load_all(manifest: &DatasetManifest, input_size: usize) -> TensorDataset {
    let records = manifest.at_magnification(Magnification::X40);
    TensorDataset::load(manifest.root(), &records, input_size).expect("load tensors")
}

/// Brute-force metric oracle: re-scans raw (prob, label) pairs with the
/// textbook definitions, independent of the library's bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn oracle_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> OracleMetrics {
    let n = probs.len();
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= threshold) == (y == 1))
        .count();
    let predicted_pos: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    let tp = predicted_pos
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| p && y == 1)
        .count();
    let pp = predicted_pos.iter().filter(|&&p| p).count();
    let ap = labels.iter().filter(|&&y| y == 1).count();
    let pct = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let precision = pct(tp, pp);
    let recall = pct(tp, ap);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    OracleMetrics {
        accuracy: pct(correct, n),
        precision,
        recall,
        f1,
    }
}

/// Forward/backward access shared by the three block types under test.
pub trait Differentiable<T: Scalar>: Module<T> {
    fn fwd(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T>;
    fn bwd(&mut self, dy: &Array4<T>) -> Array4<T>;
}

impl<T: Scalar> Differentiable<T> for ChannelAttention<T> {
    fn fwd(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        self.forward(x, mode).unwrap()
    }
    fn bwd(&mut self, dy: &Array4<T>) -> Array4<T> {
        self.backward(dy).unwrap()
    }
}

impl<T: Scalar> Differentiable<T> for DraBlock<T> {
    fn fwd(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        self.forward(x, mode).unwrap()
    }
    fn bwd(&mut self, dy: &Array4<T>) -> Array4<T> {
        self.backward(dy).unwrap()
    }
}

impl<T: Scalar> Differentiable<T> for Rdab<T> {
    fn fwd(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        self.forward(x, mode).unwrap()
    }
    fn bwd(&mut self, dy: &Array4<T>) -> Array4<T> {
        self.backward(dy).unwrap()
    }
}

/// Analytic and central-difference gradients of `L = sum(w * block(x))`.
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `||a - n|| / max(||a||, ||n||)`, the usual scale-free check.
    pub fn relative_error(&self) -> f64 {
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n));
        let scale =
            norm(&mut self.analytic.iter().copied()).max(norm(&mut self.numeric.iter().copied()));
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

fn weighted_sum<T: Scalar>(y: &Array4<T>, w: &Array4<T>) -> f64 {
    y.iter()
        .zip(w)
        .map(|(a, b)| a.to_f64_lossless() * b.to_f64_lossless())
        .sum()
}

pub fn input_gradient<T: Scalar, B: Differentiable<T>>(
    block: &mut B,
    x: &Array4<T>,
    w: &Array4<T>,
    mode: Mode,
    step: f64,
) -> GradComparison {
    block.zero_grad();
    block.fwd(x, mode);
    let analytic = block.bwd(w).iter().map(|v| v.to_f64_lossless()).collect();
    let mut numeric = Vec::with_capacity(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.as_slice().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + T::lit(step);
        let up = weighted_sum(&block.fwd(&xp, mode), w);
        xp.as_slice_mut().unwrap()[i] = orig - T::lit(step);
        let down = weighted_sum(&block.fwd(&xp, mode), w);
        xp.as_slice_mut().unwrap()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    GradComparison { analytic, numeric }
}

pub fn parameter_gradient<T: Scalar, B: Differentiable<T>>(
    block: &mut B,
    x: &Array4<T>,
    w: &Array4<T>,
    mode: Mode,
    step: f64,
) -> GradComparison {
    block.zero_grad();
    block.fwd(x, mode);
    block.bwd(w);
    let mut analytic = Vec::new();
    let mut sizes = Vec::new();
    block.visit_params("", &mut |name, p| {
        if !p.is_buffer() {
            analytic.extend(p.grad.iter().map(|v| v.to_f64_lossless()));
            sizes.push((name.to_string(), p.len()));
        }
    });
    let mut numeric = Vec::with_capacity(analytic.len());
    for (name, len) in &sizes {
        for i in 0..*len {
            let mut orig = T::zero();
            block.visit_params("", &mut |n, p| {
                if n == name {
                    orig = p.value.as_slice().unwrap()[i];
                }
            });
            let set = |block: &mut B, value: T| {
                block.visit_params_mut("", &mut |n, p| {
                    if n == name {
                        p.value.as_slice_mut().unwrap()[i] = value;
                    }
                });
            };
            set(block, orig + T::lit(step));
            let up = weighted_sum(&block.fwd(x, mode), w);
            set(block, orig - T::lit(step));
            let down = weighted_sum(&block.fwd(x, mode), w);
            set(block, orig);
            numeric.push((up - down) / (2.0 * step));
        }
    }
    GradComparison { analytic, numeric }
}
