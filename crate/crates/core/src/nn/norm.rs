use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use super::{join, LayerKind, Mode, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{expect_channels, Scalar};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
struct Cache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    mode: Mode,
}

/// Per-channel batch normalization over (N, H, W).
///
/// Running statistics follow the usual exponential average with momentum 0.1
/// and the unbiased batch variance.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    channels: usize,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Param<T>,
    running_var: Param<T>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let ones = || ArrayD::from_elem(IxDyn(&[channels]), T::one());
        let zeros = || ArrayD::zeros(IxDyn(&[channels]));
        Self {
            channels,
            gamma: Param::new(ones()),
            beta: Param::new(zeros()),
            running_mean: Param::buffer(zeros()),
            running_var: Param::buffer(ones()),
            cache: None,
        }
    }

    fn affine(&self) -> (&[T], &[T]) {
        (
            self.gamma.value.as_slice().expect("contiguous"),
            self.beta.value.as_slice().expect("contiguous"),
        )
    }

    /// Normalizes with the running statistics.
    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        expect_channels(x, self.channels, "batch normalization")?;
        let eps = T::lit(EPS);
        let (gamma, beta) = self.affine();
        let mean = self.running_mean.value.as_slice().expect("contiguous");
        let var = self.running_var.value.as_slice().expect("contiguous");
        let mut y = x.to_owned();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let scale = gamma[c] / (var[c] + eps).sqrt();
            let shift = beta[c] - mean[c] * scale;
            plane.mapv_inplace(|v| v * scale + shift);
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        expect_channels(x, self.channels, "batch normalization")?;
        let (n, c, h, w) = x.dim();
        let count = n * h * w;
        let eps = T::lit(EPS);
        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        let mut inv_std = Array1::<T>::zeros(c);
        match mode {
            Mode::Train => {
                let m = T::lit(count as f64);
                let momentum = T::lit(MOMENTUM);
                let unbias = if count > 1 {
                    T::lit(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let rm = self.running_mean.value.as_slice_mut().expect("contiguous");
                let rv = self.running_var.value.as_slice_mut().expect("contiguous");
                for ch in 0..c {
                    let plane = x.index_axis(Axis(1), ch);
                    let mean = plane.iter().copied().sum::<T>() / m;
                    let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                    let istd = T::one() / (var + eps).sqrt();
                    inv_std[ch] = istd;
                    xhat.index_axis_mut(Axis(1), ch)
                        .zip_mut_with(&plane, |o, &v| *o = (v - mean) * istd);
                    rm[ch] = (T::one() - momentum) * rm[ch] + momentum * mean;
                    rv[ch] = (T::one() - momentum) * rv[ch] + momentum * var * unbias;
                }
            }
            Mode::Eval => {
                let rm = self.running_mean.value.as_slice().expect("contiguous");
                let rv = self.running_var.value.as_slice().expect("contiguous");
                for ch in 0..c {
                    let istd = T::one() / (rv[ch] + eps).sqrt();
                    inv_std[ch] = istd;
                    let mean = rm[ch];
                    xhat.index_axis_mut(Axis(1), ch)
                        .zip_mut_with(&x.index_axis(Axis(1), ch), |o, &v| *o = (v - mean) * istd);
                }
            }
        }
        let (gamma, beta) = self.affine();
        let mut y = xhat.clone();
        for (ch, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (gamma[ch], beta[ch]);
            plane.mapv_inplace(|v| v * g + b);
        }
        self.cache = Some(Cache {
            xhat,
            inv_std,
            mode,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("batch-norm backward called before forward"))?;
        if dy.dim() != cache.xhat.dim() {
            return Err(Error::invalid("batch-norm gradient shape mismatch"));
        }
        let (n, c, h, w) = dy.dim();
        let m = T::lit((n * h * w) as f64);
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let dgamma = self.gamma.grad.as_slice_mut().expect("contiguous");
        let dbeta = self.beta.grad.as_slice_mut().expect("contiguous");
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ch in 0..c {
            let g = dy.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = g.iter().copied().sum::<T>();
            let sum_dy_xhat = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            dgamma[ch] += sum_dy_xhat;
            dbeta[ch] += sum_dy;
            let k = gamma[ch] * cache.inv_std[ch];
            let mut out = dx.index_axis_mut(Axis(1), ch);
            match cache.mode {
                Mode::Train => {
                    let mean_dy = sum_dy / m;
                    let mean_dy_xhat = sum_dy_xhat / m;
                    ndarray::Zip::from(&mut out)
                        .and(&g)
                        .and(&xh)
                        .for_each(|o, &gv, &xv| *o = k * (gv - mean_dy - xv * mean_dy_xhat));
                }
                Mode::Eval => {
                    out.zip_mut_with(&g, |o, &gv| *o = k * gv);
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        out.push(LayerKind::BatchNorm);
    }
}
