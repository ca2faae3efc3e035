//! Scalar abstraction and feature-map shape helpers.
//!
//! All layers are generic over [`Scalar`] so the same code runs in single
//! precision for training and in double precision for gradient checking.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array4, ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use safetensors::Dtype;

use crate::error::{Error, Result};

pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn lit(v: f64) -> Self;
    fn to_f64_lossless(self) -> f64;
    fn push_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    fn push_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }

    fn push_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// (batch, channels, height, width) of an NCHW feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureMapSpec {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureMapSpec {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "feature map dimensions must be >= 1, got ({batch}, {channels}, {height}, {width})"
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
        })
    }

    pub fn of<T>(x: &Array4<T>) -> Self {
        let (batch, channels, height, width) = x.dim();
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn check_groups(&self, groups: usize) -> Result<()> {
        if groups == 0 || !self.channels.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "{} channels are not divisible into {groups} groups",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }
}

impl std::fmt::Display for FeatureMapSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

pub(crate) fn expect_channels<T>(x: &Array4<T>, channels: usize, what: &str) -> Result<()> {
    let got = x.dim().1;
    if got != channels {
        return Err(Error::invalid(format!(
            "{what} expects {channels} input channels, got {got}"
        )));
    }
    Ok(())
}

/// He-normal initialisation, std = sqrt(2 / fan_in).
pub(crate) fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> ArrayD<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(dist.sample(rng)))
}

/// Uniform(-bound, bound) with bound = 1/sqrt(fan_in).
pub(crate) fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(dist.sample(rng)))
}

/// Standard-normal NCHW tensor drawn from `rng`.
pub fn random_feature_map<T: Scalar, R: Rng + ?Sized>(
    spec: FeatureMapSpec,
    rng: &mut R,
) -> Array4<T> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    Array4::from_shape_simple_fn(spec.dim(), || T::lit(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dimension_rejected() {
        assert!(FeatureMapSpec::new(1, 0, 4, 4).is_err());
        assert!(FeatureMapSpec::new(1, 8, 4, 4).is_ok());
    }

    #[test]
    fn group_divisibility() {
        let s = FeatureMapSpec::new(1, 6, 2, 2).unwrap();
        assert!(s.check_groups(3).is_ok());
        assert!(s.check_groups(4).is_err());
        assert!(s.check_groups(0).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!((softplus(-800.0f64)).abs() < 1e-300);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
    }
}
