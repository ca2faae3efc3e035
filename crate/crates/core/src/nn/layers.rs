use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, Axis, Ix2};
use rand::Rng;

use super::{join, LayerKind, Mode, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{fan_in_uniform, Scalar};

/// Rectified linear unit; remembers which inputs were positive. NaN inputs
/// pass through so that divergence stays visible downstream.
#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    input: Option<Array4<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        x.mapv(|v| if v < T::zero() { T::zero() } else { v })
    }

    pub fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Array4<T> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::invalid("relu backward called before forward"))?;
        let mut dx = dy.to_owned();
        dx.zip_mut_with(x, |g, &v| {
            if v <= T::zero() {
                *g = T::zero();
            }
        });
        Ok(dx)
    }
}

/// 2x2 max pooling with stride 2 (floor on odd sizes).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    argmax: Vec<usize>,
    input_dim: Option<(usize, usize, usize, usize)>,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    fn pool<T: Scalar>(x: &Array4<T>, mut argmax: Option<&mut Vec<usize>>) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if h < 2 || w < 2 {
            return Err(Error::invalid(format!(
                "max-pool needs at least 2x2 input, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<T>::zeros((n, c, ho, wo));
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(n * c * ho * wo);
        }
        for (plane_idx, out) in y
            .as_slice_mut()
            .expect("fresh array")
            .chunks_mut(ho * wo)
            .enumerate()
        {
            let base = plane_idx * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[idx] > xs[best] || (xs[idx].is_nan() && !xs[best].is_nan()) {
                            best = idx;
                        }
                    }
                    out[oy * wo + ox] = xs[best];
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best);
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn infer<T: Scalar>(&self, x: &Array4<T>) -> Result<Array4<T>> {
        Self::pool(x, None)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>, _mode: Mode) -> Result<Array4<T>> {
        let y = Self::pool(x, Some(&mut self.argmax))?;
        self.input_dim = Some(x.dim());
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let dim = self
            .input_dim
            .ok_or_else(|| Error::invalid("max-pool backward called before forward"))?;
        if dy.len() != self.argmax.len() {
            return Err(Error::invalid("max-pool gradient shape mismatch"));
        }
        let mut dx = Array4::<T>::zeros(dim);
        let dxs = dx.as_slice_mut().expect("fresh array");
        for (&idx, &g) in self.argmax.iter().zip(dy.as_standard_layout().iter()) {
            dxs[idx] += g;
        }
        Ok(dx)
    }
}

/// Spatial mean per channel: (N, C, H, W) -> (N, C).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_dim: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer<T: Scalar>(&self, x: &Array4<T>) -> Array2<T> {
        let (n, c, h, w) = x.dim();
        let area = T::lit((h * w) as f64);
        Array2::from_shape_fn((n, c), |(i, j)| {
            x.index_axis(Axis(0), i)
                .index_axis(Axis(0), j)
                .iter()
                .copied()
                .sum::<T>()
                / area
        })
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>) -> Array2<T> {
        self.input_dim = Some(x.dim());
        self.infer(x)
    }

    pub fn backward<T: Scalar>(&self, dy: &Array2<T>) -> Result<Array4<T>> {
        let (n, c, h, w) = self
            .input_dim
            .ok_or_else(|| Error::invalid("average-pool backward called before forward"))?;
        if dy.dim() != (n, c) {
            return Err(Error::invalid("average-pool gradient shape mismatch"));
        }
        let area = T::lit((h * w) as f64);
        Ok(Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| {
            dy[[i, j]] / area
        }))
    }
}

/// Fully connected layer `y = x W^T + b` on (N, in) inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    in_features: usize,
    out_features: usize,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::new(fan_in_uniform(
                &[out_features, in_features],
                in_features,
                rng,
            )),
            bias: Param::new(fan_in_uniform(&[out_features], in_features, rng)),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn weight_mut(&mut self) -> &mut Param<T> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Param<T> {
        &mut self.bias
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d weight")
    }

    pub fn infer(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_features {
            return Err(Error::invalid(format!(
                "linear layer expects {} features, got {}",
                self.in_features,
                x.ncols()
            )));
        }
        let mut y = Array2::<T>::zeros((x.nrows(), self.out_features));
        general_mat_mul(T::one(), x, &self.weight2().t(), T::zero(), &mut y);
        let b = self.bias.value.as_slice().expect("contiguous");
        for mut row in y.rows_mut() {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Array2<T>) -> Result<Array2<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Result<Array2<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::invalid("linear backward called before forward"))?;
        if dy.dim() != (x.nrows(), self.out_features) {
            return Err(Error::invalid("linear gradient shape mismatch"));
        }
        {
            let mut dw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("2-d grad");
            general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut dw);
        }
        let db = dy.sum_axis(Axis(0));
        self.bias
            .grad
            .as_slice_mut()
            .expect("contiguous")
            .iter_mut()
            .zip(db.iter())
            .for_each(|(g, &d)| *g += d);
        let mut dx = Array2::<T>::zeros(x.dim());
        general_mat_mul(T::one(), dy, &self.weight2(), T::zero(), &mut dx);
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        out.push(LayerKind::Linear);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fc = Linear::<f32>::new(128, 1, &mut rng);
        assert_eq!(fc.num_parameters(), 129);
    }

    #[test]
    fn max_pool_picks_block_maxima() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0])
            .unwrap();
        let mut pool = MaxPool2d::new();
        let y = pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.as_slice().unwrap(), &[5.0, 7.0]);
        let dx = pool
            .backward(&Array4::from_elem((1, 1, 1, 2), 1.0))
            .unwrap();
        assert_eq!(
            dx.as_slice().unwrap(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn average_pool_of_constant_is_constant() {
        let x = Array4::from_elem((2, 3, 5, 5), 1.25f64);
        let y = GlobalAvgPool::new().infer(&x);
        assert!(y.iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }
}
