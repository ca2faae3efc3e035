use ndarray::linalg::general_mat_mul;
use ndarray::{Array4, ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::{join, LayerKind, Mode, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{expect_channels, kaiming_normal, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    fn validate(&self) -> Result<()> {
        let Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || groups == 0 {
            return Err(Error::invalid(format!("degenerate convolution {self:?}")));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::invalid(format!(
                "convolution {in_channels}->{out_channels} is not divisible into {groups} groups"
            )));
        }
        Ok(())
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels && self.groups > 1
    }

    pub fn output_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if height + 2 * p < k || width + 2 * p < k {
            return Err(Error::invalid(format!(
                "input {height}x{width} is smaller than the {k}x{k} kernel"
            )));
        }
        Ok(((height + 2 * p - k) / s + 1, (width + 2 * p - k) / s + 1))
    }
}

/// Grouped 2-D convolution (NCHW). Dense, grouped and depthwise cases share
/// one weight layout `[out, in / groups, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    cfg: Conv2dConfig,
    weight: Param<T>,
    bias: Option<Param<T>>,
    input: Option<Array4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(cfg: Conv2dConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let shape = [cfg.out_channels, cfg.in_per_group(), k, k];
        let weight = Param::new(kaiming_normal(&shape, cfg.in_per_group() * k * k, rng));
        let bias = cfg
            .bias
            .then(|| Param::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[cfg.out_channels]))));
        Ok(Self {
            cfg,
            weight,
            bias,
            input: None,
        })
    }

    pub fn config(&self) -> &Conv2dConfig {
        &self.cfg
    }

    pub fn weight(&self) -> &Param<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Param<T> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> Option<&mut Param<T>> {
        self.bias.as_mut()
    }

    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let cfg = &self.cfg;
        expect_channels(x, cfg.in_channels, "convolution")?;
        let (n, c, h, w) = x.dim();
        let (ho, wo) = cfg.output_hw(h, w)?;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let ws = self.weight.value.as_slice().expect("contiguous weight");
        let mut y = Array4::<T>::zeros((n, cfg.out_channels, ho, wo));
        let ys = y.as_slice_mut().expect("fresh array");

        let in_plane = c * h * w;
        let out_plane = cfg.out_channels * ho * wo;
        let geo = Geometry::new(cfg, h, w, ho, wo);
        let mut cols = Vec::new();
        for i in 0..n {
            let xi = &xs[i * in_plane..(i + 1) * in_plane];
            let yi = &mut ys[i * out_plane..(i + 1) * out_plane];
            if cfg.is_depthwise() {
                depthwise_forward(&geo, cfg.in_channels, xi, ws, yi);
            } else {
                self.grouped_forward(&geo, xi, ws, yi, &mut cols);
            }
            if let Some(b) = &self.bias {
                let bs = b.value.as_slice().expect("contiguous bias");
                for (plane, &bv) in yi.chunks_mut(ho * wo).zip(bs) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(y)
    }

    fn grouped_forward(&self, geo: &Geometry, xi: &[T], ws: &[T], yi: &mut [T], cols: &mut Vec<T>) {
        let cfg = &self.cfg;
        let (cin_g, cout_g) = (cfg.in_per_group(), cfg.out_per_group());
        let kk = cin_g * cfg.kernel * cfg.kernel;
        let hw_in = geo.h * geo.w;
        let hw_out = geo.ho * geo.wo;
        for g in 0..cfg.groups {
            let wg =
                ArrayView2::from_shape((cout_g, kk), &ws[g * cout_g * kk..(g + 1) * cout_g * kk])
                    .expect("weight block");
            let mut yg = ArrayViewMut2::from_shape(
                (cout_g, hw_out),
                &mut yi[g * cout_g * hw_out..(g + 1) * cout_g * hw_out],
            )
            .expect("output block");
            let xg = &xi[g * cin_g * hw_in..(g + 1) * cin_g * hw_in];
            if cfg.is_pointwise() {
                let xv = ArrayView2::from_shape((cin_g, hw_in), xg).expect("input block");
                general_mat_mul(T::one(), &wg, &xv, T::zero(), &mut yg);
            } else {
                im2col(geo, cin_g, xg, cols);
                let cv = ArrayView2::from_shape((kk, hw_out), &cols[..]).expect("column block");
                general_mat_mul(T::one(), &wg, &cv, T::zero(), &mut yg);
            }
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, _mode: Mode) -> Result<Array4<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.as_standard_layout().into_owned());
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<T>) -> Result<Array4<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::invalid("convolution backward called before forward"))?;
        let cfg = self.cfg;
        let (n, c, h, w) = x.dim();
        let (ho, wo) = cfg.output_hw(h, w)?;
        if dy.dim() != (n, cfg.out_channels, ho, wo) {
            return Err(Error::invalid(format!(
                "convolution backward expects gradient of shape {:?}, got {:?}",
                (n, cfg.out_channels, ho, wo),
                dy.dim()
            )));
        }
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let xs = x.as_slice().expect("standard layout");
        let ws = self.weight.value.as_slice().expect("contiguous weight");
        let dws = self.weight.grad.as_slice_mut().expect("contiguous grad");
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh array");

        let in_plane = c * h * w;
        let out_plane = cfg.out_channels * ho * wo;
        let geo = Geometry::new(&cfg, h, w, ho, wo);
        let (cin_g, cout_g) = (cfg.in_per_group(), cfg.out_per_group());
        let kk = cin_g * cfg.kernel * cfg.kernel;
        let (hw_in, hw_out) = (h * w, ho * wo);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();

        for i in 0..n {
            let xi = &xs[i * in_plane..(i + 1) * in_plane];
            let dyi = &dys[i * out_plane..(i + 1) * out_plane];
            let dxi = &mut dxs[i * in_plane..(i + 1) * in_plane];
            if let Some(b) = &mut self.bias {
                let db = b.grad.as_slice_mut().expect("contiguous grad");
                for (plane, g) in dyi.chunks(hw_out).zip(db.iter_mut()) {
                    *g += plane.iter().copied().sum::<T>();
                }
            }
            if cfg.is_depthwise() {
                depthwise_backward(&geo, c, xi, ws, dyi, dws, dxi);
                continue;
            }
            for g in 0..cfg.groups {
                let wrange = g * cout_g * kk..(g + 1) * cout_g * kk;
                let wg = ArrayView2::from_shape((cout_g, kk), &ws[wrange.clone()])
                    .expect("weight block");
                let mut dwg =
                    ArrayViewMut2::from_shape((cout_g, kk), &mut dws[wrange]).expect("grad block");
                let dyg = ArrayView2::from_shape(
                    (cout_g, hw_out),
                    &dyi[g * cout_g * hw_out..(g + 1) * cout_g * hw_out],
                )
                .expect("output grad block");
                let xrange = g * cin_g * hw_in..(g + 1) * cin_g * hw_in;
                if cfg.is_pointwise() {
                    let xv =
                        ArrayView2::from_shape((cin_g, hw_in), &xi[xrange.clone()]).expect("input");
                    general_mat_mul(T::one(), &dyg, &xv.t(), T::one(), &mut dwg);
                    let mut dxg = ArrayViewMut2::from_shape((cin_g, hw_in), &mut dxi[xrange])
                        .expect("input grad");
                    general_mat_mul(T::one(), &wg.t(), &dyg, T::zero(), &mut dxg);
                } else {
                    im2col(&geo, cin_g, &xi[xrange.clone()], &mut cols);
                    let cv = ArrayView2::from_shape((kk, hw_out), &cols[..]).expect("columns");
                    general_mat_mul(T::one(), &dyg, &cv.t(), T::one(), &mut dwg);
                    dcols.clear();
                    dcols.resize(kk * hw_out, T::zero());
                    let mut dcv =
                        ArrayViewMut2::from_shape((kk, hw_out), &mut dcols[..]).expect("dcols");
                    general_mat_mul(T::one(), &wg.t(), &dyg, T::zero(), &mut dcv);
                    col2im(&geo, cin_g, &dcols, &mut dxi[xrange]);
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn layer_kinds(&self, out: &mut Vec<LayerKind>) {
        out.push(if self.cfg.is_depthwise() {
            LayerKind::DepthwiseConv
        } else if self.cfg.groups > 1 {
            LayerKind::GroupedConv
        } else {
            LayerKind::Conv
        });
    }
}

struct Geometry {
    k: usize,
    s: usize,
    p: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(cfg: &Conv2dConfig, h: usize, w: usize, ho: usize, wo: usize) -> Self {
        Self {
            k: cfg.kernel,
            s: cfg.stride,
            p: cfg.padding,
            h,
            w,
            ho,
            wo,
        }
    }

    /// Output positions `o` with `0 <= o*s + off - p < len`, as a half-open range.
    fn valid(&self, off: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.s, self.p);
        let start = if p > off { (p - off).div_ceil(s) } else { 0 };
        let end = if len + p > off {
            ((len + p - off - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (start.min(end), end)
    }
}

fn im2col<T: Scalar>(geo: &Geometry, channels: usize, x: &[T], cols: &mut Vec<T>) {
    let Geometry {
        k,
        s,
        p,
        h,
        w,
        ho,
        wo,
    } = *geo;
    let hw_out = ho * wo;
    cols.clear();
    cols.resize(channels * k * k * hw_out, T::zero());
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = geo.valid(ky, h, ho);
            for kx in 0..k {
                let (ox0, ox1) = geo.valid(kx, w, wo);
                let row = ((c * k + ky) * k + kx) * hw_out;
                let dst = &mut cols[row..row + hw_out];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        out[ox] = src[ox * s + kx - p];
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(geo: &Geometry, channels: usize, cols: &[T], dx: &mut [T]) {
    let Geometry {
        k,
        s,
        p,
        h,
        w,
        ho,
        wo,
    } = *geo;
    let hw_out = ho * wo;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = geo.valid(ky, h, ho);
            for kx in 0..k {
                let (ox0, ox1) = geo.valid(kx, w, wo);
                let row = ((c * k + ky) * k + kx) * hw_out;
                let src = &cols[row..row + hw_out];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let g = &src[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        dst[ox * s + kx - p] += g[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(geo: &Geometry, channels: usize, x: &[T], ws: &[T], y: &mut [T]) {
    let Geometry {
        k,
        s,
        p,
        h,
        w,
        ho,
        wo,
    } = *geo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        let kernel = &ws[c * k * k..(c + 1) * k * k];
        let out = &mut y[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..k {
            let (oy0, oy1) = geo.valid(ky, h, ho);
            for kx in 0..k {
                let (ox0, ox1) = geo.valid(kx, w, wo);
                let wv = kernel[ky * k + kx];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        let base = kx as isize - p as isize;
                        for ox in ox0..ox1 {
                            dst[ox] += wv * src[(ox as isize + base) as usize];
                        }
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] += wv * src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    geo: &Geometry,
    channels: usize,
    x: &[T],
    ws: &[T],
    dy: &[T],
    dws: &mut [T],
    dx: &mut [T],
) {
    let Geometry {
        k,
        s,
        p,
        h,
        w,
        ho,
        wo,
    } = *geo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        let dplane = &mut dx[c * h * w..(c + 1) * h * w];
        let kernel = &ws[c * k * k..(c + 1) * k * k];
        let dkernel = &mut dws[c * k * k..(c + 1) * k * k];
        let g = &dy[c * ho * wo..(c + 1) * ho * wo];
        for ky in 0..k {
            let (oy0, oy1) = geo.valid(ky, h, ho);
            for kx in 0..k {
                let (ox0, ox1) = geo.valid(kx, w, wo);
                let wv = kernel[ky * k + kx];
                let mut acc = T::zero();
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let grow = &g[oy * wo..(oy + 1) * wo];
                    for (ox, &gv) in (ox0..ox1).zip(&grow[ox0..ox1]) {
                        let ix = iy * w + ox * s + kx - p;
                        acc += gv * plane[ix];
                        dplane[ix] += gv * wv;
                    }
                }
                dkernel[ky * k + kx] += acc;
            }
        }
    }
}
