use std::borrow::Cow;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NnError, Result};
use crate::exec;
use crate::param::Param;
use crate::scalar::{matmul, matmul_nt, matmul_tn, Scalar};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution. Padding is always "same"-style,
/// `dilation * (kernel - 1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let p = self.padding();
        (
            (h + 2 * p - span) / self.stride + 1,
            (w + 2 * p - span) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backprop {
    /// Accumulate parameter gradients.
    pub params: bool,
    /// Return the gradient with respect to the layer input.
    pub input: bool,
}

impl Backprop {
    pub const FULL: Self = Self {
        params: true,
        input: true,
    };
    pub const PARAMS: Self = Self {
        params: true,
        input: false,
    };
    pub const INPUT: Self = Self {
        params: false,
        input: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights for a leaky ReLU with the given negative slope,
    /// zero bias.
    pub fn new<R: Rng + ?Sized>(prefix: &str, spec: ConvSpec, slope: f64, rng: &mut R) -> Self {
        let fan_in = spec.patch_len() as f64;
        let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let weight = (0..spec.out_channels * spec.patch_len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self {
            weight: Param::new(
                format!("{prefix}.weight"),
                vec![
                    spec.out_channels,
                    spec.in_channels,
                    spec.kernel,
                    spec.kernel,
                ],
                weight,
            ),
            bias: Param::new(
                format!("{prefix}.bias"),
                vec![spec.out_channels],
                vec![T::zero(); spec.out_channels],
            ),
            spec,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.spec.in_channels {
            return Err(NnError::Shape(format!(
                "{} expects {} input channels, got {}",
                self.weight.name,
                self.spec.in_channels,
                x.c()
            )));
        }
        Ok(())
    }

    fn columns<'a>(&self, x: &'a [T], h: usize, w: usize) -> Cow<'a, [T]> {
        if self.spec.is_pointwise() {
            Cow::Borrowed(x)
        } else {
            let (oh, ow) = self.spec.output_size(h, w);
            let mut cols = vec![T::zero(); self.spec.patch_len() * oh * ow];
            im2col(x, h, w, &self.spec, oh, ow, &mut cols);
            Cow::Owned(cols)
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        let (oh, ow) = self.spec.output_size(h, w);
        let out_c = self.spec.out_channels;
        let plane = oh * ow;
        let mut y = Tensor::zeros(n, out_c, oh, ow);
        let mut outs: Vec<&mut [T]> = y.data_mut().chunks_mut(out_c * plane).collect();
        exec::for_each_mut(&mut outs, |i, out| {
            for (o, row) in out.chunks_mut(plane).enumerate() {
                row.fill(self.bias.value[o]);
            }
            let cols = self.columns(x.sample(i), h, w);
            matmul(
                out_c,
                self.spec.patch_len(),
                plane,
                &self.weight.value,
                &cols,
                out,
                true,
            );
        });
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, mode: Backprop) -> Option<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (dy.h(), dy.w());
        let plane = oh * ow;
        let out_c = self.spec.out_channels;
        let patch = self.spec.patch_len();
        let weight = &self.weight.value;
        let spec = self.spec;
        let this = &*self;

        let mut dx = mode.input.then(|| Tensor::zeros(n, c, h, w));
        let mut dw = mode.params.then(|| vec![T::zero(); weight.len()]);
        let mut db = mode.params.then(|| vec![T::zero(); out_c]);

        exec::map_fold(
            n,
            |i| {
                let g = dy.sample(i);
                let params = mode.params.then(|| {
                    let cols = this.columns(x.sample(i), h, w);
                    let mut dw_i = vec![T::zero(); out_c * patch];
                    matmul_nt(out_c, plane, patch, g, &cols, &mut dw_i, false);
                    let db_i: Vec<T> = g.chunks(plane).map(|r| r.iter().copied().sum()).collect();
                    (dw_i, db_i)
                });
                let input = mode.input.then(|| {
                    let mut dcols = vec![T::zero(); patch * plane];
                    matmul_tn(patch, out_c, plane, weight, g, &mut dcols, false);
                    if spec.is_pointwise() {
                        dcols
                    } else {
                        let mut dx_i = vec![T::zero(); c * h * w];
                        col2im(&dcols, h, w, &spec, oh, ow, &mut dx_i);
                        dx_i
                    }
                });
                (params, input)
            },
            |i, (params, input)| {
                if let (Some((dw_i, db_i)), Some(dw), Some(db)) = (params, dw.as_mut(), db.as_mut())
                {
                    for (a, b) in dw.iter_mut().zip(dw_i) {
                        *a += b;
                    }
                    for (a, b) in db.iter_mut().zip(db_i) {
                        *a += b;
                    }
                }
                if let (Some(dx_i), Some(dx)) = (input, dx.as_mut()) {
                    dx.sample_mut(i).copy_from_slice(&dx_i);
                }
            },
        );

        if let (Some(dw), Some(db)) = (dw, db) {
            for (a, b) in self.weight.grad.iter_mut().zip(dw) {
                *a += b;
            }
            for (a, b) in self.bias.grad.iter_mut().zip(db) {
                *a += b;
            }
        }
        dx
    }
}

fn valid_range(out: usize, size: usize, offset: isize) -> (usize, usize) {
    // stride-1 outputs `o` with `0 <= o + offset < size`
    let lo = (-offset).clamp(0, out as isize) as usize;
    let hi = (size as isize - offset).clamp(lo as isize, out as isize) as usize;
    (lo, hi)
}

fn im2col<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (k, s, d, p) = (
        spec.kernel,
        spec.stride,
        spec.dilation,
        spec.padding() as isize,
    );
    let plane = oh * ow;
    for ci in 0..spec.in_channels {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let off = (kx * d) as isize - p;
                for oy in 0..oh {
                    let iy = (oy * s + ky * d) as isize - p;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        let (lo, hi) = valid_range(ow, w, off);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo < hi {
                            let a = (lo as isize + off) as usize;
                            line[lo..hi].copy_from_slice(&src_row[a..a + hi - lo]);
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + off;
                            *v = if ix >= 0 && ix < w as isize {
                                src_row[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let (k, s, d, p) = (
        spec.kernel,
        spec.stride,
        spec.dilation,
        spec.padding() as isize,
    );
    let plane = oh * ow;
    for ci in 0..spec.in_channels {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let off = (kx * d) as isize - p;
                for oy in 0..oh {
                    let iy = (oy * s + ky * d) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let (lo, hi) = valid_range(ow, w, off);
                        if lo == hi {
                            continue;
                        }
                        let a = (lo as isize + off) as usize;
                        for (t, &v) in dst_row[a..a + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *t += v;
                        }
                    } else {
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * s) as isize + off;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fully connected layer over the flattened per-sample input.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(prefix: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self {
            inputs,
            outputs,
            weight: Param::new(format!("{prefix}.weight"), vec![outputs, inputs], weight),
            bias: Param::new(
                format!("{prefix}.bias"),
                vec![outputs],
                vec![T::zero(); outputs],
            ),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.sample_len() != self.inputs {
            return Err(NnError::Shape(format!(
                "{} expects {} inputs per sample, got {}",
                self.weight.name,
                self.inputs,
                x.sample_len()
            )));
        }
        let n = x.n();
        let mut y = Tensor::zeros(n, self.outputs, 1, 1);
        for row in y.data_mut().chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul_nt(
            n,
            self.inputs,
            self.outputs,
            x.data(),
            &self.weight.value,
            y.data_mut(),
            true,
        );
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, mode: Backprop) -> Option<Tensor<T>> {
        let n = x.n();
        if mode.params {
            matmul_tn(
                self.outputs,
                n,
                self.inputs,
                dy.data(),
                x.data(),
                &mut self.weight.grad,
                true,
            );
            for row in dy.data().chunks(self.outputs) {
                for (g, &v) in self.bias.grad.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        mode.input.then(|| {
            let mut dx = Tensor::zeros(n, x.c(), x.h(), x.w());
            matmul(
                n,
                self.outputs,
                self.inputs,
                dy.data(),
                &self.weight.value,
                dx.data_mut(),
                false,
            );
            dx
        })
    }
}

/// One stage of a [`Sequential`](crate::Sequential) stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Dense(Dense<T>),
    LeakyRelu(f64),
    Sigmoid,
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
    GlobalAvgPool,
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Dense(d) => d.forward(x),
            Layer::LeakyRelu(slope) => {
                let s = T::from_f64(*slope);
                Ok(x.map(|v| if v > T::zero() { v } else { v * s }))
            }
            Layer::Sigmoid => Ok(x.map(sigmoid)),
            Layer::Upsample2 => Ok(upsample2(x)),
            Layer::GlobalAvgPool => {
                let [n, c, h, w] = x.shape();
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let data = x
                    .data()
                    .chunks(h * w)
                    .map(|plane| plane.iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::from_vec([n, c, 1, 1], data)
            }
        }
    }

    /// Backward through this layer given its input `x` and output `y`.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
        mode: Backprop,
    ) -> Option<Tensor<T>> {
        match self {
            Layer::Conv(c) => c.backward(x, dy, mode),
            Layer::Dense(d) => d.backward(x, dy, mode),
            _ if !mode.input => None,
            Layer::LeakyRelu(slope) => {
                let s = T::from_f64(*slope);
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *g *= s;
                    }
                }
                Some(dx)
            }
            Layer::Sigmoid => {
                let mut dx = dy.clone();
                for (g, &o) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g *= o * (T::one() - o);
                }
                Some(dx)
            }
            Layer::Upsample2 => Some(upsample2_backward(dy)),
            Layer::GlobalAvgPool => {
                let [n, c, h, w] = x.shape();
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut dx = Tensor::zeros(n, c, h, w);
                for (plane, &g) in dx.data_mut().chunks_mut(h * w).zip(dy.data()) {
                    plane.fill(g * inv);
                }
                Some(dx)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros(n, c, 2 * h, 2 * w);
    for (src, dst) in x
        .data()
        .chunks(h * w)
        .zip(y.data_mut().chunks_mut(4 * h * w))
    {
        for r in 0..2 * h {
            let srow = &src[(r / 2) * w..(r / 2 + 1) * w];
            for (col, v) in dst[r * 2 * w..(r + 1) * 2 * w].iter_mut().enumerate() {
                *v = srow[col / 2];
            }
        }
    }
    y
}

fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(n, c, h, w);
    for (src, dst) in dy
        .data()
        .chunks(h2 * w2)
        .zip(dx.data_mut().chunks_mut(h * w))
    {
        for r in 0..h2 {
            for col in 0..w2 {
                dst[(r / 2) * w + col / 2] += src[r * w2 + col];
            }
        }
    }
    dx
}
