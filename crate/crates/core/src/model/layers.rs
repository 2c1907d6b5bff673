//! Differentiable building blocks with explicit backward passes.
//!
//! Every layer has two entry points: `infer(&self, ..)`, a pure evaluation
//! that never touches layer state, and `forward(&mut self, ..)`, the training
//! pass that caches whatever `backward` needs. `backward` consumes that cache,
//! accumulates parameter gradients and returns the gradient with respect to
//! the layer input.
//!
//! Activations are `[batch, channels, height, width]` in standard layout.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn, ScalarOperand};
use rand::Rng;

/// Floating-point element type of a model (`f32` for training, `f64` for gradient checks).
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::iter::Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A named tensor of model state. Non-trainable entries (batch-norm running
/// statistics) are checkpointed but never counted or optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub trainable: bool,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    pub fn buffer(shape: &[usize], v: F) -> Self {
        Param {
            value: ArrayD::from_elem(IxDyn(shape), v),
            grad: ArrayD::zeros(IxDyn(&[0])),
            trainable: false,
        }
    }

    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut p = Self::zeros(shape);
        p.value.mapv_inplace(|_| F::of(rng.random_range(-bound..bound)));
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    fn matrix(&self, rows: usize, cols: usize) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((rows, cols), self.value.as_slice().expect("standard layout"))
            .expect("parameter shape")
    }

    fn grad_matrix(&mut self, rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
        ArrayViewMut2::from_shape((rows, cols), self.grad.as_slice_mut().expect("standard layout"))
            .expect("parameter shape")
    }
}

/// Anything holding named [`Param`]s, visited in a fixed order.
pub trait Parametric<F: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| {
            if p.trainable {
                p.zero_grad()
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

/// Geometry of a (possibly strided, zero-padded) square-kernel convolution:
/// a `c × h × w` input sampled into an `oh × ow` output grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn conv(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        ConvGeom { c, h, w, k, stride, pad, oh, ow }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one `c × h × w` image into a `[c·k·k, oh·ow]` patch matrix.
pub(crate) fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let ohw = g.out_len();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.oh {
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(F::zero());
                    drow[hi..].fill(F::zero());
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&srow[x0..x0 + (hi - lo)]);
                    } else {
                        for (o, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = srow[x0 + o * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto a `c × h × w` image (accumulating).
pub(crate) fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, x: &mut [F]) {
    let ohw = g.out_len();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, &s) in drow[x0..x0 + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for o in 0..hi - lo {
                            drow[x0 + o * g.stride] += srow[lo + o];
                        }
                    }
                }
            }
        }
    }
}

/// Visits every `(input row, output row, column span)` pairing of a stride-1
/// kernel tap `(ki, kj)`: output `[oy][lo..hi]` reads input `[iy][x0..x0 + hi − lo]`.
fn stride1_taps(g: &ConvGeom, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (lo, hi) = g.valid_cols(kj);
    if lo >= hi {
        return;
    }
    let x0 = lo + kj - g.pad;
    for oy in 0..g.oh {
        let iy = (oy + ki) as isize - g.pad as isize;
        if iy >= 0 && (iy as usize) < g.h {
            f(iy as usize, oy, lo, hi, x0);
        }
    }
}

/// Direct stride-1 convolution of one sample: `y[o] += Σ w[o, c] ⋆ x[c]`.
fn direct_conv<F: Scalar>(x: &[F], weight: &[F], out_channels: usize, g: &ConvGeom, y: &mut [F]) {
    let (hw, ohw, kk) = (g.h * g.w, g.out_len(), g.k * g.k);
    for o in 0..out_channels {
        let yo = &mut y[o * ohw..(o + 1) * ohw];
        for c in 0..g.c {
            let xc = &x[c * hw..(c + 1) * hw];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = weight[(o * g.c + c) * kk + ki * g.k + kj];
                    stride1_taps(g, ki, kj, |iy, oy, lo, hi, x0| {
                        let src = &xc[iy * g.w + x0..iy * g.w + x0 + (hi - lo)];
                        for (d, &s) in yo[oy * g.ow + lo..oy * g.ow + hi].iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    });
                }
            }
        }
    }
}

/// Gradients of [`direct_conv`] for one sample, accumulated into `dw` and `dx`.
fn direct_conv_backward<F: Scalar>(
    x: &[F],
    weight: &[F],
    dy: &[F],
    out_channels: usize,
    g: &ConvGeom,
    dw: &mut [F],
    dx: &mut [F],
) {
    let (hw, ohw, kk) = (g.h * g.w, g.out_len(), g.k * g.k);
    for o in 0..out_channels {
        let dyo = &dy[o * ohw..(o + 1) * ohw];
        for c in 0..g.c {
            let xc = &x[c * hw..(c + 1) * hw];
            let dxc = &mut dx[c * hw..(c + 1) * hw];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let idx = (o * g.c + c) * kk + ki * g.k + kj;
                    let wv = weight[idx];
                    let mut acc = F::zero();
                    stride1_taps(g, ki, kj, |iy, oy, lo, hi, x0| {
                        let src = &dyo[oy * g.ow + lo..oy * g.ow + hi];
                        let base = iy * g.w + x0;
                        acc += src.iter().zip(&xc[base..base + (hi - lo)]).map(|(&a, &b)| a * b).sum::<F>();
                        for (d, &s) in dxc[base..base + (hi - lo)].iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    });
                    dw[idx] += acc;
                }
            }
        }
    }
}

fn sample_slice<F>(a: &Array4<F>, b: usize) -> &[F] {
    let per = a.len() / a.dim().0;
    &a.as_slice().expect("standard layout")[b * per..(b + 1) * per]
}

fn sample_slice_mut<F>(a: &mut Array4<F>, b: usize) -> &mut [F] {
    let per = a.len() / a.dim().0;
    &mut a.as_slice_mut().expect("standard layout")[b * per..(b + 1) * per]
}

fn mat<F>(s: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), s).expect("matrix view")
}

fn mat_mut<F>(s: &mut [F], rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), s).expect("matrix view")
}

fn standard<F: Scalar>(x: &Array4<F>) -> std::borrow::Cow<'_, Array4<F>> {
    if x.is_standard_layout() {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(x.as_standard_layout().into_owned())
    }
}

/// 2-D convolution with square kernel, stride and symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    /// `[out, in, k, k]`
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    input: Option<Array4<F>>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::uniform(&[out_channels], fan_in, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
        }
    }

    /// Stride-1 convolution that preserves the spatial size (odd kernels).
    pub fn same<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2, rng)
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom::conv(self.in_channels, h, w, self.kernel, self.stride, self.padding)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_direct(&self) -> bool {
        self.stride == 1 && !self.is_pointwise()
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let g = self.geom(h, w);
        (g.oh, g.ow)
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let x = standard(x);
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let g = self.geom(h, w);
        let (rows, ohw) = (g.rows(), g.out_len());
        let weight = self.weight.matrix(self.out_channels, rows);
        let mut y = Array4::zeros((n, self.out_channels, g.oh, g.ow));
        let unfolded = !self.is_pointwise() && !self.is_direct();
        let mut cols = vec![F::zero(); if unfolded { rows * ohw } else { 0 }];
        for b in 0..n {
            let xb = sample_slice(&x, b);
            let yb = sample_slice_mut(&mut y, b);
            for (o, chunk) in yb.chunks_exact_mut(ohw).enumerate() {
                chunk.fill(self.bias.value[o]);
            }
            if self.is_direct() {
                direct_conv(xb, self.weight.value.as_slice().expect("standard layout"), self.out_channels, &g, yb);
                continue;
            }
            let patches = if self.is_pointwise() {
                mat(xb, rows, ohw)
            } else {
                im2col(xb, &g, &mut cols);
                mat(&cols, rows, ohw)
            };
            general_mat_mul(F::one(), &weight, &patches, F::one(), &mut mat_mut(yb, self.out_channels, ohw));
        }
        y
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = self.infer(x);
        self.input = Some(standard(x).into_owned());
        y
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let x = self.input.take().expect("Conv2d::backward without forward");
        let dy = standard(dy);
        let (n, _, h, w) = x.dim();
        let g = self.geom(h, w);
        let (rows, ohw) = (g.rows(), g.out_len());
        let pointwise = self.is_pointwise();
        let direct = self.is_direct();
        let mut dx = Array4::zeros(x.dim());
        let unfolded = !pointwise && !direct;
        let mut cols = vec![F::zero(); if unfolded { rows * ohw } else { 0 }];
        let mut dcols = vec![F::zero(); if unfolded { rows * ohw } else { 0 }];
        for b in 0..n {
            let dyb = mat(sample_slice(&dy, b), self.out_channels, ohw);
            for (o, row) in dyb.outer_iter().enumerate() {
                self.bias.grad[o] += row.sum();
            }
            let xb = sample_slice(&x, b);
            if direct {
                direct_conv_backward(
                    xb,
                    self.weight.value.as_slice().expect("standard layout"),
                    sample_slice(&dy, b),
                    self.out_channels,
                    &g,
                    self.weight.grad.as_slice_mut().expect("standard layout"),
                    sample_slice_mut(&mut dx, b),
                );
                continue;
            }
            let patches = if pointwise {
                mat(xb, rows, ohw)
            } else {
                im2col(xb, &g, &mut cols);
                mat(&cols, rows, ohw)
            };
            general_mat_mul(
                F::one(),
                &dyb,
                &patches.t(),
                F::one(),
                &mut self.weight.grad_matrix(self.out_channels, rows),
            );
            let weight = self.weight.matrix(self.out_channels, rows);
            let dxb = sample_slice_mut(&mut dx, b);
            if pointwise {
                general_mat_mul(F::one(), &weight.t(), &dyb, F::zero(), &mut mat_mut(dxb, rows, ohw));
            } else {
                general_mat_mul(F::one(), &weight.t(), &dyb, F::zero(), &mut mat_mut(&mut dcols, rows, ohw));
                col2im(&dcols, &g, dxb);
            }
        }
        dx
    }
}

impl<F: Scalar> Parametric<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution (fractionally strided), the adjoint of a strided
/// [`Conv2d`] plus a bias. Output size is `(h − 1)·stride − 2·padding + k + output_padding`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F: Scalar> {
    /// `[in, out, k, k]`
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    input: Option<Array4<F>>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut R,
    ) -> Self {
        assert!(output_padding < stride, "output padding must be smaller than the stride");
        let fan_in = out_channels * kernel * kernel;
        ConvTranspose2d {
            weight: Param::uniform(&[in_channels, out_channels, kernel, kernel], fan_in, rng),
            bias: Param::uniform(&[out_channels], fan_in, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let grow = |n: usize| (n - 1) * self.stride + self.kernel + self.output_padding - 2 * self.padding;
        (grow(h), grow(w))
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        let (oh, ow) = self.output_size(h, w);
        ConvGeom {
            c: self.out_channels,
            h: oh,
            w: ow,
            k: self.kernel,
            stride: self.stride,
            pad: self.padding,
            oh: h,
            ow: w,
        }
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let x = standard(x);
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let g = self.geom(h, w);
        let (rows, hw) = (g.rows(), h * w);
        let weight = self.weight.matrix(self.in_channels, rows);
        let mut y = Array4::zeros((n, self.out_channels, g.h, g.w));
        let mut cols = vec![F::zero(); rows * hw];
        let plane = g.h * g.w;
        for b in 0..n {
            let xb = mat(sample_slice(&x, b), self.in_channels, hw);
            general_mat_mul(F::one(), &weight.t(), &xb, F::zero(), &mut mat_mut(&mut cols, rows, hw));
            let yb = sample_slice_mut(&mut y, b);
            for (o, chunk) in yb.chunks_exact_mut(plane).enumerate() {
                chunk.fill(self.bias.value[o]);
            }
            col2im(&cols, &g, yb);
        }
        y
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = self.infer(x);
        self.input = Some(standard(x).into_owned());
        y
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let x = self.input.take().expect("ConvTranspose2d::backward without forward");
        let dy = standard(dy);
        let (n, _, h, w) = x.dim();
        let g = self.geom(h, w);
        let (rows, hw) = (g.rows(), h * w);
        let plane = g.h * g.w;
        let mut dx = Array4::zeros(x.dim());
        let mut dcols = vec![F::zero(); rows * hw];
        for b in 0..n {
            let dyb = sample_slice(&dy, b);
            for (o, chunk) in dyb.chunks_exact(plane).enumerate() {
                self.bias.grad[o] += chunk.iter().copied().sum();
            }
            im2col(dyb, &g, &mut dcols);
            let dcols_m = mat(&dcols, rows, hw);
            let xb = mat(sample_slice(&x, b), self.in_channels, hw);
            general_mat_mul(
                F::one(),
                &xb,
                &dcols_m.t(),
                F::one(),
                &mut self.weight.grad_matrix(self.in_channels, rows),
            );
            let weight = self.weight.matrix(self.in_channels, rows);
            general_mat_mul(
                F::one(),
                &weight,
                &dcols_m,
                F::zero(),
                &mut mat_mut(sample_slice_mut(&mut dx, b), self.in_channels, hw),
            );
        }
        dx
    }
}

impl<F: Scalar> Parametric<F> for ConvTranspose2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Per-channel batch normalization with affine scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    pub momentum: F,
    pub eps: F,
    cache: Option<(Array4<F>, Array1<F>)>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], F::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], F::zero()),
            running_var: Param::buffer(&[channels], F::one()),
            momentum: F::of(0.1),
            eps: F::of(1e-5),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn affine(&self, x: &Array4<F>, mean: &Array1<F>, inv_std: &Array1<F>) -> (Array4<F>, Array4<F>) {
        let mut x_hat = x.to_owned();
        let mut y = x.to_owned();
        for c in 0..self.channels() {
            let (m, s, g, b) = (mean[c], inv_std[c], self.gamma.value[c], self.beta.value[c]);
            x_hat.index_axis_mut(Axis(1), c).mapv_inplace(|v| (v - m) * s);
            ndarray::Zip::from(y.index_axis_mut(Axis(1), c))
                .and(x_hat.index_axis(Axis(1), c))
                .for_each(|y, &xh| *y = g * xh + b);
        }
        (x_hat, y)
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let mean = Array1::from_iter(self.running_mean.value.iter().copied());
        let inv_std = Array1::from_iter(self.running_var.value.iter().map(|&v| F::one() / (v + self.eps).sqrt()));
        self.affine(x, &mean, &inv_std).1
    }

    /// Training pass: normalizes with batch statistics and updates the running estimates.
    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let count = F::of((n * h * w) as f64);
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let m = plane.sum() / count;
            let v = plane.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / count;
            mean[ch] = m;
            var[ch] = v;
        }
        let inv_std = var.mapv(|v: F| F::one() / (v + self.eps).sqrt());
        let (x_hat, y) = self.affine(x, &mean, &inv_std);
        let unbias = if n * h * w > 1 { count / (count - F::one()) } else { F::one() };
        let mom = self.momentum;
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = (F::one() - mom) * *rm + mom * mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (F::one() - mom) * *rv + mom * var[ch] * unbias;
        }
        self.cache = Some((x_hat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (x_hat, inv_std) = self.cache.take().expect("BatchNorm2d::backward without forward");
        let (n, c, h, w) = x_hat.dim();
        let count = F::of((n * h * w) as f64);
        let mut dx = Array4::zeros(x_hat.dim());
        for ch in 0..c {
            let dy_c = dy.index_axis(Axis(1), ch);
            let xh_c = x_hat.index_axis(Axis(1), ch);
            let sum_dy = dy_c.sum();
            let sum_dy_xh = ndarray::Zip::from(&dy_c).and(&xh_c).fold(F::zero(), |acc, &d, &xh| acc + d * xh);
            self.gamma.grad[ch] += sum_dy_xh;
            self.beta.grad[ch] += sum_dy;
            let scale = self.gamma.value[ch] * inv_std[ch] / count;
            ndarray::Zip::from(dx.index_axis_mut(Axis(1), ch))
                .and(&dy_c)
                .and(&xh_c)
                .for_each(|dx, &d, &xh| *dx = scale * (count * d - sum_dy - xh * sum_dy_xh));
        }
        dx
    }
}

impl<F: Scalar> Parametric<F> for BatchNorm2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Fully connected layer `y = x Wᵀ + b` over `[batch, features]`.
#[derive(Debug, Clone)]
pub struct Dense<F: Scalar> {
    /// `[out, in]`
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Array2<F>>,
}

impl<F: Scalar> Dense<F> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Dense {
            weight: Param::uniform(&[out_features, in_features], in_features, rng),
            bias: Param::uniform(&[out_features], in_features, rng),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn infer(&self, x: &Array2<F>) -> Array2<F> {
        assert_eq!(x.ncols(), self.in_features, "dense input features");
        let weight = self.weight.matrix(self.out_features, self.in_features);
        let mut y = Array2::zeros((x.nrows(), self.out_features));
        for mut row in y.outer_iter_mut() {
            row.iter_mut().zip(self.bias.value.iter()).for_each(|(y, &b)| *y = b);
        }
        general_mat_mul(F::one(), x, &weight.t(), F::one(), &mut y);
        y
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Array2<F> {
        let y = self.infer(x);
        self.input = Some(x.to_owned());
        y
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let x = self.input.take().expect("Dense::backward without forward");
        let (out_f, in_f) = (self.out_features, self.in_features);
        general_mat_mul(F::one(), &dy.t(), &x, F::one(), &mut self.weight.grad_matrix(out_f, in_f));
        for row in dy.outer_iter() {
            self.bias.grad.iter_mut().zip(row.iter()).for_each(|(g, &d)| *g += d);
        }
        dy.dot(&self.weight.matrix(out_f, in_f))
    }
}

impl<F: Scalar> Parametric<F> for Dense<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu<F: Scalar> {
    pub slope: F,
    input: Option<Array4<F>>,
}

impl<F: Scalar> LeakyRelu<F> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope: F::of(slope), input: None }
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        let s = self.slope;
        x.mapv(|v| if v > F::zero() { v } else { s * v })
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = self.infer(x);
        self.input = Some(x.to_owned());
        y
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let x = self.input.take().expect("LeakyRelu::backward without forward");
        let s = self.slope;
        let mut dx = dy.to_owned();
        ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &v| {
            if v <= F::zero() {
                *d *= s
            }
        });
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<F: Scalar> {
    output: Option<Array4<F>>,
}

impl<F: Scalar> Sigmoid<F> {
    pub fn new() -> Self {
        Sigmoid { output: None }
    }

    pub fn infer(&self, x: &Array4<F>) -> Array4<F> {
        x.mapv(|v| F::one() / (F::one() + (-v).exp()))
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Array4<F> {
        let y = self.infer(x);
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let y = self.output.take().expect("Sigmoid::backward without forward");
        let mut dx = dy.to_owned();
        ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &s| *d *= s * (F::one() - s));
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-loop convolution, independent of the im2col path.
    fn naive_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, cin, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let wt = conv.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        Array4::from_shape_fn((n, conv.out_channels, oh, ow), |(b, o, oy, ox)| {
            let mut acc = conv.bias.value[o];
            for c in 0..cin {
                for ki in 0..conv.kernel {
                    for kj in 0..conv.kernel {
                        let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[[o, c, ki, kj]] * x[[b, c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut r = rng();
        for &(cin, cout, k, stride, pad, h) in &[
            (2, 8, 3, 1, 1, 7),
            (8, 3, 5, 1, 2, 6),
            (3, 2, 9, 1, 4, 5),
            (2, 4, 3, 2, 1, 8),
            (4, 3, 1, 1, 0, 4),
        ] {
            let conv = Conv2d::<f64>::new(cin, cout, k, stride, pad, &mut r);
            let x = random4((2, cin, h, h + 1), &mut r);
            let fast = conv.infer(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12, "k={k} stride={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut r = rng();
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 5, 6), (3, 2, 1, 8, 8), (5, 2, 2, 7, 5), (9, 1, 4, 4, 4)] {
            let g = ConvGeom::conv(2, h, w, k, stride, pad);
            let x: Vec<f64> = (0..2 * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..g.rows() * g.out_len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut cols = vec![0.0; c.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_conv() {
        // <conv_W(x), y> = <x, convT_W(y)> when both share weights and have zero bias.
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new(2, 16, 3, 2, 1, &mut r);
        conv.bias.value.fill(0.0);
        let mut up = ConvTranspose2d::<f64>::new(16, 2, 3, 2, 1, 1, &mut r);
        up.weight.value.assign(&conv.weight.value);
        up.bias.value.fill(0.0);
        let x = random4((1, 2, 32, 32), &mut r);
        let y = random4((1, 16, 16, 16), &mut r);
        assert_eq!(up.output_size(16, 16), (32, 32));
        let lhs = (&conv.infer(&x) * &y).sum();
        let rhs = (&x * &up.infer(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn batchnorm_normalizes_batch_and_tracks_running_stats() {
        let mut r = rng();
        let mut bn = BatchNorm2d::<f64>::new(3);
        let x = random4((4, 3, 5, 5), &mut r).mapv(|v| 3.0 * v + 2.0);
        let y = bn.forward(&x);
        for c in 0..3 {
            let plane = y.index_axis(Axis(1), c);
            let mean = plane.mean().unwrap();
            let var = plane.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().all(|&m| (m - 0.2).abs() < 0.1));
        let fresh = BatchNorm2d::<f64>::new(3);
        let identity = fresh.infer(&x);
        for (a, b) in identity.iter().zip(x.iter()) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_forward_and_counts() {
        let mut r = rng();
        let dense = Dense::<f64>::new(5, 3, &mut r);
        assert_eq!(dense.trainable_count(), 18);
        let x = Array2::from_shape_fn((2, 5), |(i, j)| (i * 5 + j) as f64);
        let y = dense.infer(&x);
        let wt = dense.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for b in 0..2 {
            for o in 0..3 {
                let expected: f64 = dense.bias.value[o] + (0..5).map(|i| wt[[o, i]] * x[[b, i]]).sum::<f64>();
                assert!((y[[b, o]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activations() {
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-2.0, -0.5, 0.0, 3.0]).unwrap();
        let lrelu = LeakyRelu::<f64>::new(0.3);
        assert_eq!(lrelu.infer(&x).iter().copied().collect::<Vec<_>>(), vec![-0.6, -0.15, 0.0, 3.0]);
        let sig = Sigmoid::<f64>::new().infer(&x);
        assert!((sig[[0, 0, 0, 2]] - 0.5).abs() < 1e-15);
        assert!(sig.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
