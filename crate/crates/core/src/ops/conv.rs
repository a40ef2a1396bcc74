//! 2-D convolution and transposed convolution.
//!
//! Convolution unfolds each sample (im2col) and multiplies by the weight
//! matrix. Transposed convolution works directly on planes. Both use three
//! plane kernels relating a "large" grid `L` and a "small" grid `S` by
//! `l = s * stride + k * dilation - padding`:
//!
//! * [`gather`]: `S[s] += w * L[l]`  (unfolding, transposed-conv input grad)
//! * [`scatter`]: `L[l] += w * S[s]` (folding, transposed-conv forward)
//! * [`correlate`]: `Σ S[s] * L[l]`  (transposed-conv weight grads)
//!
//! The forward convolution accumulates every output element in
//! `(in_channel, kernel_row, kernel_col)` order and adds the bias last.

use super::gemm;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    /// Extra rows/cols appended to a transposed convolution's output.
    /// Ignored by `conv2d`.
    pub output_padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            output_padding: (0, 0),
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn output_padding(mut self, p: usize) -> Self {
        self.output_padding = (p, p);
        self
    }

    /// Padding that keeps the spatial size for a stride-1 odd kernel.
    pub fn same(mut self) -> Self {
        self.padding = (
            self.dilation.0 * (self.kernel.0 - 1) / 2,
            self.dilation.1 * (self.kernel.1 - 1) / 2,
        );
        self
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        let entries = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel height", self.kernel.0),
            ("kernel width", self.kernel.1),
            ("stride height", self.stride.0),
            ("stride width", self.stride.1),
            ("dilation height", self.dilation.0),
            ("dilation width", self.dilation.1),
        ];
        for (name, v) in entries {
            if v == 0 {
                return Err(Error::invalid(op, format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Output extent of `conv2d` along one axis, or `None` if it would be empty.
    pub fn conv_out_len(len: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = len + 2 * p;
        if padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }

    pub fn conv_output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = Self::conv_out_len(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?;
        let ow = Self::conv_out_len(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?;
        Some((oh, ow))
    }

    /// `(len - 1) * s - 2p + d(k - 1) + 1 + output_padding`.
    pub fn transposed_out_len(len: usize, k: usize, s: usize, p: usize, d: usize, op: usize) -> Option<usize> {
        let full = (len - 1) * s + d * (k - 1) + 1 + op;
        if full <= 2 * p {
            return None;
        }
        Some(full - 2 * p)
    }

    pub fn transposed_output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = Self::transposed_out_len(
            h,
            self.kernel.0,
            self.stride.0,
            self.padding.0,
            self.dilation.0,
            self.output_padding.0,
        )?;
        let ow = Self::transposed_out_len(
            w,
            self.kernel.1,
            self.stride.1,
            self.padding.1,
            self.dilation.1,
            self.output_padding.1,
        )?;
        Some((oh, ow))
    }
}

/// Geometry of one kernel tap along both axes.
#[derive(Clone, Copy)]
struct Tap {
    /// `k * dilation - padding` per axis.
    off: (isize, isize),
    stride: (usize, usize),
}

impl Tap {
    fn new(spec: &ConvSpec, kh: usize, kw: usize) -> Self {
        Tap {
            off: (
                (kh * spec.dilation.0) as isize - spec.padding.0 as isize,
                (kw * spec.dilation.1) as isize - spec.padding.1 as isize,
            ),
            stride: spec.stride,
        }
    }
}

/// Range of small-grid indices `s` in `[0, s_len)` with `0 <= s*stride + off < l_len`.
#[inline]
fn valid_range(off: isize, stride: usize, l_len: usize, s_len: usize) -> (usize, usize) {
    let st = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + st - 1) / st };
    let last = l_len as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / st + 1).min(s_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

#[inline]
fn gather<T: Real>(l: &[T], (lh, lw): (usize, usize), s: &mut [T], (sh, sw): (usize, usize), wv: T, tap: Tap) {
    let (r0, r1) = valid_range(tap.off.0, tap.stride.0, lh, sh);
    let (c0, c1) = valid_range(tap.off.1, tap.stride.1, lw, sw);
    if c0 >= c1 {
        return;
    }
    for r in r0..r1 {
        let lr = (r * tap.stride.0) as isize + tap.off.0;
        let lrow = &l[lr as usize * lw..(lr as usize + 1) * lw];
        let srow = &mut s[r * sw + c0..r * sw + c1];
        let lc0 = (c0 * tap.stride.1) as isize + tap.off.1;
        if tap.stride.1 == 1 {
            let lseg = &lrow[lc0 as usize..lc0 as usize + (c1 - c0)];
            for (o, &x) in srow.iter_mut().zip(lseg) {
                *o += wv * x;
            }
        } else {
            for (j, o) in srow.iter_mut().enumerate() {
                *o += wv * lrow[lc0 as usize + j * tap.stride.1];
            }
        }
    }
}

#[inline]
fn scatter<T: Real>(s: &[T], (sh, sw): (usize, usize), l: &mut [T], (lh, lw): (usize, usize), wv: T, tap: Tap) {
    let (r0, r1) = valid_range(tap.off.0, tap.stride.0, lh, sh);
    let (c0, c1) = valid_range(tap.off.1, tap.stride.1, lw, sw);
    if c0 >= c1 {
        return;
    }
    for r in r0..r1 {
        let lr = (r * tap.stride.0) as isize + tap.off.0;
        let lrow = &mut l[lr as usize * lw..(lr as usize + 1) * lw];
        let srow = &s[r * sw + c0..r * sw + c1];
        let lc0 = (c0 * tap.stride.1) as isize + tap.off.1;
        if tap.stride.1 == 1 {
            let lseg = &mut lrow[lc0 as usize..lc0 as usize + (c1 - c0)];
            for (o, &x) in lseg.iter_mut().zip(srow) {
                *o += wv * x;
            }
        } else {
            for (j, &x) in srow.iter().enumerate() {
                lrow[lc0 as usize + j * tap.stride.1] += wv * x;
            }
        }
    }
}

#[inline]
fn correlate<T: Real>(l: &[T], (lh, lw): (usize, usize), s: &[T], (sh, sw): (usize, usize), tap: Tap) -> T {
    let (r0, r1) = valid_range(tap.off.0, tap.stride.0, lh, sh);
    let (c0, c1) = valid_range(tap.off.1, tap.stride.1, lw, sw);
    let mut acc = T::zero();
    if c0 >= c1 {
        return acc;
    }
    for r in r0..r1 {
        let lr = (r * tap.stride.0) as isize + tap.off.0;
        let lrow = &l[lr as usize * lw..(lr as usize + 1) * lw];
        let srow = &s[r * sw + c0..r * sw + c1];
        let lc0 = (c0 * tap.stride.1) as isize + tap.off.1;
        for (j, &g) in srow.iter().enumerate() {
            acc += g * lrow[lc0 as usize + j * tap.stride.1];
        }
    }
    acc
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::shape(op, "bias length", channels, b.len()));
        }
    }
    Ok(())
}

fn check_weights<T: Real>(op: &'static str, weights: &Tensor<T>, expected: Shape) -> Result<()> {
    let s = weights.shape();
    let dims = [
        ("weight dim 0", expected.n, s.n),
        ("weight dim 1", expected.c, s.c),
        ("kernel height", expected.h, s.h),
        ("kernel width", expected.w, s.w),
    ];
    for (dim, e, a) in dims {
        if e != a {
            return Err(Error::shape(op, dim, e, a));
        }
    }
    Ok(())
}

/// Cross-correlation with zero padding and dilation.
///
/// `weights` has shape `(out_channels, in_channels, kh, kw)`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    spec.validate(OP)?;
    let is = input.shape();
    if is.c != spec.in_channels {
        return Err(Error::shape(OP, "input channels", spec.in_channels, is.c));
    }
    check_weights(
        OP,
        weights,
        Shape::new(spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1),
    )?;
    check_bias(OP, bias, spec.out_channels)?;
    let (oh, ow) = spec
        .conv_output_hw(is.h, is.w)
        .ok_or_else(|| Error::invalid(OP, format!("kernel footprint exceeds padded input {}x{}", is.h, is.w)))?;

    let os = Shape::new(is.n, spec.out_channels, oh, ow);
    let mut out = Tensor::zeros(os);
    let (k, p) = (col_rows(spec), oh * ow);
    let mut col = vec![T::zero(); k * p];
    let per_sample = spec.out_channels * p;
    for n in 0..is.n {
        im2col(input, n, spec, (oh, ow), &mut col);
        let o = &mut out.data_mut()[n * per_sample..(n + 1) * per_sample];
        gemm::matmul(spec.out_channels, p, k, weights.data(), k, 1, &col, o);
        if let Some(b) = bias {
            for (plane, &bv) in o.chunks_exact_mut(p).zip(b.data()) {
                for v in plane {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

fn col_rows(spec: &ConvSpec) -> usize {
    spec.in_channels * spec.kernel.0 * spec.kernel.1
}

/// Unfolds sample `n` into a `(in_channels * kh * kw) x (oh * ow)` matrix
/// whose row `(ci, kh, kw)` holds the input value under that tap for every
/// output position (zero outside the input).
fn im2col<T: Real>(input: &Tensor<T>, n: usize, spec: &ConvSpec, out_hw: (usize, usize), col: &mut [T]) {
    let is = input.shape();
    let p = out_hw.0 * out_hw.1;
    col.fill(T::zero());
    let mut rows = col.chunks_exact_mut(p);
    for ci in 0..spec.in_channels {
        let iplane = input.plane(n, ci);
        for kh in 0..spec.kernel.0 {
            for kw in 0..spec.kernel.1 {
                let row = rows.next().expect("row count matches");
                gather(iplane, (is.h, is.w), row, out_hw, T::one(), Tap::new(spec, kh, kw));
            }
        }
    }
}

/// Adds every row of an unfolded matrix back onto the input positions it
/// was read from.
fn col2im<T: Real>(col: &[T], spec: &ConvSpec, out_hw: (usize, usize), gin: &mut Tensor<T>, n: usize) {
    let is = gin.shape();
    let p = out_hw.0 * out_hw.1;
    let mut rows = col.chunks_exact(p);
    for ci in 0..spec.in_channels {
        let gplane = gin.plane_mut(n, ci);
        for kh in 0..spec.kernel.0 {
            for kw in 0..spec.kernel.1 {
                let row = rows.next().expect("row count matches");
                scatter(row, out_hw, gplane, (is.h, is.w), T::one(), Tap::new(spec, kh, kw));
            }
        }
    }
}

/// Gradients of `conv2d` with respect to input, weights and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let is = input.shape();
    let gs = grad_out.shape();
    let (k, p) = (col_rows(spec), gs.h * gs.w);
    let co = spec.out_channels;
    let mut gin = Tensor::zeros(is);
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros(Shape::new(co, 1, 1, 1));
    let mut col = vec![T::zero(); k * p];
    let mut gcol = vec![T::zero(); k * p];
    for n in 0..is.n {
        let g = &grad_out.data()[n * co * p..(n + 1) * co * p];
        for (b, plane) in gb.data_mut().iter_mut().zip(g.chunks_exact(p)) {
            *b += plane.iter().copied().sum::<T>();
        }
        im2col(input, n, spec, (gs.h, gs.w), &mut col);
        gemm::matmul_nt_acc(co, k, p, g, &col, gw.data_mut());
        gemm::matmul(k, p, co, weights.data(), 1, k, g, &mut gcol);
        col2im(&gcol, spec, (gs.h, gs.w), &mut gin, n);
    }
    (gin, gw, gb)
}

/// Transposed convolution (the adjoint of `conv2d` in its input).
///
/// `weights` has shape `(in_channels, out_channels, kh, kw)`.
pub fn transposed_conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "transposed_conv2d";
    spec.validate(OP)?;
    let is = input.shape();
    if is.c != spec.in_channels {
        return Err(Error::shape(OP, "input channels", spec.in_channels, is.c));
    }
    check_weights(
        OP,
        weights,
        Shape::new(spec.in_channels, spec.out_channels, spec.kernel.0, spec.kernel.1),
    )?;
    check_bias(OP, bias, spec.out_channels)?;
    if spec.output_padding.0 >= spec.stride.0.max(spec.dilation.0)
        || spec.output_padding.1 >= spec.stride.1.max(spec.dilation.1)
    {
        return Err(Error::invalid(
            OP,
            "output padding must be smaller than stride or dilation",
        ));
    }
    let (oh, ow) = spec
        .transposed_output_hw(is.h, is.w)
        .ok_or_else(|| Error::invalid(OP, "padding removes the entire output"))?;

    let os = Shape::new(is.n, spec.out_channels, oh, ow);
    let mut out = Tensor::zeros(os);
    let wd = weights.data();
    let (kh_n, kw_n) = spec.kernel;
    for n in 0..is.n {
        for co in 0..spec.out_channels {
            for ci in 0..spec.in_channels {
                let iplane = input.plane(n, ci);
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = wd[((ci * spec.out_channels + co) * kh_n + kh) * kw_n + kw];
                        scatter(
                            iplane,
                            (is.h, is.w),
                            out.plane_mut(n, co),
                            (oh, ow),
                            wv,
                            Tap::new(spec, kh, kw),
                        );
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[co];
                for v in out.plane_mut(n, co).iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub fn transposed_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let is = input.shape();
    let gs = grad_out.shape();
    let (kh_n, kw_n) = spec.kernel;
    let mut gin = Tensor::zeros(is);
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros(Shape::new(spec.out_channels, 1, 1, 1));
    let wd = weights.data();
    for n in 0..is.n {
        for co in 0..spec.out_channels {
            let gplane = grad_out.plane(n, co);
            gb.data_mut()[co] += gplane.iter().copied().sum::<T>();
            for ci in 0..spec.in_channels {
                let iplane = input.plane(n, ci);
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let widx = ((ci * spec.out_channels + co) * kh_n + kh) * kw_n + kw;
                        let tap = Tap::new(spec, kh, kw);
                        gather(gplane, (gs.h, gs.w), gin.plane_mut(n, ci), (is.h, is.w), wd[widx], tap);
                        gw.data_mut()[widx] += correlate(gplane, (gs.h, gs.w), iplane, (is.h, is.w), tap);
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}
