//! Numeric kernels behind the differentiable operators: patch-matrix
//! convolution, its transpose, and bilinear resampling.
//!
//! Everything here works on raw tensors; the tape in [`crate::autograd`]
//! decides which of these to call on the forward and backward passes.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Stride, zero padding and dilation of a 2-D convolution. The kernel
/// extent comes from the weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Shape-preserving spec for an odd kernel of size `k` at the given dilation.
    pub const fn same(k: usize, dilation: usize) -> Self {
        Self::new(1, dilation * (k - 1) / 2, dilation)
    }

    /// `floor((in + 2p - d(k-1) - 1) / s) + 1`, or `None` when not strictly positive.
    pub fn conv_out(&self, input: usize, k: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 || k == 0 {
            return None;
        }
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// `(in - 1) s - 2p + d(k-1) + 1`, or `None` when not strictly positive.
    pub fn transpose_out(&self, input: usize, k: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 || k == 0 || input == 0 {
            return None;
        }
        let full = (input - 1) * self.stride + self.dilation * (k - 1) + 1;
        full.checked_sub(2 * self.padding).filter(|&v| v > 0)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, with optional
/// transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct PatchGeometry {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    spec: ConvSpec,
}

impl PatchGeometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Expand `image` (`channels*h*w`) into the patch matrix `[channels*kh*kw, out_h*out_w]`.
fn im2col(image: &[f64], g: &PatchGeometry, cols: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.source(oy, ky, g.h) {
                        None => line.fill(0.0),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kx, g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the patch matrix back onto `image`.
fn col2im(cols: &[f64], g: &PatchGeometry, image: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(bias: Option<&[f64]>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::Config(format!(
            "bias has {} entries but the layer has {channels} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

/// Output shape of `conv2d` for an input of shape `x` and weight `(out, in, kh, kw)`.
pub fn conv2d_shape(x: Shape4, w: Shape4, spec: ConvSpec) -> Result<Shape4> {
    if w.c != x.c {
        return Err(Error::Config(format!(
            "conv2d weight expects {} input channels, input {x} has {}",
            w.c, x.c
        )));
    }
    let oh = spec.conv_out(x.h, w.h);
    let ow = spec.conv_out(x.w, w.w);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape4::new(x.n, w.n, oh, ow)),
        _ => Err(Error::Config(format!(
            "conv2d output size not positive: input {}x{}, kernel {}x{}, {spec:?}",
            x.h, x.w, w.h, w.w
        ))),
    }
}

/// Output shape of `conv_transpose2d` for input `x` and weight `(in, out, kh, kw)`.
pub fn conv_transpose2d_shape(x: Shape4, w: Shape4, spec: ConvSpec) -> Result<Shape4> {
    if w.n != x.c {
        return Err(Error::Config(format!(
            "conv_transpose2d weight expects {} input channels, input {x} has {}",
            w.n, x.c
        )));
    }
    let oh = spec.transpose_out(x.h, w.h);
    let ow = spec.transpose_out(x.w, w.w);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape4::new(x.n, w.c, oh, ow)),
        _ => Err(Error::Config(format!(
            "conv_transpose2d output size not positive: input {}x{}, kernel {}x{}, {spec:?}",
            x.h, x.w, w.h, w.w
        ))),
    }
}

fn add_bias(out: &mut Tensor4, bias: Option<&[f64]>) {
    if let Some(b) = bias {
        let s = out.shape();
        for n in 0..s.n {
            for (c, &bv) in b.iter().enumerate() {
                out.plane_mut(n, c).iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

fn bias_grad(grad_out: &Tensor4) -> Vec<f64> {
    let s = grad_out.shape();
    let mut gb = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, g) in gb.iter_mut().enumerate() {
            *g += grad_out.plane(n, c).iter().sum::<f64>();
        }
    }
    gb
}

/// Cross-correlation with weight `(out, in, kh, kw)`.
pub fn conv2d(x: &Tensor4, w: &Tensor4, bias: Option<&[f64]>, spec: ConvSpec) -> Result<Tensor4> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv2d_shape(xs, ws, spec)?;
    check_bias(bias, ws.n)?;
    let g = PatchGeometry {
        channels: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        out_h: os.h,
        out_w: os.w,
        spec,
    };
    let mut out = Tensor4::zeros(os);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let in_stride = xs.c * xs.plane();
    let out_stride = os.c * os.plane();
    for n in 0..xs.n {
        im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &g, &mut cols);
        let dst = &mut out.data_mut()[n * out_stride..(n + 1) * out_stride];
        gemm(ws.n, g.rows(), g.cols(), w.data(), false, &cols, false, 0.0, dst);
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Gradients of [`conv2d`]: `(d input, d weight, d bias)`.
pub fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    grad_out: &Tensor4,
    spec: ConvSpec,
) -> (Tensor4, Tensor4, Vec<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let os = grad_out.shape();
    let g = PatchGeometry {
        channels: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        out_h: os.h,
        out_w: os.w,
        spec,
    };
    let mut gx = Tensor4::zeros(xs);
    let mut gw = Tensor4::zeros(ws);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let in_stride = xs.c * xs.plane();
    let out_stride = os.c * os.plane();
    for n in 0..xs.n {
        let go = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
        im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &g, &mut cols);
        // dW[out, rows] += dY[out, cols] * patches^T
        gemm(ws.n, g.cols(), g.rows(), go, false, &cols, true, 1.0, gw.data_mut());
        // dPatches[rows, cols] = W^T * dY
        gemm(g.rows(), ws.n, g.cols(), w.data(), true, go, false, 0.0, &mut cols);
        col2im(&cols, &g, &mut gx.data_mut()[n * in_stride..(n + 1) * in_stride]);
    }
    (gx, gw, bias_grad(grad_out))
}

/// Transposed convolution with weight `(in, out, kh, kw)`; the adjoint of
/// [`conv2d`] with the same weight and spec.
pub fn conv_transpose2d(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&[f64]>,
    spec: ConvSpec,
) -> Result<Tensor4> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv_transpose2d_shape(xs, ws, spec)?;
    check_bias(bias, ws.c)?;
    let g = PatchGeometry {
        channels: os.c,
        h: os.h,
        w: os.w,
        kh: ws.h,
        kw: ws.w,
        out_h: xs.h,
        out_w: xs.w,
        spec,
    };
    let mut out = Tensor4::zeros(os);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let in_stride = xs.c * xs.plane();
    let out_stride = os.c * os.plane();
    for n in 0..xs.n {
        let xin = &x.data()[n * in_stride..(n + 1) * in_stride];
        // patches[out*kh*kw, in_hw] = W^T[.., in] * X[in, in_hw]
        gemm(g.rows(), xs.c, g.cols(), w.data(), true, xin, false, 0.0, &mut cols);
        col2im(&cols, &g, &mut out.data_mut()[n * out_stride..(n + 1) * out_stride]);
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Gradients of [`conv_transpose2d`]: `(d input, d weight, d bias)`.
pub fn conv_transpose2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    grad_out: &Tensor4,
    spec: ConvSpec,
) -> (Tensor4, Tensor4, Vec<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let os = grad_out.shape();
    let g = PatchGeometry {
        channels: os.c,
        h: os.h,
        w: os.w,
        kh: ws.h,
        kw: ws.w,
        out_h: xs.h,
        out_w: xs.w,
        spec,
    };
    let mut gx = Tensor4::zeros(xs);
    let mut gw = Tensor4::zeros(ws);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let in_stride = xs.c * xs.plane();
    let out_stride = os.c * os.plane();
    for n in 0..xs.n {
        im2col(&grad_out.data()[n * out_stride..(n + 1) * out_stride], &g, &mut cols);
        let xin = &x.data()[n * in_stride..(n + 1) * in_stride];
        // dX[in, in_hw] = W[in, rows] * patches(dY)[rows, in_hw]
        gemm(xs.c, g.rows(), g.cols(), w.data(), false, &cols, false, 0.0, &mut gx.data_mut()[n * in_stride..(n + 1) * in_stride]);
        // dW[in, rows] += X[in, in_hw] * patches(dY)^T
        gemm(xs.c, g.cols(), g.rows(), xin, false, &cols, true, 1.0, gw.data_mut());
    }
    (gx, gw, bias_grad(grad_out))
}

/// Interpolation taps along one axis for corner-aligned bilinear resampling:
/// `(lower index, upper index, upper weight)` per output coordinate.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Corner-aligned bilinear resize of every plane to `out_h x out_w`.
pub fn bilinear_resize(x: &Tensor4, out_h: usize, out_w: usize) -> Result<Tensor4> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Usage(format!(
            "bilinear_resize target {out_h}x{out_w} must be at least 1x1"
        )));
    }
    let s = x.shape();
    if s.h == out_h && s.w == out_w {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * s.w + x0] * (1.0 - fx) + src[y0 * s.w + x1] * fx;
                    let bot = src[y1 * s.w + x0] * (1.0 - fx) + src[y1 * s.w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`] with respect to its input.
pub fn bilinear_resize_backward(grad_out: &Tensor4, in_h: usize, in_w: usize) -> Tensor4 {
    let s = grad_out.shape();
    if s.h == in_h && s.w == in_w {
        return grad_out.clone();
    }
    let ty = bilinear_taps(in_h, s.h);
    let tx = bilinear_taps(in_w, s.w);
    let mut gx = Tensor4::zeros(Shape4::new(s.n, s.c, in_h, in_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let go = grad_out.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = go[oy * s.w + ox];
                    dst[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * in_w + x1] += g * (1.0 - fy) * fx;
                    dst[y1 * in_w + x0] += g * fy * (1.0 - fx);
                    dst[y1 * in_w + x1] += g * fy * fx;
                }
            }
        }
    }
    gx
}

/// Overflow-free logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor4, w: &Tensor4, spec: ConvSpec) -> Tensor4 {
        let os = conv2d_shape(x.shape(), w.shape(), spec).unwrap();
        let ws = w.shape();
        let mut out = Tensor4::zeros(os);
        for n in 0..os.n {
            for co in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut acc = 0.0;
                        for ci in 0..ws.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.shape().h && (ix as usize) < x.shape().w {
                                        acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn out_size_formula() {
        let s = ConvSpec::new(2, 1, 1);
        assert_eq!(s.conv_out(64, 3), Some(32));
        assert_eq!(ConvSpec::new(1, 2, 2).conv_out(8, 3), Some(8));
        assert_eq!(ConvSpec::new(1, 0, 1).conv_out(2, 3), None);
        assert_eq!(ConvSpec::new(2, 1, 1).transpose_out(4, 4), Some(8));
        assert_eq!(ConvSpec::new(2, 0, 1).transpose_out(4, 2), Some(8));
    }

    #[test]
    fn strided_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::randn(Shape4::new(2, 3, 9, 7), 1.0, &mut rng);
        let w = Tensor4::randn(Shape4::new(5, 3, 3, 2), 1.0, &mut rng);
        for spec in [ConvSpec::new(2, 1, 1), ConvSpec::new(3, 2, 2), ConvSpec::new(1, 0, 1)] {
            let fast = conv2d(&x, &w, None, spec).unwrap();
            assert!(fast.max_abs_diff(&naive_conv(&x, &w, spec)) < 1e-12);
        }
    }

    #[test]
    fn bias_length_checked() {
        let x = Tensor4::zeros(Shape4::new(1, 2, 4, 4));
        let w = Tensor4::zeros(Shape4::new(3, 2, 1, 1));
        assert!(conv2d(&x, &w, Some(&[0.0, 0.0]), ConvSpec::default()).is_err());
        assert!(conv_transpose2d(&x, &Tensor4::zeros(Shape4::new(2, 3, 2, 2)), Some(&[0.0]), ConvSpec::new(2, 0, 1)).is_err());
    }

    #[test]
    fn sigmoid_and_softplus_saturate() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(1.0 - sigmoid(40.0) < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(softplus(800.0).is_finite());
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn downsample_taps_hit_corners() {
        let taps = bilinear_taps(8, 3);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[2].0, 7);
    }
}
