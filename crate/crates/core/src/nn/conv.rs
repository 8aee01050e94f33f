//! 2-D convolution and transposed convolution on channel-major batches,
//! lowered to GEMM through an im2col buffer.

use crate::nn::params::{ParamId, ParamKind, ParamLayout, ParamStore};
use crate::nn::tensor::FeatureMap;
use crate::scalar::{gemm, gemm_ld, MatRef, Scalar};

/// Sliding-window geometry of a convolution viewed from its input side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad_begin: usize,
    pub pad_end: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, pad_begin: usize, pad_end: usize) -> Self {
        Self { kernel, stride, pad_begin, pad_end }
    }

    /// Output extent for an input extent, or `None` if the window does not fit.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let padded = input + self.pad_begin + self.pad_end;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Unfolds `x` into a `[C*k*k] x [B*OH*OW]` row-major matrix.
pub fn im2col<T: Scalar>(x: &FeatureMap<T>, win: Window, oh: usize, ow: usize) -> Vec<T> {
    let mut col = vec![T::zero(); x.channels * win.kernel * win.kernel * x.batch * oh * ow];
    im2col_range(x, win, oh, ow, 0, x.batch, &mut col);
    col
}

/// [`im2col`] restricted to samples `b0..b1`, overwriting `col`
/// (`[C*k*k] x [(b1-b0)*OH*OW]`).
pub fn im2col_range<T: Scalar>(x: &FeatureMap<T>, win: Window, oh: usize, ow: usize, b0: usize, b1: usize, col: &mut [T]) {
    let k = win.kernel;
    let n_cols = (b1 - b0) * oh * ow;
    let col = &mut col[..x.channels * k * k * n_cols];
    col.fill(T::zero());
    let (h, w) = (x.height as isize, x.width as isize);
    let pb = win.pad_begin as isize;
    let s = win.stride as isize;
    for c in 0..x.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut col[row * n_cols..(row + 1) * n_cols];
                // output columns whose input column falls inside the image
                let (lo, hi) = valid_range(ow, kj as isize - pb, s, w);
                if lo >= hi {
                    continue;
                }
                for b in b0..b1 {
                    let src = x.sample_plane(c, b);
                    for r in 0..oh {
                        let ir = r as isize * s + ki as isize - pb;
                        if ir < 0 || ir >= h {
                            continue;
                        }
                        let dst = &mut dst_row[((b - b0) * oh + r) * ow..((b - b0) * oh + r + 1) * ow];
                        let src_row = &src[ir as usize * x.width..(ir as usize + 1) * x.width];
                        let start = (lo as isize * s + kj as isize - pb) as usize;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        } else {
                            for (d, v) in dst[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(s as usize)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds a column matrix back, summing overlaps.
pub fn col2im<T: Scalar>(col: &[T], out: &mut FeatureMap<T>, win: Window, oh: usize, ow: usize) {
    let b = out.batch;
    col2im_range(col, out, win, oh, ow, 0, b);
}

/// Adjoint of [`im2col_range`]: adds the folded columns into samples `b0..b1`.
pub fn col2im_range<T: Scalar>(col: &[T], out: &mut FeatureMap<T>, win: Window, oh: usize, ow: usize, b0: usize, b1: usize) {
    let k = win.kernel;
    let n_cols = (b1 - b0) * oh * ow;
    assert!(col.len() >= out.channels * k * k * n_cols);
    let (h, w) = (out.height as isize, out.width as isize);
    let width = out.width;
    let pb = win.pad_begin as isize;
    let s = win.stride as isize;
    for c in 0..out.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &col[row * n_cols..(row + 1) * n_cols];
                let (lo, hi) = valid_range(ow, kj as isize - pb, s, w);
                if lo >= hi {
                    continue;
                }
                for b in b0..b1 {
                    let plane = out.sample_plane_mut(c, b);
                    for r in 0..oh {
                        let ir = r as isize * s + ki as isize - pb;
                        if ir < 0 || ir >= h {
                            continue;
                        }
                        let src = &src_row[((b - b0) * oh + r) * ow..((b - b0) * oh + r + 1) * ow];
                        let dst_row = &mut plane[ir as usize * width..(ir as usize + 1) * width];
                        let start = (lo as isize * s + kj as isize - pb) as usize;
                        if s == 1 {
                            for (d, v) in dst_row[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += *v;
                            }
                        } else {
                            for (d, v) in dst_row[start..].iter_mut().step_by(s as usize).zip(&src[lo..hi]) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Column-buffer budget (elements) per im2col chunk; about 1 MiB of f32.
const CHUNK_ELEMS: usize = 1 << 18;

/// Samples per chunk so that a `rows x (samples * plane)` buffer stays
/// within [`CHUNK_ELEMS`].
fn samples_per_chunk(rows: usize, plane: usize, batch: usize) -> usize {
    (CHUNK_ELEMS / (rows * plane).max(1)).clamp(1, batch.max(1))
}

/// Range of output positions `o` with `0 <= o*s + offset < extent`.
fn valid_range(n_out: usize, offset: isize, s: isize, extent: isize) -> (usize, usize) {
    let lo = if offset >= 0 { 0 } else { ((-offset + s - 1) / s) as usize };
    let last = extent - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
    (lo.min(n_out), hi.min(n_out))
}

fn add_channel_bias<T: Scalar>(y: &mut FeatureMap<T>, bias: &[T]) {
    let per = y.per_channel();
    for (c, &bv) in bias.iter().enumerate() {
        for v in &mut y.data[c * per..(c + 1) * per] {
            *v += bv;
        }
    }
}

fn accumulate_channel_sums<T: Scalar>(dy: &FeatureMap<T>, grad: &mut [T]) {
    let per = dy.per_channel();
    for (c, g) in grad.iter_mut().enumerate() {
        let s: f64 = dy.data[c * per..(c + 1) * per].iter().map(|v| v.as_f64()).sum();
        *g += T::of(s);
    }
}

/// Channel products at or below this use shifted-row kernels instead of
/// im2col + GEMM; the full-resolution decoder layers have only a handful of
/// channels, where the column buffer costs more than the arithmetic.
const DIRECT_MAX_CHANNEL_PRODUCT: usize = 16;

/// Calls `f(out_row, in_row, col_lo, col_hi, col_shift)` for every output
/// row / kernel tap pair of a stride-1 window.
#[inline]
#[allow(clippy::too_many_arguments)]
fn for_each_tap_row(
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    win: Window,
    ki: usize,
    kj: usize,
    mut f: impl FnMut(usize, usize, usize, usize, isize),
) {
    let pb = win.pad_begin as isize;
    let shift = kj as isize - pb;
    let (lo, hi) = valid_range(ow, shift, 1, w as isize);
    if lo >= hi {
        return;
    }
    for r in 0..oh {
        let ir = r as isize + ki as isize - pb;
        if ir < 0 || ir >= h as isize {
            continue;
        }
        f(r, ir as usize, lo, hi, shift);
    }
}

fn direct_forward<T: Scalar>(weight: &[T], x: &FeatureMap<T>, y: &mut FeatureMap<T>, win: Window) {
    let k = win.kernel;
    let (cin, cout) = (x.channels, y.channels);
    let (oh, ow) = (y.height, y.width);
    for b in 0..x.batch {
        for co in 0..cout {
            for ci in 0..cin {
                let xp = x.sample_plane(ci, b);
                let yp = y.sample_plane_mut(co, b);
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = weight[((co * cin + ci) * k + ki) * k + kj];
                        for_each_tap_row(oh, ow, x.height, x.width, win, ki, kj, |r, ir, lo, hi, sh| {
                            let src = &xp[ir * x.width..(ir + 1) * x.width];
                            let start = (lo as isize + sh) as usize;
                            let dst = &mut yp[r * ow + lo..r * ow + hi];
                            for (d, &v) in dst.iter_mut().zip(&src[start..start + (hi - lo)]) {
                                *d += wv * v;
                            }
                        });
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums (vectorizes).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

fn direct_backward<T: Scalar>(
    weight: &[T],
    x: &FeatureMap<T>,
    dy: &FeatureMap<T>,
    dw: &mut [T],
    mut dx: Option<&mut FeatureMap<T>>,
    win: Window,
) {
    let k = win.kernel;
    let (cin, cout) = (x.channels, dy.channels);
    let (oh, ow) = (dy.height, dy.width);
    let mut dw_acc = vec![0.0f64; dw.len()];
    for b in 0..x.batch {
        for co in 0..cout {
            let gp = dy.sample_plane(co, b);
            for ci in 0..cin {
                let xp = x.sample_plane(ci, b);
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = ((co * cin + ci) * k + ki) * k + kj;
                        let mut acc = T::zero();
                        for_each_tap_row(oh, ow, x.height, x.width, win, ki, kj, |r, ir, lo, hi, sh| {
                            let src = &xp[ir * x.width..(ir + 1) * x.width];
                            let start = (lo as isize + sh) as usize;
                            let g = &gp[r * ow + lo..r * ow + hi];
                            acc += dot(g, &src[start..start + (hi - lo)]);
                        });
                        dw_acc[idx] += acc.as_f64();
                    }
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let width = dx.width;
                    let height = dx.height;
                    let dxp = dx.sample_plane_mut(ci, b);
                    for ki in 0..k {
                        for kj in 0..k {
                            let wv = weight[((co * cin + ci) * k + ki) * k + kj];
                            for_each_tap_row(oh, ow, height, width, win, ki, kj, |r, ir, lo, hi, sh| {
                                let start = (lo as isize + sh) as usize;
                                let g = &gp[r * ow + lo..r * ow + hi];
                                let dst = &mut dxp[ir * width + start..ir * width + start + (hi - lo)];
                                for (d, &a) in dst.iter_mut().zip(g) {
                                    *d += wv * a;
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    for (d, a) in dw.iter_mut().zip(dw_acc) {
        *d += T::of(a);
    }
}

/// Standard convolution; weight stored `[Cout][Cin][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
}

impl Conv2d {
    pub fn declare(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        window: Window,
        with_bias: bool,
    ) -> Self {
        let k = window.kernel;
        let weight = layout.declare(
            format!("{name}.weight"),
            vec![out_channels, in_channels, k, k],
            ParamKind::Weight { fan_in: in_channels * k * k },
        );
        let bias = with_bias
            .then(|| layout.declare(format!("{name}.bias"), vec![out_channels], ParamKind::Bias));
        Self { weight, bias, in_channels, out_channels, window }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            self.window.output_len(h).expect("window fits input"),
            self.window.output_len(w).expect("window fits input"),
        )
    }

    fn direct(&self) -> bool {
        self.window.stride == 1 && self.in_channels * self.out_channels <= DIRECT_MAX_CHANNEL_PRODUCT
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(x.height, x.width);
        if self.direct() {
            let mut y = FeatureMap::zeros(self.out_channels, x.batch, oh, ow);
            direct_forward(p.get(self.weight), x, &mut y, self.window);
            if let Some(b) = self.bias {
                add_channel_bias(&mut y, p.get(b));
            }
            return y;
        }
        let kk = self.in_channels * self.window.kernel * self.window.kernel;
        let plane = oh * ow;
        let n = x.batch * plane;
        let chunk = samples_per_chunk(kk, plane, x.batch);
        let mut col = vec![T::zero(); kk * chunk * plane];
        let mut y = FeatureMap::zeros(self.out_channels, x.batch, oh, ow);
        for b0 in (0..x.batch).step_by(chunk) {
            let b1 = (b0 + chunk).min(x.batch);
            let nc = (b1 - b0) * plane;
            im2col_range(x, self.window, oh, ow, b0, b1, &mut col);
            gemm_ld(
                MatRef::new(p.get(self.weight), self.out_channels, kk),
                MatRef::new(&col[..kk * nc], kk, nc),
                T::zero(),
                &mut y.data[b0 * plane..],
                n,
            );
        }
        if let Some(b) = self.bias {
            add_channel_bias(&mut y, p.get(b));
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient if asked.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        grads: &mut ParamStore<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let (oh, ow) = (dy.height, dy.width);
        if self.direct() {
            if let Some(b) = self.bias {
                accumulate_channel_sums(dy, grads.get_mut(b));
            }
            let mut dx = need_input_grad.then(|| FeatureMap::zeros(x.channels, x.batch, x.height, x.width));
            direct_backward(p.get(self.weight), x, dy, grads.get_mut(self.weight), dx.as_mut(), self.window);
            return dx;
        }
        if let Some(b) = self.bias {
            accumulate_channel_sums(dy, grads.get_mut(b));
        }
        let kk = self.in_channels * self.window.kernel * self.window.kernel;
        let plane = oh * ow;
        let n = x.batch * plane;
        let chunk = samples_per_chunk(kk, plane, x.batch);
        let mut col = vec![T::zero(); kk * chunk * plane];
        let mut dx = need_input_grad.then(|| FeatureMap::zeros(x.channels, x.batch, x.height, x.width));
        for b0 in (0..x.batch).step_by(chunk) {
            let b1 = (b0 + chunk).min(x.batch);
            let nc = (b1 - b0) * plane;
            let dy_block = MatRef::new(&dy.data[b0 * plane..], self.out_channels, nc).with_ld(n);
            im2col_range(x, self.window, oh, ow, b0, b1, &mut col);
            gemm(dy_block, MatRef::t(&col[..kk * nc], kk, nc), T::one(), grads.get_mut(self.weight));
            if let Some(dx) = dx.as_mut() {
                gemm(MatRef::t(p.get(self.weight), self.out_channels, kk), dy_block, T::zero(), &mut col[..kk * nc]);
                col2im_range(&col, dx, self.window, oh, ow, b0, b1);
            }
        }
        dx
    }
}

/// Transposed convolution (the adjoint of a strided [`Conv2d`]); weight
/// stored `[Cin][Cout][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
}

impl ConvTranspose2d {
    pub fn declare(
        layout: &mut ParamLayout,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        window: Window,
        with_bias: bool,
    ) -> Self {
        let k = window.kernel;
        let taps = (k * k / (window.stride * window.stride)).max(1);
        let weight = layout.declare(
            format!("{name}.weight"),
            vec![in_channels, out_channels, k, k],
            ParamKind::Weight { fan_in: in_channels * taps },
        );
        let bias = with_bias
            .then(|| layout.declare(format!("{name}.bias"), vec![out_channels], ParamKind::Bias));
        Self { weight, bias, in_channels, out_channels, window }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| {
            (n - 1) * self.window.stride + self.window.kernel
                - self.window.pad_begin
                - self.window.pad_end
        };
        (f(h), f(w))
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(x.channels, self.in_channels, "deconv input channels");
        let (oh, ow) = self.output_hw(x.height, x.width);
        let k = self.window.kernel;
        let kk = self.out_channels * k * k;
        let plane = x.height * x.width;
        let n = x.batch * plane;
        let chunk = samples_per_chunk(kk, plane, x.batch);
        let mut col = vec![T::zero(); kk * chunk * plane];
        let mut y = FeatureMap::zeros(self.out_channels, x.batch, oh, ow);
        for b0 in (0..x.batch).step_by(chunk) {
            let b1 = (b0 + chunk).min(x.batch);
            let nc = (b1 - b0) * plane;
            gemm(
                MatRef::t(p.get(self.weight), self.in_channels, kk),
                MatRef::new(&x.data[b0 * plane..], self.in_channels, nc).with_ld(n),
                T::zero(),
                &mut col[..kk * nc],
            );
            col2im_range(&col, &mut y, self.window, x.height, x.width, b0, b1);
        }
        if let Some(b) = self.bias {
            add_channel_bias(&mut y, p.get(b));
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        grads: &mut ParamStore<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        if let Some(b) = self.bias {
            accumulate_channel_sums(dy, grads.get_mut(b));
        }
        let k = self.window.kernel;
        let kk = self.out_channels * k * k;
        let plane = x.height * x.width;
        let n = x.batch * plane;
        let chunk = samples_per_chunk(kk, plane, x.batch);
        let mut col = vec![T::zero(); kk * chunk * plane];
        let mut dx = need_input_grad.then(|| FeatureMap::zeros(x.channels, x.batch, x.height, x.width));
        for b0 in (0..x.batch).step_by(chunk) {
            let b1 = (b0 + chunk).min(x.batch);
            let nc = (b1 - b0) * plane;
            im2col_range(dy, self.window, x.height, x.width, b0, b1, &mut col);
            let col = MatRef::new(&col[..kk * nc], kk, nc);
            gemm(
                MatRef::new(&x.data[b0 * plane..], self.in_channels, nc).with_ld(n),
                MatRef::t(col.data, kk, nc),
                T::one(),
                grads.get_mut(self.weight),
            );
            if let Some(dx) = dx.as_mut() {
                gemm_ld(MatRef::new(p.get(self.weight), self.in_channels, kk), col, T::zero(), &mut dx.data[b0 * plane..], n);
            }
        }
        dx
    }
}
