//! Slice-level kernels: convolution via im2col, pooling, resampling, softmax.
//!
//! Every forward kernel has an adjoint used by [`crate::autograd`]. All tensors are
//! rank-3 `C×H×W` unless noted.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::tensor::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const POINTWISE: ConvGeom = ConvGeom { kernel: 1, stride: 1, padding: 0, dilation: 1 };

    /// Same-size 3×3 convolution at the given dilation.
    pub fn same3(dilation: usize) -> Self {
        ConvGeom { kernel: 3, stride: 1, padding: dilation, dilation }
    }

    pub fn out_size(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn is_pointwise(&self) -> bool {
        *self == Self::POINTWISE
    }
}

/// Unfolds `x` (`c×h×w`) into a `(c·k·k) × (oh·ow)` column matrix.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom) -> (Vec<T>, usize, usize) {
    let oh = g.out_size(h).expect("im2col: input smaller than kernel span");
    let ow = g.out_size(w).expect("im2col: input smaller than kernel span");
    let k = g.kernel;
    let plane = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * plane];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, dx: &mut [T]) {
    let oh = g.out_size(h).expect("col2im: input smaller than kernel span");
    let ow = g.out_size(w).expect("col2im: input smaller than kernel span");
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. Returns the output and, for non-pointwise geometry, the
/// unfolded input (needed by the weight gradient).
#[allow(clippy::type_complexity)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    weight: &[T],
    out_ch: usize,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> (Vec<T>, (usize, usize), Option<Vec<T>>) {
    let ckk = c * g.kernel * g.kernel;
    let (cols, oh, ow) = if g.is_pointwise() {
        (Vec::new(), h, w)
    } else {
        let (cols, oh, ow) = im2col(x, c, h, w, g);
        (cols, oh, ow)
    };
    let plane = oh * ow;
    let mut y = vec![T::zero(); out_ch * plane];
    let rhs = if g.is_pointwise() { x } else { &cols[..] };
    gemm(out_ch, plane, ckk, weight, false, rhs, false, &mut y, T::zero());
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate() {
            y[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = *v + bo);
        }
    }
    let cols = (!g.is_pointwise()).then_some(cols);
    (y, (oh, ow), cols)
}

/// Region `[start, end)` of band `i` when `n` cells are split into `parts` bands.
///
/// Bands partition `0..n` and have size `floor(n/parts)` or `ceil(n/parts)`.
pub fn band(i: usize, n: usize, parts: usize) -> (usize, usize) {
    (i * n / parts, (i + 1) * n / parts)
}

pub fn adaptive_avg_pool<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize), oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for py in 0..oh {
            let (y0, y1) = band(py, h, oh);
            for px in 0..ow {
                let (x0, x1) = band(px, w, ow);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for v in &plane[y * w + x0..y * w + x1] {
                        acc = acc + *v;
                    }
                }
                let area = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                out[(ci * oh + py) * ow + px] = acc / area;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    dy: &[T],
    (c, h, w): (usize, usize, usize),
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    for ci in 0..c {
        for py in 0..oh {
            let (y0, y1) = band(py, h, oh);
            for px in 0..ow {
                let (x0, x1) = band(px, w, ow);
                let area = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                let g = dy[(ci * oh + py) * ow + px] / area;
                for y in y0..y1 {
                    for v in &mut dx[ci * h * w + y * w + x0..ci * h * w + y * w + x1] {
                        *v = *v + g;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

impl Upsample {
    pub fn as_str(self) -> &'static str {
        match self {
            Upsample::Bilinear => "bilinear",
            Upsample::Nearest => "nearest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bilinear" => Some(Upsample::Bilinear),
            "nearest" => Some(Upsample::Nearest),
            _ => None,
        }
    }
}

/// Per-output-coordinate taps `(i0, i1, w0, w1)` of a resampling along one axis.
///
/// Bilinear uses half-pixel centers (`align_corners = false`) with the source
/// coordinate clamped at zero; nearest uses `floor(o · in / out)`.
pub fn resample_taps(n_in: usize, n_out: usize, mode: Upsample) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| match mode {
            Upsample::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (Float::floor(src) as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let l1 = src - i0 as f64;
                (i0, i1, 1.0 - l1, l1)
            }
            Upsample::Nearest => {
                let i = (Float::floor(o as f64 * scale) as usize).min(n_in - 1);
                (i, i, 1.0, 0.0)
            }
        })
        .collect()
}

pub fn resize<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize), oh: usize, ow: usize, mode: Upsample) -> Vec<T> {
    let ty = resample_taps(h, oh, mode);
    let tx = resample_taps(w, ow, mode);
    let mut out = vec![T::zero(); c * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                let bottom = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                dst[oy * ow + ox] = top * wy0 + bottom * wy1;
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(
    dy: &[T],
    (c, h, w): (usize, usize, usize),
    oh: usize,
    ow: usize,
    mode: Upsample,
    dx: &mut [T],
) {
    let ty = resample_taps(h, oh, mode);
    let tx = resample_taps(w, ow, mode);
    for ci in 0..c {
        let src = &dy[ci * oh * ow..(ci + 1) * oh * ow];
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + g * wy0 * wx0;
                dst[y0 * w + x1] = dst[y0 * w + x1] + g * wy0 * wx1;
                dst[y1 * w + x0] = dst[y1 * w + x0] + g * wy1 * wx0;
                dst[y1 * w + x1] = dst[y1 * w + x1] + g * wy1 * wx1;
            }
        }
    }
}

/// Max pooling; returns the output and the flat input index of every maximum.
pub fn max_pool<T: Scalar>(x: &[T], (c, h, w): (usize, usize, usize), g: ConvGeom) -> (Vec<T>, Vec<usize>, (usize, usize)) {
    let oh = g.out_size(h).expect("max_pool: input too small");
    let ow = g.out_size(w).expect("max_pool: input too small");
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = ci * h * w + iy as usize * w + ix as usize;
                        if x[idx] > best || best_i == usize::MAX {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, (oh, ow))
}

/// Row-wise softmax of a `rows×cols` matrix with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total = total + *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / total);
    }
    out
}

pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], rows: usize, cols: usize, dx: &mut [T]) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &dy[r * cols..(r + 1) * cols];
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &yv), &gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
            *d = *d + yv * (gv - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_partition_every_length() {
        for n in 1..40 {
            for parts in 1..=n.min(8) {
                let mut covered = 0;
                for i in 0..parts {
                    let (a, b) = band(i, n, parts);
                    assert_eq!(a, covered);
                    let size = b - a;
                    assert!(size == n / parts || size == n.div_ceil(parts));
                    covered = b;
                }
                assert_eq!(covered, n);
            }
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (c, h, w, o) = (2, 5, 6, 3);
        let g = ConvGeom { kernel: 3, stride: 2, padding: 2, dilation: 2 };
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let wt: Vec<f64> = (0..o * c * 9).map(|i| (i as f64 * 0.3).cos()).collect();
        let b = [0.1, -0.2, 0.3];
        let (y, (oh, ow), _) = conv2d_forward(&x, (c, h, w), &wt, o, Some(&b), g);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky * 2) as isize - 2;
                                let ix = (ox * 2 + kx * 2) as isize - 2;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[((oc * c + ci) * 3 + ky) * 3 + kx]
                                        * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y[(oc * oh + oy) * ow + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 4, 5);
        let g = ConvGeom { kernel: 3, stride: 1, padding: 1, dilation: 1 };
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.9).sin()).collect();
        let (cols, _, _) = im2col(&x, c, h, w, g);
        let r: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.4).cos()).collect();
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&r, c, h, w, g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_resize_is_adjoint_consistent() {
        let dims = (1, 3, 4);
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let y = resize(&x, dims, 7, 5, Upsample::Bilinear);
        let r: Vec<f64> = (0..35).map(|i| (i as f64).sin()).collect();
        let lhs: f64 = y.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 12];
        resize_backward(&r, dims, 7, 5, Upsample::Bilinear, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_from_single_cell_broadcasts() {
        for mode in [Upsample::Bilinear, Upsample::Nearest] {
            let y = resize(&[2.5f32], (1, 1, 1), 3, 4, mode);
            assert!(y.iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn softmax_rows_are_stable_for_large_inputs() {
        let y = softmax_rows(&[1000.0f32, 999.0, -1000.0, 0.0], 2, 2);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] + y[1] - 1.0).abs() < 1e-6);
        assert!((y[3] - 1.0).abs() < 1e-6);
    }
}
