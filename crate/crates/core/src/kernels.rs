//! Forward and backward kernels shared by the eager API and the tape.
//!
//! Everything here is a pure function of its arguments. Reductions run in a
//! fixed order so results are bit-reproducible for a given precision.

use crate::error::{config_err, data_err, dim_err, Result};
use crate::tensor::{Real, Tensor};

/// Inner products are summed in `T` over blocks of this many terms, and the
/// block sums are accumulated in `f64`.
const ACC_BLOCK: usize = 32;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut acc = vec![0.0f64; n];
    let mut part = vec![T::zero(); n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (s, v) in acc.iter_mut().zip(crow.iter()) {
            *s = v.as_f64();
        }
        for p0 in (0..k).step_by(ACC_BLOCK) {
            part.fill(T::zero());
            for p in p0..(p0 + ACC_BLOCK).min(k) {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (pv, &bv) in part.iter_mut().zip(brow) {
                    *pv += av * bv;
                }
            }
            for (s, pv) in acc.iter_mut().zip(&part) {
                *s += pv.as_f64();
            }
        }
        for (v, &s) in crow.iter_mut().zip(&acc) {
            *v = T::lit(s);
        }
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`, accumulated like [`gemm_acc`].
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut acc: Vec<f64> = c.iter().map(|v| v.as_f64()).collect();
    let mut part = vec![T::zero(); m * n];
    for p0 in (0..k).step_by(ACC_BLOCK) {
        part.fill(T::zero());
        for p in p0..(p0 + ACC_BLOCK).min(k) {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let av = a[p * m + i];
                if av == T::zero() {
                    continue;
                }
                for (pv, &bv) in part[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *pv += av * bv;
                }
            }
        }
        for (s, pv) in acc.iter_mut().zip(&part) {
            *s += pv.as_f64();
        }
    }
    for (v, s) in c.iter_mut().zip(acc) {
        *v = T::lit(s);
    }
}

pub(crate) fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_acc(a, &bt, c, m, k, n);
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(dim_err!("matmul of {:?} and {:?}", a, b)),
    }
}

/// Geometry of a 2-D convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Validates `x: N×C×H×W` against `w: C_out×C_in×k×k`.
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [batch, c_in, h, wd] = *x else {
            return Err(dim_err!("conv2d input must be N×C×H×W, got {:?}", x));
        };
        let [c_out, wc_in, kh, kw] = *w else {
            return Err(dim_err!("conv2d kernel must be C_out×C_in×k×k, got {:?}", w));
        };
        if wc_in != c_in {
            return Err(dim_err!("conv2d kernel expects {wc_in} input channels, input has {c_in}"));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(dim_err!("conv2d supports 1×1 and 3×3 kernels, got {kh}×{kw}"));
        }
        if !(stride == 1 || stride == 2) {
            return Err(config_err!("conv2d stride must be 1 or 2, got {stride}"));
        }
        if pad > 1 {
            return Err(config_err!("conv2d padding must be 0 or 1, got {pad}"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(dim_err!("{kh}×{kw} kernel larger than padded {h}×{wd} input"));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wd + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { batch, c_in, h, w: wd, c_out, ksize: kh, stride, pad, h_out, w_out })
    }

    fn patch_rows(&self) -> usize {
        self.c_in * self.ksize * self.ksize
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.ksize == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one sample into a `(C·k·k) × (H_out·W_out)` patch matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (k, p) = (self.ksize, self.out_pixels());
        let mut cols = vec![T::zero(); self.patch_rows() * p];
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                row[oy * self.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of `im2col`: scatter-adds patch gradients into `dx`.
    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let (k, p) = (self.ksize, self.out_pixels());
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += row[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn as_batched(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 3 {
        let mut s = vec![1];
        s.extend_from_slice(shape);
        s
    } else {
        shape.to_vec()
    }
}

/// 2-D cross-correlation (no kernel flip) with zero padding.
///
/// Accepts a single `C×H×W` sample or an `N×C×H×W` batch; the output has
/// the same rank as the input.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let single = x.rank() == 3;
    let g = ConvGeom::new(&as_batched(x.shape()), w.shape(), stride, pad)?;
    let out = conv2d_forward(&g, x.data(), w.data());
    let shape = if single {
        vec![g.c_out, g.h_out, g.w_out]
    } else {
        vec![g.batch, g.c_out, g.h_out, g.w_out]
    };
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_pixels();
    let mut out = vec![T::zero(); g.batch * out_len];
    for n in 0..g.batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        if g.is_pointwise() {
            gemm_acc(w, xs, dst, g.c_out, g.c_in, g.out_pixels());
        } else {
            let cols = g.im2col(xs);
            gemm_acc(w, &cols, dst, g.c_out, g.patch_rows(), g.out_pixels());
        }
    }
    out
}

/// Returns `(dx, dw)`; `dx` is `None` when `want_dx` is false.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_pixels();
    let mut dx = want_dx.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let wt = want_dx.then(|| transpose(w, g.c_out, g.patch_rows()));
    for n in 0..g.batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let dy = &dout[n * out_len..(n + 1) * out_len];
        let cols = if g.is_pointwise() { None } else { Some(g.im2col(xs)) };
        if let Some(dw) = dw.as_mut() {
            let cols = cols.as_deref().unwrap_or(xs);
            gemm_nt_acc(dy, cols, dw, g.c_out, g.out_pixels(), g.patch_rows());
        }
        if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
            let dxs = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm_acc(wt, dy, dxs, g.c_in, g.c_out, g.out_pixels());
            } else {
                let mut dcols = vec![T::zero(); g.patch_rows() * g.out_pixels()];
                gemm_acc(wt, dy, &mut dcols, g.patch_rows(), g.c_out, g.out_pixels());
                g.col2im(&dcols, dxs);
            }
        }
    }
    (dx, dw)
}

/// Which axis of a tensor holds channels for normalization and bias ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelAxis {
    /// `N×C×…`: axis 1.
    First,
    /// `…×C`: the trailing axis (token sequences).
    Last,
}

impl ChannelAxis {
    /// `(outer, channels, inner)` such that the flat index is
    /// `(o·channels + c)·inner + i`.
    pub(crate) fn split(self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        match self {
            ChannelAxis::First => {
                if shape.len() < 2 {
                    return Err(dim_err!("channel-first tensor needs rank ≥ 2, got {:?}", shape));
                }
                Ok((shape[0], shape[1], shape[2..].iter().product()))
            }
            ChannelAxis::Last => {
                let c = *shape.last().ok_or_else(|| dim_err!("channel-last tensor needs rank ≥ 1"))?;
                Ok((shape[..shape.len() - 1].iter().product(), c, 1))
            }
        }
    }
}

/// Adds a per-channel bias.
pub(crate) fn bias_add<T: Real>(x: &[T], b: &[T], (outer, c, inner): (usize, usize, usize)) -> Vec<T> {
    let mut out = x.to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let bv = b[ch];
            for v in &mut out[(o * c + ch) * inner..][..inner] {
                *v += bv;
            }
        }
    }
    out
}

pub(crate) fn bias_grad<T: Real>(dy: &[T], (outer, c, inner): (usize, usize, usize)) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for o in 0..outer {
        for (ch, acc) in db.iter_mut().enumerate() {
            for &v in &dy[(o * c + ch) * inner..][..inner] {
                *acc += v;
            }
        }
    }
    db
}

pub const NORM_EPS: f64 = 1e-5;

/// Saved state of a batch-statistics normalization.
#[derive(Debug, Clone)]
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel standardization over every non-channel position, then affine.
/// Channel statistics are accumulated in `f64` whatever `T` is.
/// A channel whose values are all identical normalizes to exactly zero.
pub(crate) fn norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    dims: (usize, usize, usize),
) -> Result<(Vec<T>, NormStats<T>)> {
    let (outer, c, inner) = dims;
    let count = outer * inner;
    if count == 0 {
        return Err(dim_err!("normalization over a zero-size channel"));
    }
    let cnt = count as f64;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let values = || (0..outer).flat_map(move |o| x[(o * c + ch) * inner..][..inner].iter().map(|v| v.as_f64()));
        let first = x[ch * inner].as_f64();
        let constant = values().all(|v| v == first);
        let mean = values().sum::<f64>() / cnt;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cnt;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = T::lit(is);
        if constant {
            continue;
        }
        for o in 0..outer {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                xhat[i] = T::lit((x[i].as_f64() - mean) * is);
            }
        }
    }
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    Ok((y, NormStats { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn norm_backward<T: Real>(
    dy: &[T],
    gamma: &[T],
    stats: &NormStats<T>,
    (outer, c, inner): (usize, usize, usize),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cnt = (outer * inner) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                dgamma[ch] += dy[i].as_f64() * stats.xhat[i].as_f64();
                dbeta[ch] += dy[i].as_f64();
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for o in 0..outer {
        for ch in 0..c {
            let scale = gamma[ch].as_f64() * stats.inv_std[ch].as_f64() / cnt;
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                dx[i] = T::lit(scale * (cnt * dy[i].as_f64() - dbeta[ch] - stats.xhat[i].as_f64() * dgamma[ch]));
            }
        }
    }
    let (dgamma, dbeta) = (dgamma.into_iter().map(T::lit).collect(), dbeta.into_iter().map(T::lit).collect());
    (dx, dgamma, dbeta)
}

/// Eager batch-statistics normalization over a channel-first tensor.
pub fn norm_affine<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = ChannelAxis::First.split(x.shape())?;
    if gamma.len() != dims.1 || beta.len() != dims.1 {
        return Err(dim_err!("norm affine parameters must have {} entries", dims.1));
    }
    let (y, _) = norm_forward(x.data(), gamma.data(), beta.data(), dims)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Per-axis interpolation taps for align-corners=false bilinear resampling.
#[derive(Debug, Clone)]
pub(crate) struct Taps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<T>,
}

pub(crate) fn upsample_taps<T: Real>(n: usize, factor: usize) -> Taps<T> {
    let m = n * factor;
    let mut taps = Taps { lo: Vec::with_capacity(m), hi: Vec::with_capacity(m), w_hi: Vec::with_capacity(m) };
    for o in 0..m {
        let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = if hi == lo { 0.0 } else { src - lo as f64 };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.w_hi.push(T::lit(frac));
    }
    taps
}

pub(crate) fn check_upsample_factor(factor: usize) -> Result<()> {
    if factor < 2 || !factor.is_power_of_two() {
        return Err(config_err!("upsample factor must be a power of two ≥ 2, got {factor}"));
    }
    Ok(())
}

/// Splits `…×H×W` into `(planes, H, W)`.
pub(crate) fn planes_hw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err!("expected a spatial tensor, got {:?}", shape));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

/// Reflects an out-of-range index back into `0..n` (`… 2 1 | 0 1 2 … n−1 | n−2 …`).
pub(crate) fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let j = i.rem_euclid(period);
    (if j < n as isize { j } else { period - j }) as usize
}

pub(crate) fn upsample_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let ty = upsample_taps::<T>(h, factor);
    let tx = upsample_taps::<T>(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_forward`]. Each source cell gathers up to
/// `(2·factor)²` terms, so the sums are carried in `f64`.
pub(crate) fn upsample_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let ty = upsample_taps::<f64>(h, factor);
    let tx = upsample_taps::<f64>(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut acc = vec![0.0f64; h * w];
    let mut dx = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        acc.fill(0.0);
        for oy in 0..ho {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                let v = g[oy * wo + ox].as_f64();
                let (top, bot) = (v * (1.0 - fy), v * fy);
                acc[y0 * w + x0] += top * (1.0 - fx);
                acc[y0 * w + x1] += top * fx;
                acc[y1 * w + x0] += bot * (1.0 - fx);
                acc[y1 * w + x1] += bot * fx;
            }
        }
        dx.extend(acc.iter().map(|&v| T::lit(v)));
    }
    dx
}

/// Bilinear upsampling of the two trailing axes, align-corners=false:
/// output pixel `o` samples source coordinate `(o + ½)/factor − ½`,
/// clamped to the valid range.
pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_upsample_factor(factor)?;
    let (planes, h, w) = planes_hw(x.shape())?;
    let out = upsample_forward(x.data(), planes, h, w, factor);
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] *= factor;
    shape[r - 1] *= factor;
    Ok(Tensor::from_parts(shape, out))
}

/// Non-overlapping mean pooling of the two trailing axes.
pub fn avg_pool<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = planes_hw(x.shape())?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(dim_err!("cannot pool {h}×{w} by {factor}"));
    }
    let (ho, wo) = (h / factor, w / factor);
    let norm = T::lit((factor * factor) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[(p * ho + y / factor) * wo + xx / factor] += x.data()[(p * h + y) * w + xx];
            }
        }
    }
    for v in &mut out {
        *v /= norm;
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Ok(Tensor::from_parts(shape, out))
}

/// Mean pixel-wise softmax cross-entropy of `N×K×H×W` (or `K×H×W`) logits.
/// Returns the loss and the softmax probabilities.
pub(crate) fn cross_entropy_forward<T: Real>(
    logits: &[T],
    shape: &[usize],
    target: &[u8],
) -> Result<(T, Vec<T>)> {
    let (n, k, hw) = match *shape {
        [n, k, h, w] => (n, k, h * w),
        [k, h, w] => (1, k, h * w),
        _ => return Err(dim_err!("cross-entropy logits must be [N×]K×H×W, got {:?}", shape)),
    };
    if target.len() != n * hw {
        return Err(dim_err!("target has {} labels, logits cover {} pixels", target.len(), n * hw));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
        return Err(data_err!("label {bad} out of range for {k} classes"));
    }
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for s in 0..n {
        for p in 0..hw {
            let at = |c: usize| (s * k + c) * hw + p;
            let (mut best, mut best_c) = (logits[at(0)], 0);
            for c in 1..k {
                if logits[at(c)] > best {
                    best = logits[at(c)];
                    best_c = c;
                }
            }
            let mut others = T::zero();
            for c in 0..k {
                let e = (logits[at(c)] - best).exp();
                probs[at(c)] = e;
                if c != best_c {
                    others += e;
                }
            }
            let denom = T::one() + others;
            for c in 0..k {
                probs[at(c)] /= denom;
            }
            let t = target[s * hw + p] as usize;
            total += best - logits[at(t)] + others.ln_1p();
        }
    }
    Ok((total / T::lit((n * hw) as f64), probs))
}

pub(crate) fn cross_entropy_backward<T: Real>(probs: &[T], shape: &[usize], target: &[u8], dloss: T) -> Vec<T> {
    let (n, k, hw) = match *shape {
        [n, k, h, w] => (n, k, h * w),
        [k, h, w] => (1, k, h * w),
        _ => unreachable!("validated in forward"),
    };
    let scale = dloss / T::lit((n * hw) as f64);
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for s in 0..n {
        for p in 0..hw {
            let t = target[s * hw + p] as usize;
            d[(s * k + t) * hw + p] -= scale;
        }
    }
    d
}

/// Mean softmax cross-entropy between logits and an integer label mask.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, target: &[u8]) -> Result<T> {
    cross_entropy_forward(logits.data(), logits.shape(), target).map(|(l, _)| l)
}

/// Causal depthwise convolution along the sequence axis of `N×L×E` input
/// with kernel `E×W`: `y[t] = b + Σ_j w[j]·x[t − (W−1) + j]`.
pub(crate) fn dwconv1d_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, l: usize, e: usize) -> Vec<T> {
    let width = w.len() / e;
    let mut y = vec![T::zero(); x.len()];
    for s in 0..n {
        for t in 0..l {
            let row = &mut y[(s * l + t) * e..][..e];
            row.copy_from_slice(b);
            for j in 0..width {
                let Some(src_t) = (t + j).checked_sub(width - 1) else { continue };
                let src = &x[(s * l + src_t) * e..][..e];
                for ch in 0..e {
                    row[ch] += w[ch * width + j] * src[ch];
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn dwconv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    l: usize,
    e: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let width = w.len() / e;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); e];
    for s in 0..n {
        for t in 0..l {
            let g = &dy[(s * l + t) * e..][..e];
            for ch in 0..e {
                db[ch] += g[ch];
            }
            for j in 0..width {
                let Some(src_t) = (t + j).checked_sub(width - 1) else { continue };
                let base = (s * l + src_t) * e;
                for ch in 0..e {
                    dw[ch * width + j] += g[ch] * x[base + ch];
                    dx[base + ch] += g[ch] * w[ch * width + j];
                }
            }
        }
    }
    (dx, dw, db)
}
