//! Perona–Malik diffusion.
//!
//! Two discretizations share the edge-stopping function
//! `g(m) = 1 / (1 + (m/k)²)`:
//!
//! * [`pmd_step_fd`]: explicit Euler step of `∂u/∂t = div(g(|∇u|)∇u)` with
//!   forward differences for the gradient, backward differences for the
//!   divergence and zero-flux (reflective) borders. Used as the reference.
//! * [`pmd_step_dwt`]: the wavelet-domain step where the Haar detail bands
//!   `lh`, `hl` stand in for `∂u/∂x`, `∂u/∂y`.
//!
//! The DWT step comes in two readings, see [`DwtMode`].
//!
//! [`PmdBlock`] wraps a diffusion step and a ResNet basic block.

use rand::Rng;

use crate::error::{config_err, dim_err, Result};
use crate::kernels::{planes_hw, ChannelAxis};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::wavelet::{analyze, check_even, synthesize};

/// How the modulated detail bands are turned back into an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DwtMode {
    /// `u + idwt(0, g·lh, g·hl, 0)`: the additive formula taken literally.
    AsWritten,
    /// `idwt(ll, g·lh, g·hl, hh)`: shrink the detail bands in place.
    #[default]
    Attenuate,
}

/// Gradient treatment of the DWT step on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PmdGradient {
    /// Differentiate through the diffusivity.
    #[default]
    Exact,
    /// Hold `g` fixed during the backward pass.
    StraightThrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    /// Contrast constant; gradients well above `k` count as edges.
    pub k: f64,
    pub steps: usize,
    /// Explicit step size of the finite-difference scheme. The DWT step
    /// always uses a unit step.
    pub dt: f64,
    pub mode: DwtMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { k: 1.0, steps: 1, dt: 1.0, mode: DwtMode::Attenuate }
    }
}

/// Largest stable explicit step for the 4-neighbour stencil.
pub const FD_MAX_DT: f64 = 0.25;

impl DiffusionConfig {
    pub fn fd(k: f64, steps: usize, dt: f64) -> Self {
        DiffusionConfig { k, steps, dt, mode: DwtMode::Attenuate }
    }

    pub fn dwt(k: f64, steps: usize, mode: DwtMode) -> Self {
        DiffusionConfig { k, steps, dt: 1.0, mode }
    }

    fn validate_k(&self) -> Result<()> {
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(config_err!("diffusion contrast k must be positive and finite, got {}", self.k));
        }
        Ok(())
    }

    pub fn validate_fd(&self) -> Result<()> {
        self.validate_k()?;
        if !(self.dt > 0.0 && self.dt <= FD_MAX_DT) {
            return Err(config_err!("finite-difference dt must lie in (0, {FD_MAX_DT}], got {}", self.dt));
        }
        Ok(())
    }

    pub fn validate_dwt(&self) -> Result<()> {
        self.validate_k()
    }
}

/// Edge-stopping function evaluated from a squared gradient magnitude.
#[inline]
pub(crate) fn g_of_sq<T: Real>(m2: T, inv_k2: T) -> T {
    T::one() / (T::one() + m2 * inv_k2)
}

/// `g(m) = 1 / (1 + (m/k)²)`, elementwise over gradient magnitudes.
pub fn diffusivity<T: Real>(grad_mag: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
    if !(k > 0.0) {
        return Err(config_err!("diffusion contrast k must be positive, got {k}"));
    }
    if grad_mag.data().iter().any(|&m| m < T::zero()) {
        return Err(config_err!("gradient magnitudes must be non-negative"));
    }
    let kk = T::lit(k);
    Ok(grad_mag.map(|m| {
        let r = m / kk;
        T::one() / (T::one() + r * r)
    }))
}

/// One explicit finite-difference diffusion step on every `H×W` plane.
pub fn pmd_step_fd<T: Real>(u: &Tensor<T>, cfg: &DiffusionConfig) -> Result<Tensor<T>> {
    cfg.validate_fd()?;
    let (planes, h, w) = planes_hw(u.shape())?;
    let inv_k2 = T::lit(1.0 / (cfg.k * cfg.k));
    let dt = T::lit(cfg.dt);
    let mut out = u.data().to_vec();
    let mut fx = vec![T::zero(); h * w];
    let mut fy = vec![T::zero(); h * w];
    for p in 0..planes {
        let src = &u.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let gx = if x + 1 < w { src[i + 1] - src[i] } else { T::zero() };
                let gy = if y + 1 < h { src[i + w] - src[i] } else { T::zero() };
                let c = g_of_sq(gx * gx + gy * gy, inv_k2);
                fx[i] = c * gx;
                fy[i] = c * gy;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut div = fx[i] + fy[i];
                if x > 0 {
                    div -= fx[i - 1];
                }
                if y > 0 {
                    div -= fy[i - w];
                }
                dst[i] += dt * div;
            }
        }
    }
    Ok(Tensor::from_parts(u.shape().to_vec(), out))
}

pub(crate) fn dwt_step_raw<T: Real>(u: &[T], planes: usize, h: usize, w: usize, cfg: &DiffusionConfig) -> Vec<T> {
    let [ll, mut lh, mut hl, hh] = analyze(u, planes, h, w);
    let inv_k2 = T::lit(1.0 / (cfg.k * cfg.k));
    for (x, y) in lh.iter_mut().zip(hl.iter_mut()) {
        let m = g_of_sq(*x * *x + *y * *y, inv_k2);
        *x *= m;
        *y *= m;
    }
    match cfg.mode {
        DwtMode::Attenuate => synthesize(&ll, &lh, &hl, &hh, planes, h / 2, w / 2),
        DwtMode::AsWritten => {
            let zero = vec![T::zero(); ll.len()];
            let mut out = synthesize(&zero, &lh, &hl, &zero, planes, h / 2, w / 2);
            for (o, &v) in out.iter_mut().zip(u) {
                *o += v;
            }
            out
        }
    }
}

pub(crate) fn dwt_step_backward<T: Real>(
    u: &[T],
    planes: usize,
    h: usize,
    w: usize,
    cfg: &DiffusionConfig,
    grad: PmdGradient,
    dy: &[T],
) -> Vec<T> {
    let [_, lh, hl, _] = analyze(u, planes, h, w);
    let [dll, mut dlh, mut dhl, dhh] = analyze(dy, planes, h, w);
    let inv_k2 = T::lit(1.0 / (cfg.k * cfg.k));
    let two = T::lit(2.0);
    for i in 0..lh.len() {
        let (x, y) = (lh[i], hl[i]);
        let (gx, gy) = (dlh[i], dhl[i]);
        let m = g_of_sq(x * x + y * y, inv_k2);
        let mut ox = gx * m;
        let mut oy = gy * m;
        if grad == PmdGradient::Exact {
            // ∂m/∂x = −2x·m²/k²
            let common = (gx * x + gy * y) * (-two * m * m * inv_k2);
            ox += common * x;
            oy += common * y;
        }
        dlh[i] = ox;
        dhl[i] = oy;
    }
    match cfg.mode {
        DwtMode::Attenuate => synthesize(&dll, &dlh, &dhl, &dhh, planes, h / 2, w / 2),
        DwtMode::AsWritten => {
            let zero = vec![T::zero(); dll.len()];
            let mut dx = synthesize(&zero, &dlh, &dhl, &zero, planes, h / 2, w / 2);
            for (o, &v) in dx.iter_mut().zip(dy) {
                *o += v;
            }
            dx
        }
    }
}

/// One wavelet-domain diffusion step on every `H×W` plane (`H`, `W` even).
pub fn pmd_step_dwt<T: Real>(u: &Tensor<T>, cfg: &DiffusionConfig) -> Result<Tensor<T>> {
    cfg.validate_dwt()?;
    let (planes, h, w) = planes_hw(u.shape())?;
    check_even(h, w)?;
    Ok(Tensor::from_parts(u.shape().to_vec(), dwt_step_raw(u.data(), planes, h, w, cfg)))
}

/// The three denoising schemes exposed to users.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Fd,
    DwtAsWritten,
    DwtAttenuate,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fd => "fd",
            Scheme::DwtAsWritten => "dwt-aswritten",
            Scheme::DwtAttenuate => "dwt-attenuate",
        }
    }

    pub fn step<T: Real>(self, u: &Tensor<T>, k: f64, dt: f64) -> Result<Tensor<T>> {
        match self {
            Scheme::Fd => pmd_step_fd(u, &DiffusionConfig::fd(k, 1, dt)),
            Scheme::DwtAsWritten => pmd_step_dwt(u, &DiffusionConfig::dwt(k, 1, DwtMode::AsWritten)),
            Scheme::DwtAttenuate => pmd_step_dwt(u, &DiffusionConfig::dwt(k, 1, DwtMode::Attenuate)),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fd" => Ok(Scheme::Fd),
            "dwt-aswritten" => Ok(Scheme::DwtAsWritten),
            "dwt-attenuate" => Ok(Scheme::DwtAttenuate),
            _ => Err(format!("unknown scheme `{s}`")),
        }
    }
}

/// Pooled within-region spread and the gap between region means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStats {
    /// Pixel-weighted mean of the two within-region variances.
    pub within_var: f64,
    pub within_std: f64,
    /// `mean(foreground) − mean(background)`.
    pub gap: f64,
}

/// Region statistics of one plane against a boolean foreground mask.
pub fn region_stats<T: Real>(u: &[T], fg: &[bool]) -> Result<RegionStats> {
    if u.len() != fg.len() {
        return Err(dim_err!("field has {} pixels, mask {}", u.len(), fg.len()));
    }
    let mut sum = [0.0f64; 2];
    let mut cnt = [0usize; 2];
    for (&v, &m) in u.iter().zip(fg) {
        sum[m as usize] += v.as_f64();
        cnt[m as usize] += 1;
    }
    if cnt[0] == 0 || cnt[1] == 0 {
        return Err(dim_err!("both regions must be non-empty"));
    }
    let mean = [sum[0] / cnt[0] as f64, sum[1] / cnt[1] as f64];
    let mut ss = 0.0;
    for (&v, &m) in u.iter().zip(fg) {
        let d = v.as_f64() - mean[m as usize];
        ss += d * d;
    }
    let within_var = ss / u.len() as f64;
    Ok(RegionStats { within_var, within_std: within_var.sqrt(), gap: mean[1] - mean[0] })
}

/// Separable Gaussian blur with mirrored borders; the linear baseline that
/// diffusion is compared against.
pub fn gaussian_blur<T: Real>(u: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(config_err!("blur sigma must be positive, got {sigma}"));
    }
    let (planes, h, w) = planes_hw(u.shape())?;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= norm);
    let mirror = |i: isize, n: usize| -> usize { crate::kernels::mirror_index(i, n) };
    let mut tmp = vec![0.0f64; h * w];
    let mut out = vec![T::zero(); u.len()];
    for p in 0..planes {
        let src = &u.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * src[y * w + mirror(x as isize + j as isize - radius, w)].as_f64())
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * tmp[mirror(y as isize + j as isize - radius, h) * w + x])
                    .sum();
                out[p * h * w + y * w + x] = T::lit(v);
            }
        }
    }
    Ok(Tensor::from_parts(u.shape().to_vec(), out))
}

/// Half-plane test field: background 0 on the left, foreground 1 on the
/// right, plus independent `N(0, σ²)` noise. Returns `1×n×n` and the
/// foreground mask.
pub fn two_region_field(n: usize, sigma: f64, seed: u64) -> (Tensor<f64>, Vec<bool>) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let fg: Vec<bool> = (0..n * n).map(|i| i % n >= n / 2).collect();
    let noise = Tensor::<f64>::randn(&[1, n, n], &mut rng);
    let data = fg.iter().zip(noise.data()).map(|(&m, &z)| m as u8 as f64 + sigma * z).collect();
    (Tensor::from_parts(vec![1, n, n], data), fg)
}

/// How a smoother changed a two-region field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeReport {
    /// `1 − std_after / std_before` of the pooled within-region spread.
    pub std_reduction: f64,
    /// `gap_after / gap_before`.
    pub gap_retention: f64,
}

pub fn edge_report<T: Real>(before: &[T], after: &[T], fg: &[bool]) -> Result<EdgeReport> {
    let (a, b) = (region_stats(before, fg)?, region_stats(after, fg)?);
    Ok(EdgeReport { std_reduction: 1.0 - b.within_std / a.within_std, gap_retention: b.gap / a.gap })
}

/// The narrowest Gaussian blur whose within-region std reduction reaches
/// `target`: a scan over σ in steps of 0.05 up to 16, then bisection inside
/// the first bracket. The reduction is not monotone in σ (a wide blur
/// smears the edge into both regions), hence the scan. Returns σ and the
/// blurred field.
pub fn blur_matching<T: Real>(u: &Tensor<T>, fg: &[bool], target: f64) -> Result<(f64, Tensor<T>)> {
    let reduction = |sigma: f64| -> Result<(f64, Tensor<T>)> {
        let v = gaussian_blur(u, sigma)?;
        Ok((edge_report(u.data(), v.data(), fg)?.std_reduction, v))
    };
    let mut lo = 0.0;
    let mut hi = None;
    for i in 1..=320 {
        let sigma = 0.05 * i as f64;
        if reduction(sigma)?.0 >= target {
            hi = Some(sigma);
            break;
        }
        lo = sigma;
    }
    let mut hi = hi.ok_or_else(|| config_err!("no blur reaches a std reduction of {target}"))?;
    if lo > 0.0 {
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if reduction(mid)?.0 >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    Ok((hi, reduction(hi)?.1))
}

/// One row of a denoising trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Pooled variance over pixels at least [`TRACE_MARGIN`] away from
    /// the boundary.
    pub flat_variance: f64,
    /// Difference of the region means within the boundary band.
    pub edge_contrast: f64,
}

pub const TRACE_MARGIN: usize = 2;

/// Otsu threshold of values in `[0, 1]` over a 256-bin histogram.
pub fn otsu_threshold<T: Real>(u: &[T]) -> f64 {
    let mut hist = [0usize; 256];
    for &v in u {
        hist[(v.as_f64().clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = u.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_t) = (0.0, 0.0, -1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f64 + 0.5) / 255.0
}

/// Regions for a trace: foreground by Otsu on a σ=2 blur of `u`, then each
/// pixel tagged as flat (no label change within the margin) or boundary.
fn trace_regions<T: Real>(u: &Tensor<T>) -> Result<(Vec<bool>, Vec<bool>)> {
    let (planes, h, w) = planes_hw(u.shape())?;
    if planes != 1 {
        return Err(dim_err!("trace expects a single plane, got {:?}", u.shape()));
    }
    let smooth = gaussian_blur(u, 2.0)?;
    let t = otsu_threshold(smooth.data());
    let fg: Vec<bool> = smooth.data().iter().map(|v| v.as_f64() > t).collect();
    let r = TRACE_MARGIN as isize;
    let flat = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| fg[clamp_idx(y + dy, h) * w + clamp_idx(x + dx, w)] == fg[i])
            })
        })
        .collect();
    Ok((fg, flat))
}

fn trace_row<T: Real>(step: usize, u: &[T], fg: &[bool], flat: &[bool]) -> TraceRow {
    let mean_var = |keep: &dyn Fn(usize) -> bool| -> (f64, f64, usize) {
        let v: Vec<f64> = (0..u.len()).filter(|&i| keep(i)).map(|i| u[i].as_f64()).collect();
        if v.is_empty() {
            return (0.0, 0.0, 0);
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>(), v.len())
    };
    let (_, ss1, n1) = mean_var(&|i| flat[i] && fg[i]);
    let (_, ss0, n0) = mean_var(&|i| flat[i] && !fg[i]);
    let (m1, _, b1) = mean_var(&|i| !flat[i] && fg[i]);
    let (m0, _, b0) = mean_var(&|i| !flat[i] && !fg[i]);
    TraceRow {
        step,
        flat_variance: if n0 + n1 == 0 { 0.0 } else { (ss0 + ss1) / (n0 + n1) as f64 },
        edge_contrast: if b0 == 0 || b1 == 0 { 0.0 } else { m1 - m0 },
    }
}

/// Runs `steps` iterations of `scheme` on a `1×H×W` image and records a
/// [`TraceRow`] before the first step and after each one. Regions are fixed
/// from the input.
pub fn denoise_trace<T: Real>(
    u: &Tensor<T>,
    scheme: Scheme,
    k: f64,
    dt: f64,
    steps: usize,
) -> Result<(Tensor<T>, Vec<TraceRow>)> {
    let (fg, flat) = trace_regions(u)?;
    let mut cur = u.clone();
    let mut rows = vec![trace_row(0, cur.data(), &fg, &flat)];
    for step in 1..=steps {
        cur = scheme.step(&cur, k, dt)?;
        rows.push(trace_row(step, cur.data(), &fg, &flat));
    }
    Ok((cur, rows))
}

const SOBEL_EPS: f64 = 1e-6;

fn sobel_taps() -> ([[i32; 3]; 3], [[i32; 3]; 3]) {
    ([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], [[-1, -2, -1], [0, 0, 0], [1, 2, 1]])
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn sobel_xy<T: Real>(src: &[T], h: usize, w: usize, y: usize, x: usize) -> (T, T) {
    let (kx, ky) = sobel_taps();
    let (mut gx, mut gy) = (T::zero(), T::zero());
    for (j, (rx, ry)) in kx.iter().zip(&ky).enumerate() {
        for i in 0..3 {
            let yy = clamp_idx(y as isize + j as isize - 1, h);
            let xx = clamp_idx(x as isize + i as isize - 1, w);
            let v = src[yy * w + xx];
            gx += T::lit(rx[i] as f64) * v;
            gy += T::lit(ry[i] as f64) * v;
        }
    }
    (gx, gy)
}

/// `√(gx² + gy² + ε)` of the 3×3 Sobel responses, replicate borders.
pub(crate) fn sobel_forward<T: Real>(u: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let eps = T::lit(SOBEL_EPS);
    let mut out = vec![T::zero(); u.len()];
    for p in 0..planes {
        let src = &u[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (gx, gy) = sobel_xy(src, h, w, y, x);
                out[p * h * w + y * w + x] = (gx * gx + gy * gy + eps).sqrt();
            }
        }
    }
    out
}

pub(crate) fn sobel_backward<T: Real>(u: &[T], mag: &[T], planes: usize, h: usize, w: usize, dy: &[T]) -> Vec<T> {
    let (kx, ky) = sobel_taps();
    let mut dx = vec![T::zero(); u.len()];
    for p in 0..planes {
        let off = p * h * w;
        let src = &u[off..off + h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (gx, gy) = sobel_xy(src, h, w, y, x);
                let (dgx, dgy) = (dy[off + i] * gx / mag[off + i], dy[off + i] * gy / mag[off + i]);
                for j in 0..3 {
                    for t in 0..3 {
                        let yy = clamp_idx(y as isize + j as isize - 1, h);
                        let xx = clamp_idx(x as isize + t as isize - 1, w);
                        dx[off + yy * w + xx] += T::lit(kx[j][t] as f64) * dgx + T::lit(ky[j][t] as f64) * dgy;
                    }
                }
            }
        }
    }
    dx
}

/// Eager per-plane Sobel gradient magnitude.
pub fn sobel_magnitude<T: Real>(u: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = planes_hw(u.shape())?;
    Ok(Tensor::from_parts(u.shape().to_vec(), sobel_forward(u.data(), planes, h, w)))
}

/// What precedes the residual convolutions of a [`PmdBlock`].
#[derive(Debug, Clone, PartialEq)]
pub enum Preprocess {
    /// DWT-domain diffusion with the given settings.
    Diffuse(DiffusionConfig, PmdGradient),
    /// Nothing; the block is a plain ResNet basic block.
    Identity,
    /// Concatenate the Sobel gradient magnitude as extra channels.
    Sobel,
}

/// conv → norm, the unit every convolutional path uses.
#[derive(Debug, Clone)]
pub struct ConvNorm {
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv = store.uniform(format!("{name}.conv"), &[c_out, c_in, ksize, ksize], c_in * ksize * ksize, rng);
        let gamma = store.ones(format!("{name}.gamma"), &[c_out]);
        let beta = store.zeros(format!("{name}.beta"), &[c_out]);
        ConvNorm { conv, gamma, beta, stride, pad: ksize / 2 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.conv], self.stride, self.pad)?;
        tape.norm(y, p[self.gamma], p[self.beta], ChannelAxis::First)
    }
}

/// Diffusion step followed by a ResNet basic block:
/// `relu(norm(conv(relu(norm(conv(d))))) + skip(d))` with `d` the
/// preprocessed input.
#[derive(Debug, Clone)]
pub struct PmdBlock {
    pub pre: Preprocess,
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
    /// 1×1 projection, present iff channels or stride change.
    pub proj: Option<ConvNorm>,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl PmdBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        pre: Preprocess,
        rng: &mut R,
    ) -> Self {
        let conv_in = if pre == Preprocess::Sobel { 2 * c_in } else { c_in };
        let conv1 = ConvNorm::new(store, &format!("{name}.conv1"), conv_in, c_out, 3, stride, rng);
        let conv2 = ConvNorm::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng);
        let proj = (c_in != c_out || stride != 1)
            .then(|| ConvNorm::new(store, &format!("{name}.proj"), c_in, c_out, 1, stride, rng));
        PmdBlock { pre, conv1, conv2, proj, c_in, c_out, stride }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, u: Var) -> Result<Var> {
        let shape = tape.shape(u).to_vec();
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(dim_err!("block expects N×{}×H×W input, got {:?}", self.c_in, shape));
        }
        let (h, w) = (shape[2], shape[3]);
        let (body_in, skip_in) = match &self.pre {
            // A 1×1 field carries no spatial gradient, so diffusion is the identity there.
            Preprocess::Diffuse(_, _) if h == 1 && w == 1 => (u, u),
            Preprocess::Diffuse(cfg, grad) => {
                let mut d = u;
                for _ in 0..cfg.steps {
                    d = tape.pmd_dwt(d, cfg, *grad)?;
                }
                (d, d)
            }
            Preprocess::Identity => (u, u),
            Preprocess::Sobel => {
                let s = tape.sobel(u)?;
                (tape.concat_channels(&[u, s])?, u)
            }
        };
        let y = self.conv1.forward(tape, p, body_in)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, p, y)?;
        let skip = match &self.proj {
            Some(proj) => proj.forward(tape, p, skip_in)?,
            None => skip_in,
        };
        let y = tape.add(y, skip)?;
        Ok(tape.relu(y))
    }
}

/// Eager convenience wrapper: runs one block on a fixed input without
/// recording gradients.
pub fn pmd_block_forward<T: Real>(u: &Tensor<T>, block: &PmdBlock, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(u.clone());
    let y = block.forward(&mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}
