//! Echo-like synthetic images: a dark, deformed ellipse ("ventricle") on a
//! brighter tissue background, multiplicative Rayleigh speckle and an
//! optional acoustic shadow.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::Sample;
use crate::error::{config_err, Result};
use crate::tensor::{Real, Tensor};

/// Mean of a unit-scale Rayleigh variable, `√(π/2)`.
const RAYLEIGH_MEAN: f64 = 1.253_314_137_315_500_3;

/// Brightness step between tissue and cavity.
pub const CONTRAST: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    /// Speckle strength σ in `x·(1 + σ·η)`.
    pub noise_sigma: f64,
    pub shadow_prob: f64,
    /// Largest boundary perturbation, as a fraction of the radius.
    pub deform: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { seed: 0, count: 64, size: 64, noise_sigma: 0.3, shadow_prob: 0.3, deform: 0.15 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(config_err!("sample count must be at least 1"));
        }
        if self.size < 8 {
            return Err(config_err!("image size {} is too small", self.size));
        }
        if !(0.0..=1.0).contains(&self.shadow_prob) {
            return Err(config_err!("shadow probability {} is outside [0, 1]", self.shadow_prob));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..0.5).contains(&self.deform) {
            return Err(config_err!("noise_sigma must be ≥ 0 and deform in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Shape and lighting of one phantom, drawn before rasterisation.
#[derive(Debug, Clone)]
struct Scene {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    lobes: f64,
    amp: f64,
    phase: f64,
    tissue: f64,
    grad: (f64, f64),
    shadow: Option<Shadow>,
}

#[derive(Debug, Clone)]
struct Shadow {
    apex: (f64, f64),
    dir: f64,
    half_angle: f64,
    gain: f64,
}

impl Scene {
    fn draw<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Scene {
        let s = cfg.size as f64;
        let a = rng.random_range(0.16..0.32) * s;
        let b = rng.random_range(0.16..0.32) * s;
        let reach = a.max(b) * (1.0 + cfg.deform) + 1.0;
        let lo = reach.min(s / 2.0);
        let cx = rng.random_range(lo..=s - lo);
        let cy = rng.random_range(lo..=s - lo);
        let theta = rng.random_range(0.0..PI);
        let lobes = rng.random_range(2..=4) as f64;
        let amp = if cfg.deform > 0.0 { rng.random_range(0.0..cfg.deform) } else { 0.0 };
        let phase = rng.random_range(0.0..TAU);
        let tissue = rng.random_range(0.5..0.8);
        let gdir = rng.random_range(0.0..TAU);
        let grad = (0.06 * gdir.cos(), 0.06 * gdir.sin());
        let shadow = (rng.random::<f64>() < cfg.shadow_prob).then(|| {
            // probe at the top edge; the wedge passes through a point of the boundary
            let apex = (rng.random_range(0.25..0.75) * s, -1.0);
            let phi = rng.random_range(0.0..TAU);
            let target = (cx + a * phi.cos(), cy + b * phi.sin());
            Shadow {
                apex,
                dir: (target.1 - apex.1).atan2(target.0 - apex.0),
                half_angle: rng.random_range(0.06..0.12),
                gain: rng.random_range(0.35..0.6),
            }
        });
        Scene { cx, cy, a, b, theta, lobes, amp, phase, tissue, grad, shadow }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        rho < 1.0 + self.amp * (self.lobes * phi + self.phase).sin()
    }

    fn shade(&self, x: f64, y: f64, size: f64) -> f64 {
        let base = self.tissue + self.grad.0 * (x / size - 0.5) + self.grad.1 * (y / size - 0.5);
        let mut v = if self.inside(x, y) { base - CONTRAST } else { base };
        if let Some(sh) = &self.shadow {
            let ang = (y - sh.apex.1).atan2(x - sh.apex.0);
            let mut d = (ang - sh.dir).abs() % TAU;
            if d > PI {
                d = TAU - d;
            }
            if d < sh.half_angle {
                v *= sh.gain;
            }
        }
        v
    }
}

/// Generates one sample; `index` selects the per-sample stream
/// (`seed XOR index`).
pub fn synth_sample<T: Real>(cfg: &SynthConfig, index: usize) -> Sample<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let scene = Scene::draw(cfg, &mut rng);
    let n = cfg.size;
    let s = n as f64;
    let eta = Uniform::new(0.0f64, 1.0).expect("valid range");
    let mut image = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for py in 0..n {
        for px in 0..n {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            mask.push(scene.inside(x, y) as u8);
            let clean = scene.shade(x, y, s);
            // unit Rayleigh by inversion, centred
            let u: f64 = eta.sample(&mut rng);
            let r = (-2.0 * (1.0 - u).ln()).sqrt() - RAYLEIGH_MEAN;
            let noisy = clean * (1.0 + cfg.noise_sigma * r);
            image.push(T::lit(noisy.clamp(0.0, 1.0)));
        }
    }
    Sample {
        id: format!("s{index:05}"),
        image: Tensor::new(&[1, n, n], image).expect("length matches"),
        mask,
    }
}

/// `cfg.count` samples, each from its own derived stream.
pub fn synth_generate<T: Real>(cfg: &SynthConfig) -> Result<Vec<Sample<T>>> {
    cfg.validate()?;
    Ok((0..cfg.count).map(|i| synth_sample(cfg, i)).collect())
}
