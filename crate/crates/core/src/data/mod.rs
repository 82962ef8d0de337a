//! Samples, splits, padding and the on-disk dataset layout.
//!
//! A dataset directory holds `images/<id>.pgm`, `masks/<id>.pgm` (0 or 255)
//! and `manifest.csv` with columns `id,split`.

mod pgm;
mod synth;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use pgm::{decode_pgm, encode_pgm, load_image, load_mask, save_image, save_mask};
pub use synth::{synth_generate, synth_sample, SynthConfig, CONTRAST};

use crate::error::{config_err, data_err, dim_err, format_err, Result};
use crate::kernels::{mirror_index, planes_hw};
use crate::tensor::{Real, Tensor};

/// A `1×H×W` image in `[0, 1]` with its `H×W` binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub image: Tensor<T>,
    pub mask: Vec<u8>,
}

impl<T: Real> Sample<T> {
    pub fn hw(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }

    /// Fraction of foreground pixels.
    pub fn area_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m > 0).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

/// Default train/val/test ratios.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Seeded shuffle, then `floor(n·val)` to validation, `floor(n·test)` to
/// test and the remainder to training.
pub fn split<S: Clone>(items: &[S], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    if items.is_empty() {
        return Err(data_err!("cannot split an empty dataset"));
    }
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(config_err!("split ratios {:?} must be in [0, 1] and sum to 1", ratios));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // guard against 0.1·10 landing just under 1
    let count = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let (n_val, n_test) = (count(va), count(te));
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    let val = pick(&order[..n_val]);
    let test = pick(&order[n_val..n_val + n_test]);
    let train = pick(&order[n_val + n_test..]);
    Ok((train, val, test))
}

/// Mirror-pads the two trailing axes on the bottom and right up to
/// multiples of `m`. Returns the padded tensor and the original `(H, W)`.
pub fn pad_to_multiple<T: Real>(x: &Tensor<T>, m: usize) -> Result<(Tensor<T>, (usize, usize))> {
    if !m.is_power_of_two() {
        return Err(config_err!("padding multiple {m} is not a power of two"));
    }
    let (planes, h, w) = planes_hw(x.shape())?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let mut out = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ph {
            let sy = mirror_index(y as isize, h);
            out.extend((0..pw).map(|xx| src[sy * w + mirror_index(xx as isize, w)]));
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ph;
    shape[r - 1] = pw;
    Ok((Tensor::new(&shape, out)?, (h, w)))
}

/// Keeps the top-left `h×w` of every plane.
pub fn crop<T: Real>(x: &Tensor<T>, (h, w): (usize, usize)) -> Result<Tensor<T>> {
    let (planes, ph, pw) = planes_hw(x.shape())?;
    if h > ph || w > pw {
        return Err(dim_err!("cannot crop {ph}×{pw} to {h}×{w}"));
    }
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let row = p * ph * pw + y * pw;
            out.extend_from_slice(&x.data()[row..row + w]);
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(&shape, out)
}

/// Stacked images `N×1×H×W` and concatenated masks.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub masks: Vec<u8>,
}

pub fn make_batch<T: Real>(samples: &[&Sample<T>]) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| data_err!("empty batch"))?;
    let hw = first.hw();
    let mut masks = Vec::with_capacity(samples.len() * hw.0 * hw.1);
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        if s.hw() != hw || s.image.len() != hw.0 * hw.1 || s.mask.len() != hw.0 * hw.1 {
            return Err(dim_err!("sample {} is not a {}×{} single-channel image with mask", s.id, hw.0, hw.1));
        }
        images.push(s.image.clone().reshape(&[1, hw.0, hw.1])?);
        masks.extend_from_slice(&s.mask);
    }
    Ok(Batch { images: Tensor::stack(&images)?, masks })
}

/// Writes samples with their split labels as a dataset directory.
pub fn write_dataset<T: Real>(dir: &Path, samples: &[(Sample<T>, Split)]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::from("id,split\n");
    for (s, split) in samples {
        let (h, w) = s.hw();
        save_image(&dir.join("images").join(format!("{}.pgm", s.id)), &s.image)?;
        save_mask(&dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask, h, w)?;
        manifest.push_str(&format!("{},{split}\n", s.id));
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Reads a dataset directory in manifest order.
pub fn read_dataset<T: Real>(dir: &Path) -> Result<Vec<(Sample<T>, Split)>> {
    let text = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,split") {
        return Err(format_err!("manifest.csv must start with the header `id,split`"));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (id, split) = line.split_once(',').ok_or_else(|| format_err!("bad manifest line `{line}`"))?;
        let split: Split = split.trim().parse().map_err(|e: String| format_err!("{e}"))?;
        let image: Tensor<T> = load_image(&dir.join("images").join(format!("{id}.pgm")))?;
        let (mask, h, w) = load_mask(&dir.join("masks").join(format!("{id}.pgm")))?;
        if image.shape() != [1, h, w] {
            return Err(format_err!("image and mask of `{id}` differ in size"));
        }
        out.push((Sample { id: id.to_string(), image, mask }, split));
    }
    if out.is_empty() {
        return Err(data_err!("dataset at {} has no samples", dir.display()));
    }
    Ok(out)
}

/// Samples of one split.
pub fn select<T: Clone>(all: &[(Sample<T>, Split)], which: Split) -> Vec<Sample<T>> {
    all.iter().filter(|(_, s)| *s == which).map(|(x, _)| x.clone()).collect()
}

/// Generates a dataset and assigns default splits.
pub fn synth_dataset<T: Real>(cfg: &SynthConfig) -> Result<Vec<(Sample<T>, Split)>> {
    let samples = synth_generate::<T>(cfg)?;
    let ids: Vec<usize> = (0..samples.len()).collect();
    let (train, val, test) = split(&ids, SPLIT_RATIOS, cfg.seed)?;
    let mut label = vec![Split::Train; samples.len()];
    for (set, tag) in [(&train, Split::Train), (&val, Split::Val), (&test, Split::Test)] {
        for &i in set {
            label[i] = tag;
        }
    }
    Ok(samples.into_iter().zip(label).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let ten: Vec<u32> = (0..10).collect();
        let (a, b, c) = split(&ten, SPLIT_RATIOS, 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let mut all: Vec<u32> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, ten);

        let (a, b, c) = split(&[7u8], SPLIT_RATIOS, 0).unwrap();
        assert_eq!((a, b.len(), c.len()), (vec![7], 0, 0));
        assert!(matches!(split::<u8>(&[], SPLIT_RATIOS, 0), Err(crate::Error::Data(_))));
        assert!(matches!(split(&ten, (0.5, 0.1, 0.1), 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn split_is_seeded() {
        let xs: Vec<u32> = (0..50).collect();
        assert_eq!(split(&xs, SPLIT_RATIOS, 9).unwrap(), split(&xs, SPLIT_RATIOS, 9).unwrap());
        assert_ne!(split(&xs, SPLIT_RATIOS, 9).unwrap().1, split(&xs, SPLIT_RATIOS, 10).unwrap().1);
    }

    #[test]
    fn padding_and_crop() {
        let x = Tensor::<f32>::from_fn(&[1, 60, 50], |i| i as f32);
        let (p, hw) = pad_to_multiple(&x, 32).unwrap();
        assert_eq!(p.shape(), &[1, 64, 64]);
        assert_eq!(hw, (60, 50));
        assert_eq!(crop(&p, hw).unwrap(), x);
        // reflection without repeating the edge
        assert_eq!(p.data()[50], x.data()[48]);

        let sq = Tensor::<f32>::zeros(&[1, 64, 64]);
        assert_eq!(pad_to_multiple(&sq, 32).unwrap().0, sq);
        let c = Tensor::<f64>::full(&[2, 5, 3], 0.7);
        assert!(pad_to_multiple(&c, 8).unwrap().0.data().iter().all(|&v| v == 0.7));
        assert!(pad_to_multiple(&c, 12).is_err());
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let cfg = SynthConfig { count: 10, seed: 5, ..SynthConfig::default() };
        let ds = synth_dataset::<f32>(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        for ((a, sa), (b, sb)) in ds.iter().zip(&back) {
            assert_eq!((a.id.as_str(), sa), (b.id.as_str(), sb));
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 255.0);
        }
        assert_eq!(select(&back, Split::Val).len(), 1);
    }
}
