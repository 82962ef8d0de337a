//! Timing and memory tables for the `bench` command.

use std::fs;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::model::{ModelConfig, PMamba};
use crate::ssm::{scan_complexity_probe, Mixer, ProbeReport, STATE_DIM};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

pub const SCAN_LENGTHS: [usize; 4] = [256, 512, 1024, 2048];
pub const SCAN_WIDTH: usize = 16;

pub const SCAN_HEADER: &str = "L,mixer,mean_ms,std_ms,median_ms";
pub const MODEL_HEADER: &str = "params,batch,image_size,mean_forward_ms,tape_bytes,peak_rss_kib";

/// Scan and attention timings over [`SCAN_LENGTHS`].
pub fn scan_scaling(reps: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scan_complexity_probe(&SCAN_LENGTHS, SCAN_WIDTH, STATE_DIM, reps, &[Mixer::Scan, Mixer::Attention], &mut rng)
}

pub fn scan_csv(report: &ProbeReport) -> String {
    let mut s = format!("{SCAN_HEADER}\n");
    for r in &report.rows {
        s.push_str(&format!("{},{},{:.4},{:.4},{:.4}\n", r.l, r.mixer.name(), r.mean_ms, r.std_ms, r.median_ms));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBench {
    pub params: usize,
    pub batch: usize,
    pub image_size: usize,
    pub mean_forward_ms: f64,
    /// Bytes held by the values of one recorded forward pass.
    pub tape_bytes: usize,
    /// Process high-water mark, when the platform reports it.
    pub peak_rss_kib: Option<u64>,
}

impl ModelBench {
    pub fn csv(&self) -> String {
        let rss = self.peak_rss_kib.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{MODEL_HEADER}\n{},{},{},{:.3},{},{rss}\n",
            self.params, self.batch, self.image_size, self.mean_forward_ms, self.tape_bytes
        )
    }
}

/// `VmHWM` from `/proc/self/status`.
pub fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Forward passes of a freshly initialised network on random input.
pub fn model_bench<T: Real>(cfg: &ModelConfig, batch: usize, reps: usize, seed: u64) -> Result<ModelBench> {
    if batch == 0 || reps == 0 {
        return Err(config_err!("batch and repetitions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, store) = PMamba::new::<T, _>(cfg.clone(), &mut rng)?;
    let s = cfg.image_size;
    let x = Tensor::<T>::rand_uniform(&[batch, cfg.in_channels, s, s], 0.0, 1.0, &mut rng);
    let mut tape_bytes = 0;
    let mut run = || -> Result<()> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let v = tape.constant(x.clone());
        net.forward(&mut tape, &p, v)?;
        tape_bytes = tape.value_bytes();
        Ok(())
    };
    run()?;
    let t0 = Instant::now();
    for _ in 0..reps {
        run()?;
    }
    let mean_forward_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
    Ok(ModelBench {
        params: store.scalar_count(),
        batch,
        image_size: s,
        mean_forward_ms,
        tape_bytes,
        peak_rss_kib: peak_rss_kib(),
    })
}
