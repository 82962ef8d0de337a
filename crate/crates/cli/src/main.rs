//! `pmtk`: denoising, wavelet, data, training and benchmarking commands.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
//! writes its resolved flags as `key=value` lines next to its outputs;
//! `pmtk rerun --config <file>` replays such a file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use pmtk::bench::{model_bench, scan_csv, scan_scaling};
use pmtk::data::{
    load_image, read_dataset, save_image, select, synth_dataset, write_dataset, Split, SynthConfig,
};
use pmtk::gradcheck::{check_case_both, model_case, op_cases, tolerance, Case};
use pmtk::model::{
    ablate, argmax_classes, metrics, mean_metrics, read_pairs, train_toy, write_pairs, AblationConfig,
    ModelConfig, PMamba, StagePlan, TrainConfig, Variant, ABLATION_HEADER,
};
use pmtk::pmd::{denoise_trace, Scheme, FD_MAX_DT};
use pmtk::ssm::Mixer;
use pmtk::{dwt2, Precision, Real, Tensor};

const PRECISION_ENV: &str = "PMTK_PRECISION";
const RUN_FILE: &str = "run.txt";

#[derive(Parser)]
#[command(name = "pmtk", version, about = "Wavelet diffusion and state-space segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Diffuse a PGM image and trace flat-region variance and edge contrast.
    Denoise(DenoiseArgs),
    /// Write the four Haar subbands of a PGM image.
    Dwt(DwtArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train the toy network on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Time the scan against attention and the network forward pass.
    Bench(BenchArgs),
    /// Finite-difference checks of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Train full, no-pmd and sobel variants on shared data and seeds.
    Ablate(AblateArgs),
    /// Replay a run from its resolved config file.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["fd", "dwt-attenuate", "dwt-aswritten"])]
    mode: String,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    /// Time step of the `fd` scheme.
    #[arg(long, default_value_t = 0.2)]
    dt: f64,
}

#[derive(Args)]
struct DwtArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory receiving ll.pgm, lh.pgm, hl.pgm and hh.pgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    noise_sigma: f64,
    #[arg(long, default_value_t = SynthConfig::default().shadow_prob)]
    shadow_prob: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the checkpoint and the log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value = "full", value_parser = ["full", "no-pmd", "sobel"])]
    variant: String,
    #[arg(long, default_value = "default", value_parser = ["default", "micro"])]
    plan: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Operation cases on one seed, without the full network.
    #[arg(long)]
    fast: bool,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Optional CSV of per-family errors.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0.5)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 320)]
    count: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    config: PathBuf,
}

/// A failure caused by the flags rather than by the run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Resolved flags of one run, in the order they are written.
struct RunConfig {
    command: &'static str,
    precision: Precision,
    pairs: Vec<(String, String)>,
}

impl RunConfig {
    fn new(command: &'static str, precision: Precision) -> Self {
        RunConfig { command, precision, pairs: Vec::new() }
    }

    fn set(mut self, key: &str, value: impl ToString) -> Self {
        self.pairs.push((key.to_string(), value.to_string()));
        self
    }

    fn path(self, key: &str, p: &Path) -> Self {
        let abs = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        self.set(key, abs.display())
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut all = vec![
            ("command".to_string(), self.command.to_string()),
            ("precision".to_string(), self.precision.name().to_string()),
        ];
        all.extend(self.pairs.iter().cloned());
        fs::write(path, write_pairs(&all)).with_context(|| format!("writing {}", path.display()))
    }
}

/// `dir/name.ext` → `dir/name.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn precision_from_env() -> anyhow::Result<Precision> {
    match std::env::var(PRECISION_ENV) {
        Ok(v) => v.parse().map_err(|e: String| usage(format!("{PRECISION_ENV}: {e}"))),
        Err(_) => Ok(Precision::F32),
    }
}

macro_rules! dispatch {
    ($prec:expr, $f:ident($($arg:expr),*)) => {
        match $prec {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn denoise<T: Real>(a: &DenoiseArgs, prec: Precision) -> anyhow::Result<()> {
    let scheme: Scheme = a.mode.parse().map_err(usage)?;
    if !(a.k > 0.0) {
        return Err(usage("--k must be positive"));
    }
    if scheme == Scheme::Fd && !(a.dt > 0.0 && a.dt <= FD_MAX_DT) {
        return Err(usage(format!("--dt must be in (0, {FD_MAX_DT}] for the fd scheme")));
    }
    let u: Tensor<T> = load_image(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let (out, rows) = denoise_trace(&u, scheme, a.k, a.dt, a.steps)?;
    ensure_parent(&a.out)?;
    save_image(&a.out, &out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut csv = String::from("step,flat_variance,edge_contrast\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.8},{:.8}\n", r.step, r.flat_variance, r.edge_contrast));
    }
    fs::write(sibling(&a.out, "trace.csv"), csv)?;
    RunConfig::new("denoise", prec)
        .path("in", &a.input)
        .path("out", &a.out)
        .set("mode", &a.mode)
        .set("steps", a.steps)
        .set("k", a.k)
        .set("dt", a.dt)
        .write(&sibling(&a.out, RUN_FILE))
}

/// Subbands are mapped into `[0, 1]`: `LL/2` and `(D + 1)/2`.
fn dwt<T: Real>(a: &DwtArgs, prec: Precision) -> anyhow::Result<()> {
    let u: Tensor<T> = load_image(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let s = dwt2(&u)?;
    fs::create_dir_all(&a.out)?;
    let half = T::lit(0.5);
    save_image(&a.out.join("ll.pgm"), &s.ll.map(|v| v * half))?;
    for (name, band) in [("lh", &s.lh), ("hl", &s.hl), ("hh", &s.hh)] {
        save_image(&a.out.join(format!("{name}.pgm")), &band.map(|v| (v + T::one()) * half))?;
    }
    RunConfig::new("dwt", prec)
        .path("in", &a.input)
        .path("out", &a.out)
        .set("ll_map", "x/2")
        .set("detail_map", "(x+1)/2")
        .write(&a.out.join(RUN_FILE))
}

fn synth<T: Real>(a: &SynthArgs, prec: Precision) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        count: a.count,
        size: a.size,
        noise_sigma: a.noise_sigma,
        shadow_prob: a.shadow_prob,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = synth_dataset::<T>(&cfg)?;
    write_dataset(&a.out, &data)?;
    RunConfig::new("synth", prec)
        .set("count", a.count)
        .set("seed", a.seed)
        .path("out", &a.out)
        .set("size", a.size)
        .set("noise_sigma", a.noise_sigma)
        .set("shadow_prob", a.shadow_prob)
        .write(&a.out.join(RUN_FILE))
}

fn train<T: Real>(a: &TrainArgs, prec: Precision) -> anyhow::Result<()> {
    if a.batch_size == 0 || !(a.lr > 0.0) || !(0.0..1.0).contains(&a.momentum) {
        return Err(usage("need --batch-size ≥ 1, --lr > 0 and --momentum in [0, 1)"));
    }
    let data = read_dataset::<T>(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let size = data[0].0.hw().0;
    let plan = if a.plan == "micro" { StagePlan::micro() } else { StagePlan::default() };
    let head_width = if a.plan == "micro" { ModelConfig::micro().head_width } else { ModelConfig::default().head_width };
    let variant: Variant = a.variant.parse().map_err(|e: pmtk::Error| usage(e.to_string()))?;
    let mcfg = ModelConfig { image_size: size, plan, head_width, variant, ..ModelConfig::default() };
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        momentum: a.momentum,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let (net, mut store) = PMamba::seeded::<T>(mcfg, a.seed)?;
    let (train, val) = (select(&data, Split::Train), select(&data, Split::Val));
    fs::create_dir_all(&a.out)?;
    let mut log = fs::File::create(a.out.join("train_log.csv"))?;
    let history = train_toy(&net, &mut store, &train, &val, &tcfg, Some(&mut log as &mut dyn Write))?;
    net.save_checkpoint(&store, &a.out.join("checkpoint"))?;
    if let Some(last) = history.last() {
        println!("epoch {} val_dice={:.4}", last.epoch, last.val.dice);
    }
    RunConfig::new("train", prec)
        .path("data", &a.data)
        .set("epochs", a.epochs)
        .set("seed", a.seed)
        .path("out", &a.out)
        .set("batch_size", a.batch_size)
        .set("lr", a.lr)
        .set("momentum", a.momentum)
        .set("variant", &a.variant)
        .set("plan", &a.plan)
        .write(&a.out.join(RUN_FILE))
}

fn eval<T: Real>(a: &EvalArgs, prec: Precision) -> anyhow::Result<()> {
    let split: Split = a.split.parse().map_err(usage)?;
    let (net, store) = PMamba::load_checkpoint::<T>(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let data = read_dataset::<T>(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let samples = select(&data, split);
    if samples.is_empty() {
        bail!("split `{split}` of {} is empty", a.data.display());
    }
    let mut csv = String::from("id,precision,recall,dice\n");
    let mut all = Vec::with_capacity(samples.len());
    for s in &samples {
        let (h, w) = s.hw();
        let logits = net.predict(&store, &s.image.clone().reshape(&[1, 1, h, w])?)?;
        let m = metrics(&argmax_classes(&logits)?, &s.mask)?;
        csv.push_str(&format!("{},{:.6},{:.6},{:.6}\n", s.id, m.precision, m.recall, m.dice));
        all.push(m);
    }
    let mean = mean_metrics(&all);
    csv.push_str(&format!("mean,{:.6},{:.6},{:.6}\n", mean.precision, mean.recall, mean.dice));
    ensure_parent(&a.out)?;
    fs::write(&a.out, csv)?;
    println!("dice={:.6}", mean.dice);
    RunConfig::new("eval", prec)
        .path("checkpoint", &a.checkpoint)
        .path("data", &a.data)
        .set("split", &a.split)
        .path("out", &a.out)
        .write(&sibling(&a.out, RUN_FILE))
}

fn bench<T: Real>(a: &BenchArgs, prec: Precision) -> anyhow::Result<()> {
    if a.reps == 0 || a.batch == 0 {
        return Err(usage("--reps and --batch must be positive"));
    }
    let mcfg = ModelConfig { image_size: a.image_size, ..ModelConfig::default() };
    mcfg.validate().map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(&a.out)?;
    let report = scan_scaling(a.reps, a.seed)?;
    fs::write(a.out.join("scan_scaling.csv"), scan_csv(&report))?;
    println!(
        "slope scan={:.3} attention={:.3}",
        report.slope(Mixer::Scan),
        report.slope(Mixer::Attention)
    );
    let m = model_bench::<T>(&mcfg, a.batch, a.reps, a.seed)?;
    fs::write(a.out.join("model.csv"), m.csv())?;
    println!("params={} forward_ms={:.2}", m.params, m.mean_forward_ms);
    RunConfig::new("bench", prec)
        .path("out", &a.out)
        .set("reps", a.reps)
        .set("batch", a.batch)
        .set("image_size", a.image_size)
        .set("seed", a.seed)
        .write(&a.out.join(RUN_FILE))
}

/// First word of a case name, e.g. `conv2d` for `conv2d k3 s2`.
fn family(case: &Case) -> String {
    case.name.split_whitespace().next().unwrap_or_default().to_string()
}

fn gradcheck(a: &GradcheckArgs, prec: Precision) -> anyhow::Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let seeds = if a.fast { 1 } else { a.seeds };
    // (family, precision) -> worst error
    let mut worst: BTreeMap<(String, &'static str), f64> = BTreeMap::new();
    let mut record = |case: &Case, seed: u64| -> anyhow::Result<()> {
        let fam = if case.name.starts_with("full model") { "model".to_string() } else { family(case) };
        let [r32, r64] = check_case_both(case, seed)?;
        for (p, err) in [("f32", r32.rel_err), ("f64", r64.rel_err)] {
            let e = worst.entry((fam.clone(), p)).or_insert(0.0);
            *e = e.max(err);
        }
        Ok(())
    };
    for seed in 0..seeds {
        for case in op_cases(seed) {
            record(&case, seed)?;
        }
        if !a.fast {
            record(&model_case(seed)?, seed)?;
        }
    }
    let mut csv = String::from("family,precision,max_rel_err,tolerance,pass\n");
    let mut failed = 0;
    for ((fam, p), err) in &worst {
        let tol = if *p == "f32" { tolerance::<f32>() } else { tolerance::<f64>() };
        let pass = *err <= tol;
        failed += usize::from(!pass);
        println!("{fam:<16} {p} max_rel_err={err:.3e} {}", if pass { "ok" } else { "FAIL" });
        csv.push_str(&format!("{fam},{p},{err:e},{tol:e},{pass}\n"));
    }
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        fs::write(out, csv)?;
        let mut cfg = RunConfig::new("gradcheck", prec).set("seeds", a.seeds).path("out", out);
        if a.fast {
            cfg = cfg.set("fast", true);
        }
        cfg.write(&sibling(out, RUN_FILE))?;
    }
    if failed > 0 {
        bail!("{failed} operation families exceed their tolerance");
    }
    Ok(())
}

fn ablation<T: Real>(a: &AblateArgs, prec: Precision) -> anyhow::Result<()> {
    let data = SynthConfig { count: a.count, noise_sigma: a.noise_sigma, ..SynthConfig::default() };
    data.validate().map_err(|e| usage(e.to_string()))?;
    let cfg = AblationConfig {
        variants: Variant::ALL.to_vec(),
        seeds: (0..a.seeds).collect(),
        data,
        model: ModelConfig::default(),
        train: TrainConfig { epochs: a.epochs, ..TrainConfig::default() },
    };
    fs::create_dir_all(&a.out)?;
    let mut csv = fs::File::create(a.out.join("ablation.csv"))?;
    writeln!(csv, "{ABLATION_HEADER}")?;
    let mut io_err = None;
    ablate::<T>(&cfg, |row| {
        println!("{}", row.csv_row());
        if let Err(e) = writeln!(csv, "{}", row.csv_row()).and_then(|_| csv.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    RunConfig::new("ablate", prec)
        .path("out", &a.out)
        .set("seeds", a.seeds)
        .set("noise_sigma", a.noise_sigma)
        .set("count", a.count)
        .set("epochs", a.epochs)
        .write(&a.out.join(RUN_FILE))
}

/// Rebuilds the command line recorded in a run file.
fn rerun(a: &RerunArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut pairs = read_pairs(&text)?;
    let command = pairs.remove("command").ok_or_else(|| usage("run file lacks `command`"))?;
    let precision: Precision = match pairs.remove("precision") {
        Some(p) => p.parse().map_err(usage)?,
        None => Precision::F32,
    };
    pairs.remove("ll_map");
    pairs.remove("detail_map");
    let mut argv = vec!["pmtk".to_string(), command];
    for (k, v) in pairs {
        let flag = format!("--{}", k.replace('_', "-"));
        match v.as_str() {
            "true" => argv.push(flag),
            "false" => {}
            _ => argv.extend([flag, v]),
        }
    }
    let cli = Cli::try_parse_from(&argv).map_err(|e| usage(e.to_string()))?;
    if matches!(cli.cmd, Command::Rerun(_)) {
        return Err(usage("a run file cannot replay another run file"));
    }
    run(cli.cmd, precision)
}

fn run(cmd: Command, prec: Precision) -> anyhow::Result<()> {
    match &cmd {
        Command::Denoise(a) => dispatch!(prec, denoise(a, prec)),
        Command::Dwt(a) => dispatch!(prec, dwt(a, prec)),
        Command::Synth(a) => dispatch!(prec, synth(a, prec)),
        Command::Train(a) => dispatch!(prec, train(a, prec)),
        Command::Eval(a) => dispatch!(prec, eval(a, prec)),
        Command::Bench(a) => dispatch!(prec, bench(a, prec)),
        Command::Gradcheck(a) => gradcheck(a, prec),
        Command::Ablate(a) => dispatch!(prec, ablation(a, prec)),
        Command::Rerun(a) => rerun(a),
    }
}

/// Parses the command line; on a usage error prints the message and the
/// usage of the offending subcommand, then exits with 2.
fn parse_cli() -> Cli {
    match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            if e.render().to_string().contains("Usage:") {
                std::process::exit(2);
            }
            let mut root = Cli::command();
            let sub = std::env::args().nth(1).unwrap_or_default();
            let usage = match root.find_subcommand_mut(&sub) {
                Some(c) => c.clone().bin_name(format!("pmtk {sub}")).render_usage(),
                None => root.render_usage(),
            };
            eprintln!("\n{usage}");
            std::process::exit(2);
        }
    }
}

fn main() -> ExitCode {
    let cli = parse_cli();
    let result = precision_from_env().and_then(|p| run(cli.cmd, p));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
