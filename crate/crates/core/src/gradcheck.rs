//! Central-difference gradient checks.
//!
//! The error of an analytic gradient `a` against a numeric estimate `n` is
//! `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the checked entries of all inputs
//! taken as one vector, skipping entries where both magnitudes fall below
//! [`TINY`]. Elementwise or per-input ratios are not used because rounding
//! in the difference quotient is an absolute error of order `ε·|L|/h`,
//! which swamps any entry or tensor whose gradient happens to be small.

use std::any::Any;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batch, synth_generate, SynthConfig};
use crate::error::Result;
use crate::kernels::ChannelAxis;
use crate::model::{total_loss, LossWeights, ModelConfig, PMamba};
use crate::params::Bound;
use crate::pmd::{DiffusionConfig, DwtMode, PmdGradient};
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Real, Tensor};

/// Entries with both magnitudes below this are ignored.
pub const TINY: f64 = 1e-6;

/// Central-difference step. Quotients are always formed in `f64`, so one
/// step serves both precisions.
pub const STEP: f64 = 1e-6;

/// Pass threshold for a precision.
pub fn tolerance<T: Real>() -> f64 {
    match T::PRECISION {
        Precision::F32 => 1e-3,
        Precision::F64 => 1e-6,
    }
}

/// Central-difference gradient of the scalar function `f` at `x`.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: f64) -> Tensor<T> {
    let idx: Vec<usize> = (0..x.len()).collect();
    let vals = finite_diff_at(&mut f, x, h, &idx);
    Tensor::from_parts(x.shape().to_vec(), vals)
}

/// Central differences for the listed entries of `x` only.
pub fn finite_diff_at<T: Real>(f: &mut impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: f64, idx: &[usize]) -> Vec<T> {
    let mut probe = x.clone();
    idx.iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + T::lit(h);
            let up = f(&probe).as_f64();
            probe.data_mut()[i] = orig - T::lit(h);
            let down = f(&probe).as_f64();
            probe.data_mut()[i] = orig;
            T::lit((up - down) / (2.0 * h))
        })
        .collect()
}

/// Norm-wise relative error, see the module docs.
pub fn relative_error<T: Real>(analytic: &[T], numeric: &[T]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a.as_f64(), n.as_f64());
        if a.abs() < TINY && n.abs() < TINY {
            continue;
        }
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let scale = na.max(nn).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Builds a tape expression from leaf variables.
pub type Builder<T> = Rc<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

/// The same expression for both precisions.
#[derive(Clone)]
pub struct Dual {
    pub f32: Builder<f32>,
    pub f64: Builder<f64>,
}

impl Dual {
    pub fn pick<T: Real>(&self) -> Builder<T> {
        let any: &dyn Any = match T::PRECISION {
            Precision::F32 => &self.f32,
            Precision::F64 => &self.f64,
        };
        any.downcast_ref::<Builder<T>>().expect("precision tag matches type").clone()
    }
}

/// Writes one closure body twice, once per precision. Inside the body `R`
/// names the scalar type; the listed captures are cloned into each copy.
#[macro_export]
macro_rules! dual {
    ([$($cap:ident),*] |$t:ident, $x:ident| $body:expr) => {{
        $crate::gradcheck::Dual {
            f32: {
                $(let $cap = $cap.clone();)*
                #[allow(dead_code)]
                type R = f32;
                let b: $crate::gradcheck::Builder<R> =
                    ::std::rc::Rc::new(move |$t: &mut $crate::Tape<R>, $x: &[$crate::Var]| $body);
                b
            },
            f64: {
                $(let $cap = $cap.clone();)*
                #[allow(dead_code)]
                type R = f64;
                let b: $crate::gradcheck::Builder<R> =
                    ::std::rc::Rc::new(move |$t: &mut $crate::Tape<R>, $x: &[$crate::Var]| $body);
                b
            },
        }
    }};
    (|$t:ident, $x:ident| $body:expr) => {
        $crate::dual!([] |$t, $x| $body)
    };
}

/// Which entries of each input are probed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probes {
    All,
    /// A random subset of at most this many entries.
    AtMost(usize),
    /// A random fraction of the entries, at least one.
    Fraction(f64),
}

impl Probes {
    fn pick<R: Rng + ?Sized>(self, rng: &mut R, n: usize) -> Vec<usize> {
        let m = match self {
            Probes::All => n,
            Probes::AtMost(m) => m.min(n),
            Probes::Fraction(f) => ((n as f64 * f).ceil() as usize).clamp(1, n),
        };
        if m >= n {
            (0..n).collect()
        } else {
            sample(rng, n, m).into_vec()
        }
    }
}

/// One gradient check: inputs, an expression, and the entries to probe.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Dual,
    pub probes: Probes,
}

impl Case {
    pub fn new(name: impl Into<String>, inputs: Vec<Tensor<f64>>, build: Dual) -> Self {
        Case { name: name.into(), inputs, build, probes: Probes::All }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Error over the probed entries of all inputs together.
    pub rel_err: f64,
    pub probes: usize,
}

/// Reduces the expression to a scalar through a fixed random projection,
/// `L = Σ out ⊙ R`, unless it is already scalar.
fn project<T: Real>(tape: &mut Tape<T>, out: Var, r: &Option<Tensor<T>>) -> Result<Var> {
    match r {
        None => Ok(out),
        Some(r) => {
            let rv = tape.constant(r.clone());
            let m = tape.mul(out, rv)?;
            Ok(tape.sum(m))
        }
    }
}

/// Point, projection and probed entries of one check.
struct Plan {
    at: Vec<Tensor<f64>>,
    r: Option<Tensor<f64>>,
    idx: Vec<Vec<usize>>,
}

/// The inputs are rounded through `T`, so an `f32` plan is also a valid
/// point for the `f64` expression.
fn plan<T: Real>(case: &Case, seed: u64) -> Result<Plan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let at: Vec<Tensor<f64>> = case.inputs.iter().map(|t| t.cast::<T>().cast()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = at.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build.f64)(&mut tape, &vars)?;
    let r = (tape.value(out).len() != 1).then(|| Tensor::<f64>::randn(tape.shape(out), &mut rng));
    let idx = at.iter().map(|t| case.probes.pick(&mut rng, t.len())).collect();
    Ok(Plan { at, r, idx })
}

/// Backward pass in precision `T`, read at the probed entries.
fn analytic<T: Real>(case: &Case, plan: &Plan) -> Result<Vec<f64>> {
    let build = case.build.pick::<T>();
    let mut tape = Tape::new();
    let leaves: Vec<Var> = plan.at.iter().map(|t| tape.param(t.cast())).collect();
    let out = build(&mut tape, &leaves)?;
    let loss = project(&mut tape, out, &plan.r.as_ref().map(Tensor::cast))?;
    let grads = tape.backward(loss)?;
    Ok(leaves
        .iter()
        .zip(&plan.idx)
        .flat_map(|(leaf, idx)| {
            let g = grads.get(*leaf);
            idx.iter().map(|&i| g.data()[i].as_f64()).collect::<Vec<_>>()
        })
        .collect())
}

/// Central differences of the `f64` expression at the probed entries.
fn oracle(case: &Case, plan: &Plan) -> Vec<f64> {
    let mut all = Vec::new();
    for (k, idx) in plan.idx.iter().enumerate() {
        let mut f = |x: &Tensor<f64>| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> =
                plan.at.iter().enumerate().map(|(j, v)| t.constant(if j == k { x.clone() } else { v.clone() })).collect();
            let o = (case.build.f64)(&mut t, &vars).expect("expression failed during probing");
            let l = project(&mut t, o, &plan.r).expect("projection failed during probing");
            t.value(l).item()
        };
        all.extend(finite_diff_at(&mut f, &plan.at[k], STEP, idx));
    }
    all
}

fn report(case: &Case, a: &[f64], n: &[f64]) -> CheckReport {
    CheckReport { name: case.name.clone(), rel_err: relative_error(a, n), probes: n.len() }
}

/// Checks the backward pass in precision `T` against central differences.
/// The difference quotients are always evaluated in `f64` at the same
/// point, so the oracle is not limited by the rounding of the precision
/// under test.
pub fn check_case<T: Real>(case: &Case, seed: u64) -> Result<CheckReport> {
    let plan = plan::<T>(case, seed)?;
    let a = analytic::<T>(case, &plan)?;
    Ok(report(case, &a, &oracle(case, &plan)))
}

/// [`check_case`] for `f32` and `f64` at one shared point (the inputs
/// rounded to `f32`), evaluating the oracle once.
pub fn check_case_both(case: &Case, seed: u64) -> Result<[CheckReport; 2]> {
    let plan = plan::<f32>(case, seed)?;
    let n = oracle(case, &plan);
    let a32 = analytic::<f32>(case, &plan)?;
    let a64 = analytic::<f64>(case, &plan)?;
    Ok([report(case, &a32, &n), report(case, &a64, &n)])
}

/// Standard normal entries pushed at least `gap` away from zero, so kinked
/// activations are never probed across their kink.
fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], gap: f64, rng: &mut R) -> Tensor<f64> {
    Tensor::<f64>::randn(shape, rng).map(|v| v + gap * v.signum())
}

/// One case per differentiable tape operation.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut v = Vec::new();
    v.push(Case::new("add", vec![Tensor::randn(&[3, 4], r), Tensor::randn(&[3, 4], r)], dual!(|t, x| t.add(x[0], x[1]))));
    v.push(Case::new("mul", vec![Tensor::randn(&[3, 4], r), Tensor::randn(&[3, 4], r)], dual!(|t, x| t.mul(x[0], x[1]))));
    v.push(Case::new("scale", vec![Tensor::randn(&[5], r)], dual!(|t, x| Ok(t.scale(x[0], R::lit(-1.5))))));
    v.push(Case::new("relu", vec![away_from_zero(&[4, 5], 0.05, r)], dual!(|t, x| Ok(t.relu(x[0])))));
    v.push(Case::new("silu", vec![Tensor::randn(&[4, 5], r)], dual!(|t, x| Ok(t.silu(x[0])))));
    v.push(Case::new("softplus", vec![Tensor::randn(&[4, 5], r)], dual!(|t, x| Ok(t.softplus(x[0])))));
    v.push(Case::new("exp", vec![Tensor::randn(&[4, 5], r)], dual!(|t, x| Ok(t.exp(x[0])))));
    v.push(Case::new("sum", vec![Tensor::randn(&[2, 3, 4], r)], dual!(|t, x| Ok(t.sum(x[0])))));
    v.push(Case::new(
        "matmul",
        vec![Tensor::randn(&[4, 5], r), Tensor::randn(&[5, 3], r), Tensor::randn(&[3, 2], r)],
        dual!(|t, x| {
            let ab = t.matmul(x[0], x[1])?;
            t.matmul(ab, x[2])
        }),
    ));
    v.push(Case::new(
        "linear",
        vec![Tensor::randn(&[2, 3, 4], r), Tensor::randn(&[4, 5], r)],
        dual!(|t, x| t.linear(x[0], x[1])),
    ));
    let idx: Rc<[usize]> = (0..12).map(|i| (i * 7) % 10).collect();
    v.push(Case::new("gather", vec![Tensor::randn(&[10], r)], dual!([idx] |t, x| t.gather(x[0], idx.clone(), &[3, 4]))));
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
        v.push(Case::new(
            format!("conv2d k{k} s{stride}"),
            vec![Tensor::randn(&[2, 3, 6, 6], r), Tensor::randn(&[4, 3, k, k], r)],
            dual!([stride, pad] |t, x| t.conv2d(x[0], x[1], stride, pad)),
        ));
    }
    v.push(Case::new(
        "bias_add",
        vec![Tensor::randn(&[2, 3, 4, 4], r), Tensor::randn(&[3], r)],
        dual!(|t, x| t.bias_add(x[0], x[1], ChannelAxis::First)),
    ));
    v.push(Case::new(
        "norm channels-first",
        vec![Tensor::randn(&[2, 3, 4, 4], r), Tensor::randn(&[3], r), Tensor::randn(&[3], r)],
        dual!(|t, x| t.norm(x[0], x[1], x[2], ChannelAxis::First)),
    ));
    v.push(Case::new(
        "norm channels-last",
        vec![Tensor::randn(&[2, 6, 4], r), Tensor::randn(&[4], r), Tensor::randn(&[4], r)],
        dual!(|t, x| t.norm(x[0], x[1], x[2], ChannelAxis::Last)),
    ));
    v.push(Case::new("upsample", vec![Tensor::randn(&[2, 2, 3, 4], r)], dual!(|t, x| t.upsample(x[0], 4))));
    let target: Rc<[u8]> = (0..2 * 5 * 5).map(|_| r.random_range(0..3u8)).collect();
    v.push(Case::new(
        "cross_entropy",
        vec![Tensor::randn(&[2, 3, 5, 5], r)],
        dual!([target] |t, x| t.cross_entropy(x[0], target.clone())),
    ));
    v.push(Case::new(
        "dwconv1d",
        vec![Tensor::randn(&[2, 7, 3], r), Tensor::randn(&[3, 3], r), Tensor::randn(&[3], r)],
        dual!(|t, x| t.dwconv1d(x[0], x[1], x[2])),
    ));
    v.push(Case::new(
        "selective_scan",
        vec![
            Tensor::randn(&[2, 9, 3], r),
            Tensor::rand_uniform(&[2, 9, 3], 0.1, 0.6, r),
            Tensor::rand_uniform(&[3, 4], -1.5, -0.2, r),
            Tensor::randn(&[2, 9, 4], r),
            Tensor::randn(&[2, 9, 4], r),
            Tensor::randn(&[3], r),
        ],
        dual!(|t, x| t.selective_scan(x[0], x[1], x[2], x[3], x[4], x[5])),
    ));
    for (label, mode) in [("attenuate", DwtMode::Attenuate), ("as-written", DwtMode::AsWritten)] {
        let cfg = DiffusionConfig::dwt(1.0, 1, mode);
        v.push(Case::new(
            format!("pmd_dwt {label}"),
            vec![Tensor::randn(&[2, 2, 6, 6], r)],
            dual!([cfg] |t, x| t.pmd_dwt(x[0], &cfg, PmdGradient::Exact)),
        ));
    }
    v.push(Case::new("sobel", vec![Tensor::randn(&[1, 2, 5, 5], r)], dual!(|t, x| t.sobel(x[0]))));
    v.push(Case::new(
        "concat_channels",
        vec![Tensor::randn(&[2, 1, 3, 3], r), Tensor::randn(&[2, 2, 3, 3], r)],
        dual!(|t, x| t.concat_channels(&[x[0], x[1]])),
    ));
    v.push(Case::new("narrow_last", vec![Tensor::randn(&[3, 7], r)], dual!(|t, x| t.narrow_last(x[0], 2, 4))));
    v.push(Case::new(
        "add_broadcast",
        vec![Tensor::randn(&[3, 4, 5], r), Tensor::randn(&[4, 5], r)],
        dual!(|t, x| t.add_broadcast(x[0], x[1])),
    ));
    v.push(Case::new(
        "reshape",
        vec![Tensor::randn(&[3, 4], r)],
        dual!(|t, x| {
            let y = t.reshape(x[0], &[2, 6])?;
            let w = t.constant(Tensor::from_fn(&[6, 2], |i| R::lit(i as f64 * 0.1)));
            t.matmul(y, w)
        }),
    ));
    v
}

/// Images per batch in [`model_case`]. With two, each channel of the 1×1
/// stage is normalized over two values and the loss is close to a step
/// function of the weights.
pub const MODEL_CHECK_BATCH: usize = 4;

/// The whole network at micro scale (32×32 input, widths 4-8-16-32) under
/// the weighted four-term loss, probing 1% of every parameter tensor.
pub fn model_case(seed: u64) -> Result<Case> {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, store) = PMamba::new::<f64, _>(cfg.clone(), &mut rng)?;
    let data = SynthConfig { seed, count: MODEL_CHECK_BATCH, size: cfg.image_size, ..SynthConfig::default() };
    let samples = synth_generate::<f64>(&data)?;
    let batch = make_batch(&samples.iter().collect::<Vec<_>>())?;
    let (image, masks): (Tensor<f64>, Rc<[u8]>) = (batch.images, batch.masks.into());
    let lw = LossWeights::default();
    let inputs = store.ids().map(|id| store.get(id).clone()).collect();
    let build = dual!([net, image, masks] |t, x| {
        let p = Bound::from_vars(x.to_vec());
        let img = t.constant(image.cast::<R>());
        let out = net.forward(t, &p, img)?;
        Ok(total_loss(t, &out, masks.clone(), &lw)?.total)
    });
    Ok(Case { name: "full model (micro)".into(), inputs, build, probes: Probes::Fraction(0.01) })
}
