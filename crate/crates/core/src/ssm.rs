//! Selective state-space scan and the residual Vim block.
//!
//! Per channel `e` with state `h ∈ R^S`, `h₀ = 0`:
//!
//! ```text
//! h_t = exp(Δ_t·A_e) ⊙ h_{t−1} + Δ_t·B_t·x_t
//! y_t = ⟨C_t, h_t⟩ + D_e·x_t
//! ```
//!
//! [`scan_chunked`] evaluates the recurrence in fixed-size chunks: a local
//! scan from a zero state, a carry pass over chunk boundaries, and a fix-up
//! pass. [`selective_scan_reference`] is the plain loop it is tested against.

use std::rc::Rc;
use std::time::Instant;

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::kernels::{self, ChannelAxis};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CHUNK: usize = 64;

/// State size used by the models.
pub const STATE_DIM: usize = 8;

/// Extents of one scan: batch `n`, length `l`, channels `e`, state `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub n: usize,
    pub l: usize,
    pub e: usize,
    pub s: usize,
}

impl ScanDims {
    pub fn infer(x: &[usize], delta: &[usize], a: &[usize], b: &[usize], c: &[usize], d: &[usize]) -> Result<Self> {
        let [n, l, e] = *x else {
            return Err(dim_err!("scan input must be N×L×E, got {:?}", x));
        };
        if l == 0 {
            return Err(dim_err!("scan over an empty sequence"));
        }
        let [ae, s] = *a else {
            return Err(dim_err!("state matrix must be E×S, got {:?}", a));
        };
        if delta != x || ae != e || b != [n, l, s] || c != [n, l, s] || d != [e] {
            return Err(dim_err!(
                "scan shapes disagree: x {:?} Δ {:?} A {:?} B {:?} C {:?} D {:?}",
                x,
                delta,
                a,
                b,
                c,
                d
            ));
        }
        Ok(ScanDims { n, l, e, s })
    }
}

/// Borrowed flat buffers of a scan; `a` is the negative state matrix.
pub struct ScanInputs<'a, T> {
    pub x: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
}

/// Chunked scan. Returns `y: N×L×E` and, if asked, every state `h_t` laid
/// out `N×L×E×S` for the backward pass.
pub fn scan_chunked<T: Real>(
    dims: &ScanDims,
    inp: &ScanInputs<'_, T>,
    chunk: usize,
    want_states: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let ScanDims { n, l, e, s } = *dims;
    let chunk = chunk.max(1);
    let mut y = vec![T::zero(); n * l * e];
    let mut states = want_states.then(|| vec![T::zero(); n * l * e * s]);
    // local states and cumulative decays for one (n, e) lane
    let mut local = vec![T::zero(); l * s];
    let mut decay = vec![T::zero(); l * s];
    let mut carry = vec![T::zero(); s];
    for bn in 0..n {
        for ch in 0..e {
            let a = &inp.a[ch * s..(ch + 1) * s];
            // pass 1: independent chunks from a zero state
            for start in (0..l).step_by(chunk) {
                let end = (start + chunk).min(l);
                for t in start..end {
                    let i = (bn * l + t) * e + ch;
                    let (dt, xt) = (inp.delta[i], inp.x[i]);
                    let bt = &inp.b[(bn * l + t) * s..][..s];
                    for k in 0..s {
                        let da = (dt * a[k]).exp();
                        let u = dt * bt[k] * xt;
                        let (h, p) = if t == start {
                            (u, da)
                        } else {
                            (da * local[(t - 1) * s + k] + u, da * decay[(t - 1) * s + k])
                        };
                        local[t * s + k] = h;
                        decay[t * s + k] = p;
                    }
                }
            }
            // pass 2 + 3: carry boundary states forward, fix up each chunk
            carry.fill(T::zero());
            for start in (0..l).step_by(chunk) {
                let end = (start + chunk).min(l);
                for t in start..end {
                    let i = (bn * l + t) * e + ch;
                    let ct = &inp.c[(bn * l + t) * s..][..s];
                    let mut acc = inp.d[ch] * inp.x[i];
                    for k in 0..s {
                        let h = local[t * s + k] + decay[t * s + k] * carry[k];
                        local[t * s + k] = h;
                        acc += ct[k] * h;
                    }
                    y[i] = acc;
                    if let Some(st) = states.as_mut() {
                        st[i * s..(i + 1) * s].copy_from_slice(&local[t * s..(t + 1) * s]);
                    }
                }
                carry.copy_from_slice(&local[(end - 1) * s..end * s]);
            }
        }
    }
    (y, states)
}

/// The recurrence, one step at a time.
pub fn scan_sequential<T: Real>(dims: &ScanDims, inp: &ScanInputs<'_, T>) -> Vec<T> {
    let ScanDims { n, l, e, s } = *dims;
    let mut y = vec![T::zero(); n * l * e];
    let mut h = vec![T::zero(); s];
    for bn in 0..n {
        for ch in 0..e {
            h.fill(T::zero());
            for t in 0..l {
                let i = (bn * l + t) * e + ch;
                let (dt, xt) = (inp.delta[i], inp.x[i]);
                let mut acc = inp.d[ch] * xt;
                for k in 0..s {
                    let j = (bn * l + t) * s + k;
                    h[k] = (dt * inp.a[ch * s + k]).exp() * h[k] + dt * inp.b[j] * xt;
                    acc += inp.c[j] * h[k];
                }
                y[i] = acc;
            }
        }
    }
    y
}

pub(crate) struct ScanGrads<T> {
    pub dx: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub dd: Vec<T>,
}

/// Reverse-time recurrence for the adjoint state, using stored `h_t`.
pub(crate) fn scan_backward<T: Real>(
    dims: &ScanDims,
    inp: &ScanInputs<'_, T>,
    states: &[T],
    gy: &[T],
) -> ScanGrads<T> {
    let ScanDims { n, l, e, s } = *dims;
    let mut g = ScanGrads {
        dx: vec![T::zero(); n * l * e],
        ddelta: vec![T::zero(); n * l * e],
        da: vec![T::zero(); e * s],
        db: vec![T::zero(); n * l * s],
        dc: vec![T::zero(); n * l * s],
        dd: vec![T::zero(); e],
    };
    let mut gh = vec![T::zero(); s];
    for bn in 0..n {
        for ch in 0..e {
            gh.fill(T::zero());
            let a = &inp.a[ch * s..(ch + 1) * s];
            for t in (0..l).rev() {
                let i = (bn * l + t) * e + ch;
                let (dt, xt, gyt) = (inp.delta[i], inp.x[i], gy[i]);
                g.dd[ch] += gyt * xt;
                let mut dx = gyt * inp.d[ch];
                let mut ddt = T::zero();
                for k in 0..s {
                    let j = (bn * l + t) * s + k;
                    let h = states[i * s + k];
                    g.dc[j] += gyt * h;
                    let ght = gh[k] + gyt * inp.c[j];
                    let h_prev = if t > 0 { states[(i - e) * s + k] } else { T::zero() };
                    let decay = (dt * a[k]).exp();
                    let d_decay = ght * h_prev * decay;
                    ddt += d_decay * a[k] + ght * inp.b[j] * xt;
                    g.da[ch * s + k] += d_decay * dt;
                    g.db[j] += ght * dt * xt;
                    dx += ght * dt * inp.b[j];
                    gh[k] = ght * decay;
                }
                g.dx[i] += dx;
                g.ddelta[i] += ddt;
            }
        }
    }
    g
}

fn batched<T: Real>(t: &Tensor<T>, rank: usize) -> Vec<usize> {
    if t.rank() == rank - 1 {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        s
    } else {
        t.shape().to_vec()
    }
}

fn scan_eager<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    chunked: bool,
) -> Result<Tensor<T>> {
    let dims = ScanDims::infer(&batched(x, 3), &batched(delta, 3), a.shape(), &batched(b, 3), &batched(c, 3), d.shape())?;
    let inp = ScanInputs { x: x.data(), delta: delta.data(), a: a.data(), b: b.data(), c: c.data(), d: d.data() };
    let y = if chunked { scan_chunked(&dims, &inp, DEFAULT_CHUNK, false).0 } else { scan_sequential(&dims, &inp) };
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Selective scan of `x: L×E` (or `N×L×E`) given `Δ` like `x`, negative
/// `A: E×S`, `B, C: L×S` (or `N×L×S`) and skip `D: E`.
pub fn selective_scan<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    scan_eager(x, delta, a, b, c, d, true)
}

/// [`selective_scan`] through the step-by-step recurrence.
pub fn selective_scan_reference<T: Real>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    scan_eager(x, delta, a, b, c, d, false)
}

/// `ln(eˣ − 1)`, the inverse of softplus, for initialising the Δ bias.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Parameters of one scan direction. Δ, B and C are produced from the
/// sequence itself: `x·W_x → [δ (R) | B (S) | C (S)]`, `Δ = softplus(δ·W_dt + b_dt)`.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub e: usize,
    pub s: usize,
    pub rank: usize,
    /// `ln(−A)`, `E×S`.
    pub a_log: ParamId,
    pub x_proj: ParamId,
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
    pub d_skip: ParamId,
}

impl SsmParams {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, e: usize, s: usize, rng: &mut R) -> Self {
        let rank = e.div_ceil(16).max(1);
        let a_log = store.add(format!("{name}.a_log"), Tensor::from_fn(&[e, s], |i| T::lit(((i % s) + 1) as f64).ln()));
        let x_proj = store.uniform(format!("{name}.x_proj"), &[e, rank + 2 * s], e, rng);
        let dt_proj = store.uniform(format!("{name}.dt_proj"), &[rank, e], rank, rng);
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let bias: Vec<T> = (0..e).map(|_| T::lit(softplus_inv(rng.random_range(lo..hi).exp()))).collect();
        let dt_bias = store.add(format!("{name}.dt_bias"), Tensor::from_parts(vec![e], bias));
        let d_skip = store.ones(format!("{name}.d_skip"), &[e]);
        SsmParams { e, s, rank, a_log, x_proj, dt_proj, dt_bias, d_skip }
    }

    /// Scan of `u: N×L×E` with inputs derived from `u`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, u: Var) -> Result<Var> {
        let proj = tape.linear(u, p[self.x_proj])?;
        let dt_low = tape.narrow_last(proj, 0, self.rank)?;
        let b = tape.narrow_last(proj, self.rank, self.s)?;
        let c = tape.narrow_last(proj, self.rank + self.s, self.s)?;
        let dt = tape.linear(dt_low, p[self.dt_proj])?;
        let dt = tape.bias_add(dt, p[self.dt_bias], ChannelAxis::Last)?;
        let delta = tape.softplus(dt);
        let a = tape.exp(p[self.a_log]);
        let a = tape.scale(a, -T::one());
        tape.selective_scan(u, delta, a, b, c, p[self.d_skip])
    }
}

/// One scan direction: causal depthwise conv (width 3), SiLU, scan.
#[derive(Debug, Clone)]
pub struct Direction {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm: SsmParams,
}

pub const SHORT_CONV: usize = 3;

impl Direction {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, e: usize, s: usize, rng: &mut R) -> Self {
        let conv_w = store.uniform(format!("{name}.conv_w"), &[e, SHORT_CONV], SHORT_CONV, rng);
        let conv_b = store.zeros(format!("{name}.conv_b"), &[e]);
        let ssm = SsmParams::new(store, &format!("{name}.ssm"), e, s, rng);
        Direction { conv_w, conv_b, ssm }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, u: Var) -> Result<Var> {
        let v = tape.dwconv1d(u, p[self.conv_w], p[self.conv_b])?;
        let v = tape.silu(v);
        self.ssm.forward(tape, p, v)
    }
}

/// Reverses the sequence axis of an `N×L×E` tensor.
pub fn flip_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [n, l, e] = shape[..] else {
        return Err(dim_err!("token tensor must be N×L×E, got {:?}", shape));
    };
    let index: Rc<[usize]> =
        (0..n * l * e).map(|i| (i / (l * e)) * l * e + (l - 1 - (i / e) % l) * e + i % e).collect();
    tape.gather(x, index, &shape)
}

/// `X ↦ X + W_out·( (fwd(u) + flip(bwd(flip(u)))) ⊙ silu(z) )` where
/// `u = norm(X)·W_x`, `z = norm(X)·W_z`.
#[derive(Debug, Clone)]
pub struct VimBlock {
    pub d: usize,
    pub e: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub w_x: ParamId,
    pub w_z: ParamId,
    pub fwd: Direction,
    pub bwd: Direction,
    pub w_out: ParamId,
}

impl VimBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Self {
        let e = 2 * d;
        let gamma = store.ones(format!("{name}.norm.gamma"), &[d]);
        let beta = store.zeros(format!("{name}.norm.beta"), &[d]);
        let w_x = store.uniform(format!("{name}.w_x"), &[d, e], d, rng);
        let w_z = store.uniform(format!("{name}.w_z"), &[d, e], d, rng);
        let fwd = Direction::new(store, &format!("{name}.fwd"), e, STATE_DIM, rng);
        let bwd = Direction::new(store, &format!("{name}.bwd"), e, STATE_DIM, rng);
        let w_out = store.uniform(format!("{name}.w_out"), &[e, d], e, rng);
        VimBlock { d, e, gamma, beta, w_x, w_z, fwd, bwd, w_out }
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, _, d] if *d == self.d => Ok(()),
            _ => Err(dim_err!("Vim block expects N×M×{} tokens, got {:?}", self.d, shape)),
        }
    }

    /// Bidirectional scan output before gating.
    pub fn mix<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        self.check(tape.shape(x))?;
        let xn = tape.norm(x, p[self.gamma], p[self.beta], ChannelAxis::Last)?;
        let u = tape.linear(xn, p[self.w_x])?;
        let z = tape.linear(xn, p[self.w_z])?;
        let yf = self.fwd.forward(tape, p, u)?;
        let ur = flip_tokens(tape, u)?;
        let yb = self.bwd.forward(tape, p, ur)?;
        let yb = flip_tokens(tape, yb)?;
        Ok((tape.add(yf, yb)?, z))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let (y, z) = self.mix(tape, p, x)?;
        let gate = tape.silu(z);
        let y = tape.mul(y, gate)?;
        let y = tape.linear(y, p[self.w_out])?;
        tape.add(x, y)
    }
}

/// Eager [`VimBlock::forward`] on `M×D` or `N×M×D` tokens.
pub fn vim_block<T: Real>(x: &Tensor<T>, block: &VimBlock, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone().reshape(&batched(x, 3))?);
    let y = block.forward(&mut tape, &p, xv)?;
    tape.value(y).clone().reshape(x.shape())
}

/// Patch size `N`, grid of the input, and the projected width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub patch: usize,
    pub c_in: usize,
    pub dim: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchEmbedConfig {
    pub fn new(patch: usize, c_in: usize, dim: usize, h: usize, w: usize) -> Result<Self> {
        if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) || h == 0 || w == 0 {
            return Err(dim_err!("{h}×{w} is not divisible into {patch}×{patch} patches"));
        }
        Ok(PatchEmbedConfig { patch, c_in, dim, h, w })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.patch, self.w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.patch * self.patch
    }
}

/// Index map from `N×C×H×W` to `N×M×(C·P·P)`; patches row-major, each
/// flattened channel, row, column.
fn patch_index(n: usize, cfg: &PatchEmbedConfig) -> Rc<[usize]> {
    let (gh, gw) = cfg.grid();
    let (p, c, h, w) = (cfg.patch, cfg.c_in, cfg.h, cfg.w);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(((b * c + ch) * h + py * p + dy) * w + px * p + dx);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub w_proj: ParamId,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: PatchEmbedConfig, rng: &mut R) -> Self {
        let w_proj = store.uniform(format!("{name}.w_proj"), &[cfg.patch_len(), cfg.dim], cfg.patch_len(), rng);
        let pos = store.zeros(format!("{name}.pos"), &[cfg.tokens(), cfg.dim]);
        PatchEmbed { cfg, w_proj, pos }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let tokens = patchify(tape, x, &self.cfg)?;
        let proj = tape.linear(tokens, p[self.w_proj])?;
        tape.add_broadcast(proj, p[self.pos])
    }
}

fn patchify<T: Real>(tape: &mut Tape<T>, x: Var, cfg: &PatchEmbedConfig) -> Result<Var> {
    let n = match *tape.shape(x) {
        [n, c, h, w] if c == cfg.c_in && h == cfg.h && w == cfg.w => n,
        ref s => {
            return Err(dim_err!("patch embedding for {}×{}×{} got {:?}", cfg.c_in, cfg.h, cfg.w, s));
        }
    };
    tape.gather(x, patch_index(n, cfg), &[n, cfg.tokens(), cfg.patch_len()])
}

/// `X₀ = [x¹W; …; x^M W] + E_pos` for `x: C×H×W` (or `N×C×H×W`).
pub fn patch_embed<T: Real>(x: &Tensor<T>, patch: usize, w_proj: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = batched(x, 4);
    let [_, c, h, w] = xs[..] else {
        return Err(dim_err!("patch embedding input must be C×H×W, got {:?}", x.shape()));
    };
    let dim = w_proj.shape().last().copied().unwrap_or(0);
    let cfg = PatchEmbedConfig::new(patch, c, dim, h, w)?;
    if w_proj.shape() != [cfg.patch_len(), dim] || pos.shape() != [cfg.tokens(), dim] {
        return Err(dim_err!("projection {:?} / position {:?} do not fit {:?}", w_proj.shape(), pos.shape(), cfg));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&xs)?);
    let wv = tape.constant(w_proj.clone());
    let pv = tape.constant(pos.clone());
    let t = patchify(&mut tape, xv, &cfg)?;
    let y = tape.linear(t, wv)?;
    let y = tape.add_broadcast(y, pv)?;
    let out = tape.value(y).clone();
    if x.rank() == 3 {
        out.reshape(&[cfg.tokens(), dim])
    } else {
        Ok(out)
    }
}

fn to_map_index(n: usize, gh: usize, gw: usize, d: usize) -> Rc<[usize]> {
    let m = gh * gw;
    (0..n * d * m)
        .map(|i| {
            let (b, rest) = (i / (d * m), i % (d * m));
            let (ch, tok) = (rest / m, rest % m);
            (b * m + tok) * d + ch
        })
        .collect()
}

fn to_tokens_index(n: usize, d: usize, m: usize) -> Rc<[usize]> {
    (0..n * m * d)
        .map(|i| {
            let (b, rest) = (i / (m * d), i % (m * d));
            let (tok, ch) = (rest / d, rest % d);
            (b * d + ch) * m + tok
        })
        .collect()
}

/// `N×M×D` tokens to an `N×D×gh×gw` map.
pub fn tokens_to_map_var<T: Real>(tape: &mut Tape<T>, x: Var, grid: (usize, usize)) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [n, m, d] = shape[..] else {
        return Err(dim_err!("tokens must be N×M×D, got {:?}", shape));
    };
    if m != grid.0 * grid.1 {
        return Err(dim_err!("{m} tokens do not fill a {}×{} grid", grid.0, grid.1));
    }
    tape.gather(x, to_map_index(n, grid.0, grid.1, d), &[n, d, grid.0, grid.1])
}

/// `N×D×H×W` map to `N×(H·W)×D` tokens, row-major.
pub fn map_to_tokens_var<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [n, d, h, w] = shape[..] else {
        return Err(dim_err!("map must be N×D×H×W, got {:?}", shape));
    };
    tape.gather(x, to_tokens_index(n, d, h * w), &[n, h * w, d])
}

/// `M×D` tokens to a `D×gh×gw` map.
pub fn tokens_to_map<T: Real>(x: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone().reshape(&batched(x, 3))?);
    let y = tokens_to_map_var(&mut tape, v, grid)?;
    let out = tape.value(y).clone();
    if x.rank() == 2 {
        let inner = out.shape()[1..].to_vec();
        out.reshape(&inner)
    } else {
        Ok(out)
    }
}

/// `D×H×W` map to `(H·W)×D` tokens.
pub fn map_to_tokens<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone().reshape(&batched(x, 4))?);
    let y = map_to_tokens_var(&mut tape, v)?;
    let out = tape.value(y).clone();
    if x.rank() == 3 {
        let inner = out.shape()[1..].to_vec();
        out.reshape(&inner)
    } else {
        Ok(out)
    }
}

/// Token mixers timed by [`scan_complexity_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixer {
    Scan,
    /// Single-head softmax self-attention with `Q = K = V = x`.
    Attention,
}

impl Mixer {
    pub fn name(self) -> &'static str {
        match self {
            Mixer::Scan => "scan",
            Mixer::Attention => "attention",
        }
    }
}

/// Quadratic reference mixer: `softmax(x·xᵀ/√D)·x` for `x: L×D`.
pub fn attention_mixer<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [l, d] = *x.shape() else {
        return Err(dim_err!("attention input must be L×D, got {:?}", x.shape()));
    };
    let mut scores = vec![T::zero(); l * l];
    kernels::gemm_nt_acc(x.data(), x.data(), &mut scores, l, d, l);
    let scale = T::lit(1.0 / (d as f64).sqrt());
    for row in scores.chunks_mut(l) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)) * scale;
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v * scale - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    let mut out = vec![T::zero(); l * d];
    kernels::gemm_acc(&scores, x.data(), &mut out, l, l, d);
    Ok(Tensor::from_parts(vec![l, d], out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub l: usize,
    pub mixer: Mixer,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    /// Least-squares slope of `ln(median time)` against `ln L` for one
    /// mixer. The median ignores the occasional preempted run.
    pub fn slope(&self, mixer: Mixer) -> f64 {
        let pts: Vec<(f64, f64)> =
            self.rows.iter().filter(|r| r.mixer == mixer).map(|r| ((r.l as f64).ln(), r.median_ms.ln())).collect();
        log_log_slope(&pts)
    }
}

pub fn log_log_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Mean, standard deviation and median in milliseconds.
fn time_ms(reps: usize, mut f: impl FnMut()) -> (f64, f64, f64) {
    f();
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / reps as f64;
    times.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 { times[reps / 2] } else { 0.5 * (times[reps / 2 - 1] + times[reps / 2]) };
    (mean, var.sqrt(), median)
}

/// Wall time of the scan and of the attention reference over a range of
/// sequence lengths, `reps` timed runs each after one warm-up.
pub fn scan_complexity_probe<R: Rng + ?Sized>(
    lengths: &[usize],
    d: usize,
    s: usize,
    reps: usize,
    mixers: &[Mixer],
    rng: &mut R,
) -> Result<ProbeReport> {
    if lengths.len() < 2 || lengths.windows(2).any(|w| w[1] <= w[0]) || reps == 0 {
        return Err(crate::error::config_err!("probe needs ascending lengths and at least one repetition"));
    }
    let mut rows = Vec::new();
    for &l in lengths {
        let x = Tensor::<f32>::randn(&[1, l, d], rng);
        let delta = Tensor::<f32>::rand_uniform(&[1, l, d], 0.01, 0.1, rng);
        let a = Tensor::<f32>::rand_uniform(&[d, s], -2.0, -0.5, rng);
        let b = Tensor::<f32>::randn(&[1, l, s], rng);
        let c = Tensor::<f32>::randn(&[1, l, s], rng);
        let dd = Tensor::<f32>::ones(&[d]);
        let x2 = x.clone().reshape(&[l, d])?;
        for &mixer in mixers {
            let (mean_ms, std_ms, median_ms) = match mixer {
                Mixer::Scan => time_ms(reps, || {
                    std::hint::black_box(selective_scan(&x, &delta, &a, &b, &c, &dd).unwrap());
                }),
                Mixer::Attention => time_ms(reps, || {
                    std::hint::black_box(attention_mixer(&x2).unwrap());
                }),
            };
            rows.push(ProbeRow { l, mixer, mean_ms, std_ms, median_ms });
        }
    }
    Ok(ProbeReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Case {
        x: Tensor<f64>,
        delta: Tensor<f64>,
        a: Tensor<f64>,
        b: Tensor<f64>,
        c: Tensor<f64>,
        d: Tensor<f64>,
    }

    fn case(n: usize, l: usize, e: usize, s: usize, seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Case {
            x: Tensor::randn(&[n, l, e], &mut rng),
            delta: Tensor::rand_uniform(&[n, l, e], 0.01, 0.5, &mut rng),
            a: Tensor::rand_uniform(&[e, s], -3.0, -0.1, &mut rng),
            b: Tensor::randn(&[n, l, s], &mut rng),
            c: Tensor::randn(&[n, l, s], &mut rng),
            d: Tensor::randn(&[e], &mut rng),
        }
    }

    fn run(k: &Case, chunk: usize) -> Vec<f64> {
        let dims =
            ScanDims::infer(k.x.shape(), k.delta.shape(), k.a.shape(), k.b.shape(), k.c.shape(), k.d.shape()).unwrap();
        let inp =
            ScanInputs { x: k.x.data(), delta: k.delta.data(), a: k.a.data(), b: k.b.data(), c: k.c.data(), d: k.d.data() };
        scan_chunked(&dims, &inp, chunk, false).0
    }

    #[test]
    fn single_step_closed_form() {
        let k = case(1, 1, 3, 4, 0);
        let y = run(&k, 64);
        for e in 0..3 {
            let dt = k.delta.data()[e];
            let x = k.x.data()[e];
            let dot: f64 = (0..4).map(|s| k.c.data()[s] * dt * k.b.data()[s] * x).sum();
            assert!((y[e] - (dot + k.d.data()[e] * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_step_leaves_only_skip() {
        let mut k = case(2, 20, 3, 4, 1);
        k.delta.data_mut().fill(0.0);
        let y = run(&k, 8);
        for (i, &v) in y.iter().enumerate() {
            assert_eq!(v, k.d.data()[i % 3] * k.x.data()[i]);
        }
    }

    #[test]
    fn chunked_matches_sequential_for_any_chunk() {
        let k = case(2, 64, 8, 4, 2);
        let want = selective_scan_reference(&k.x, &k.delta, &k.a, &k.b, &k.c, &k.d).unwrap();
        for chunk in [1, 3, 16, 64, 100] {
            let got = run(&k, chunk);
            let err = got.iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "chunk {chunk}: {err}");
        }
    }

    #[test]
    fn scan_is_causal() {
        let k = case(1, 40, 4, 8, 3);
        let base = run(&k, 16);
        let mut k2 = case(1, 40, 4, 8, 3);
        for i in 25 * 4..40 * 4 {
            k2.x.data_mut()[i] += 1.0;
            k2.delta.data_mut()[i] *= 1.5;
        }
        for v in k2.b.data_mut()[25 * 8..].iter_mut() {
            *v = -*v;
        }
        let moved = run(&k2, 16);
        assert_eq!(base[..25 * 4], moved[..25 * 4]);
        assert!(base[25 * 4..] != moved[25 * 4..]);
    }

    #[test]
    fn shape_errors() {
        let k = case(1, 4, 2, 3, 4);
        let bad = Tensor::<f64>::zeros(&[3, 3]);
        assert!(matches!(selective_scan(&k.x, &k.delta, &bad, &k.b, &k.c, &k.d), Err(crate::Error::Dimension(_))));
        let empty = Tensor::<f64>::zeros(&[0, 2]);
        assert!(selective_scan(&empty, &empty, &k.a, &Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, 3]), &k.d).is_err());
    }

    #[test]
    fn token_grid_order_and_roundtrip() {
        let x = Tensor::<f64>::from_fn(&[4, 2], |i| i as f64);
        let m = tokens_to_map(&x, (2, 2)).unwrap();
        assert_eq!(m.shape(), &[2, 2, 2]);
        // channel 0 holds tokens (0,0),(0,1),(1,0),(1,1) row-major
        assert_eq!(&m.data()[..4], &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(map_to_tokens(&m).unwrap(), x);
        assert!(tokens_to_map(&x, (3, 2)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn(&[2, 12, 5], &mut rng);
        assert_eq!(map_to_tokens(&tokens_to_map(&x, (3, 4)).unwrap()).unwrap(), x);
        let c = tokens_to_map(&Tensor::<f32>::full(&[6, 3], 2.5), (2, 3)).unwrap();
        assert!(c.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn patch_embed_with_permutation_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[1, 8, 8], &mut rng);
        let w = Tensor::<f64>::from_fn(&[16, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
        let pos = Tensor::<f64>::randn(&[4, 16], &mut rng);
        let t = patch_embed(&x, 4, &w, &pos).unwrap();
        assert_eq!(t.shape(), &[4, 16]);
        // token 1 is the top-right patch
        for dy in 0..4 {
            for dx in 0..4 {
                let want = x.data()[dy * 8 + 4 + dx] + pos.data()[16 + dy * 4 + dx];
                assert_eq!(t.data()[16 + dy * 4 + dx], want);
            }
        }
        let z = patch_embed(&Tensor::<f64>::zeros(&[1, 8, 8]), 4, &w, &Tensor::zeros(&[4, 16])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(patch_embed(&x, 3, &w, &pos), Err(crate::Error::Dimension(_))));
    }

    fn block(seed: u64) -> (VimBlock, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = VimBlock::new(&mut store, "vim", 8, &mut rng);
        (b, store)
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let (b, mut store) = block(7);
        store.get_mut(b.w_out).data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[16, 8], &mut rng);
        let y = vim_block(&x, &b, &store).unwrap();
        assert_eq!(y, x);
        assert!(matches!(vim_block(&Tensor::<f64>::zeros(&[16, 5]), &b, &store), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn reversal_with_swapped_directions_reverses_mix() {
        let (b, store) = block(9);
        let mut swapped = b.clone();
        std::mem::swap(&mut swapped.fwd, &mut swapped.bwd);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn(&[2, 12, 8], &mut rng);

        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, _) = b.mix(&mut tape, &p, xv).unwrap();
        let xr = flip_tokens(&mut tape, xv).unwrap();
        let (yr, _) = swapped.mix(&mut tape, &p, xr).unwrap();
        let yrr = flip_tokens(&mut tape, yr).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(yrr)) <= 1e-6);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let x = Tensor::<f64>::full(&[5, 3], 1.5);
        let y = attention_mixer(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }
}
