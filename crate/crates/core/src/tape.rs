//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops append
//! a node and return its [`Var`] handle; [`Tape::backward`] walks the nodes
//! in exact reverse order of recording and accumulates vector-Jacobian
//! products. A tape is single-writer and is meant to be dropped after the
//! step that built it.

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ChannelAxis, ConvGeom, NormStats};
use crate::pmd::{self, DiffusionConfig, PmdGradient};
use crate::ssm::{self, ScanDims};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Silu,
    Softplus,
    Exp,
}

impl Unary {
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Unary::Relu => v.max(T::zero()),
            Unary::Silu => v / (T::one() + (-v).exp()),
            Unary::Softplus => softplus(v),
            Unary::Exp => v.exp(),
        }
    }

    /// Derivative given the input `v` and the output `y`.
    fn derivative<T: Real>(self, v: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Silu => {
                let s = T::one() / (T::one() + (-v).exp());
                s * (T::one() + v * (T::one() - s))
            }
            Unary::Softplus => T::one() / (T::one() + (-v).exp()),
            Unary::Exp => y,
        }
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    // log(1 + e^v) without overflow
    if v > T::lit(20.0) {
        v
    } else {
        v.max(T::zero()) + (-(v.abs())).exp().ln_1p()
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    Sum(Var),
    Matmul(Var, Var),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BiasAdd { x: Var, b: Var, dims: (usize, usize, usize) },
    Norm { x: Var, gamma: Var, beta: Var, dims: (usize, usize, usize), stats: NormStats<T> },
    Upsample { x: Var, factor: usize, planes: usize, h: usize, w: usize },
    CrossEntropy { logits: Var, target: Rc<[u8]>, probs: Vec<T> },
    DwConv1d { x: Var, w: Var, b: Var, dims: (usize, usize, usize) },
    Scan { vars: [Var; 6], dims: ScanDims, states: Vec<T> },
    PmdDwt { x: Var, cfg: DiffusionConfig, grad: PmdGradient, planes: usize, h: usize, w: usize },
    Sobel { x: Var, planes: usize, h: usize, w: usize },
    ConcatChannels { parts: Vec<(Var, usize)>, batch: usize, inner: usize },
    NarrowLast { x: Var, offset: usize, width: usize },
    AddBroadcast { x: Var, p: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` is
    /// not on any path to the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values; a proxy for activation memory.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * std::mem::size_of::<T>()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {:?}", std::mem::discriminant(&op));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient is computed for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        self.push(v, Op::Unary(a, f), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Applies `w: D×E` to the trailing axis of `x: …×D`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&d, lead) = xs.split_last().ok_or_else(|| dim_err!("linear on a scalar"))?;
        if ws.len() != 2 || ws[0] != d {
            return Err(dim_err!("linear weight {:?} does not match input {:?}", ws, xs));
        }
        let rows = lead.iter().product();
        let flat = self.reshape(x, &[rows, d])?;
        let out = self.matmul(flat, w)?;
        let mut shape = lead.to_vec();
        shape.push(ws[1]);
        self.reshape(out, &shape)
    }

    /// `out[i] = x[index[i]]`, with the given output shape.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != shape.iter().product::<usize>() {
            return Err(dim_err!("gather index of length {} for shape {:?}", index.len(), shape));
        }
        if index.iter().any(|&i| i >= src.len()) {
            return Err(dim_err!("gather index out of range"));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(v, Op::Gather(x, index), &[x]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let data = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let v = Tensor::from_parts(vec![geom.batch, geom.c_out, geom.h_out, geom.w_out], data);
        Ok(self.push(v, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    pub fn bias_add(&mut self, x: Var, b: Var, axis: ChannelAxis) -> Result<Var> {
        let dims = axis.split(self.shape(x))?;
        if self.value(b).len() != dims.1 {
            return Err(dim_err!("bias of length {} for {} channels", self.value(b).len(), dims.1));
        }
        let data = kernels::bias_add(self.value(x).data(), self.value(b).data(), dims);
        let v = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(v, Op::BiasAdd { x, b, dims }, &[x, b]))
    }

    /// Batch-statistics normalization followed by a per-channel affine map.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, axis: ChannelAxis) -> Result<Var> {
        let dims = axis.split(self.shape(x))?;
        if self.value(gamma).len() != dims.1 || self.value(beta).len() != dims.1 {
            return Err(dim_err!("norm affine parameters must have {} entries", dims.1));
        }
        let (y, stats) =
            kernels::norm_forward(self.value(x).data(), self.value(gamma).data(), self.value(beta).data(), dims)?;
        let v = Tensor::from_parts(self.shape(x).to_vec(), y);
        Ok(self.push(v, Op::Norm { x, gamma, beta, dims, stats }, &[x, gamma, beta]))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        kernels::check_upsample_factor(factor)?;
        let (planes, h, w) = kernels::planes_hw(self.shape(x))?;
        let data = kernels::upsample_forward(self.value(x).data(), planes, h, w, factor);
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] *= factor;
        shape[r - 1] *= factor;
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, Op::Upsample { x, factor, planes, h, w }, &[x]))
    }

    /// Mean softmax cross-entropy of `N×K×H×W` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, target: Rc<[u8]>) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits).data(), self.shape(logits), &target)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, &[logits]))
    }

    /// Causal depthwise convolution along the sequence of `x: N×L×E` with
    /// kernel `w: E×width` and bias `b: E`.
    pub fn dwconv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, l, e) = match *self.shape(x) {
            [n, l, e] => (n, l, e),
            ref s => return Err(dim_err!("dwconv1d input must be N×L×E, got {:?}", s)),
        };
        match *self.shape(w) {
            [we, _] if we == e => {}
            ref s => return Err(dim_err!("dwconv1d kernel {:?} does not match {e} channels", s)),
        }
        if self.value(b).len() != e {
            return Err(dim_err!("dwconv1d bias must have {e} entries"));
        }
        let data =
            kernels::dwconv1d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), n, l, e);
        let v = Tensor::from_parts(vec![n, l, e], data);
        Ok(self.push(v, Op::DwConv1d { x, w, b, dims: (n, l, e) }, &[x, w, b]))
    }

    /// Selective scan over `x, delta: N×L×E`, `a: E×S` (already negative),
    /// `b, c: N×L×S`, `d: E`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let dims = ScanDims::infer(
            self.shape(x),
            self.shape(delta),
            self.shape(a),
            self.shape(b),
            self.shape(c),
            self.shape(d),
        )?;
        let inputs = ssm::ScanInputs {
            x: self.value(x).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        };
        let (y, states) = ssm::scan_chunked(&dims, &inputs, ssm::DEFAULT_CHUNK, true);
        let v = Tensor::from_parts(vec![dims.n, dims.l, dims.e], y);
        let vars = [x, delta, a, b, c, d];
        Ok(self.push(v, Op::Scan { vars, dims, states: states.unwrap_or_default() }, &vars))
    }

    /// One DWT-domain diffusion step on the trailing two axes.
    pub fn pmd_dwt(&mut self, x: Var, cfg: &DiffusionConfig, grad: PmdGradient) -> Result<Var> {
        cfg.validate_dwt()?;
        let (planes, h, w) = kernels::planes_hw(self.shape(x))?;
        crate::wavelet::check_even(h, w)?;
        let data = pmd::dwt_step_raw(self.value(x).data(), planes, h, w, cfg);
        let v = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(v, Op::PmdDwt { x, cfg: cfg.clone(), grad, planes, h, w }, &[x]))
    }

    /// Per-plane Sobel gradient magnitude.
    pub fn sobel(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = kernels::planes_hw(self.shape(x))?;
        let data = pmd::sobel_forward(self.value(x).data(), planes, h, w);
        let v = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(v, Op::Sobel { x, planes, h, w }, &[x]))
    }

    /// Concatenates `N×Cᵢ×…` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| dim_err!("concat of nothing"))?).to_vec();
        if first.len() < 2 {
            return Err(dim_err!("concat needs N×C×… tensors"));
        }
        let (batch, inner): (usize, usize) = (first[0], first[2..].iter().product());
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != batch || s[2..] != first[2..] {
                return Err(dim_err!("cannot concat {:?} with {:?}", s, first));
            }
            widths.push((p, s[1]));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(batch * total * inner);
        for nb in 0..batch {
            for &(p, c) in &widths {
                data.extend_from_slice(&self.value(p).data()[nb * c * inner..(nb + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, Op::ConcatChannels { parts: widths, batch, inner }, parts))
    }

    /// Slice `[offset, offset + width)` of the trailing axis.
    pub fn narrow_last(&mut self, x: Var, offset: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (&d, lead) = s.split_last().ok_or_else(|| dim_err!("narrow on a scalar"))?;
        if offset + width > d {
            return Err(dim_err!("narrow [{offset}, {}) out of range for extent {d}", offset + width));
        }
        let rows: usize = lead.iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * d + offset..r * d + offset + width]);
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let v = Tensor::from_parts(shape, data);
        Ok(self.push(v, Op::NarrowLast { x, offset, width }, &[x]))
    }

    /// Adds `p` to every item along the leading axis of `x`.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xs, ps) = (self.shape(x), self.shape(p));
        if xs.len() != ps.len() + 1 || xs[1..] != *ps {
            return Err(dim_err!("cannot broadcast {:?} over {:?}", ps, xs));
        }
        let inner = self.value(p).len();
        let pd = self.value(p).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (v, &q) in chunk.iter_mut().zip(pd) {
                *v += q;
            }
        }
        let v = Tensor::from_parts(xs.to_vec(), data);
        Ok(self.push(v, Op::AddBroadcast { x, p }, &[x, p]))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let mut acc = |v: Var, data: Vec<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&data) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), data)),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, gd.iter().map(|&g| g * *c).collect()),
            Op::Unary(a, f) => {
                let xv = self.value(*a).data();
                let yv = node.value.data();
                acc(*a, gd.iter().zip(xv).zip(yv).map(|((&g, &x), &y)| g * f.derivative(x, y)).collect());
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; self.value(*a).len()]),
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn_acc(self.value(*a).data(), gd, &mut db, m, k, n);
                    acc(*b, db);
                }
            }
            Op::Reshape(a) => acc(*a, gd.to_vec()),
            Op::Gather(a, index) => {
                let mut da = vec![T::zero(); self.value(*a).len()];
                for (&i, &gv) in index.iter().zip(gd) {
                    da[i] += gv;
                }
                acc(*a, da);
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::BiasAdd { x, b, dims } => {
                acc(*x, gd.to_vec());
                if self.wants(*b) {
                    acc(*b, kernels::bias_grad(gd, *dims));
                }
            }
            Op::Norm { x, gamma, beta, dims, stats } => {
                let (dx, dgamma, dbeta) = kernels::norm_backward(gd, self.value(*gamma).data(), stats, *dims);
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Upsample { x, factor, planes, h, w } => {
                acc(*x, kernels::upsample_backward(gd, *planes, *h, *w, *factor));
            }
            Op::CrossEntropy { logits, target, probs } => {
                acc(*logits, kernels::cross_entropy_backward(probs, self.shape(*logits), target, gd[0]));
            }
            Op::DwConv1d { x, w, b, dims: (n, l, e) } => {
                let (dx, dw, db) =
                    kernels::dwconv1d_backward(self.value(*x).data(), self.value(*w).data(), gd, *n, *l, *e);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Scan { vars, dims, states } => {
                let [x, delta, a, b, c, d] = *vars;
                let inputs = ssm::ScanInputs {
                    x: self.value(x).data(),
                    delta: self.value(delta).data(),
                    a: self.value(a).data(),
                    b: self.value(b).data(),
                    c: self.value(c).data(),
                    d: self.value(d).data(),
                };
                let gr = ssm::scan_backward(dims, &inputs, states, gd);
                acc(x, gr.dx);
                acc(delta, gr.ddelta);
                acc(a, gr.da);
                acc(b, gr.db);
                acc(c, gr.dc);
                acc(d, gr.dd);
            }
            Op::PmdDwt { x, cfg, grad, planes, h, w } => {
                acc(*x, pmd::dwt_step_backward(self.value(*x).data(), *planes, *h, *w, cfg, *grad, gd));
            }
            Op::Sobel { x, planes, h, w } => {
                acc(*x, pmd::sobel_backward(self.value(*x).data(), node.value.data(), *planes, *h, *w, gd));
            }
            Op::ConcatChannels { parts, batch, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    let mut dp = Vec::with_capacity(batch * c * inner);
                    for nb in 0..*batch {
                        let start = (nb * total + offset) * inner;
                        dp.extend_from_slice(&gd[start..start + c * inner]);
                    }
                    acc(p, dp);
                    offset += c;
                }
            }
            Op::NarrowLast { x, offset, width } => {
                let d = *self.shape(*x).last().unwrap();
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, row) in gd.chunks(*width).enumerate() {
                    dx[r * d + offset..r * d + offset + width].copy_from_slice(row);
                }
                acc(*x, dx);
            }
            Op::AddBroadcast { x, p } => {
                acc(*x, gd.to_vec());
                if self.wants(*p) {
                    let inner = self.value(*p).len();
                    let mut dp = vec![T::zero(); inner];
                    for chunk in gd.chunks(inner) {
                        for (a, &b) in dp.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    acc(*p, dp);
                }
            }
        }
    }
}
