use std::path::Path;

use rand::{Rng, SeedableRng};

use super::config::{ModelConfig, StagePlan};
use crate::error::{dim_err, Result};
use crate::kernels::ChannelAxis;
use crate::params::{Bound, ParamId, ParamStore};
use crate::pmd::{ConvNorm, PmdBlock};
use crate::ssm::{tokens_to_map_var, PatchEmbed, PatchEmbedConfig, VimBlock};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Four feature maps, 1/4 through 1/32.
pub type Features = [Var; 4];

/// Convolution with bias, no normalisation.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        ksize: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * ksize * ksize;
        let w = store.uniform(format!("{name}.w"), &[c_out, c_in, ksize, ksize], fan_in, rng);
        let b = store.zeros(format!("{name}.b"), &[c_out]);
        Conv { w, b, pad: ksize / 2 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.w], 1, self.pad)?;
        tape.bias_add(y, p[self.b], ChannelAxis::First)
    }
}

#[derive(Debug, Clone)]
pub struct PmdBranch {
    pub stem: [ConvNorm; 2],
    pub stages: Vec<Vec<PmdBlock>>,
}

impl PmdBranch {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let w = cfg.plan.widths;
        let stem = [
            ConvNorm::new(store, "pmd.stem0", cfg.in_channels, w[0], 3, 2, rng),
            ConvNorm::new(store, "pmd.stem1", w[0], w[0], 3, 2, rng),
        ];
        let pre = cfg.preprocess();
        let stages = (0..4)
            .map(|i| {
                (0..cfg.plan.pmd_blocks[i])
                    .map(|j| {
                        let (c_in, stride) = if j == 0 && i > 0 { (w[i - 1], 2) } else { (w[i], 1) };
                        let name = format!("pmd.s{}.b{j}", i + 1);
                        PmdBlock::new(store, &name, c_in, w[i], stride, pre.clone(), rng)
                    })
                    .collect()
            })
            .collect();
        PmdBranch { stem, stages }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Features> {
        let mut h = x;
        for unit in &self.stem {
            let y = unit.forward(tape, p, h)?;
            h = tape.relu(y);
        }
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(tape, p, h)?;
            }
            out.push(h);
        }
        Ok(out.try_into().expect("four stages"))
    }
}

#[derive(Debug, Clone)]
pub struct VimStage {
    pub embed: PatchEmbed,
    pub blocks: Vec<VimBlock>,
}

#[derive(Debug, Clone)]
pub struct MambaBranch {
    pub stages: Vec<VimStage>,
}

impl MambaBranch {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let w = cfg.plan.widths;
        let mut stages = Vec::with_capacity(4);
        let mut extent = cfg.image_size;
        let mut c_in = cfg.in_channels;
        for i in 0..4 {
            let patch = if i == 0 { 4 } else { 2 };
            let pcfg = PatchEmbedConfig::new(patch, c_in, w[i], extent, extent)?;
            let embed = PatchEmbed::new(store, &format!("vim.s{}.embed", i + 1), pcfg, rng);
            let blocks =
                (0..cfg.plan.vim_blocks).map(|j| VimBlock::new(store, &format!("vim.s{}.b{j}", i + 1), w[i], rng)).collect();
            stages.push(VimStage { embed, blocks });
            extent /= patch;
            c_in = w[i];
        }
        Ok(MambaBranch { stages })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Features> {
        let mut h = x;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            let mut tok = stage.embed.forward(tape, p, h)?;
            for block in &stage.blocks {
                tok = block.forward(tape, p, tok)?;
            }
            h = tokens_to_map_var(tape, tok, stage.embed.cfg.grid())?;
            out.push(h);
        }
        Ok(out.try_into().expect("four stages"))
    }
}

/// Top-down decoder over all four scales.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub lateral: [Conv; 4],
    pub smooth: ConvNorm,
    pub classify: Conv,
}

impl SegHead {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let hw = cfg.head_width;
        let lateral = std::array::from_fn(|i| Conv::new(store, &format!("seg.lat{}", i + 1), cfg.plan.widths[i], hw, 1, rng));
        let smooth = ConvNorm::new(store, "seg.smooth", hw, hw, 3, 1, rng);
        let classify = Conv::new(store, "seg.cls", hw, cfg.classes, 1, rng);
        SegHead { lateral, smooth, classify }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f: &Features) -> Result<Var> {
        let mut top = self.lateral[3].forward(tape, p, f[3])?;
        for i in (0..3).rev() {
            let lat = self.lateral[i].forward(tape, p, f[i])?;
            let up = tape.upsample(top, 2)?;
            top = tape.add(lat, up)?;
        }
        let y = self.smooth.forward(tape, p, top)?;
        let y = tape.relu(y);
        // the 1×1 classifier commutes with bilinear upsampling, so it runs
        // at 1/4 scale
        let logits = self.classify.forward(tape, p, y)?;
        tape.upsample(logits, 4)
    }
}

/// Single-scale auxiliary decoder on the deepest feature.
#[derive(Debug, Clone)]
pub struct FcnHead {
    pub body: ConvNorm,
    pub classify: Conv,
}

impl FcnHead {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.plan.widths[3];
        FcnHead {
            body: ConvNorm::new(store, &format!("{name}.body"), c, c, 3, 1, rng),
            classify: Conv::new(store, &format!("{name}.cls"), c, cfg.classes, 1, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, deepest: Var) -> Result<Var> {
        let y = self.body.forward(tape, p, deepest)?;
        let y = tape.relu(y);
        let y = self.classify.forward(tape, p, y)?;
        tape.upsample(y, StagePlan::scale(3))
    }
}

/// Elementwise sum per scale.
pub fn fuse<T: Real>(tape: &mut Tape<T>, a: &Features, b: &Features) -> Result<Features> {
    let mut out = Vec::with_capacity(4);
    for (x, y) in a.iter().zip(b) {
        out.push(tape.add(*x, *y)?);
    }
    Ok(out.try_into().expect("four scales"))
}

/// Every intermediate the losses and tests look at.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub pmd: Features,
    pub vim: Features,
    pub fused: Features,
    pub seg: Var,
    pub fcn: Var,
    pub aux_pmd: Var,
    pub aux_vim: Var,
}

/// The dual-branch segmentation network.
#[derive(Debug, Clone)]
pub struct PMamba {
    pub cfg: ModelConfig,
    pub pmd: PmdBranch,
    pub vim: MambaBranch,
    pub seg: SegHead,
    pub fcn: FcnHead,
    pub aux_pmd: FcnHead,
    pub aux_vim: FcnHead,
}

impl PMamba {
    /// Builds the network and registers freshly initialised parameters.
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let pmd = PmdBranch::new(&mut store, &cfg, rng);
        let vim = MambaBranch::new(&mut store, &cfg, rng)?;
        let seg = SegHead::new(&mut store, &cfg, rng);
        let fcn = FcnHead::new(&mut store, "fcn", &cfg, rng);
        let aux_pmd = FcnHead::new(&mut store, "aux_pmd", &cfg, rng);
        let aux_vim = FcnHead::new(&mut store, "aux_vim", &cfg, rng);
        Ok((PMamba { cfg, pmd, vim, seg, fcn, aux_pmd, aux_vim }, store))
    }

    /// [`new`](Self::new) with a ChaCha8 generator seeded from `seed`.
    pub fn seeded<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        Self::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (s, c) = (self.cfg.image_size, self.cfg.in_channels);
        match shape {
            [_, ch, h, w] if *ch == c && *h == s && *w == s => Ok(()),
            [_, _, h, w] if h % 32 != 0 || w % 32 != 0 => {
                Err(dim_err!("input extents {h}×{w} are not multiples of 32"))
            }
            _ => Err(dim_err!("model expects N×{c}×{s}×{s} input, got {:?}", shape)),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Outputs> {
        self.check_input(tape.shape(x))?;
        let pmd = self.pmd.forward(tape, p, x)?;
        let vim = self.vim.forward(tape, p, x)?;
        let fused = fuse(tape, &pmd, &vim)?;
        let seg = self.seg.forward(tape, p, &fused)?;
        let fcn = self.fcn.forward(tape, p, fused[3])?;
        let aux_pmd = self.aux_pmd.forward(tape, p, pmd[3])?;
        let aux_vim = self.aux_vim.forward(tape, p, vim[3])?;
        Ok(Outputs { pmd, vim, fused, seg, fcn, aux_pmd, aux_vim })
    }

    /// Primary-head logits for a batch, without recording gradients.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out.seg).clone())
    }

    /// Saves weights, manifest and `model.txt` into `dir`.
    pub fn save_checkpoint<T: Real>(&self, store: &ParamStore<T>, dir: &Path) -> Result<()> {
        store.save(dir)?;
        self.cfg.save(&dir.join("model.txt"))
    }

    /// Rebuilds a network from a checkpoint directory.
    pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(Self, ParamStore<T>)> {
        let cfg = ModelConfig::load(&dir.join("model.txt"))?;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let (net, mut store) = PMamba::new(cfg, &mut rng)?;
        store.load(dir)?;
        Ok((net, store))
    }
}

/// Arg-max over the class axis of `N×K×H×W` logits.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, k, h, w] = *logits.shape() else {
        return Err(dim_err!("logits must be N×K×H×W, got {:?}", logits.shape()));
    };
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for i in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * plane + i] > d[(b * k + best) * plane + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
