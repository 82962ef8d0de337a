use std::io::Write;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use super::net::{argmax_classes, Outputs, PMamba};
use crate::data::{make_batch, synth_dataset, select, Sample, Split, SynthConfig};
use crate::error::{config_err, data_err, dim_err, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub prim: f64,
    pub fcn: f64,
    pub pmd: f64,
    pub vim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { prim: 1.0, fcn: 0.4, pmd: 0.4, vim: 0.4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.prim > 0.0) || [self.fcn, self.pmd, self.vim].iter().any(|w| !(*w >= 0.0)) {
            return Err(config_err!("loss weights must be non-negative with a positive primary weight"));
        }
        Ok(())
    }
}

/// The weighted total and its four cross-entropy terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub prim: Var,
    pub fcn: Var,
    pub pmd: Var,
    pub vim: Var,
}

pub fn total_loss<T: Real>(tape: &mut Tape<T>, out: &Outputs, masks: Rc<[u8]>, lw: &LossWeights) -> Result<LossTerms> {
    lw.validate()?;
    let prim = tape.cross_entropy(out.seg, masks.clone())?;
    let fcn = tape.cross_entropy(out.fcn, masks.clone())?;
    let pmd = tape.cross_entropy(out.aux_pmd, masks.clone())?;
    let vim = tape.cross_entropy(out.aux_vim, masks)?;
    let mut total = tape.scale(prim, T::lit(lw.prim));
    for (term, w) in [(fcn, lw.fcn), (pmd, lw.pmd), (vim, lw.vim)] {
        let t = tape.scale(term, T::lit(w));
        total = tape.add(total, t)?;
    }
    Ok(LossTerms { total, prim, fcn, pmd, vim })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
}

/// Precision, recall and Dice of a binary prediction. Two empty masks
/// score 1 on all three; a ratio whose denominator is zero otherwise
/// scores 0.
pub fn metrics(pred: &[u8], truth: &[u8]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(dim_err!("prediction has {} pixels, mask {}", pred.len(), truth.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p > 0, t > 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(Metrics { precision: 1.0, recall: 1.0, dice: 1.0 });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics { precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fn_), dice: ratio(2 * tp, 2 * tp + fp + fn_) })
}

/// Per-image mean of [`metrics`].
pub fn mean_metrics(items: &[Metrics]) -> Metrics {
    let n = items.len().max(1) as f64;
    Metrics {
        precision: items.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: items.iter().map(|m| m.recall).sum::<f64>() / n,
        dice: items.iter().map(|m| m.dice).sum::<f64>() / n,
    }
}

/// Plain SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &crate::tape::Gradients<T>) {
        let (lr, mu) = (T::lit(self.lr), T::lit(self.momentum));
        for (id, v) in store.ids().collect::<Vec<_>>().into_iter().zip(self.velocity.iter_mut()) {
            let g = grads.get(bound[id]);
            let p = store.get_mut(id);
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

/// Learning rate of the toy trainer; tuned on the synthetic set.
pub const DEFAULT_LR: f64 = 0.01;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 8, lr: DEFAULT_LR, momentum: 0.9, seed: 0, weights: LossWeights::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_prim: f64,
    pub loss_fcn: f64,
    pub loss_pmd: f64,
    pub loss_vim: f64,
    pub val: Metrics,
}

pub const LOG_HEADER: &str = "epoch,loss_prim,loss_fcn,loss_pmd,loss_vim,val_precision,val_recall,val_dice";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.loss_prim,
            self.loss_fcn,
            self.loss_pmd,
            self.loss_vim,
            self.val.precision,
            self.val.recall,
            self.val.dice
        )
    }
}

/// Loss values of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub prim: f64,
    pub fcn: f64,
    pub pmd: f64,
    pub vim: f64,
}

/// One forward/backward/update on a batch.
pub fn train_step<T: Real>(
    net: &PMamba,
    store: &mut ParamStore<T>,
    opt: &mut Sgd<T>,
    samples: &[&Sample<T>],
    lw: &LossWeights,
) -> Result<StepLosses> {
    let batch = make_batch(samples)?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(batch.images);
    let out = net.forward(&mut tape, &p, x)?;
    let terms = total_loss(&mut tape, &out, batch.masks.into(), lw)?;
    let item = |v: Var| tape.value(v).item().as_f64();
    let losses = StepLosses {
        total: item(terms.total),
        prim: item(terms.prim),
        fcn: item(terms.fcn),
        pmd: item(terms.pmd),
        vim: item(terms.vim),
    };
    if !losses.total.is_finite() {
        return Err(data_err!("training diverged: loss is {}", losses.total));
    }
    let grads = tape.backward(terms.total)?;
    opt.step(store, &p, &grads);
    Ok(losses)
}

/// Mean per-image metrics of the primary head, in batches.
pub fn evaluate<T: Real>(net: &PMamba, store: &ParamStore<T>, samples: &[Sample<T>], batch_size: usize) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(data_err!("nothing to evaluate"));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample<T>> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let pred = argmax_classes(&net.predict(store, &batch.images)?)?;
        let plane = chunk[0].mask.len();
        for (i, s) in chunk.iter().enumerate() {
            per_image.push(metrics(&pred[i * plane..(i + 1) * plane], &s.mask)?);
        }
    }
    Ok(mean_metrics(&per_image))
}

/// Momentum SGD on `train`, one validation pass per epoch. Each epoch's
/// CSV row is written to `log` as soon as it is known.
pub fn train_toy<T: Real>(
    net: &PMamba,
    store: &mut ParamStore<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(data_err!("training set is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(config_err!("batch size must be positive, lr > 0 and momentum in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(store, cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let l = train_step(net, store, &mut opt, &batch, &cfg.weights)?;
            for (s, v) in sums.iter_mut().zip([l.prim, l.fcn, l.pmd, l.vim]) {
                *s += v;
            }
            steps += 1;
        }
        let val_metrics = if val.is_empty() {
            Metrics { precision: f64::NAN, recall: f64::NAN, dice: f64::NAN }
        } else {
            evaluate(net, store, val, cfg.batch_size)?
        };
        let n = steps as f64;
        let row = EpochLog {
            epoch,
            loss_prim: sums[0] / n,
            loss_fcn: sums[1] / n,
            loss_pmd: sums[2] / n,
            loss_vim: sums[3] / n,
            val: val_metrics,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", row.csv_row())?;
            w.flush()?;
        }
        history.push(row);
    }
    Ok(history)
}

/// One trained variant in an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub test: Metrics,
}

pub const ABLATION_HEADER: &str = "variant,seed,steps,precision,recall,dice";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6}",
            self.variant, self.seed, self.steps, self.test.precision, self.test.recall, self.test.dice
        )
    }
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Trains every variant on the same data with the same seed and budget and
/// scores it on the test split.
pub fn ablate<T: Real>(cfg: &AblationConfig, mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(config_err!("ablation needs at least one variant and one seed"));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let data = synth_dataset::<T>(&SynthConfig { seed, ..cfg.data.clone() })?;
        let (train, test) = (select(&data, Split::Train), select(&data, Split::Test));
        for &variant in &cfg.variants {
            let mcfg = ModelConfig { variant, ..cfg.model.clone() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (net, mut store) = PMamba::new::<T, _>(mcfg, &mut rng)?;
            let tcfg = TrainConfig { seed, ..cfg.train.clone() };
            train_toy(&net, &mut store, &train, &[], &tcfg, None)?;
            let steps = tcfg.epochs * train.len().div_ceil(tcfg.batch_size);
            let row = AblationRow { variant, seed, steps, test: evaluate(&net, &store, &test, tcfg.batch_size)? };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_identities() {
        let m = metrics(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!((m.precision, m.recall, m.dice), (1.0, 1.0, 1.0));
        let m = metrics(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!((m.precision, m.recall, m.dice), (0.0, 0.0, 0.0));
        let m = metrics(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 1.0));
        assert!((m.dice - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(metrics(&[0, 0], &[0, 0]).unwrap().dice, 1.0);
        assert_eq!(metrics(&[0, 0], &[1, 0]).unwrap().dice, 0.0);
        assert_eq!(metrics(&[1, 0], &[0, 0]).unwrap().dice, 0.0);
        assert!(metrics(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { prim: 0.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { vim: -0.1, ..LossWeights::default() }.validate().is_err());
    }
}
