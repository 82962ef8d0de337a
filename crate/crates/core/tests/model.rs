use std::rc::Rc;

use pmtk::data::{make_batch, synth_dataset, synth_generate, select, Split, SynthConfig};
use pmtk::model::*;
use pmtk::pmd::{PmdBlock, Preprocess};
use pmtk::{Error, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(cfg: ModelConfig, seed: u64) -> (PMamba, ParamStore<f32>) {
    PMamba::new::<f32, _>(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn images(n: usize, size: usize, seed: u64) -> (Tensor<f32>, Vec<u8>) {
    let s = synth_generate::<f32>(&SynthConfig { seed, count: n, size, ..SynthConfig::default() }).unwrap();
    let b = make_batch(&s.iter().collect::<Vec<_>>()).unwrap();
    (b.images, b.masks)
}

fn run(net: &PMamba, store: &ParamStore<f32>, x: &Tensor<f32>) -> (Tape<f32>, Outputs) {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = net.forward(&mut tape, &p, xv).unwrap();
    (tape, out)
}

#[test]
fn stage_shapes_at_64() {
    let (net, store) = build(ModelConfig::default(), 0);
    let (x, _) = images(2, 64, 1);
    let (tape, out) = run(&net, &store, &x);
    let want = [[2, 16, 16, 16], [2, 32, 8, 8], [2, 64, 4, 4], [2, 128, 2, 2]];
    for i in 0..4 {
        assert_eq!(tape.shape(out.pmd[i]), want[i]);
        assert_eq!(tape.shape(out.vim[i]), want[i]);
        assert_eq!(tape.shape(out.fused[i]), want[i]);
    }
    for head in [out.seg, out.fcn, out.aux_pmd, out.aux_vim] {
        assert_eq!(tape.shape(head), [2, 2, 64, 64]);
    }
}

#[test]
fn rejects_indivisible_extent() {
    let (net, store) = build(ModelConfig::micro(), 0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[1, 1, 40, 40]));
    assert!(matches!(net.forward(&mut tape, &p, x), Err(Error::Dimension(_))));
    let x = tape.constant(Tensor::zeros(&[1, 1, 64, 64]));
    assert!(matches!(net.forward(&mut tape, &p, x), Err(Error::Dimension(_))));
}

#[test]
fn forward_is_deterministic() {
    let (x, _) = images(2, 32, 3);
    let (a, sa) = build(ModelConfig::micro(), 7);
    let (b, sb) = build(ModelConfig::micro(), 7);
    assert_eq!(a.predict(&sa, &x).unwrap(), b.predict(&sb, &x).unwrap());
    let (c, sc) = build(ModelConfig::micro(), 8);
    assert_ne!(a.predict(&sa, &x).unwrap(), c.predict(&sc, &x).unwrap());
}

#[test]
fn diffusion_leaves_constant_features_alone() {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let diffuse = PmdBlock::new(&mut store, "a", 4, 4, 1, cfg.preprocess(), &mut rng);
    let plain = PmdBlock { pre: Preprocess::Identity, ..diffuse.clone() };
    let u = Tensor::<f64>::full(&[2, 4, 8, 8], 0.3);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(u);
    let a = diffuse.forward(&mut tape, &p, x).unwrap();
    let b = plain.forward(&mut tape, &p, x).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) <= 1e-12);
}

#[test]
fn zero_output_projections_leave_patch_embeddings() {
    let (net, mut store) = build(ModelConfig::micro(), 4);
    for stage in &net.vim.stages {
        for block in &stage.blocks {
            let w = store.get_mut(block.w_out);
            *w = Tensor::zeros(w.shape());
        }
    }
    let (x, _) = images(2, 32, 5);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(x);
    let full = net.vim.forward(&mut tape, &p, x).unwrap();
    let mut h = x;
    for (i, stage) in net.vim.stages.iter().enumerate() {
        let tok = stage.embed.forward(&mut tape, &p, h).unwrap();
        h = pmtk::ssm::tokens_to_map_var(&mut tape, tok, stage.embed.cfg.grid()).unwrap();
        assert_eq!(tape.value(full[i]), tape.value(h), "stage {i}");
    }
}

#[test]
fn positional_embeddings_get_gradient() {
    let (net, store) = build(ModelConfig::micro(), 6);
    let (x, masks) = images(4, 32, 6);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x);
    let out = net.forward(&mut tape, &p, xv).unwrap();
    let loss = total_loss(&mut tape, &out, masks.into(), &LossWeights::default()).unwrap();
    let g = tape.backward(loss.total).unwrap();
    for stage in &net.vim.stages {
        let gp = g.get(p[stage.embed.pos]);
        assert!(gp.data().iter().any(|&v| v != 0.0), "{}", store.name(stage.embed.pos));
    }
}

#[test]
fn fusion_is_a_commutative_sum() {
    let (net, store) = build(ModelConfig::micro(), 9);
    let (x, _) = images(1, 32, 9);
    let (mut tape, out) = run(&net, &store, &x);
    let zeros: Features = std::array::from_fn(|i| {
        let s = tape.shape(out.pmd[i]).to_vec();
        tape.constant(Tensor::zeros(&s))
    });
    let same = fuse(&mut tape, &out.pmd, &zeros).unwrap();
    let ab = fuse(&mut tape, &out.pmd, &out.vim).unwrap();
    let ba = fuse(&mut tape, &out.vim, &out.pmd).unwrap();
    for i in 0..4 {
        assert_eq!(tape.value(same[i]), tape.value(out.pmd[i]));
        assert_eq!(tape.value(ab[i]), tape.value(ba[i]));
        assert_eq!(tape.shape(ab[i]), tape.shape(out.pmd[i]));
    }
    let bad: Features = [zeros[1], zeros[1], zeros[2], zeros[3]];
    assert!(matches!(fuse(&mut tape, &out.pmd, &bad), Err(Error::Dimension(_))));
}

#[test]
fn loss_terms_add_up() {
    let (net, store) = build(ModelConfig::micro(), 10);
    let (x, masks) = images(2, 32, 10);
    let masks: Rc<[u8]> = masks.into();
    let (mut tape, out) = run(&net, &store, &x);
    let lw = LossWeights { prim: 1.0, fcn: 0.3, pmd: 0.2, vim: 0.7 };
    let t = total_loss(&mut tape, &out, masks.clone(), &lw).unwrap();
    let v = |v: Var| tape.value(v).item() as f64;
    let sum = v(t.prim) + 0.3 * v(t.fcn) + 0.2 * v(t.pmd) + 0.7 * v(t.vim);
    assert!((v(t.total) - sum).abs() <= 1e-6, "{} vs {sum}", v(t.total));

    let only = LossWeights { prim: 1.0, fcn: 0.0, pmd: 0.0, vim: 0.0 };
    let t = total_loss(&mut tape, &out, masks.clone(), &only).unwrap();
    assert_eq!(tape.value(t.total).item(), tape.value(t.prim).item());

    let bad: Rc<[u8]> = masks.iter().map(|_| 2).collect();
    assert!(matches!(total_loss(&mut tape, &out, bad, &only), Err(Error::Data(_))));
    let zero = LossWeights { prim: 0.0, ..only };
    assert!(matches!(total_loss(&mut tape, &out, masks, &zero), Err(Error::Config(_))));
}

#[test]
fn perfect_logits_have_no_loss() {
    let masks: Vec<u8> = (0..2 * 8 * 8).map(|i| (i % 3 == 0) as u8).collect();
    let logits = Tensor::<f64>::from_fn(&[2, 2, 8, 8], |i| {
        let (b, c, p) = (i / 128, (i / 64) % 2, i % 64);
        if masks[b * 64 + p] as usize == c { 20.0 } else { -20.0 }
    });
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let dummy = [l; 4];
    let out = Outputs { pmd: dummy, vim: dummy, fused: dummy, seg: l, fcn: l, aux_pmd: l, aux_vim: l };
    let t = total_loss(&mut tape, &out, masks.into(), &LossWeights::default()).unwrap();
    assert!(tape.value(t.total).item() <= 1e-6);
}

fn mask_strategy() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n)))
}

proptest! {
    #[test]
    fn dice_is_harmonic_mean((pred, truth) in mask_strategy()) {
        let m = metrics(&pred, &truth).unwrap();
        for v in [m.precision, m.recall, m.dice] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if m.precision + m.recall > 0.0 {
            let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((h - m.dice).abs() <= 1e-12);
        }
    }
}

#[test]
fn metric_conventions() {
    let m = metrics(&[0, 0, 0], &[0, 0, 0]).unwrap();
    assert_eq!((m.precision, m.recall, m.dice), (1.0, 1.0, 1.0));
    assert_eq!(metrics(&[0, 0, 0], &[0, 1, 0]).unwrap().dice, 0.0);
    assert_eq!(metrics(&[1, 0, 0], &[0, 0, 0]).unwrap().dice, 0.0);
    assert!(matches!(metrics(&[1, 0], &[1]), Err(Error::Dimension(_))));
}

fn tiny_data(count: usize, seed: u64) -> Vec<pmtk::data::Sample<f32>> {
    synth_generate::<f32>(&SynthConfig { seed, count, size: 32, ..SynthConfig::default() }).unwrap()
}

#[test]
fn one_epoch_smoke_and_log() {
    let (net, mut store) = build(ModelConfig::micro(), 11);
    let train = tiny_data(8, 11);
    let val = tiny_data(3, 99);
    let mut log = Vec::new();
    let cfg = TrainConfig { epochs: 1, seed: 11, ..TrainConfig::default() };
    let hist = train_toy(&net, &mut store, &train, &val, &cfg, Some(&mut log)).unwrap();
    assert_eq!(hist.len(), 1);
    assert!(hist[0].loss_prim.is_finite() && hist[0].loss_vim.is_finite());
    assert!((0.0..=1.0).contains(&hist[0].val.dice));
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1].split(',').count(), 8);
    assert!(matches!(train_toy(&net, &mut store, &[], &val, &cfg, None), Err(Error::Data(_))));
}

#[test]
fn training_is_seeded() {
    let train = tiny_data(16, 12);
    let cfg = TrainConfig { epochs: 1, seed: 5, ..TrainConfig::default() };
    let run = || {
        let (net, mut store) = build(ModelConfig::micro(), 5);
        train_toy(&net, &mut store, &train, &[], &cfg, None).unwrap()[0].loss_prim
    };
    let (a, b) = (run(), run());
    assert!((a - b).abs() <= 1e-6);
}

#[test]
fn small_steps_lower_the_loss_on_a_fixed_batch() {
    let (net, mut store) = build(ModelConfig::micro(), 13);
    let data = tiny_data(8, 13);
    let batch: Vec<_> = data.iter().collect();
    let mut opt = Sgd::new(&store, 1e-4, 0.9);
    let lw = LossWeights::default();
    let first = train_step(&net, &mut store, &mut opt, &batch, &lw).unwrap().total;
    let mut last = first;
    for _ in 0..50 {
        last = train_step(&net, &mut store, &mut opt, &batch, &lw).unwrap().total;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn checkpoint_roundtrip() {
    let cfg = ModelConfig { variant: Variant::Sobel, ..ModelConfig::micro() };
    let (net, store) = build(cfg, 14);
    let dir = tempfile::tempdir().unwrap();
    net.save_checkpoint(&store, dir.path()).unwrap();
    let (net2, store2) = PMamba::load_checkpoint::<f32>(dir.path()).unwrap();
    assert_eq!(net2.cfg, net.cfg);
    let (x, _) = images(2, 32, 14);
    assert_eq!(net.predict(&store, &x).unwrap(), net2.predict(&store2, &x).unwrap());
}

#[test]
fn ablation_table() {
    let cfg = AblationConfig {
        variants: Variant::ALL.to_vec(),
        seeds: vec![3],
        data: SynthConfig { count: 20, size: 32, ..SynthConfig::default() },
        model: ModelConfig::micro(),
        train: TrainConfig { epochs: 1, ..TrainConfig::default() },
    };
    let mut seen = 0;
    let rows = ablate::<f32>(&cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 3);
    assert_eq!(rows.iter().map(|r| r.variant).collect::<Vec<_>>(), Variant::ALL);
    assert!(rows.iter().all(|r| r.steps == rows[0].steps && r.steps > 0));
    assert_eq!(ABLATION_HEADER.split(',').count(), rows[0].csv_row().split(',').count());
    assert!(matches!("canny".parse::<Variant>(), Err(Error::Config(_))));
    let ds = synth_dataset::<f32>(&cfg.data).unwrap();
    assert!(!select(&ds, Split::Test).is_empty());
}
