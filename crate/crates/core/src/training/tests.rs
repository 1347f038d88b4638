use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{self, COMPOSITE_TOL};
use crate::data::{generate, toy_specs};
use crate::generator::{BoundGenerator, ConvSpec};
use crate::metrics::QSnr;
use crate::pipeline::prepare_all;

fn toy_set(n: usize, seed: u64) -> Vec<Prepared> {
    let utts: Vec<_> = toy_specs(n, seed, &[0.0, 5.0, 10.0], 0.3)
        .iter()
        .map(|s| generate(s).unwrap().0)
        .collect();
    prepare_all(&utts, &Stft::new(FrameParams::default())).unwrap()
}

fn toy_config(epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.train.max_epochs = epochs;
    cfg.train.patience = epochs.max(1);
    cfg
}

fn checksum(ts: &[&Tensor]) -> Vec<u64> {
    ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn gen_sum(g: &GeneratorWeights) -> Vec<u64> {
    checksum(&g.named_params().into_iter().map(|(_, t)| t).collect::<Vec<_>>())
}

fn disc_sum(d: &DiscriminatorWeights) -> Vec<u64> {
    checksum(&d.named_params().into_iter().map(|(_, t)| t).collect::<Vec<_>>())
}

fn eval_loss(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).item()
}

#[test]
fn l1_is_zero_when_enhanced_equals_clean() {
    let p = &toy_set(1, 1)[0];
    // a map head that outputs the clean compressed magnitude
    let loss = eval_loss(|t| {
        let out = t.constant(p.clean_c.clone());
        let lin = t.constant(p.noisy_lin.clone());
        let clean = t.constant(p.clean_c.clone());
        l1_sa_loss(t, out, lin, clean, HeadMode::Map)
    });
    assert_eq!(loss, 0.0);
}

#[test]
fn unit_mask_gives_noisy_versus_clean_distance() {
    let p = &toy_set(1, 2)[0];
    let loss = eval_loss(|t| {
        let out = t.constant(Tensor::filled(p.noisy_lin.shape(), 1.0));
        let lin = t.constant(p.noisy_lin.clone());
        let clean = t.constant(p.clean_c.clone());
        l1_sa_loss(t, out, lin, clean, HeadMode::Mask)
    });
    let expect = mean_abs_diff(&p.noisy_c, &p.clean_c);
    assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
}

#[test]
fn l1_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand = |n| Tensor::new(vec![n, 5], (0..n * 5).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
    let (m, lin, clean) = (rand(4), rand(4), rand(4));
    let loss = eval_loss(|t| {
        let (a, b, c) = (t.constant(m.clone()), t.constant(lin.clone()), t.constant(clean.clone()));
        l1_sa_loss(t, a, b, c, HeadMode::Mask)
    });
    let oracle: f64 = (0..20)
        .map(|i| ((m.data()[i] * lin.data()[i]).ln_1p() - clean.data()[i]).abs())
        .sum::<f64>()
        / 20.0;
    assert!((loss - oracle).abs() < 1e-14);
}

#[test]
fn l1_rejects_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[3, 4]));
    let b = tape.constant(Tensor::zeros(&[3, 4]));
    let c = tape.constant(Tensor::zeros(&[3, 5]));
    assert!(l1_sa_loss(&mut tape, a, b, c, HeadMode::Mask).is_err());
}

#[test]
fn d_loss_examples() {
    let scalar = |t: &mut Tape, v: f64| t.constant(Tensor::scalar(v));
    let perfect = eval_loss(|t| {
        let (c, e) = (scalar(t, 1.0), scalar(t, 0.3));
        d_loss(t, &[c], &[e], &[0.3])
    });
    assert_eq!(perfect, 0.0);
    let constant_zero = eval_loss(|t| {
        let (c, e) = (scalar(t, 0.0), scalar(t, 0.0));
        d_loss(t, &[c], &[e], &[0.5])
    });
    assert!((constant_zero - 1.25).abs() < 1e-15);
    let batch = eval_loss(|t| {
        let (c1, e1, c2, e2) = (scalar(t, 0.0), scalar(t, 0.0), scalar(t, 1.0), scalar(t, 0.5));
        d_loss(t, &[c1, c2], &[e1, e2], &[0.5, 0.5])
    });
    assert!((batch - 0.625).abs() < 1e-15);
}

#[test]
fn d_loss_rejects_labels_outside_unit_interval() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(1.0));
    let e = tape.constant(Tensor::scalar(0.0));
    for q in [-0.1, 1.1, f64::NAN] {
        assert!(d_loss(&mut tape, &[c], &[e], &[q]).is_err(), "{q}");
    }
    assert!(d_loss(&mut tape, &[c], &[e], &[0.5, 0.5]).is_err());
}

#[test]
fn g_loss_examples() {
    let at = |score: f64, s: f64| {
        eval_loss(|t| {
            let e = t.constant(Tensor::scalar(score));
            g_loss(t, &[e], s)
        })
    };
    assert_eq!(at(1.0, 1.0), 0.0);
    assert_eq!(at(0.0, 1.0), 1.0);
    assert_eq!(at(0.7, 0.7), 0.0);
    let mut tape = Tape::new();
    assert!(g_loss(&mut tape, &[], 1.0).is_err());
}

#[test]
fn g_loss_gradient_matches_finite_differences() {
    let mut gcfg = GeneratorConfig::scaled(8, 2, 16);
    gcfg.n_blocks = 1;
    gcfg.front_end = vec![ConvSpec::new(8, 2, 1)];
    let dcfg = DiscriminatorConfig::with_layers(&[(3, 3)], &[4]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = GeneratorWeights::init(&gcfg, &mut rng).unwrap();
    let d = DiscriminatorWeights::init(&dcfg, &mut rng).unwrap();
    let rand = |rng: &mut ChaCha8Rng| Tensor::new(vec![3, 257], (0..3 * 257).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();
    let (x, lin, clean) = (rand(&mut rng), rand(&mut rng), rand(&mut rng));
    let inputs: Vec<Tensor> = g.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let report = gradcheck::check(
        &inputs,
        |tape, vars| {
            let bound = BoundGenerator::from_vars(&gcfg, vars)?;
            let frozen = d.bind(tape, false);
            let xv = tape.constant(x.clone());
            let lv = tape.constant(lin.clone());
            let cv = tape.constant(clean.clone());
            let out = generator_forward(tape, &bound, &gcfg, xv)?;
            let enh = enhanced_compressed(tape, out, lv, gcfg.head_mode)?;
            let s = disc_forward(tape, &frozen, &d, &dcfg, enh, cv)?;
            g_loss(tape, &[s], 1.0)
        },
        Some(12),
    )
    .unwrap();
    assert!(report.max_rel_err < COMPOSITE_TOL, "{report:?}");
}

#[test]
fn d_gradient_flows_only_into_discriminator() {
    let set = toy_set(2, 5);
    let gcfg = GeneratorConfig::toy();
    let dcfg = DiscriminatorConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = GeneratorWeights::init(&gcfg, &mut rng).unwrap();
    let d = DiscriminatorWeights::init(&dcfg, &mut rng).unwrap();
    let stft = Stft::new(FrameParams::default());
    let batch: Vec<&Prepared> = set.iter().collect();
    let samples = sample(&gcfg, &g, &batch, &stft, &QSnr).unwrap();

    let mut tape = Tape::new();
    let gb = g.bind(&mut tape, true);
    let db = d.bind(&mut tape, true);
    let clean = tape.constant(set[0].clean_c.clone());
    let enh = tape.constant(samples[0].enhanced_c.clone());
    let c = disc_forward(&mut tape, &db, &d, &dcfg, clean, clean).unwrap();
    let e = disc_forward(&mut tape, &db, &d, &dcfg, enh, clean).unwrap();
    let loss = d_loss(&mut tape, &[c], &[e], &[samples[0].label]).unwrap();
    tape.backward(loss).unwrap();
    assert!(gb.grads(&tape).iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    assert!(db.grads(&tape).iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn alternation_purity() {
    let set = toy_set(2, 7);
    let gcfg = GeneratorConfig::toy();
    let dcfg = DiscriminatorConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = GeneratorWeights::init(&gcfg, &mut rng).unwrap();
    let mut d = DiscriminatorWeights::init(&dcfg, &mut rng).unwrap();
    let mut g_opt = AdamState::new(g.named_params(), 1e-3);
    let mut d_opt = AdamState::new(d.named_params(), 1e-3);
    let stft = Stft::new(FrameParams::default());
    let batch: Vec<&Prepared> = set.iter().collect();

    let samples = sample(&gcfg, &g, &batch, &stft, &QSnr).unwrap();
    let (g0, d0) = (gen_sum(&g), disc_sum(&d));
    d_step(&dcfg, &mut d, &mut d_opt, &batch, &samples).unwrap();
    assert_eq!(gen_sum(&g), g0);
    assert_ne!(disc_sum(&d), d0);

    let (d1, spectral) = (disc_sum(&d), d.spectral_vectors());
    g_step(&gcfg, &mut g, &mut g_opt, &dcfg, &d, &batch, 1.0, 5.0).unwrap();
    assert_eq!(disc_sum(&d), d1);
    assert_eq!(d.spectral_vectors(), spectral);
    assert_ne!(gen_sum(&g), g0);
}

#[test]
fn discriminator_steps_regress_toward_labels() {
    let set = toy_set(3, 9);
    let gcfg = GeneratorConfig::toy();
    let dcfg = DiscriminatorConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = GeneratorWeights::init(&gcfg, &mut rng).unwrap();
    let mut d = DiscriminatorWeights::init(&dcfg, &mut rng).unwrap();
    let mut opt = AdamState::new(d.named_params(), 1e-3);
    let batch: Vec<&Prepared> = set.iter().collect();
    let samples = sample(&gcfg, &g, &batch, &Stft::new(FrameParams::default()), &QSnr).unwrap();
    let first = d_step(&dcfg, &mut d, &mut opt, &batch, &samples).unwrap();
    let mut last = first;
    for _ in 0..60 {
        last = d_step(&dcfg, &mut d, &mut opt, &batch, &samples).unwrap();
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn gradient_clipping_bounds_the_update() {
    let set = toy_set(1, 11);
    let gcfg = GeneratorConfig::toy();
    let dcfg = DiscriminatorConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g0 = GeneratorWeights::init(&gcfg, &mut rng).unwrap();
    let d = DiscriminatorWeights::init(&dcfg, &mut rng).unwrap();
    let batch: Vec<&Prepared> = set.iter().collect();
    let run = |clip: f64| {
        let mut g = g0.clone();
        let mut opt = AdamState::new(g.named_params(), 1e-3);
        let stats = g_step(&gcfg, &mut g, &mut opt, &dcfg, &d, &batch, 1.0, clip).unwrap();
        let moved: f64 = g
            .named_params()
            .iter()
            .zip(g0.named_params())
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)))
            .sum();
        (stats, moved.sqrt())
    };
    let (unclipped, free_step) = run(0.0);
    let (clipped, clipped_step) = run(1e-7);
    // the reported norm is the one before clipping
    assert_eq!(unclipped.grad_norm, clipped.grad_norm);
    assert!(clipped.grad_norm > 1e-7);
    assert!(clipped_step < free_step, "{clipped_step} vs {free_step}");
}

#[test]
fn one_epoch_yields_loadable_checkpoint() {
    let set = toy_set(6, 13);
    let cfg = toy_config(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    let out = pretrain(&cfg, &set[..4], &set[4..], &QSnr, Some(&path)).unwrap();
    assert_eq!(out.log.records.len(), 1);
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.header.meta["phase"], "pretrain");
    let w = load_pretrained(&path, &cfg.generator).unwrap();
    assert_eq!(w, out.weights);
}

#[test]
fn training_loss_mostly_decreases_over_five_epochs() {
    let set = toy_set(10, 14);
    let cfg = toy_config(5);
    let out = pretrain(&cfg, &set[..8], &set[8..], &QSnr, None).unwrap();
    let l1: Vec<f64> = out.log.records.iter().map(|r| r.l1).collect();
    assert_eq!(l1.len(), 5);
    let regressions = l1.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(regressions <= 1, "{l1:?}");
    assert!(l1[4] < l1[0]);
}

#[test]
fn pretraining_is_deterministic() {
    let set = toy_set(6, 15);
    let cfg = toy_config(2);
    let a = pretrain(&cfg, &set[..4], &set[4..], &QSnr, None).unwrap();
    let b = pretrain(&cfg, &set[..4], &set[4..], &QSnr, None).unwrap();
    assert!(a.log.same_values(&b.log));
    assert_eq!(a.weights, b.weights);
    let mut other = cfg.clone();
    other.train.seed += 1;
    let c = pretrain(&other, &set[..4], &set[4..], &QSnr, None).unwrap();
    assert!(!a.log.same_values(&c.log));
}

#[test]
fn early_stopping_keeps_best_weights() {
    let set = toy_set(6, 16);
    let mut cfg = toy_config(30);
    cfg.train.patience = 1;
    cfg.train.lr = 0.5;
    let out = pretrain(&cfg, &set[..4], &set[4..], &QSnr, None).unwrap();
    assert!(out.log.records.len() < 30);
    let best = out.log.records.iter().map(|r| r.val_l1).fold(f64::INFINITY, f64::min);
    if out.best_epoch > 0 {
        assert_eq!(out.best_val_l1, best);
    }
    let stft = Stft::new(FrameParams::default());
    let (val_l1, _) = validate(&cfg.generator, &out.weights, &set[4..], &stft, &QSnr).unwrap();
    assert_eq!(val_l1, out.best_val_l1);
}

#[test]
fn empty_sets_are_rejected() {
    let set = toy_set(2, 17);
    let cfg = toy_config(1);
    assert!(pretrain(&cfg, &[], &set, &QSnr, None).is_err());
    assert!(pretrain(&cfg, &set, &[], &QSnr, None).is_err());
    let g = GeneratorWeights::init(&cfg.generator, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(metricgan_finetune(&cfg, &g, &set, &[], &QSnr, None).is_err());
}

#[test]
fn missing_pretrained_checkpoint_is_an_error() {
    let err = load_pretrained("/no/such/pre.ckpt", &GeneratorConfig::toy()).unwrap_err();
    assert!(err.to_string().contains("/no/such/pre.ckpt"), "{err}");
}

#[test]
fn finetune_keeps_size_and_never_regresses_on_validation() {
    let set = toy_set(6, 18);
    let mut cfg = toy_config(2);
    cfg.train.finetune_epochs = 2;
    cfg.train.d_warmup_steps = 4;
    let pre = pretrain(&cfg, &set[..4], &set[4..], &QSnr, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ft.ckpt");
    let ft = metricgan_finetune(&cfg, &pre.weights, &set[..4], &set[4..], &QSnr, Some(&path)).unwrap();
    assert_eq!(ft.weights.param_count(), pre.weights.param_count());
    assert!(ft.best_val_q >= ft.initial_val_q);
    let epochs: Vec<usize> = ft.log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, [0, 1, 2]);
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.generator_weights().unwrap(), ft.weights);
    assert!(ck.discriminator_weights().unwrap().is_some());
}

#[test]
fn log_csv_and_invariants() {
    let mut log = TrainLog::new(Phase::Pretrain);
    let rec = |epoch, l1| EpochRecord {
        epoch,
        l1,
        val_l1: 0.5,
        l_d: 0.0,
        l_g: 0.0,
        val_q: 0.25,
        wall_s: 0.1,
    };
    log.push(rec(1, 1.0)).unwrap();
    log.push(rec(2, 0.5)).unwrap();
    assert!(log.push(rec(2, 0.4)).is_err());
    assert!(log.push(rec(3, f64::NAN)).is_err());
    let csv = log.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines[1], "1,pretrain,1,0.5,0,0,0.25,0.100");
    assert_eq!(lines.len(), 3);
}
