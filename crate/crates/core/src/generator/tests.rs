use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{self, COMPOSITE_TOL};
use crate::autodiff::kernels;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn noisy_input(t_len: usize, rng: &mut impl Rng) -> Tensor {
    let n = t_len * FREQ_BINS;
    Tensor::new(vec![t_len, FREQ_BINS], (0..n).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap()
}

fn toy_weights(seed: u64) -> (GeneratorConfig, GeneratorWeights) {
    let cfg = GeneratorConfig::toy();
    let w = GeneratorWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (cfg, w)
}

#[test]
fn mask_structure() {
    let m = build_causal_mask(1).unwrap();
    assert_eq!(m.get(0, 0), 0.0);
    let m = build_causal_mask(3).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let want = if j > i { MASK_SENTINEL } else { 0.0 };
            assert_eq!(m.get(i, j), want, "({i},{j})");
        }
    }
    assert!(build_causal_mask(0).is_err());
}

#[test]
fn masked_softmax_has_exact_zeros_above_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let logits = tape.constant(random(&[5, 5], &mut rng));
    let mask = tape.constant(build_causal_mask(5).unwrap().into_tensor());
    let masked = tape.add(logits, mask).unwrap();
    let p = tape.softmax_last_dim(masked).unwrap();
    let p = tape.value(p);
    for i in 0..5 {
        let row_sum: f64 = p.row(i).iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
        for j in i + 1..5 {
            assert_eq!(p.get2(i, j), 0.0);
        }
    }
}

#[test]
fn single_frame_attention_returns_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let q = tape.constant(random(&[1, 4], &mut rng));
    let k = tape.constant(random(&[1, 4], &mut rng));
    let v0 = random(&[1, 4], &mut rng);
    let v = tape.constant(v0.clone());
    let mask = tape.constant(build_causal_mask(1).unwrap().into_tensor());
    let out = masked_attention(&mut tape, q, k, v, mask).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(v0.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn zero_queries_and_keys_give_running_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t_len = 6;
    let v0 = random(&[t_len, 3], &mut rng);
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[t_len, 3]));
    let k = tape.constant(Tensor::zeros(&[t_len, 3]));
    let v = tape.constant(v0.clone());
    let mask = tape.constant(build_causal_mask(t_len).unwrap().into_tensor());
    let out = masked_attention(&mut tape, q, k, v, mask).unwrap();
    let out = tape.value(out);
    for i in 0..t_len {
        for c in 0..3 {
            let mean = (0..=i).map(|j| v0.get2(j, c)).sum::<f64>() / (i + 1) as f64;
            assert!((out.get2(i, c) - mean).abs() < 1e-12);
        }
    }
}

/// Direct loop over allowed positions only, no mask arithmetic.
fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (t_len, d_k, d_v) = (q.rows(), q.cols(), v.cols());
    let mut out = vec![0.0; t_len * d_v];
    for i in 0..t_len {
        let scores: Vec<f64> = (0..=i)
            .map(|j| (0..d_k).map(|c| q.get2(i, c) * k.get2(j, c)).sum::<f64>() / (d_k as f64).sqrt())
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            for c in 0..d_v {
                out[i * d_v + c] += e / z * v.get2(j, c);
            }
        }
    }
    out
}

#[test]
fn masked_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t_len in [1, 2, 7] {
        let (q0, k0, v0) = (random(&[t_len, 5], &mut rng), random(&[t_len, 5], &mut rng), random(&[t_len, 5], &mut rng));
        let mut tape = Tape::new();
        let q = tape.constant(q0.clone());
        let k = tape.constant(k0.clone());
        let v = tape.constant(v0.clone());
        let mask = tape.constant(build_causal_mask(t_len).unwrap().into_tensor());
        let out = masked_attention(&mut tape, q, k, v, mask).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(attention_oracle(&q0, &k0, &v0)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn attention_rejects_mismatched_shapes() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[3, 4]));
    let k = tape.constant(Tensor::zeros(&[3, 5]));
    let v = tape.constant(Tensor::zeros(&[3, 4]));
    let mask = tape.constant(build_causal_mask(3).unwrap().into_tensor());
    assert!(masked_attention(&mut tape, q, k, v, mask).is_err());
    let k = tape.constant(Tensor::zeros(&[3, 4]));
    let wrong = tape.constant(build_causal_mask(2).unwrap().into_tensor());
    assert!(masked_attention(&mut tape, q, k, v, wrong).is_err());
}

#[test]
fn heads_are_independent_attention_calls() {
    let (cfg, w) = toy_weights(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = random(&[4, cfg.d_model], &mut rng);
    let mut tape = Tape::new();
    let g = w.bind(&mut tape, false);
    let x = tape.constant(x0.clone());
    let mask = tape.constant(build_causal_mask(4).unwrap().into_tensor());
    let out = mhsa(&mut tape, x, &g.blocks[0], &cfg, mask).unwrap();
    let out = tape.value(out).clone();

    let b = &w.blocks[0];
    let proj = |l: &Linear| {
        let mut rows = Vec::new();
        for i in 0..4 {
            let mut r = vec![0.0; cfg.d_model];
            kernels::vec_mat(x0.row(i), l.weight.data(), cfg.d_model, &mut r);
            kernels::add_in_place(&mut r, l.bias.data());
            rows.push(r);
        }
        rows
    };
    let (q, k, v) = (proj(&b.query), proj(&b.key), proj(&b.value));
    let head = |rows: &[Vec<f64>], h: usize| {
        let cols: Vec<Vec<f64>> = rows.iter().map(|r| r[h * cfg.d_k..(h + 1) * cfg.d_k].to_vec()).collect();
        Tensor::from_rows(&cols).unwrap()
    };
    let mut cat = vec![vec![0.0; 0]; 4];
    for h in 0..cfg.n_heads {
        let o = attention_oracle(&head(&q, h), &head(&k, h), &head(&v, h));
        for (i, row) in cat.iter_mut().enumerate() {
            row.extend_from_slice(&o[i * cfg.d_k..(i + 1) * cfg.d_k]);
        }
    }
    for (i, row) in cat.iter().enumerate() {
        let mut r = vec![0.0; cfg.d_model];
        kernels::vec_mat(row, b.output.weight.data(), cfg.d_model, &mut r);
        kernels::add_in_place(&mut r, b.output.bias.data());
        for (c, want) in r.iter().enumerate() {
            assert!((out.get2(i, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn output_is_causal() {
    for seed in 0..20u64 {
        let (cfg, w) = toy_weights(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_len = 10;
        let cut = rng.gen_range(0..t_len - 1);
        let a = noisy_input(t_len, &mut rng);
        let mut b = a.clone();
        for v in &mut b.data_mut()[(cut + 1) * FREQ_BINS..] {
            *v = rng.gen_range(0.0..5.0);
        }
        let ya = w.infer(&cfg, &a).unwrap();
        let yb = w.infer(&cfg, &b).unwrap();
        assert_eq!(&ya.data()[..(cut + 1) * FREQ_BINS], &yb.data()[..(cut + 1) * FREQ_BINS], "seed {seed}");
        assert_ne!(ya.data(), yb.data());
    }
}

#[test]
fn output_shape_and_sign() {
    for mode in [HeadMode::Mask, HeadMode::Map] {
        let cfg = GeneratorConfig {
            head_mode: mode,
            ..GeneratorConfig::toy()
        };
        let w = GeneratorWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let y = w.infer(&cfg, &noisy_input(7, &mut ChaCha8Rng::seed_from_u64(10))).unwrap();
        assert_eq!(y.shape(), &[7, FREQ_BINS]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn wrong_bin_count_is_rejected() {
    let (cfg, w) = toy_weights(11);
    let err = w.infer(&cfg, &Tensor::zeros(&[4, 256])).unwrap_err();
    assert!(err.to_string().contains("257"), "{err}");
}

#[test]
fn identity_mask_passes_input_through() {
    let cfg = GeneratorConfig::toy();
    let w = GeneratorWeights::identity_mask(&cfg).unwrap();
    let y = w.infer(&cfg, &noisy_input(5, &mut ChaCha8Rng::seed_from_u64(12))).unwrap();
    assert!(y.data().iter().all(|&v| v == 1.0));
}

#[test]
fn parameter_counts() {
    let toy = GeneratorConfig::toy();
    // convs 8·257·3+8 and 8·8·3+8, blocks 2·(4·72 + 144 + 136 + 32), head 8·257+257
    assert_eq!(count_params(&toy), 6176 + 200 + 1200 + 2313);
    for cfg in [toy, GeneratorConfig::scaled(16, 4, 32), GeneratorConfig::full_size()] {
        let w = GeneratorWeights::identity_mask(&cfg).unwrap();
        assert_eq!(w.param_count(), count_params(&cfg));
    }
    assert_eq!(count_params(&GeneratorConfig::full_size()), 6_048_001);
}

#[test]
fn config_validation() {
    let mut cfg = GeneratorConfig::toy();
    cfg.d_k = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = GeneratorConfig::toy();
    cfg.front_end[0].stride = 2;
    assert!(cfg.validate().is_err());
    let mut cfg = GeneratorConfig::toy();
    cfg.front_end.clear();
    assert!(cfg.validate().is_err());
    assert!("bogus".parse::<HeadMode>().is_err());
    assert_eq!("map".parse::<HeadMode>().unwrap(), HeadMode::Map);
}

fn spec(frames: usize, bins: usize, mag: Vec<f64>) -> Spectrogram {
    Spectrogram::new(frames, bins, mag, vec![0.0; frames * bins], false).unwrap()
}

#[test]
fn apply_mask_cases() {
    let noisy = spec(1, 3, vec![2.0, 4.0, 0.5]);
    let ones = Tensor::filled(&[1, 3], 1.0);
    assert_eq!(apply_mask(&ones, &noisy).unwrap().mag, noisy.mag);
    let zeros = Tensor::zeros(&[1, 3]);
    assert_eq!(apply_mask(&zeros, &noisy).unwrap().mag, vec![0.0; 3]);
    let half = Tensor::filled(&[1, 3], 0.5);
    assert_eq!(apply_mask(&half, &noisy).unwrap().mag, vec![1.0, 2.0, 0.25]);
    let neg = Tensor::new(vec![1, 3], vec![1.0, -0.1, 1.0]).unwrap();
    assert!(apply_mask(&neg, &noisy).is_err());
    assert!(apply_mask(&Tensor::zeros(&[2, 3]), &noisy).is_err());
    let compressed = Spectrogram::new(1, 3, vec![1.0; 3], vec![0.0; 3], true).unwrap();
    assert!(matches!(apply_mask(&ones, &compressed), Err(Error::Compressed)));
}

#[test]
fn ideal_ratio_mask_recovers_clean() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let clean: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
    let noisy: Vec<f64> = clean.iter().map(|c| c + rng.gen_range(0.1..1.0)).collect();
    let mask: Vec<f64> = clean.iter().zip(&noisy).map(|(c, n)| c / n).collect();
    let out = apply_mask(&Tensor::new(vec![4, 10], mask).unwrap(), &spec(4, 10, noisy)).unwrap();
    for (a, b) in out.mag.iter().zip(&clean) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn enhanced_compressed_conventions() {
    let mut tape = Tape::new();
    let out = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 2.0]).unwrap());
    let noisy = tape.constant(Tensor::new(vec![1, 2], vec![4.0, 1.0]).unwrap());
    let m = enhanced_compressed(&mut tape, out, noisy, HeadMode::Mask).unwrap();
    assert_eq!(tape.value(m).data(), &[2f64.ln_1p(), 2f64.ln_1p()]);
    let p = enhanced_compressed(&mut tape, out, noisy, HeadMode::Map).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 2.0]);
}

fn assert_stream_matches_batch(cfg: &GeneratorConfig, w: &GeneratorWeights, t_len: usize, seed: u64) {
    let x = noisy_input(t_len, &mut ChaCha8Rng::seed_from_u64(seed));
    let batch = w.infer(cfg, &x).unwrap();
    let mut stream = StreamEnhancer::new(cfg, w).unwrap();
    for t in 0..t_len {
        let y = stream.push(t, x.row(t)).unwrap();
        assert_eq!(y.as_slice(), batch.row(t), "frame {t}");
    }
}

#[test]
fn stream_is_bit_identical_to_batch() {
    let (cfg, w) = toy_weights(14);
    assert_stream_matches_batch(&cfg, &w, 12, 15);
    let cfg = GeneratorConfig {
        positional_encoding: true,
        front_end: vec![ConvSpec::new(6, 1, 1), ConvSpec::new(8, 4, 1)],
        head_mode: HeadMode::Map,
        ..GeneratorConfig::toy()
    };
    let w = GeneratorWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
    assert_stream_matches_batch(&cfg, &w, 9, 17);
}

#[test]
fn stream_rejects_out_of_order_frames() {
    let (cfg, w) = toy_weights(18);
    let mut s = StreamEnhancer::new(&cfg, &w).unwrap();
    let frame = vec![0.5; FREQ_BINS];
    s.push(0, &frame).unwrap();
    let err = s.push(2, &frame).unwrap_err().to_string();
    assert!(err.contains("expected 1"), "{err}");
    assert!(s.push(1, &frame[..10]).is_err());
    s.push(1, &frame).unwrap();
    s.reset();
    assert_eq!(s.frames_seen(), 0);
    s.push(0, &frame).unwrap();
}

#[test]
fn generator_gradients_match_finite_differences() {
    let cfg = GeneratorConfig {
        n_blocks: 1,
        front_end: vec![ConvSpec::new(8, 2, 1)],
        ..GeneratorConfig::scaled(8, 2, 8)
    };
    let w = GeneratorWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(19)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = noisy_input(3, &mut rng);
    let target = noisy_input(3, &mut rng);
    let mut inputs: Vec<Tensor> = w.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    inputs.push(x);
    let report = gradcheck::check(
        &inputs,
        |tape, vars| {
            let (params, x) = vars.split_at(vars.len() - 1);
            let g = BoundGenerator::from_vars(&cfg, params)?;
            let y = generator_forward(tape, &g, &cfg, x[0])?;
            let t = tape.constant(target.clone());
            tape.mse_loss(y, t)
        },
        Some(6),
    )
    .unwrap();
    assert!(report.max_rel_err < COMPOSITE_TOL, "{report:?}");
}

#[test]
fn bound_params_follow_canonical_order() {
    let (cfg, w) = toy_weights(21);
    let mut tape = Tape::new();
    let g = w.bind(&mut tape, true);
    let named = w.named_params();
    assert_eq!(g.params().len(), named.len());
    for (v, (_, t)) in g.params().iter().zip(named) {
        assert_eq!(tape.value(*v), t);
    }
    let rebuilt = BoundGenerator::from_vars(&cfg, g.params()).unwrap();
    assert_eq!(rebuilt.head.bias, g.head.bias);
    assert_eq!(rebuilt.blocks[1].norm2.gain, g.blocks[1].norm2.gain);
}
