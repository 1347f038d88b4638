use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, PRIMITIVE_TOL};
use super::*;
use crate::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

#[test]
fn relu_definition() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax_last_dim(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn mean_of_squares_gradient() {
    let x0 = t(&[3], &[1.0, 2.0, 3.0]);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let m = tape.mean(sq).unwrap();
    tape.backward(m).unwrap();
    let g = tape.grad(x).unwrap();
    // central differences of mean(x²): (2x)/3
    for (gv, want) in g.data().iter().zip([2.0 / 3.0, 4.0 / 3.0, 2.0]) {
        assert!((gv - want).abs() < 1e-12);
    }
    let report = gradcheck::check(
        &[x0],
        |tp, v| {
            let s = tp.mul(v[0], v[0])?;
            tp.mean(s)
        },
        None,
    )
    .unwrap();
    assert!(report.max_rel_err < PRIMITIVE_TOL);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn non_finite_forward_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1], &[-2.0]));
    assert!(matches!(tape.log1p(x), Err(Error::NonFinite { op: "log1p" })));
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 2], &[1.0, -4.0, 0.5, 9.0]), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_contract() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let y = tape.mul_scalar(x, 3.0).unwrap();
    assert!(tape.backward(y).is_err(), "non-scalar loss");
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
    tape.zero_grad();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[2.0]), true);
    let a = tape.add(x, x).unwrap();
    let b = tape.add(a, x).unwrap();
    let s = tape.sum(b).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 3.0);
}

#[test]
fn conv1d_identity_and_shift() {
    let x0 = t(&[3, 1], &[1.0, 2.0, 3.0]);
    let zero_b = t(&[1], &[0.0]);
    let run = |w: Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let w = tape.constant(w);
        let b = tape.constant(zero_b.clone());
        let y = tape.conv1d_causal(x, w, b, 1).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(t(&[1, 1, 1], &[1.0])), vec![1.0, 2.0, 3.0]);
    // tap K-1 is the current frame
    assert_eq!(run(t(&[1, 1, 2], &[0.0, 1.0])), vec![1.0, 2.0, 3.0]);
    // tap 0 looks one frame back, first output sees the zero pad
    assert_eq!(run(t(&[1, 1, 2], &[1.0, 0.0])), vec![0.0, 1.0, 2.0]);
}

#[test]
fn conv1d_rejects_stride() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 2]));
    let w = tape.constant(Tensor::zeros(&[3, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.conv1d_causal(x, w, b, 2).is_err());
}

#[test]
fn conv1d_future_perturbation_leaves_past_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t_len, c_in, c_out, k) = (9, 3, 4, 3);
    let x0 = random(&[t_len, c_in], &mut rng);
    let w0 = random(&[c_out, c_in, k], &mut rng);
    let b0 = random(&[c_out], &mut rng);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let (x, w, b) = (
            tape.constant(x.clone()),
            tape.constant(w0.clone()),
            tape.constant(b0.clone()),
        );
        let y = tape.conv1d_causal(x, w, b, 1).unwrap();
        tape.value(y).clone()
    };
    let base = run(&x0);
    for t0 in 0..t_len - 1 {
        let mut x1 = x0.clone();
        for c in 0..c_in {
            x1.data_mut()[(t0 + 1) * c_in + c] += rng.gen_range(-5.0..5.0);
        }
        let y = run(&x1);
        for row in 0..=t0 {
            for (a, b) in base.row(row).iter().zip(y.row(row)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn conv2d_identity_and_plateau() {
    let mut impulse = Tensor::zeros(&[5, 5, 1]);
    impulse.data_mut()[2 * 5 + 2] = 1.0;
    let mut center = Tensor::zeros(&[3, 3, 1, 1]);
    center.data_mut()[4] = 1.0;
    let run = |x: &Tensor, w: Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(&impulse, center), impulse);
    let plateau = run(&impulse, Tensor::filled(&[3, 3, 1, 1], 1.0));
    for i in 0..5 {
        for j in 0..5 {
            let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
            assert_eq!(plateau.data()[i * 5 + j], if inside { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn conv2d_rejects_even_kernels() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 4, 1]));
    let w = tape.constant(Tensor::zeros(&[2, 3, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(tape.conv2d(x, w, b).is_err());
}

#[test]
fn layer_norm_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 5.0]));
    let g = tape.constant(t(&[2], &[1.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.layer_norm_channels(x, g, b).unwrap();
    let s = 1.0 / (1.0 + kernels::LAYER_NORM_EPS).sqrt();
    let y = tape.value(y);
    assert!((y.data()[0] + s).abs() < 1e-15);
    assert!((y.data()[1] - s).abs() < 1e-15);
    assert_eq!(&y.data()[2..], &[0.0, 0.0]);
}

#[test]
fn layer_norm_rejects_single_channel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 1]));
    let g = tape.constant(Tensor::zeros(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(tape.layer_norm_channels(x, g, b).is_err());
}

#[test]
fn layer_norm_frames_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random(&[4, 6], &mut rng);
    let g0 = random(&[6], &mut rng);
    let b0 = random(&[6], &mut rng);
    // Jacobian blocks between distinct frames must vanish exactly.
    for out_row in 0..4 {
        for col in 0..6 {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let (g, b) = (tape.constant(g0.clone()), tape.constant(b0.clone()));
            let y = tape.layer_norm_channels(x, g, b).unwrap();
            let mut sel = Tensor::zeros(&[4, 6]);
            sel.data_mut()[out_row * 6 + col] = 1.0;
            let sel = tape.constant(sel);
            let picked = tape.mul(y, sel).unwrap();
            let s = tape.sum(picked).unwrap();
            tape.backward(s).unwrap();
            let gx = tape.grad(x).unwrap();
            for r in (0..4).filter(|&r| r != out_row) {
                assert!(gx.row(r).iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn global_pool_matches_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = random(&[3, 4, 2], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let y = tape.global_avg_pool2d(x).unwrap();
    for c in 0..2 {
        let want = x0.data().iter().skip(c).step_by(2).sum::<f64>() / 12.0;
        assert!((tape.value(y).data()[c] - want).abs() < 1e-12);
    }
    let one = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
    let y = tape.global_avg_pool2d(one).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    let c = tape.constant(Tensor::filled(&[5, 2, 1], 0.7));
    let y = tape.global_avg_pool2d(c).unwrap();
    assert!((tape.value(y).item() - 0.7).abs() < 1e-15);
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let r = gradcheck::check(
        &[a, b],
        |tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            let y = tp.sigmoid(y)?;
            tp.sum(y)
        },
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < PRIMITIVE_TOL, "{r:?}");

    let x = random(&[2, 5], &mut rng);
    let w = random(&[5], &mut rng);
    let r = gradcheck::check(
        &[x, w],
        |tp, v| {
            let y = tp.softmax_last_dim(v[0])?;
            let y = tp.add_row(y, v[1])?;
            let z = tp.mul(y, y)?;
            tp.mean(z)
        },
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < PRIMITIVE_TOL, "{r:?}");
}

#[test]
fn spectral_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random(&[4, 3], &mut rng);
    let mut st = SpectralNormState::for_weight(&w, &mut rng);
    st.power_iterate(&w, 3).unwrap();
    let probe = random(&[4, 3], &mut rng);
    let r = gradcheck::check(
        &[w],
        |tp, v| {
            let n = tp.spectral_norm(v[0], &st.u, &st.v)?;
            let p = tp.constant(probe.clone());
            let y = tp.mul(n, p)?;
            tp.sum(y)
        },
        None,
    )
    .unwrap();
    assert!(r.max_rel_err < PRIMITIVE_TOL, "{r:?}");
}
