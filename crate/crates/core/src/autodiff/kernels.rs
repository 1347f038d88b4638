//! Per-row numeric kernels.
//!
//! Both the tape operations and the streaming generator call these, so a
//! frame computed incrementally goes through exactly the same floating-point
//! operations, in the same order, as the corresponding row of a batch pass.

/// `out = x · w` for a row vector `x` and a row-major `x.len() × cols` matrix.
pub fn vec_mat(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), x.len() * cols);
    debug_assert_eq!(out.len(), cols);
    out.fill(0.0);
    for (xi, wrow) in x.iter().zip(w.chunks_exact(cols)) {
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += xi * wv;
        }
    }
}

/// Inner product accumulated left to right from zero, matching one entry of [`vec_mat`].
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn add_in_place(out: &mut [f64], b: &[f64]) {
    for (o, v) in out.iter_mut().zip(b) {
        *o += v;
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x
    }
}

pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes one frame over its channels. Writes the normalized-but-unscaled
/// values to `xhat`, the affine output to `out`, and returns `1/sqrt(var + eps)`.
pub fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    xhat: &mut [f64],
    out: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = xhat[i] * gain[i] + bias[i];
    }
    inv_std
}

/// One output frame of a causal 1-D convolution.
///
/// `taps[k]` is the input frame aligned with kernel tap `k` (tap `K-1` is the
/// current frame), or `None` inside the left zero padding. Weights are laid
/// out `[c_out][c_in][k]`.
pub fn conv1d_frame(taps: &[Option<&[f64]>], w: &[f64], b: &[f64], c_in: usize, out: &mut [f64]) {
    let k_len = taps.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, tap) in taps.iter().enumerate() {
            if let Some(row) = tap {
                let base = o * c_in * k_len;
                for c in 0..c_in {
                    acc += row[c] * w[base + c * k_len + k];
                }
            }
        }
        *slot = acc + b[o];
    }
}
