use super::{linear, BlockVars, GeneratorConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Stand-in for −∞ above the diagonal. Finite so the tape's non-finite check
/// holds, and large enough that `exp` of any masked logit underflows to 0.
pub const MASK_SENTINEL: f64 = -1e9;

/// `T × T` future mask: 0 on and below the diagonal, [`MASK_SENTINEL`] above.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalMask {
    size: usize,
    values: Vec<f64>,
}

impl CausalMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.values).expect("square mask")
    }
}

pub fn build_causal_mask(t_len: usize) -> Result<CausalMask> {
    if t_len == 0 {
        return Err(Error::invalid("causal mask needs at least one frame"));
    }
    let mut values = vec![0.0; t_len * t_len];
    for i in 0..t_len {
        for j in i + 1..t_len {
            values[i * t_len + j] = MASK_SENTINEL;
        }
    }
    Ok(CausalMask {
        size: t_len,
        values,
    })
}

/// `softmax(M + Q Kᵀ / sqrt(d_k)) V` for one head. `mask` must be a `T × T`
/// tape value, typically a constant built by [`build_causal_mask`].
pub fn masked_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Var) -> Result<Var> {
    let (tq, tk) = (tape.value(q), tape.value(k));
    if tq.shape() != tk.shape() || tq.shape().len() != 2 {
        return Err(Error::Shape {
            op: "masked_attention",
            lhs: tq.shape().to_vec(),
            rhs: tk.shape().to_vec(),
        });
    }
    let (t_len, d_k) = (tq.rows(), tq.cols());
    if tape.value(mask).shape() != [t_len, t_len] {
        return Err(Error::Shape {
            op: "masked_attention",
            lhs: vec![t_len, t_len],
            rhs: tape.value(mask).shape().to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.mul_scalar(scores, 1.0 / (d_k as f64).sqrt())?;
    let masked = tape.add(scaled, mask)?;
    let weights = tape.softmax_last_dim(masked)?;
    tape.matmul(weights, v)
}

/// Multi-head self-attention: per-head projections, masked attention per
/// head, concatenation, output projection.
pub fn mhsa(tape: &mut Tape, x: Var, b: &BlockVars, cfg: &GeneratorConfig, mask: Var) -> Result<Var> {
    if tape.value(x).cols() != cfg.n_heads * cfg.d_k {
        return Err(Error::Shape {
            op: "mhsa",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![cfg.n_heads, cfg.d_k],
        });
    }
    let q = linear(tape, x, b.query)?;
    let k = linear(tape, x, b.key)?;
    let v = linear(tape, x, b.value)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let start = h * cfg.d_k;
        let qh = tape.slice_cols(q, start, cfg.d_k)?;
        let kh = tape.slice_cols(k, start, cfg.d_k)?;
        let vh = tape.slice_cols(v, start, cfg.d_k)?;
        heads.push(masked_attention(tape, qh, kh, vh, mask)?);
    }
    let cat = tape.concat_cols(&heads)?;
    linear(tape, cat, b.output)
}
