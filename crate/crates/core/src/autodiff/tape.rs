use log::warn;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Log1p(Var),
    Softmax(Var),
    Mean(Var),
    Sum(Var),
    L1(Var, Var),
    Mse(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(Var),
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: Option<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for one forward pass and replays them in reverse.
///
/// Nodes are appended in creation order, so the node list is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient shape follows value shape")
        })
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, name: &'static str, value: Tensor, parents: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let t = self.value(a);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::invalid(format!("{op}: expected a matrix, got shape {other:?}"))),
        }
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(name, value, &[a], op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for (row, orow) in ta.data().chunks_exact(k).zip(out.chunks_exact_mut(n)) {
            kernels::vec_mat(row, tb.data(), n, orow);
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix("transpose", a)?;
        let ta = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push("transpose", value, &[a], Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("sub", value, &[a, b], Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("mul_scalar", a, |x| x * s, Op::MulScalar(a, s))
    }

    /// Adds a length-C vector to every row of a `rows × C` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() || tb.shape().len() != 1 {
            return Err(shape_err("add_row", tx, tb));
        }
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            kernels::add_in_place(row, tb.data());
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("add_row", value, &[x, bias], Op::AddRow(x, bias))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, kernels::relu, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.map(
            "leaky_relu",
            a,
            |x| kernels::leaky_relu(x, alpha),
            Op::LeakyRelu(a, alpha),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        self.map("log1p", a, f64::ln_1p, Op::Log1p(a))
    }

    pub fn softmax_last_dim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = vec![0.0; t.len()];
        for (row, orow) in t.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            kernels::softmax_row(row, orow);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, &[a], Op::Softmax(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), &[a], Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
        let value = Tensor::scalar(s / ta.len() as f64);
        self.push("l1_loss", value, &[a, b], Op::L1(a, b))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        let value = Tensor::scalar(s / ta.len() as f64);
        self.push("mse_loss", value, &[a, b], Op::Mse(a, b))
    }

    /// Causal 1-D convolution over time.
    ///
    /// `x` is `T × C_in`, `w` is `C_out × C_in × K`, `bias` has `C_out` entries.
    /// The input is left-padded with `K-1` zero frames, so output frame `t`
    /// only sees input frames `0..=t`. Only stride 1 keeps frames aligned.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride != 1 {
            return Err(Error::invalid(format!(
                "conv1d_causal: stride {stride} would break frame alignment, only 1 is supported"
            )));
        }
        let (t_len, c_in) = self.matrix("conv1d_causal", x)?;
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        let [c_out, wc_in, k] = tw.shape() else {
            return Err(shape_err("conv1d_causal", tx, tw));
        };
        let (c_out, k) = (*c_out, *k);
        if *wc_in != c_in || k == 0 {
            return Err(shape_err("conv1d_causal", tx, tw));
        }
        if tb.shape() != [c_out] {
            return Err(shape_err("conv1d_causal", tw, tb));
        }
        let mut out = vec![0.0; t_len * c_out];
        let mut taps: Vec<Option<&[f64]>> = vec![None; k];
        for t in 0..t_len {
            for (j, tap) in taps.iter_mut().enumerate() {
                *tap = (t + j + 1).checked_sub(k).map(|src| tx.row(src));
            }
            kernels::conv1d_frame(
                &taps,
                tw.data(),
                tb.data(),
                c_in,
                &mut out[t * c_out..(t + 1) * c_out],
            );
        }
        let value = Tensor::new(vec![t_len, c_out], out)?;
        self.push(
            "conv1d_causal",
            value,
            &[x, w, bias],
            Op::Conv1d { x, w, b: bias, k },
        )
    }

    /// Same-padded, stride-1 2-D convolution.
    ///
    /// `x` is `H × W × C_in` (channels last), `w` is `KH × KW × C_in × C_out`
    /// with odd kernel sizes, `bias` has `C_out` entries.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        let ([h, wd, c_in], [kh, kw, wc_in, c_out]) = (tx.shape(), tw.shape()) else {
            return Err(shape_err("conv2d", tx, tw));
        };
        let (h, wd, c_in, kh, kw, c_out) = (*h, *wd, *c_in, *kh, *kw, *c_out);
        if *wc_in != c_in {
            return Err(shape_err("conv2d", tx, tw));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d: even kernel {kh}x{kw} has no centered same padding"
            )));
        }
        if tb.shape() != [c_out] {
            return Err(shape_err("conv2d", tw, tb));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let xd = tx.data();
        let wdat = tw.data();
        let mut out = vec![0.0; h * wd * c_out];
        for i in 0..h {
            for j in 0..wd {
                let o = &mut out[(i * wd + j) * c_out..(i * wd + j + 1) * c_out];
                for di in 0..kh {
                    let Some(ii) = (i + di).checked_sub(ph).filter(|&v| v < h) else {
                        continue;
                    };
                    for dj in 0..kw {
                        let Some(jj) = (j + dj).checked_sub(pw).filter(|&v| v < wd) else {
                            continue;
                        };
                        let xin = &xd[(ii * wd + jj) * c_in..(ii * wd + jj + 1) * c_in];
                        let wbase = (di * kw + dj) * c_in * c_out;
                        for (c, xv) in xin.iter().enumerate() {
                            let wrow = &wdat[wbase + c * c_out..wbase + (c + 1) * c_out];
                            for (ov, wv) in o.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
                kernels::add_in_place(o, tb.data());
            }
        }
        let value = Tensor::new(vec![h, wd, c_out], out)?;
        self.push("conv2d", value, &[x, w, bias], Op::Conv2d { x, w, b: bias })
    }

    /// Layer norm whose moments run over the channel (last) dimension only,
    /// so each frame is normalized independently of every other frame.
    pub fn layer_norm_channels(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if c < 2 {
            return Err(Error::invalid(
                "layer_norm_channels: need at least 2 channels, variance is degenerate",
            ));
        }
        if tg.shape() != [c] {
            return Err(shape_err("layer_norm_channels", tx, tg));
        }
        if tb.shape() != [c] {
            return Err(shape_err("layer_norm_channels", tx, tb));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let span = r * c..(r + 1) * c;
            inv_std.push(kernels::layer_norm_row(
                tx.row(r),
                tg.data(),
                tb.data(),
                &mut xhat[span.clone()],
                &mut out[span],
            ));
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm_channels",
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Averages an `H × W × C` map over both spatial axes, giving a `C` vector.
    pub fn global_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [h, w, c] = tx.shape() else {
            return Err(Error::invalid(format!(
                "global_avg_pool2d: expected H x W x C, got {:?}",
                tx.shape()
            )));
        };
        let (hw, c) = (h * w, *c);
        if hw == 0 {
            return Err(Error::invalid("global_avg_pool2d: empty spatial extent"));
        }
        let mut out = vec![0.0; c];
        for px in tx.data().chunks_exact(c) {
            kernels::add_in_place(&mut out, px);
        }
        out.iter_mut().for_each(|v| *v /= hw as f64);
        let value = Tensor::new(vec![c], out)?;
        self.push("global_avg_pool2d", value, &[x], Op::GlobalAvgPool(x))
    }

    /// Divides `w` by `σ = uᵀ W v`, where `W` is `w` viewed as
    /// `(numel / last_dim) × last_dim` and `u`, `v` come from power iteration.
    ///
    /// The power-iteration vectors are constants here; the gradient still
    /// accounts for `σ` depending on `W`. A zero σ leaves `w` unnormalized.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let tw = self.value(w);
        let (rows, cols) = (tw.rows(), tw.cols());
        if u.len() != rows || v.len() != cols {
            return Err(Error::Shape {
                op: "spectral_norm",
                lhs: vec![rows, cols],
                rhs: vec![u.len(), v.len()],
            });
        }
        let sigma = super::spectral::rayleigh_sigma(tw.data(), cols, u, v);
        let sigma = if sigma.abs() > 1e-12 {
            Some(sigma)
        } else {
            warn!("spectral_norm: σ is zero, weight left unnormalized");
            None
        };
        let data = match sigma {
            Some(s) => tw.data().iter().map(|x| x / s).collect(),
            None => tw.data().to_vec(),
        };
        let value = Tensor::new(tw.shape().to_vec(), data)?;
        self.push(
            "spectral_norm",
            value,
            &[w],
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix("slice_cols", x)?;
        if start + len > cols {
            return Err(Error::invalid(format!(
                "slice_cols: {start}..{} out of {cols} columns",
                start + len
            )));
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        self.push("slice_cols", value, &[x], Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols: nothing to concatenate"));
        };
        let (rows, _) = self.matrix("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat_cols", p)?;
            if r != rows {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", value, parts, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    /// Reverse sweep from a scalar `loss`, filling gradients for every node
    /// that requires them. Gradients accumulate additively into parents.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            propagate(&self.nodes, lo, &node.op, &node.value, g);
        }
        Ok(())
    }
}

/// Accumulates into a parent's gradient buffer if that parent wants one.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], p: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[p.0].requires_grad {
        return;
    }
    let buf = grads[p.0].get_or_insert_with(|| vec![0.0; nodes[p.0].value.len()]);
    f(buf);
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], op: &Op, out: &Tensor, g: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..m {
                    for kk in 0..k {
                        let brow = &tb.data()[kk * n..(kk + 1) * n];
                        ga[i * k + kk] += kernels::dot(&g[i * n..(i + 1) * n], brow);
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = ta.data()[i * k + kk];
                        for (o, gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).rows(), val(*a).cols());
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| kernels::add_in_place(ga, g));
            accumulate(nodes, grads, *b, |gb| kernels::add_in_place(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| kernels::add_in_place(ga, g));
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v)
            });
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |ga| {
                for ((o, gv), bv) in ga.iter_mut().zip(g).zip(tb.data()) {
                    *o += gv * bv;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((o, gv), av) in gb.iter_mut().zip(g).zip(ta.data()) {
                    *o += gv * av;
                }
            });
        }
        Op::MulScalar(a, s) => {
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * s)
            });
        }
        Op::AddRow(x, b) => {
            let c = val(*x).cols();
            accumulate(nodes, grads, *x, |gx| kernels::add_in_place(gx, g));
            accumulate(nodes, grads, *b, |gb| {
                for row in g.chunks_exact(c) {
                    kernels::add_in_place(gb, row);
                }
            });
        }
        Op::Relu(a) => {
            let ta = val(*a);
            accumulate(nodes, grads, *a, |ga| {
                for ((o, gv), x) in ga.iter_mut().zip(g).zip(ta.data()) {
                    if *x > 0.0 {
                        *o += gv;
                    }
                }
            });
        }
        Op::LeakyRelu(a, alpha) => {
            let ta = val(*a);
            accumulate(nodes, grads, *a, |ga| {
                for ((o, gv), x) in ga.iter_mut().zip(g).zip(ta.data()) {
                    *o += if *x > 0.0 { *gv } else { alpha * gv };
                }
            });
        }
        Op::Sigmoid(a) => {
            accumulate(nodes, grads, *a, |ga| {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y * (1.0 - y);
                }
            });
        }
        Op::Log1p(a) => {
            let ta = val(*a);
            accumulate(nodes, grads, *a, |ga| {
                for ((o, gv), x) in ga.iter_mut().zip(g).zip(ta.data()) {
                    *o += gv / (1.0 + x);
                }
            });
        }
        Op::Softmax(a) => {
            let c = out.cols();
            accumulate(nodes, grads, *a, |ga| {
                for ((gar, gr), yr) in ga
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.data().chunks_exact(c))
                {
                    let s = kernels::dot(gr, yr);
                    for j in 0..c {
                        gar[j] += yr[j] * (gr[j] - s);
                    }
                }
            });
        }
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
        }
        Op::L1(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let scale = g[0] / ta.len() as f64;
            let sign = |x: f64, y: f64| {
                if x > y {
                    1.0
                } else if x < y {
                    -1.0
                } else {
                    0.0
                }
            };
            accumulate(nodes, grads, *a, |ga| {
                for ((o, x), y) in ga.iter_mut().zip(ta.data()).zip(tb.data()) {
                    *o += scale * sign(*x, *y);
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((o, x), y) in gb.iter_mut().zip(ta.data()).zip(tb.data()) {
                    *o -= scale * sign(*x, *y);
                }
            });
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let scale = 2.0 * g[0] / ta.len() as f64;
            accumulate(nodes, grads, *a, |ga| {
                for ((o, x), y) in ga.iter_mut().zip(ta.data()).zip(tb.data()) {
                    *o += scale * (x - y);
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((o, x), y) in gb.iter_mut().zip(ta.data()).zip(tb.data()) {
                    *o -= scale * (x - y);
                }
            });
        }
        Op::Conv1d { x, w, b, k } => conv1d_backward(nodes, grads, *x, *w, *b, *k, g),
        Op::Conv2d { x, w, b } => conv2d_backward(nodes, grads, *x, *w, *b, g),
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = val(*x).cols();
            let tg = val(*gain);
            accumulate(nodes, grads, *gain, |gg| {
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            });
            accumulate(nodes, grads, *bias, |gb| {
                for gr in g.chunks_exact(c) {
                    kernels::add_in_place(gb, gr);
                }
            });
            accumulate(nodes, grads, *x, |gx| {
                let mut dxhat = vec![0.0; c];
                for (r, ((gxr, gr), xr)) in gx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(xhat.chunks_exact(c))
                    .enumerate()
                {
                    for j in 0..c {
                        dxhat[j] = gr[j] * tg.data()[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = kernels::dot(&dxhat, xr);
                    let scale = inv_std[r] / c as f64;
                    for j in 0..c {
                        gxr[j] += scale * (c as f64 * dxhat[j] - sum_d - xr[j] * sum_dx);
                    }
                }
            });
        }
        Op::GlobalAvgPool(x) => {
            let tx = val(*x);
            let c = tx.cols();
            let hw = (tx.len() / c) as f64;
            accumulate(nodes, grads, *x, |gx| {
                for px in gx.chunks_exact_mut(c) {
                    for (o, gv) in px.iter_mut().zip(g) {
                        *o += gv / hw;
                    }
                }
            });
        }
        Op::SpectralNorm { w, u, v, sigma } => {
            let tw = val(*w);
            accumulate(nodes, grads, *w, |gw| match sigma {
                None => kernels::add_in_place(gw, g),
                Some(s) => {
                    let inner = kernels::dot(g, tw.data());
                    let cols = v.len();
                    for (i, (gr, ui)) in gw.chunks_exact_mut(cols).zip(u).enumerate() {
                        let grow = &g[i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            gr[j] += grow[j] / s - inner / (s * s) * ui * v[j];
                        }
                    }
                }
            });
        }
        Op::SliceCols { x, start } => {
            let cols = val(*x).cols();
            let len = out.cols();
            accumulate(nodes, grads, *x, |gx| {
                for (gxr, gr) in gx.chunks_exact_mut(cols).zip(g.chunks_exact(len)) {
                    kernels::add_in_place(&mut gxr[*start..*start + len], gr);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let c = val(*p).cols();
                accumulate(nodes, grads, *p, |gp| {
                    for (gpr, gr) in gp.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                        kernels::add_in_place(gpr, &gr[offset..offset + c]);
                    }
                });
                offset += c;
            }
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |gx| kernels::add_in_place(gx, g));
        }
    }
}

fn conv1d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    w: Var,
    b: Var,
    k: usize,
    g: &[f64],
) {
    let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
    let (t_len, c_in) = (tx.rows(), tx.cols());
    let c_out = tw.shape()[0];
    let src = |t: usize, j: usize| (t + j + 1).checked_sub(k);
    accumulate(nodes, grads, b, |gb| {
        for gr in g.chunks_exact(c_out) {
            kernels::add_in_place(gb, gr);
        }
    });
    accumulate(nodes, grads, w, |gw| {
        for t in 0..t_len {
            for o in 0..c_out {
                let gv = g[t * c_out + o];
                for j in 0..k {
                    if let Some(s) = src(t, j) {
                        let row = tx.row(s);
                        for c in 0..c_in {
                            gw[(o * c_in + c) * k + j] += gv * row[c];
                        }
                    }
                }
            }
        }
    });
    accumulate(nodes, grads, x, |gx| {
        for t in 0..t_len {
            for o in 0..c_out {
                let gv = g[t * c_out + o];
                for j in 0..k {
                    if let Some(s) = src(t, j) {
                        for c in 0..c_in {
                            gx[s * c_in + c] += gv * tw.data()[(o * c_in + c) * k + j];
                        }
                    }
                }
            }
        }
    });
}

fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: Var,
    w: Var,
    b: Var,
    g: &[f64],
) {
    let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
    let (h, wd, c_in) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
    let (kh, kw, c_out) = (tw.shape()[0], tw.shape()[1], tw.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    accumulate(nodes, grads, b, |gb| {
        for gr in g.chunks_exact(c_out) {
            kernels::add_in_place(gb, gr);
        }
    });
    let want_w = nodes[w.0].requires_grad;
    let want_x = nodes[x.0].requires_grad;
    if !want_w && !want_x {
        return;
    }
    let mut gw = want_w.then(|| vec![0.0; tw.len()]);
    let mut gx = want_x.then(|| vec![0.0; tx.len()]);
    let (xd, wdat) = (tx.data(), tw.data());
    for i in 0..h {
        for j in 0..wd {
            let go = &g[(i * wd + j) * c_out..(i * wd + j + 1) * c_out];
            for di in 0..kh {
                let Some(ii) = (i + di).checked_sub(ph).filter(|&v| v < h) else {
                    continue;
                };
                for dj in 0..kw {
                    let Some(jj) = (j + dj).checked_sub(pw).filter(|&v| v < wd) else {
                        continue;
                    };
                    let px = (ii * wd + jj) * c_in;
                    let wbase = (di * kw + dj) * c_in * c_out;
                    for c in 0..c_in {
                        let span = wbase + c * c_out..wbase + (c + 1) * c_out;
                        if let Some(gw) = gw.as_mut() {
                            let xv = xd[px + c];
                            for (o, gv) in gw[span.clone()].iter_mut().zip(go) {
                                *o += xv * gv;
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            gx[px + c] += kernels::dot(&wdat[span], go);
                        }
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        accumulate(nodes, grads, w, |buf| kernels::add_in_place(buf, &gw));
    }
    if let Some(gx) = gx {
        accumulate(nodes, grads, x, |buf| kernels::add_in_place(buf, &gx));
    }
}
