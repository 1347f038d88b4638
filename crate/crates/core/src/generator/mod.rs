//! Causal Transformer enhancement model.
//!
//! Compressed noisy magnitude (`T × F`) goes through a stack of causal 1-D
//! convolutions (which carry the positional information), `N` attention
//! blocks with future masking, and a fully connected ReLU head back to `F`
//! bins. Every stage is causal, so output frame `t` never depends on input
//! frames after `t`.

mod attention;
mod stream;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

pub use attention::{build_causal_mask, masked_attention, mhsa, CausalMask, MASK_SENTINEL};
pub use stream::StreamEnhancer;

/// Parameter count of the reference model this architecture follows.
pub const REFERENCE_PARAM_COUNT: usize = 5_953_920;
/// Per-frame inference time reported for the reference model, in milliseconds.
pub const REFERENCE_MS_PER_FRAME: f64 = 0.256;
pub const FREQ_BINS: usize = 257;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Nonnegative T-F mask applied to the linear noisy magnitude.
    Mask,
    /// Direct estimate of the compressed clean magnitude.
    Map,
}

impl std::str::FromStr for HeadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(HeadMode::Mask),
            "map" => Ok(HeadMode::Map),
            other => Err(Error::invalid(format!("unknown head mode `{other}`"))),
        }
    }
}

/// `(output channels, kernel size, stride)` of one front-end convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel_size: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel_size,
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub front_end: Vec<ConvSpec>,
    pub freq_bins: usize,
    pub head_mode: HeadMode,
    /// Adds fixed sinusoidal positional encoding after the front end. Ablation only.
    #[serde(default)]
    pub positional_encoding: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

impl GeneratorConfig {
    /// Full-size model: 8 heads of 64 dims, two `(512, 3, 1)` causal convs.
    pub fn full_size() -> Self {
        Self {
            n_blocks: 3,
            d_model: 512,
            n_heads: 8,
            d_k: 64,
            d_ff: 512,
            front_end: vec![ConvSpec::new(512, 3, 1), ConvSpec::new(512, 3, 1)],
            freq_bins: FREQ_BINS,
            head_mode: HeadMode::Mask,
            positional_encoding: false,
        }
    }

    /// Tiny model for tests: `N = 2`, `d_model = 8`, two heads.
    pub fn toy() -> Self {
        Self::scaled(8, 2, 16)
    }

    /// Small model with `d_model` channels, used for desk-scale training runs and sweeps.
    pub fn scaled(d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        Self {
            n_blocks: 2,
            d_model,
            n_heads,
            d_k: d_model / n_heads,
            d_ff,
            front_end: vec![ConvSpec::new(d_model, 3, 1), ConvSpec::new(d_model, 3, 1)],
            freq_bins: FREQ_BINS,
            head_mode: HeadMode::Mask,
            positional_encoding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads * self.d_k != self.d_model {
            return bad(format!(
                "n_heads·d_k = {}·{} must equal d_model = {}",
                self.n_heads, self.d_k, self.d_model
            ));
        }
        if self.freq_bins != FREQ_BINS {
            return bad(format!("freq_bins must be {FREQ_BINS}, got {}", self.freq_bins));
        }
        if self.d_model < 2 || self.d_ff == 0 {
            return bad("d_model must be at least 2 and d_ff positive".into());
        }
        let Some(last) = self.front_end.last() else {
            return bad("front end needs at least one convolution".into());
        };
        if last.out_channels != self.d_model {
            return bad(format!(
                "last front-end conv outputs {} channels, d_model is {}",
                last.out_channels, self.d_model
            ));
        }
        for c in &self.front_end {
            if c.stride != 1 {
                return bad(format!("front-end stride {} breaks frame alignment", c.stride));
            }
            if c.kernel_size == 0 || c.out_channels == 0 {
                return bad("front-end kernel size and channels must be positive".into());
            }
        }
        Ok(())
    }
}

/// Trainable scalars implied by a configuration.
pub fn count_params(cfg: &GeneratorConfig) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    let mut total = 0;
    let mut c_in = cfg.freq_bins;
    for c in &cfg.front_end {
        total += c.out_channels * c_in * c.kernel_size + c.out_channels;
        c_in = c.out_channels;
    }
    let d = cfg.d_model;
    let block = 4 * linear(d, d) + linear(d, cfg.d_ff) + linear(cfg.d_ff, d) + 2 * (2 * d);
    total + cfg.n_blocks * block + linear(d, cfg.freq_bins)
}

/// Fully connected layer, weight stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Causal conv layer, weight stored `out × in × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub front: Vec<Conv1d>,
    pub blocks: Vec<BlockWeights>,
    pub head: Linear,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("shape matches data")
}

impl Linear {
    fn init(i: usize, o: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform(&[i, o], i, rng),
            bias: Tensor::zeros(&[o]),
        }
    }

    fn zeros(i: usize, o: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[i, o]),
            bias: Tensor::zeros(&[o]),
        }
    }
}

impl LayerNorm {
    fn init(c: usize) -> Self {
        Self {
            gain: Tensor::filled(&[c], 1.0),
            bias: Tensor::zeros(&[c]),
        }
    }
}

impl BlockWeights {
    fn init(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
            norm1: LayerNorm::init(d),
            ff1: Linear::init(d, d_ff, rng),
            ff2: Linear::init(d_ff, d, rng),
            norm2: LayerNorm::init(d),
        }
    }

    fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            norm1: LayerNorm::init(d),
            ff1: Linear::zeros(d, d_ff),
            ff2: Linear::zeros(d_ff, d),
            norm2: LayerNorm::init(d),
        }
    }
}

impl GeneratorWeights {
    /// Uniform `±1/sqrt(fan_in)` weights and zero biases. In mask mode the
    /// head bias starts at 1, so an untrained model passes the input through.
    pub fn init(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = cfg.freq_bins;
        let mut front = Vec::new();
        for c in &cfg.front_end {
            front.push(Conv1d {
                weight: uniform(&[c.out_channels, c_in, c.kernel_size], c_in * c.kernel_size, rng),
                bias: Tensor::zeros(&[c.out_channels]),
            });
            c_in = c.out_channels;
        }
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights::init(cfg.d_model, cfg.d_ff, rng))
            .collect();
        let mut head = Linear::init(cfg.d_model, cfg.freq_bins, rng);
        if cfg.head_mode == HeadMode::Mask {
            head.bias = Tensor::filled(&[cfg.freq_bins], 1.0);
        }
        Ok(Self {
            front,
            blocks,
            head,
        })
    }

    /// Every weight zero and the head bias at 1: in mask mode the output mask
    /// is exactly 1 everywhere.
    pub fn identity_mask(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = cfg.freq_bins;
        let mut front = Vec::new();
        for c in &cfg.front_end {
            front.push(Conv1d {
                weight: Tensor::zeros(&[c.out_channels, c_in, c.kernel_size]),
                bias: Tensor::zeros(&[c.out_channels]),
            });
            c_in = c.out_channels;
        }
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockWeights::zeros(cfg.d_model, cfg.d_ff))
            .collect();
        let mut head = Linear::zeros(cfg.d_model, cfg.freq_bins);
        head.bias = Tensor::filled(&[cfg.freq_bins], 1.0);
        Ok(Self {
            front,
            blocks,
            head,
        })
    }

    /// All tensors with stable names, in the canonical parameter order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.front.iter().enumerate() {
            out.push((format!("front.{i}.weight"), &c.weight));
            out.push((format!("front.{i}.bias"), &c.bias));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("block.{i}.{n}");
            for (name, lin) in [
                ("query", &b.query),
                ("key", &b.key),
                ("value", &b.value),
                ("output", &b.output),
            ] {
                out.push((p(&format!("{name}.weight")), &lin.weight));
                out.push((p(&format!("{name}.bias")), &lin.bias));
            }
            out.push((p("norm1.gain"), &b.norm1.gain));
            out.push((p("norm1.bias"), &b.norm1.bias));
            out.push((p("ff1.weight"), &b.ff1.weight));
            out.push((p("ff1.bias"), &b.ff1.bias));
            out.push((p("ff2.weight"), &b.ff2.weight));
            out.push((p("ff2.bias"), &b.ff2.bias));
            out.push((p("norm2.gain"), &b.norm2.gain));
            out.push((p("norm2.bias"), &b.norm2.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable tensors in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.front {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for b in &mut self.blocks {
            for lin in [&mut b.query, &mut b.key, &mut b.value, &mut b.output] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
            out.push(&mut b.norm1.gain);
            out.push(&mut b.norm1.bias);
            out.push(&mut b.ff1.weight);
            out.push(&mut b.ff1.bias);
            out.push(&mut b.ff2.weight);
            out.push(&mut b.ff2.bias);
            out.push(&mut b.norm2.gain);
            out.push(&mut b.norm2.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces every tensor from a name → tensor lookup, checking shapes.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in names.into_iter().zip(self.params_mut()) {
            let t = lookup(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }
}

/// Tape handles for one bound linear layer.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
    pub norm1: NormVars,
    pub ff1: LinearVars,
    pub ff2: LinearVars,
    pub norm2: NormVars,
}

/// Generator weights recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundGenerator {
    pub front: Vec<LinearVars>,
    pub blocks: Vec<BlockVars>,
    pub head: LinearVars,
    params: Vec<Var>,
}

impl BoundGenerator {
    /// Leaf handles in canonical parameter order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.params.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

struct Binder<'a> {
    tape: &'a mut Tape,
    requires_grad: bool,
    params: Vec<Var>,
}

impl Binder<'_> {
    fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.tape.leaf(t.clone(), self.requires_grad);
        self.params.push(v);
        v
    }

    fn linear(&mut self, weight: &Tensor, bias: &Tensor) -> LinearVars {
        LinearVars {
            weight: self.leaf(weight),
            bias: self.leaf(bias),
        }
    }

    fn norm(&mut self, n: &LayerNorm) -> NormVars {
        NormVars {
            gain: self.leaf(&n.gain),
            bias: self.leaf(&n.bias),
        }
    }
}

impl GeneratorWeights {
    /// Records every weight as a leaf, in canonical parameter order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundGenerator {
        let mut b = Binder {
            tape,
            requires_grad,
            params: Vec::new(),
        };
        let front = self.front.iter().map(|c| b.linear(&c.weight, &c.bias)).collect();
        let blocks = self
            .blocks
            .iter()
            .map(|w| BlockVars {
                query: b.linear(&w.query.weight, &w.query.bias),
                key: b.linear(&w.key.weight, &w.key.bias),
                value: b.linear(&w.value.weight, &w.value.bias),
                output: b.linear(&w.output.weight, &w.output.bias),
                norm1: b.norm(&w.norm1),
                ff1: b.linear(&w.ff1.weight, &w.ff1.bias),
                ff2: b.linear(&w.ff2.weight, &w.ff2.bias),
                norm2: b.norm(&w.norm2),
            })
            .collect();
        let head = b.linear(&self.head.weight, &self.head.bias);
        BoundGenerator {
            front,
            blocks,
            head,
            params: b.params,
        }
    }
}

impl BoundGenerator {
    /// Rebuilds the handle structure from leaves already on a tape, given in
    /// canonical parameter order.
    pub fn from_vars(cfg: &GeneratorConfig, vars: &[Var]) -> Result<Self> {
        let expected = 2 * cfg.front_end.len() + 16 * cfg.n_blocks + 2;
        if vars.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut lin = || LinearVars {
            weight: it.next().expect("counted"),
            bias: it.next().expect("counted"),
        };
        let front = (0..cfg.front_end.len()).map(|_| lin()).collect();
        let blocks = (0..cfg.n_blocks)
            .map(|_| {
                let (query, key, value, output) = (lin(), lin(), lin(), lin());
                let n1 = lin();
                let (ff1, ff2) = (lin(), lin());
                let n2 = lin();
                BlockVars {
                    query,
                    key,
                    value,
                    output,
                    norm1: NormVars {
                        gain: n1.weight,
                        bias: n1.bias,
                    },
                    ff1,
                    ff2,
                    norm2: NormVars {
                        gain: n2.weight,
                        bias: n2.bias,
                    },
                }
            })
            .collect();
        let head = lin();
        Ok(Self {
            front,
            blocks,
            head,
            params: vars.to_vec(),
        })
    }
}

pub fn linear(tape: &mut Tape, x: Var, l: LinearVars) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_row(y, l.bias)
}

/// Fixed sinusoidal encoding, `T × d`.
pub fn sinusoidal_encoding(t_len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        data.extend(sinusoidal_row(t, d));
    }
    Tensor::new(vec![t_len, d], data).expect("shape matches data")
}

pub(crate) fn sinusoidal_row(t: usize, d: usize) -> impl Iterator<Item = f64> {
    (0..d).map(move |j| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10_000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `y = LN(x + MHSA(x))`, then `LN(y + FF(y))` with a ReLU between the two FF layers.
pub fn attention_block(
    tape: &mut Tape,
    x: Var,
    b: &BlockVars,
    cfg: &GeneratorConfig,
    mask: Var,
) -> Result<Var> {
    let attn = mhsa(tape, x, b, cfg, mask)?;
    let y = tape.add(x, attn)?;
    let y = tape.layer_norm_channels(y, b.norm1.gain, b.norm1.bias)?;
    let h = linear(tape, y, b.ff1)?;
    let h = tape.relu(h)?;
    let h = linear(tape, h, b.ff2)?;
    let z = tape.add(y, h)?;
    tape.layer_norm_channels(z, b.norm2.gain, b.norm2.bias)
}

/// Batch forward over a `T × F` compressed noisy magnitude. The result is
/// nonnegative and `T × F`: a mask or a compressed magnitude depending on
/// the head mode.
pub fn generator_forward(
    tape: &mut Tape,
    g: &BoundGenerator,
    cfg: &GeneratorConfig,
    input: Var,
) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    let [t_len, f] = shape[..] else {
        return Err(Error::invalid(format!("generator input must be T x F, got {shape:?}")));
    };
    if f != cfg.freq_bins {
        return Err(Error::Shape {
            op: "generator_forward",
            lhs: shape,
            rhs: vec![t_len, cfg.freq_bins],
        });
    }
    let mut h = input;
    for (conv, spec) in g.front.iter().zip(&cfg.front_end) {
        h = tape.conv1d_causal(h, conv.weight, conv.bias, spec.stride)?;
        h = tape.relu(h)?;
    }
    if cfg.positional_encoding {
        let pe = tape.constant(sinusoidal_encoding(t_len, cfg.d_model));
        h = tape.add(h, pe)?;
    }
    let mask = tape.constant(build_causal_mask(t_len)?.into_tensor());
    for b in &g.blocks {
        h = attention_block(tape, h, b, cfg, mask)?;
    }
    let out = linear(tape, h, g.head)?;
    tape.relu(out)
}

impl GeneratorWeights {
    /// Forward pass without gradients.
    pub fn infer(&self, cfg: &GeneratorConfig, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = generator_forward(&mut tape, &g, cfg, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Compressed enhanced magnitude from the network output, on the tape.
///
/// This is the one place the domain convention lives: a mask multiplies the
/// *linear* noisy magnitude and the product is then compressed; a map output
/// already is a compressed magnitude.
pub fn enhanced_compressed(tape: &mut Tape, output: Var, noisy_linear: Var, mode: HeadMode) -> Result<Var> {
    match mode {
        HeadMode::Mask => {
            let m = tape.mul(output, noisy_linear)?;
            tape.log1p(m)
        }
        HeadMode::Map => Ok(output),
    }
}

/// Elementwise mask on a linear-domain noisy magnitude.
pub fn apply_mask(mask: &Tensor, noisy: &Spectrogram) -> Result<Spectrogram> {
    if noisy.compressed {
        return Err(Error::Compressed);
    }
    if mask.shape() != [noisy.frames, noisy.bins] {
        return Err(Error::Shape {
            op: "apply_mask",
            lhs: mask.shape().to_vec(),
            rhs: vec![noisy.frames, noisy.bins],
        });
    }
    if let Some(m) = mask.data().iter().find(|&&m| m < 0.0) {
        return Err(Error::invalid(format!("mask entry {m} is negative")));
    }
    let mag = mask.data().iter().zip(&noisy.mag).map(|(m, n)| m * n).collect();
    noisy.with_mag(mag, false)
}

/// Linear enhanced magnitude from a network output and the noisy spectrogram.
pub fn enhanced_linear(output: &Tensor, noisy: &Spectrogram, mode: HeadMode) -> Result<Spectrogram> {
    match mode {
        HeadMode::Mask => apply_mask(output, noisy),
        HeadMode::Map => {
            let compressed = noisy.with_mag(output.data().to_vec(), true)?;
            crate::dsp::decompress(&compressed)
        }
    }
}

#[cfg(test)]
mod tests;
