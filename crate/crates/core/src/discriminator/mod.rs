//! Learned quality surrogate.
//!
//! Scores an (enhanced, clean) pair of compressed magnitude spectrograms,
//! stacked as a 2-channel `T × F` image, with spectrally normalized 2-D
//! convolutions, global average pooling and a small fully connected stack.
//! Pooling makes the score defined for any number of frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SpectralNormState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::Linear;

pub const LEAKY_SLOPE: f64 = 0.3;
/// Power-iteration rounds used to settle fresh singular-vector estimates.
pub const WARMUP_ITERS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub convs: Vec<Conv2dSpec>,
    /// Hidden widths of the LeakyReLU dense layers; a linear 1-unit output follows.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

impl DiscriminatorConfig {
    /// `(15, 5×5), (25, 7×7), (40, 9×9), (50, 11×11)` convs, dense `50 → 50 → 10 → 1`.
    pub fn full_size() -> Self {
        Self::with_layers(&[(15, 5), (25, 7), (40, 9), (50, 11)], &[50, 10])
    }

    /// Same topology with narrow 3×3 convs, for desk-scale training.
    pub fn toy() -> Self {
        Self::with_layers(&[(4, 3), (6, 3), (8, 3), (10, 3)], &[10, 5])
    }

    pub fn with_layers(convs: &[(usize, usize)], hidden: &[usize]) -> Self {
        Self {
            convs: convs
                .iter()
                .map(|&(filters, kernel)| Conv2dSpec { filters, kernel })
                .collect(),
            hidden: hidden.to_vec(),
            leaky_slope: LEAKY_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::Config("discriminator needs at least one conv layer".into()));
        }
        for c in &self.convs {
            if c.filters == 0 || c.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "conv ({}, {}x{}) needs positive filters and an odd kernel",
                    c.filters, c.kernel, c.kernel
                )));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("dense widths must be positive".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config(format!("bad LeakyReLU slope {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// `(in, out)` of every dense layer, the 1-unit output last.
    fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut width = self.convs.last().map_or(2, |c| c.filters);
        for &h in self.hidden.iter().chain(&[1]) {
            dims.push((width, h));
            width = h;
        }
        dims
    }
}

/// Trainable scalars of a discriminator configuration. Independent of `T`.
pub fn disc_param_count(cfg: &DiscriminatorConfig) -> usize {
    let mut c_in = 2;
    let mut total = 0;
    for c in &cfg.convs {
        total += c.filters * c_in * c.kernel * c.kernel + c.filters;
        c_in = c.filters;
    }
    total + cfg.dense_dims().iter().map(|(i, o)| i * o + o).sum::<usize>()
}

/// 2-D conv layer, kernel stored `KH × KW × C_in × C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorWeights {
    pub convs: Vec<Conv2d>,
    pub dense: Vec<Linear>,
    /// One singular-vector pair per weight tensor: convs first, then dense.
    pub spectral: Vec<SpectralNormState>,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("shape matches data")
}

fn draw(shape: &[usize], fan_in: usize, zero: bool, rng: &mut impl Rng) -> Tensor {
    if zero {
        Tensor::zeros(shape)
    } else {
        uniform(shape, fan_in, rng)
    }
}

impl DiscriminatorWeights {
    fn build(cfg: &DiscriminatorConfig, rng: &mut impl Rng, zero: bool) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 2;
        for c in &cfg.convs {
            let k = c.kernel;
            convs.push(Conv2d {
                weight: draw(&[k, k, c_in, c.filters], k * k * c_in, zero, rng),
                bias: Tensor::zeros(&[c.filters]),
            });
            c_in = c.filters;
        }
        let dense: Vec<Linear> = cfg
            .dense_dims()
            .into_iter()
            .map(|(i, o)| Linear {
                weight: draw(&[i, o], i, zero, rng),
                bias: Tensor::zeros(&[o]),
            })
            .collect();
        let spectral = convs
            .iter()
            .map(|c| &c.weight)
            .chain(dense.iter().map(|d| &d.weight))
            .map(|w| SpectralNormState::for_weight(w, rng))
            .collect();
        Ok(Self {
            convs,
            dense,
            spectral,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, random singular-vector
    /// estimates warmed up by [`WARMUP_ITERS`] Lanczos steps.
    pub fn init(cfg: &DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut w = Self::build(cfg, rng, false)?;
        w.warm_start(WARMUP_ITERS)?;
        Ok(w)
    }

    /// Lanczos re-estimate of every singular-vector pair; see
    /// [`SpectralNormState::warm_start`].
    pub fn warm_start(&mut self, iters: usize) -> Result<Vec<f64>> {
        let Self {
            convs,
            dense,
            spectral,
        } = self;
        convs
            .iter()
            .map(|c| &c.weight)
            .chain(dense.iter().map(|d| &d.weight))
            .zip(spectral.iter_mut())
            .map(|(w, s)| s.warm_start(w, iters))
            .collect()
    }

    /// All-zero weights and biases: scores every input 0.
    pub fn zeros(cfg: &DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(cfg, rng, true)
    }

    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.convs
            .iter()
            .map(|c| &c.weight)
            .chain(self.dense.iter().map(|d| &d.weight))
    }

    /// Advances every singular-vector estimate; returns the σ estimates.
    pub fn power_iterate(&mut self, iters: usize) -> Result<Vec<f64>> {
        let Self {
            convs,
            dense,
            spectral,
        } = self;
        convs
            .iter()
            .map(|c| &c.weight)
            .chain(dense.iter().map(|d| &d.weight))
            .zip(spectral.iter_mut())
            .map(|(w, s)| s.power_iterate(w, iters))
            .collect()
    }

    /// Current σ estimate of every weight.
    pub fn sigmas(&self) -> Vec<f64> {
        self.weights().zip(&self.spectral).map(|(w, s)| s.sigma(w)).collect()
    }

    /// Every weight divided by its σ estimate, as the forward pass uses it.
    pub fn normalized_weights(&self) -> Vec<Tensor> {
        self.weights()
            .zip(&self.spectral)
            .map(|(w, s)| {
                let sigma = s.sigma(w);
                let data = if sigma.abs() > 1e-12 {
                    w.data().iter().map(|x| x / sigma).collect()
                } else {
                    w.data().to_vec()
                };
                Tensor::new(w.shape().to_vec(), data).expect("same shape")
            })
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), &c.weight));
            out.push((format!("conv.{i}.bias"), &c.bias));
        }
        for (i, d) in self.dense.iter().enumerate() {
            out.push((format!("dense.{i}.weight"), &d.weight));
            out.push((format!("dense.{i}.bias"), &d.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for d in &mut self.dense {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Singular-vector estimates as `(name, vector)` pairs, for checkpoints.
    pub fn spectral_vectors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.spectral.iter().enumerate() {
            out.push((format!("spectral.{i}.u"), Tensor::new(vec![s.u.len()], s.u.clone()).expect("1-d")));
            out.push((format!("spectral.{i}.v"), Tensor::new(vec![s.v.len()], s.v.clone()).expect("1-d")));
        }
        out
    }

    /// Replaces weights and singular-vector estimates from a name lookup.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        let mut fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let names: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in names.iter().zip(self.params_mut()) {
            *slot = fetch(name, shape)?;
        }
        for (i, s) in self.spectral.iter_mut().enumerate() {
            s.u = fetch(&format!("spectral.{i}.u"), &[s.u.len()])?.into_data();
            s.v = fetch(&format!("spectral.{i}.v"), &[s.v.len()])?.into_data();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }

    /// Records weights as leaves, in [`named_params`](Self::named_params) order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundDiscriminator {
        let params = self
            .named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundDiscriminator { params }
    }

    /// Score of one pair, without gradients.
    pub fn score(&self, cfg: &DiscriminatorConfig, enhanced: &Tensor, clean: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let d = self.bind(&mut tape, false);
        let e = tape.constant(enhanced.clone());
        let c = tape.constant(clean.clone());
        let s = disc_forward(&mut tape, &d, self, cfg, e, c)?;
        Ok(tape.value(s).item())
    }
}

/// Discriminator weights recorded on a tape: weight/bias pairs, convs then dense.
#[derive(Clone, Debug)]
pub struct BoundDiscriminator {
    params: Vec<Var>,
}

impl BoundDiscriminator {
    pub fn from_vars(vars: &[Var]) -> Self {
        Self {
            params: vars.to_vec(),
        }
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.params.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// Stacks `enhanced` and `clean` (`T × F` each) into a `T × F × 2` image.
fn stack_pair(tape: &mut Tape, enhanced: Var, clean: Var) -> Result<Var> {
    let (te, tc) = (tape.value(enhanced), tape.value(clean));
    if te.shape() != tc.shape() || te.shape().len() != 2 {
        return Err(Error::Shape {
            op: "disc_forward",
            lhs: te.shape().to_vec(),
            rhs: tc.shape().to_vec(),
        });
    }
    let (t_len, f) = (te.rows(), te.cols());
    let e = tape.reshape(enhanced, vec![t_len * f, 1])?;
    let c = tape.reshape(clean, vec![t_len * f, 1])?;
    let pair = tape.concat_cols(&[e, c])?;
    tape.reshape(pair, vec![t_len, f, 2])
}

/// Unbounded real score of an (enhanced, clean) compressed-magnitude pair.
///
/// Singular-vector estimates are read from `weights.spectral` and held
/// constant; the weight values themselves come from the bound tape leaves.
pub fn disc_forward(
    tape: &mut Tape,
    d: &BoundDiscriminator,
    weights: &DiscriminatorWeights,
    cfg: &DiscriminatorConfig,
    enhanced: Var,
    clean: Var,
) -> Result<Var> {
    let n_layers = cfg.convs.len() + cfg.hidden.len() + 1;
    if d.params.len() != 2 * n_layers || weights.spectral.len() != n_layers {
        return Err(Error::Config("discriminator weights do not match the config".into()));
    }
    let mut h = stack_pair(tape, enhanced, clean)?;
    let mut layer = 0;
    for _ in &cfg.convs {
        let sn = &weights.spectral[layer];
        let w = tape.spectral_norm(d.params[2 * layer], &sn.u, &sn.v)?;
        h = tape.conv2d(h, w, d.params[2 * layer + 1])?;
        h = tape.leaky_relu(h, cfg.leaky_slope)?;
        layer += 1;
    }
    let pooled = tape.global_avg_pool2d(h)?;
    let width = tape.value(pooled).len();
    h = tape.reshape(pooled, vec![1, width])?;
    for i in 0..=cfg.hidden.len() {
        let sn = &weights.spectral[layer];
        let w = tape.spectral_norm(d.params[2 * layer], &sn.u, &sn.v)?;
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, d.params[2 * layer + 1])?;
        if i < cfg.hidden.len() {
            h = tape.leaky_relu(h, cfg.leaky_slope)?;
        }
        layer += 1;
    }
    tape.reshape(h, vec![1])
}
