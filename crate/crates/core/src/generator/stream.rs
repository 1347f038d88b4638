//! Frame-by-frame inference.
//!
//! Keeps the last `K-1` inputs of every front-end conv and the projected keys
//! and values of every attention block, so each new frame costs one row of
//! work. Every row goes through the same kernels as the batch tape ops, which
//! makes frame `t` bit-identical to row `t` of the batch forward.

use std::collections::VecDeque;

use super::{sinusoidal_row, GeneratorConfig, GeneratorWeights, Linear};
use crate::autodiff::kernels;
use crate::error::{Error, Result};

pub struct StreamEnhancer<'a> {
    cfg: &'a GeneratorConfig,
    weights: &'a GeneratorWeights,
    next_frame: usize,
    conv_history: Vec<VecDeque<Vec<f64>>>,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

fn project(x: &[f64], l: &Linear) -> Vec<f64> {
    let cols = l.weight.cols();
    let mut out = vec![0.0; cols];
    kernels::vec_mat(x, l.weight.data(), cols, &mut out);
    kernels::add_in_place(&mut out, l.bias.data());
    out
}

impl<'a> StreamEnhancer<'a> {
    pub fn new(cfg: &'a GeneratorConfig, weights: &'a GeneratorWeights) -> Result<Self> {
        cfg.validate()?;
        if weights.front.len() != cfg.front_end.len() || weights.blocks.len() != cfg.n_blocks {
            return Err(Error::Config("weights do not match the generator config".into()));
        }
        Ok(Self {
            cfg,
            weights,
            next_frame: 0,
            conv_history: vec![VecDeque::new(); cfg.front_end.len()],
            keys: vec![Vec::new(); cfg.n_blocks],
            values: vec![Vec::new(); cfg.n_blocks],
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.next_frame
    }

    pub fn reset(&mut self) {
        self.next_frame = 0;
        self.conv_history.iter_mut().for_each(VecDeque::clear);
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
    }

    /// Consumes compressed-magnitude frame `index` (which must be the next one
    /// in sequence) and returns the network output for it.
    pub fn push(&mut self, index: usize, frame: &[f64]) -> Result<Vec<f64>> {
        if index != self.next_frame {
            return Err(Error::invalid(format!(
                "out-of-order frame: expected {}, got {index}",
                self.next_frame
            )));
        }
        if frame.len() != self.cfg.freq_bins {
            return Err(Error::Shape {
                op: "stream_enhance",
                lhs: vec![frame.len()],
                rhs: vec![self.cfg.freq_bins],
            });
        }
        let t = index;
        let mut x = frame.to_vec();
        for ((conv, spec), hist) in self
            .weights
            .front
            .iter()
            .zip(&self.cfg.front_end)
            .zip(&mut self.conv_history)
        {
            let k = spec.kernel_size;
            let mut taps: Vec<Option<&[f64]>> = Vec::with_capacity(k);
            for j in 0..k - 1 {
                let back = k - 1 - j;
                taps.push((hist.len() >= back).then(|| hist[hist.len() - back].as_slice()));
            }
            taps.push(Some(&x));
            let mut out = vec![0.0; spec.out_channels];
            kernels::conv1d_frame(&taps, conv.weight.data(), conv.bias.data(), x.len(), &mut out);
            out.iter_mut().for_each(|v| *v = kernels::relu(*v));
            if k > 1 {
                hist.push_back(std::mem::take(&mut x));
                if hist.len() > k - 1 {
                    hist.pop_front();
                }
            }
            x = out;
        }
        if self.cfg.positional_encoding {
            for (v, pe) in x.iter_mut().zip(sinusoidal_row(t, self.cfg.d_model)) {
                *v += pe;
            }
        }
        for bi in 0..self.cfg.n_blocks {
            x = self.block_step(bi, &x)?;
        }
        let mut out = project(&x, &self.weights.head);
        out.iter_mut().for_each(|v| *v = kernels::relu(*v));
        self.next_frame += 1;
        Ok(out)
    }

    fn block_step(&mut self, bi: usize, x: &[f64]) -> Result<Vec<f64>> {
        let w = &self.weights.blocks[bi];
        let (d, d_k) = (self.cfg.d_model, self.cfg.d_k);
        let q = project(x, &w.query);
        self.keys[bi].push(project(x, &w.key));
        self.values[bi].push(project(x, &w.value));
        let (keys, values) = (&self.keys[bi], &self.values[bi]);
        let n = keys.len();
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut cat = Vec::with_capacity(d);
        let mut logits = vec![0.0; n];
        let mut probs = vec![0.0; n];
        let mut vh = vec![0.0; n * d_k];
        let mut ctx = vec![0.0; d_k];
        for h in 0..self.cfg.n_heads {
            let span = h * d_k..(h + 1) * d_k;
            for (j, key) in keys.iter().enumerate() {
                logits[j] = kernels::dot(&q[span.clone()], &key[span.clone()]) * scale + 0.0;
                vh[j * d_k..(j + 1) * d_k].copy_from_slice(&values[j][span.clone()]);
            }
            kernels::softmax_row(&logits, &mut probs);
            kernels::vec_mat(&probs, &vh, d_k, &mut ctx);
            cat.extend_from_slice(&ctx);
        }
        let attn = project(&cat, &w.output);
        let mut y: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let mut xhat = vec![0.0; d];
        let mut normed = vec![0.0; d];
        kernels::layer_norm_row(&y, w.norm1.gain.data(), w.norm1.bias.data(), &mut xhat, &mut normed);
        let mut hidden = project(&normed, &w.ff1);
        hidden.iter_mut().for_each(|v| *v = kernels::relu(*v));
        let ff = project(&hidden, &w.ff2);
        for ((o, a), b) in y.iter_mut().zip(&normed).zip(&ff) {
            *o = a + b;
        }
        let mut out = vec![0.0; d];
        kernels::layer_norm_row(&y, w.norm2.gain.data(), w.norm2.bias.data(), &mut xhat, &mut out);
        Ok(out)
    }
}
