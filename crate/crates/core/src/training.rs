//! L1 signal-approximation pre-training and adversarial fine-tuning against
//! a learned surrogate of a black-box quality metric.
//!
//! Fine-tuning alternates `d_steps` discriminator updates, each fitting
//! `D(G(x), y)` to the metric label `Q′(G(x), y)` and `D(y, y)` to 1, with one
//! generator update pushing `D(G(x), y)` toward the target score. During a
//! generator update the discriminator is bound as constants; during a
//! discriminator update the generator output is a constant tensor.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{clip_grad_norm, AdamState, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Phase};
use crate::discriminator::{disc_forward, DiscriminatorConfig, DiscriminatorWeights};
use crate::dsp::{FrameParams, Stft};
use crate::error::{Error, Result};
use crate::generator::{enhanced_compressed, generator_forward, GeneratorConfig, GeneratorWeights, HeadMode};
use crate::metrics::MetricFn;
use crate::pipeline::{enhance_prepared, Prepared};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training L1 loss over the epoch.
    pub l1: f64,
    pub val_l1: f64,
    /// Mean discriminator loss; 0 during pre-training.
    pub l_d: f64,
    /// Mean generator adversarial loss; 0 during pre-training.
    pub l_g: f64,
    /// Mean normalized metric score on the validation set.
    pub val_q: f64,
    pub wall_s: f64,
}

impl EpochRecord {
    fn values(&self) -> [f64; 5] {
        [self.l1, self.val_l1, self.l_d, self.l_g, self.val_q]
    }
}

pub const LOG_HEADER: &str = "epoch,phase,l1,val_l1,l_d,l_g,val_q,wall_s";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub phase: Phase,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.epoch <= last.epoch {
                return Err(Error::invalid(format!(
                    "epoch {} recorded after epoch {}",
                    r.epoch, last.epoch
                )));
            }
        }
        if !r.values().iter().chain([&r.wall_s]).all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                epoch: r.epoch,
                reason: format!("non-finite log entry {r:?}"),
            });
        }
        self.records.push(r);
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Equality of everything except wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.phase == other.phase
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.epoch == b.epoch && a.values() == b.values())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3}",
                r.epoch, self.phase, r.l1, r.val_l1, r.l_d, r.l_g, r.val_q, r.wall_s
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean absolute error between the enhanced compressed magnitude implied by
/// `output` and the clean compressed magnitude.
pub fn l1_sa_loss(tape: &mut Tape, output: Var, noisy_linear: Var, clean_c: Var, mode: HeadMode) -> Result<Var> {
    let enhanced = enhanced_compressed(tape, output, noisy_linear, mode)?;
    tape.l1_loss(enhanced, clean_c)
}

fn squared_gap(tape: &mut Tape, score: Var, target: f64) -> Result<Var> {
    let shape = tape.value(score).shape().to_vec();
    let t = tape.constant(Tensor::filled(&shape, target));
    let d = tape.sub(score, t)?;
    let sq = tape.mul(d, d)?;
    tape.sum(sq)
}

fn batch_mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::invalid("loss over an empty batch"))?;
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    tape.mul_scalar(acc, 1.0 / terms.len() as f64)
}

/// Batch mean of `(D(y,y) − 1)² + (D(G(x),y) − Q′)²`.
pub fn d_loss(tape: &mut Tape, clean_scores: &[Var], enhanced_scores: &[Var], labels: &[f64]) -> Result<Var> {
    if clean_scores.len() != enhanced_scores.len() || labels.len() != clean_scores.len() {
        return Err(Error::invalid(format!(
            "d_loss: {} clean scores, {} enhanced scores, {} labels",
            clean_scores.len(),
            enhanced_scores.len(),
            labels.len()
        )));
    }
    if let Some(q) = labels.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::invalid(format!("metric label {q} outside [0, 1]")));
    }
    let terms = clean_scores
        .iter()
        .zip(enhanced_scores)
        .zip(labels)
        .map(|((&c, &e), &q)| {
            let a = squared_gap(tape, c, 1.0)?;
            let b = squared_gap(tape, e, q)?;
            tape.add(a, b)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(tape, &terms)
}

/// Batch mean of `(D(G(x),y) − s)²`.
pub fn g_loss(tape: &mut Tape, enhanced_scores: &[Var], target: f64) -> Result<Var> {
    let terms = enhanced_scores
        .iter()
        .map(|&e| squared_gap(tape, e, target))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(tape, &terms)
}

/// Generator output for one pair with the generator held fixed, and its metric label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub enhanced_c: Tensor,
    pub label: f64,
}

pub fn sample(
    gcfg: &GeneratorConfig,
    g: &GeneratorWeights,
    batch: &[&Prepared],
    stft: &Stft,
    metric: &dyn MetricFn,
) -> Result<Vec<Sample>> {
    batch
        .iter()
        .map(|p| {
            let e = enhance_prepared(gcfg, g, p, stft)?;
            let label = metric.score(&e.wave, &p.clean)?;
            Ok(Sample {
                enhanced_c: e.enhanced_c,
                label,
            })
        })
        .collect()
}

/// One Adam step on the batch L1 loss. Returns the loss before the step.
pub fn pretrain_step(
    gcfg: &GeneratorConfig,
    g: &mut GeneratorWeights,
    opt: &mut AdamState,
    batch: &[&Prepared],
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, true);
    let terms = batch
        .iter()
        .map(|p| {
            let x = tape.constant(p.noisy_c.clone());
            let lin = tape.constant(p.noisy_lin.clone());
            let clean = tape.constant(p.clean_c.clone());
            let out = generator_forward(&mut tape, &bound, gcfg, x)?;
            l1_sa_loss(&mut tape, out, lin, clean, gcfg.head_mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = batch_mean(&mut tape, &terms)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    opt.step(&mut g.params_mut(), &bound.grads(&tape))?;
    Ok(value)
}

/// One power iteration, then one Adam step on the discriminator loss.
pub fn d_step(
    dcfg: &DiscriminatorConfig,
    d: &mut DiscriminatorWeights,
    opt: &mut AdamState,
    batch: &[&Prepared],
    samples: &[Sample],
) -> Result<f64> {
    if batch.len() != samples.len() {
        return Err(Error::invalid("d_step: one sample per pair required"));
    }
    d.power_iterate(1)?;
    let mut tape = Tape::new();
    let bound = d.bind(&mut tape, true);
    let (mut clean_scores, mut enhanced_scores) = (Vec::new(), Vec::new());
    for (p, s) in batch.iter().zip(samples) {
        let clean = tape.constant(p.clean_c.clone());
        let enhanced = tape.constant(s.enhanced_c.clone());
        clean_scores.push(disc_forward(&mut tape, &bound, d, dcfg, clean, clean)?);
        enhanced_scores.push(disc_forward(&mut tape, &bound, d, dcfg, enhanced, clean)?);
    }
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    let loss = d_loss(&mut tape, &clean_scores, &enhanced_scores, &labels)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    opt.step(&mut d.params_mut(), &bound.grads(&tape))?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GStepStats {
    pub g_loss: f64,
    pub l1: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One Adam step on the generator loss with the discriminator frozen.
#[allow(clippy::too_many_arguments)]
pub fn g_step(
    gcfg: &GeneratorConfig,
    g: &mut GeneratorWeights,
    opt: &mut AdamState,
    dcfg: &DiscriminatorConfig,
    d: &DiscriminatorWeights,
    batch: &[&Prepared],
    target: f64,
    grad_clip: f64,
) -> Result<GStepStats> {
    let mut tape = Tape::new();
    let bound = g.bind(&mut tape, true);
    let frozen = d.bind(&mut tape, false);
    let mut scores = Vec::new();
    let mut l1 = 0.0;
    for p in batch {
        let x = tape.constant(p.noisy_c.clone());
        let lin = tape.constant(p.noisy_lin.clone());
        let clean = tape.constant(p.clean_c.clone());
        let out = generator_forward(&mut tape, &bound, gcfg, x)?;
        let enhanced = enhanced_compressed(&mut tape, out, lin, gcfg.head_mode)?;
        l1 += mean_abs_diff(tape.value(enhanced), &p.clean_c);
        scores.push(disc_forward(&mut tape, &frozen, d, dcfg, enhanced, clean)?);
    }
    let loss = g_loss(&mut tape, &scores, target)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let mut grads = bound.grads(&tape);
    let grad_norm = if grad_clip > 0.0 {
        clip_grad_norm(&mut grads, grad_clip)
    } else {
        grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
    };
    opt.step(&mut g.params_mut(), &grads)?;
    Ok(GStepStats {
        g_loss: value,
        l1: l1 / batch.len() as f64,
        grad_norm,
    })
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

/// Mean L1 loss and mean metric score over a set.
pub fn validate(
    gcfg: &GeneratorConfig,
    g: &GeneratorWeights,
    set: &[Prepared],
    stft: &Stft,
    metric: &dyn MetricFn,
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let (mut l1, mut q) = (0.0, 0.0);
    for p in set {
        let e = enhance_prepared(gcfg, g, p, stft)?;
        l1 += mean_abs_diff(&e.enhanced_c, &p.clean_c);
        q += metric.score(&e.wave, &p.clean)?;
    }
    let n = set.len() as f64;
    Ok((l1 / n, q / n))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::Diverged {
            epoch,
            reason: e.to_string(),
        },
        other => other,
    }
}

fn check_sets(train: &[Prepared], val: &[Prepared]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(format!(
            "training needs nonempty sets, got {} train and {} validation pairs",
            train.len(),
            val.len()
        )));
    }
    Ok(())
}

fn save(path: Option<&Path>, ck: impl FnOnce() -> Checkpoint) -> Result<()> {
    match path {
        Some(p) => ck().save(p),
        None => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    /// Weights with the lowest validation L1 loss.
    pub weights: GeneratorWeights,
    pub log: TrainLog,
    /// 0 if no epoch improved on the initial weights.
    pub best_epoch: usize,
    pub best_val_l1: f64,
}

/// Adam on the L1 loss with early stopping on validation L1. When `ckpt` is
/// given, the best weights so far are written there after every improvement,
/// so a divergence leaves the last good model on disk.
pub fn pretrain(
    cfg: &ExperimentConfig,
    train: &[Prepared],
    val: &[Prepared],
    metric: &dyn MetricFn,
    ckpt: Option<&Path>,
) -> Result<Pretrained> {
    cfg.validate()?;
    check_sets(train, val)?;
    let (gcfg, tc) = (&cfg.generator, &cfg.train);
    let stft = Stft::new(FrameParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut g = GeneratorWeights::init(gcfg, &mut rng)?;
    let mut opt = AdamState::new(g.named_params(), tc.lr);

    let (init_l1, init_q) = validate(gcfg, &g, val, &stft, metric)?;
    info!("pretrain: initial val_l1 {init_l1:.5} val_q {init_q:.5}");
    let snapshot = |g: &GeneratorWeights, epoch: usize, val_l1: f64| {
        Checkpoint::generator(gcfg, g)
            .with_meta("phase", Phase::Pretrain)
            .with_meta("epoch", epoch)
            .with_meta("val_l1", val_l1)
            .with_meta("seed", tc.seed)
    };
    save(ckpt, || snapshot(&g, 0, init_l1))?;

    let mut best = (g.clone(), init_l1, 0);
    let mut log = TrainLog::new(Phase::Pretrain);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    for epoch in 1..=tc.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let l = pretrain_step(gcfg, &mut g, &mut opt, &batch).map_err(|e| diverged(epoch, e))?;
            total += l * batch.len() as f64;
        }
        let (val_l1, val_q) = validate(gcfg, &g, val, &stft, metric).map_err(|e| diverged(epoch, e))?;
        log.push(EpochRecord {
            epoch,
            l1: total / train.len() as f64,
            val_l1,
            l_d: 0.0,
            l_g: 0.0,
            val_q,
            wall_s: start.elapsed().as_secs_f64(),
        })?;
        let r = log.last().expect("just pushed");
        info!(
            "pretrain epoch {epoch}: l1 {:.5} val_l1 {val_l1:.5} val_q {val_q:.5}",
            r.l1
        );
        if val_l1 < best.1 {
            best = (g.clone(), val_l1, epoch);
            stale = 0;
            save(ckpt, || snapshot(&g, epoch, val_l1))?;
        } else {
            stale += 1;
            if stale >= tc.patience {
                info!("pretrain: early stop after epoch {epoch}, best epoch {}", best.2);
                break;
            }
        }
    }
    let (weights, best_val_l1, best_epoch) = best;
    Ok(Pretrained {
        weights,
        log,
        best_epoch,
        best_val_l1,
    })
}

/// Generator weights from a pre-training checkpoint, checked against `cfg`.
pub fn load_pretrained(path: impl AsRef<Path>, cfg: &GeneratorConfig) -> Result<GeneratorWeights> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "pretrained checkpoint {} does not exist",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    if &ck.header.generator != cfg {
        return Err(Error::Config(format!(
            "{} was trained with a different generator config",
            path.display()
        )));
    }
    ck.generator_weights()
}

#[derive(Clone, Debug)]
pub struct Finetuned {
    /// Generator with the highest validation score, the pre-trained one included.
    pub weights: GeneratorWeights,
    pub discriminator: DiscriminatorWeights,
    pub log: TrainLog,
    /// 0 if no epoch beat the pre-trained generator.
    pub best_epoch: usize,
    pub initial_val_q: f64,
    pub best_val_q: f64,
}

/// Adversarial fine-tuning of a pre-trained generator with a freshly
/// initialized discriminator.
pub fn metricgan_finetune(
    cfg: &ExperimentConfig,
    pretrained: &GeneratorWeights,
    train: &[Prepared],
    val: &[Prepared],
    metric: &dyn MetricFn,
    ckpt: Option<&Path>,
) -> Result<Finetuned> {
    cfg.validate()?;
    check_sets(train, val)?;
    let (gcfg, dcfg, tc) = (&cfg.generator, &cfg.discriminator, &cfg.train);
    let stft = Stft::new(FrameParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut g = pretrained.clone();
    let param_count = g.param_count();
    let mut d = DiscriminatorWeights::init(dcfg, &mut rng)?;
    let mut g_opt = AdamState::new(g.named_params(), tc.finetune_lr());
    let mut d_opt = AdamState::new(d.named_params(), tc.d_lr);

    let snapshot = |g: &GeneratorWeights, d: &DiscriminatorWeights, epoch: usize, val_q: f64| {
        Checkpoint::generator(gcfg, g)
            .with_discriminator(dcfg, d)
            .with_meta("phase", Phase::Finetune)
            .with_meta("epoch", epoch)
            .with_meta("val_q", val_q)
            .with_meta("seed", tc.seed)
    };

    let start = Instant::now();
    let (train_l1, _) = validate(gcfg, &g, train, &stft, metric)?;
    let (val_l1, initial_val_q) = validate(gcfg, &g, val, &stft, metric)?;
    let mut log = TrainLog::new(Phase::Finetune);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let everything: Vec<&Prepared> = train.iter().collect();
    let frozen = sample(gcfg, &g, &everything, &stft, metric)?;
    let mut warm_loss = 0.0;
    for step in 0..tc.d_warmup_steps {
        if step % train.len() == 0 {
            order.shuffle(&mut rng);
        }
        let chunk: Vec<usize> = (0..tc.batch_size).map(|j| order[(step + j) % train.len()]).collect();
        let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
        let samples: Vec<Sample> = chunk.iter().map(|&i| frozen[i].clone()).collect();
        warm_loss = d_step(dcfg, &mut d, &mut d_opt, &batch, &samples).map_err(|e| diverged(0, e))?;
    }
    log.push(EpochRecord {
        epoch: 0,
        l1: train_l1,
        val_l1,
        l_d: warm_loss,
        l_g: 0.0,
        val_q: initial_val_q,
        wall_s: start.elapsed().as_secs_f64(),
    })?;
    info!(
        "finetune: pre-trained val_q {initial_val_q:.5}, d_loss after {} warm-up steps {warm_loss:.5}",
        tc.d_warmup_steps
    );
    save(ckpt, || snapshot(&g, &d, 0, initial_val_q))?;

    let mut best = (g.clone(), initial_val_q, 0);
    let mut best_d_loss = f64::INFINITY;
    let mut d_stale = 0;
    for epoch in 1..=tc.finetune_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_g, mut sum_l1, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let samples = sample(gcfg, &g, &batch, &stft, metric).map_err(|e| diverged(epoch, e))?;
            let mut l_d = 0.0;
            for _ in 0..tc.d_steps {
                l_d = d_step(dcfg, &mut d, &mut d_opt, &batch, &samples).map_err(|e| diverged(epoch, e))?;
            }
            let s = g_step(gcfg, &mut g, &mut g_opt, dcfg, &d, &batch, tc.target_score, tc.grad_clip)
                .map_err(|e| diverged(epoch, e))?;
            debug!("epoch {epoch}: d_loss {l_d:.5} g_loss {:.5} |grad| {:.4}", s.g_loss, s.grad_norm);
            sum_d += l_d;
            sum_g += s.g_loss;
            sum_l1 += s.l1;
            steps += 1;
        }
        let (val_l1, val_q) = validate(gcfg, &g, val, &stft, metric).map_err(|e| diverged(epoch, e))?;
        let n = steps as f64;
        log.push(EpochRecord {
            epoch,
            l1: sum_l1 / n,
            val_l1,
            l_d: sum_d / n,
            l_g: sum_g / n,
            val_q,
            wall_s: start.elapsed().as_secs_f64(),
        })?;
        info!(
            "finetune epoch {epoch}: l_d {:.5} l_g {:.5} val_q {val_q:.5}",
            sum_d / n,
            sum_g / n
        );
        if val_q > best.1 {
            best = (g.clone(), val_q, epoch);
            save(ckpt, || snapshot(&g, &d, epoch, val_q))?;
        }
        if sum_d / n < best_d_loss {
            best_d_loss = sum_d / n;
            d_stale = 0;
        } else {
            d_stale += 1;
            if d_stale == tc.patience {
                warn!(
                    "discriminator loss has not improved for {} epochs (best {best_d_loss:.5}); continuing",
                    tc.patience
                );
            }
        }
    }
    if g.param_count() != param_count {
        return Err(Error::invalid("fine-tuning changed the generator size"));
    }
    let (weights, best_val_q, best_epoch) = best;
    Ok(Finetuned {
        weights,
        discriminator: d,
        log,
        best_epoch,
        initial_val_q,
        best_val_q,
    })
}

#[cfg(test)]
mod tests;
