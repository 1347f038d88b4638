//! Waveform-level enhancement: STFT, compression, generator, mask,
//! noisy-phase resynthesis.

use crate::autodiff::Tensor;
use crate::config::DataConfig;
use crate::data::{generate, split_items, toy_specs, Utterance};
use crate::dsp::{compress, resynthesize, FrameParams, Spectrogram, Stft, Waveform};
use crate::error::{Error, Result};
use crate::generator::{enhanced_linear, GeneratorConfig, GeneratorWeights};
use crate::metrics::{EvalReport, MetricFn, ReportRow};

/// One utterance in the shapes training and evaluation need.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    /// Linear-magnitude noisy spectrogram, with its phase.
    pub noisy: Spectrogram,
    /// `T × F` compressed noisy magnitude, the generator input.
    pub noisy_c: Tensor,
    /// `T × F` linear noisy magnitude.
    pub noisy_lin: Tensor,
    /// `T × F` compressed clean magnitude.
    pub clean_c: Tensor,
    /// Clean waveform cut to the resynthesized length.
    pub clean: Waveform,
    /// Noisy waveform cut to the resynthesized length.
    pub noisy_wave: Waveform,
}

fn as_tensor(s: &Spectrogram) -> Tensor {
    Tensor::new(vec![s.frames, s.bins], s.mag.clone()).expect("spectrogram is T x F")
}

fn trimmed(w: &Waveform, len: usize) -> Result<Waveform> {
    Waveform::new(w.samples[..len].to_vec(), w.sample_rate)
}

pub fn prepare(u: &Utterance, stft: &Stft) -> Result<Prepared> {
    if u.noisy.len() != u.clean.len() {
        return Err(Error::invalid(format!(
            "{}: noisy has {} samples, clean has {}",
            u.id,
            u.noisy.len(),
            u.clean.len()
        )));
    }
    let noisy = stft.analyze(&u.noisy)?;
    let clean = stft.analyze(&u.clean)?;
    let len = stft.params().output_len(noisy.frames);
    Ok(Prepared {
        id: u.id.clone(),
        noisy_c: as_tensor(&compress(&noisy)?),
        noisy_lin: as_tensor(&noisy),
        clean_c: as_tensor(&compress(&clean)?),
        clean: trimmed(&u.clean, len)?,
        noisy_wave: trimmed(&u.noisy, len)?,
        noisy,
    })
}

pub fn prepare_all(utts: &[Utterance], stft: &Stft) -> Result<Vec<Prepared>> {
    utts.iter().map(|u| prepare(u, stft)).collect()
}

/// Synthetic pairs from `cfg`, split into prepared training and validation sets.
pub fn synthetic_sets(cfg: &DataConfig) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
    cfg.validate()?;
    let stft = Stft::new(FrameParams::default());
    let utts = toy_specs(cfg.pairs, cfg.seed, &cfg.snr_grid, cfg.duration_s)
        .iter()
        .map(|s| generate(s).map(|(u, _)| u))
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = split_items(&utts, cfg.train_fraction, cfg.seed)?;
    Ok((prepare_all(&train, &stft)?, prepare_all(&val, &stft)?))
}

/// Network output, compressed enhanced magnitude and enhanced waveform.
#[derive(Clone, Debug)]
pub struct Enhanced {
    pub output: Tensor,
    pub enhanced_c: Tensor,
    pub linear: Spectrogram,
    pub wave: Waveform,
}

pub fn enhance_prepared(cfg: &GeneratorConfig, w: &GeneratorWeights, p: &Prepared, stft: &Stft) -> Result<Enhanced> {
    let output = w.infer(cfg, &p.noisy_c)?;
    let linear = enhanced_linear(&output, &p.noisy, cfg.head_mode)?;
    let enhanced_c = as_tensor(&compress(&linear)?);
    let wave = resynthesize(&linear, &p.noisy, stft.params())?;
    Ok(Enhanced {
        output,
        enhanced_c,
        linear,
        wave,
    })
}

/// Full pipeline on a raw waveform. The result is `(T-1)·hop + window`
/// samples long: the partial window at the tail is dropped.
pub fn enhance(cfg: &GeneratorConfig, w: &GeneratorWeights, noisy: &Waveform) -> Result<Waveform> {
    let stft = Stft::new(FrameParams::default());
    let spec = stft.analyze(noisy)?;
    let output = w.infer(cfg, &as_tensor(&compress(&spec)?))?;
    let linear = enhanced_linear(&output, &spec, cfg.head_mode)?;
    resynthesize(&linear, &spec, stft.params())
}

/// Normalized score of one prepared utterance under the current generator.
pub fn score_prepared(
    cfg: &GeneratorConfig,
    w: &GeneratorWeights,
    p: &Prepared,
    stft: &Stft,
    metric: &dyn MetricFn,
) -> Result<f64> {
    metric.score(&enhance_prepared(cfg, w, p, stft)?.wave, &p.clean)
}

pub fn mean_score(
    cfg: &GeneratorConfig,
    w: &GeneratorWeights,
    set: &[Prepared],
    stft: &Stft,
    metric: &dyn MetricFn,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("cannot score an empty set"));
    }
    let mut total = 0.0;
    for p in set {
        total += score_prepared(cfg, w, p, stft, metric)?;
    }
    Ok(total / set.len() as f64)
}

/// Noisy and enhanced scores for every utterance.
pub fn evaluate(
    cfg: &GeneratorConfig,
    w: &GeneratorWeights,
    set: &[Prepared],
    stft: &Stft,
    metric: &dyn MetricFn,
) -> Result<EvalReport> {
    let rows = set
        .iter()
        .map(|p| {
            Ok(ReportRow {
                utterance: p.id.clone(),
                q_noisy: metric.score(&p.noisy_wave, &p.clean)?,
                q_enhanced: score_prepared(cfg, w, p, stft, metric)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(rows)
}
