//! Waveform ↔ time-frequency conversion.
//!
//! Analysis uses a symmetric Hamming window of 512 samples (32 ms at 16 kHz)
//! with a 256-sample hop, giving 257 one-sided bins. Frames start at sample
//! zero and a trailing partial window is dropped, so an `n`-sample signal has
//! `(n - 512) / 256 + 1` frames. Synthesis windows each inverse frame again
//! and divides the overlap-add by the summed squared window.

pub mod export;
pub mod wav;

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio as `f64` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Scales down so the peak magnitude is at most 1. Returns the applied gain.
    pub fn normalize_peak(&mut self) -> f64 {
        let peak = self.peak();
        if peak > 1.0 {
            let g = 1.0 / peak;
            self.samples.iter_mut().for_each(|s| *s *= g);
            g
        } else {
            1.0
        }
    }
}

/// Framing parameters and the analysis window.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameParams {
    pub window_len: usize,
    pub hop: usize,
    pub window: Vec<f64>,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self::new(512, 256).expect("default framing is valid")
    }
}

/// Symmetric Hamming window `0.54 - 0.46·cos(2πn/(N-1))`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

impl FrameParams {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        if window_len < 2 || window_len % 2 != 0 {
            return Err(Error::invalid(format!(
                "window length {window_len} must be even and at least 2"
            )));
        }
        if hop == 0 || hop > window_len {
            return Err(Error::invalid(format!(
                "hop {hop} must lie in 1..={window_len}"
            )));
        }
        Ok(Self {
            window_len,
            hop,
            window: hamming(window_len),
        })
    }

    pub fn fft_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Frames produced for a signal of `len` samples (no tail padding).
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window_len).then(|| (len - self.window_len) / self.hop + 1)
    }

    /// Samples produced by overlap-adding `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.window_len
    }
}

/// `frames × bins` magnitude and phase, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub mag: Vec<f64>,
    pub phase: Vec<f64>,
    pub compressed: bool,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, mag: Vec<f64>, phase: Vec<f64>, compressed: bool) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("spectrogram needs at least one frame"));
        }
        if mag.len() != frames * bins || phase.len() != frames * bins {
            return Err(Error::Shape {
                op: "spectrogram",
                lhs: vec![frames, bins],
                rhs: vec![mag.len(), phase.len()],
            });
        }
        if mag.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("spectrogram magnitude is not finite"));
        }
        if !compressed && mag.iter().any(|&m| m < 0.0) {
            return Err(Error::invalid("linear-domain magnitude must be nonnegative"));
        }
        Ok(Self {
            frames,
            bins,
            mag,
            phase,
            compressed,
        })
    }

    pub fn mag_row(&self, t: usize) -> &[f64] {
        &self.mag[t * self.bins..(t + 1) * self.bins]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    /// Same phase, new magnitude in the given domain.
    pub fn with_mag(&self, mag: Vec<f64>, compressed: bool) -> Result<Self> {
        Self::new(self.frames, self.bins, mag, self.phase.clone(), compressed)
    }
}

/// FFT plans for one frame size.
pub struct Stft {
    params: FrameParams,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(params: FrameParams) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(params.window_len);
        let inverse = planner.plan_fft_inverse(params.window_len);
        Self {
            params,
            forward,
            inverse,
        }
    }

    pub fn params(&self) -> &FrameParams {
        &self.params
    }

    pub fn analyze(&self, w: &Waveform) -> Result<Spectrogram> {
        let p = &self.params;
        let frames = p.frame_count(w.len()).ok_or(Error::SignalTooShort {
            len: w.len(),
            window: p.window_len,
        })?;
        let bins = p.fft_bins();
        let mut mag = Vec::with_capacity(frames * bins);
        let mut phase = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); p.window_len];
        for t in 0..frames {
            let seg = &w.samples[t * p.hop..t * p.hop + p.window_len];
            for ((b, s), win) in buf.iter_mut().zip(seg).zip(&p.window) {
                *b = Complex::new(s * win, 0.0);
            }
            self.forward.process(&mut buf);
            for c in &buf[..bins] {
                mag.push(c.norm());
                phase.push(c.arg());
            }
        }
        Spectrogram::new(frames, bins, mag, phase, false)
    }

    pub fn synthesize(&self, s: &Spectrogram) -> Result<Waveform> {
        if s.compressed {
            return Err(Error::Compressed);
        }
        let p = &self.params;
        let n = p.window_len;
        if s.bins != p.fft_bins() {
            return Err(Error::Shape {
                op: "istft",
                lhs: vec![s.frames, s.bins],
                rhs: vec![p.fft_bins()],
            });
        }
        let out_len = p.output_len(s.frames);
        let mut out = vec![0.0; out_len];
        let mut norm = vec![0.0; out_len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..s.frames {
            let row = t * s.bins;
            for k in 0..s.bins {
                buf[k] = Complex::from_polar(s.mag[row + k], s.phase[row + k]);
            }
            // DC and Nyquist bins of a real signal are real.
            buf[0] = Complex::new(buf[0].re, 0.0);
            buf[n / 2] = Complex::new(buf[n / 2].re, 0.0);
            for k in 1..n / 2 {
                buf[n - k] = buf[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * p.hop;
            for (i, win) in p.window.iter().enumerate() {
                out[start + i] += buf[i].re / n as f64 * win;
                norm[start + i] += win * win;
            }
        }
        for (o, d) in out.iter_mut().zip(&norm) {
            *o /= d;
        }
        Waveform::new(out, SAMPLE_RATE)
    }
}

pub fn stft(w: &Waveform, p: &FrameParams) -> Result<Spectrogram> {
    Stft::new(p.clone()).analyze(w)
}

pub fn istft(s: &Spectrogram, p: &FrameParams) -> Result<Waveform> {
    Stft::new(p.clone()).synthesize(s)
}

/// `log(1 + mag)` elementwise.
pub fn compress(s: &Spectrogram) -> Result<Spectrogram> {
    if s.compressed {
        return Err(Error::invalid("spectrogram is already compressed"));
    }
    s.with_mag(s.mag.iter().map(|m| m.ln_1p()).collect(), true)
}

/// `exp(mag) - 1` elementwise.
pub fn decompress(s: &Spectrogram) -> Result<Spectrogram> {
    if !s.compressed {
        return Err(Error::NotCompressed);
    }
    s.with_mag(s.mag.iter().map(|m| m.exp_m1().max(0.0)).collect(), false)
}

/// Enhanced linear magnitude combined with the noisy phase, then inverted.
pub fn resynthesize(enhanced: &Spectrogram, noisy: &Spectrogram, p: &FrameParams) -> Result<Waveform> {
    if enhanced.compressed {
        return Err(Error::Compressed);
    }
    if enhanced.shape() != noisy.shape() {
        return Err(Error::Shape {
            op: "resynthesize",
            lhs: vec![enhanced.frames, enhanced.bins],
            rhs: vec![noisy.frames, noisy.bins],
        });
    }
    let combined = noisy.with_mag(enhanced.mag.clone(), false)?;
    istft(&combined, p)
}

/// `10·log10(‖reference‖² / ‖estimate − reference‖²)` over the common prefix.
pub fn snr_db(estimate: &[f64], reference: &[f64]) -> f64 {
    let (sig, err) = estimate
        .iter()
        .zip(reference)
        .fold((0.0, 0.0), |(s, e), (x, r)| (s + r * r, e + (x - r) * (x - r)));
    10.0 * (sig / err).log10()
}
