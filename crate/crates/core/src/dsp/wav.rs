//! 16-bit PCM mono WAV at 16 kHz, nothing else.

use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const SCALE: f64 = 32768.0;

pub fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

/// Reads a WAV file, rejecting anything but 16-bit signed PCM mono at 16 kHz.
/// Samples are scaled to `[-1, 1)`.
pub fn read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavFormat {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let s = reader.spec();
    let reject = |reason: String| Error::WavFormat {
        path: path.to_path_buf(),
        reason,
    };
    if s.channels != 1 {
        return Err(reject(format!("{} channels, expected mono", s.channels)));
    }
    if s.sample_format != SampleFormat::Int || s.bits_per_sample != 16 {
        return Err(reject(format!(
            "{}-bit {:?} samples, expected 16-bit integer PCM",
            s.bits_per_sample, s.sample_format
        )));
    }
    if s.sample_rate != SAMPLE_RATE {
        return Err(reject(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE} Hz",
            s.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut w = Waveform::new(samples, SAMPLE_RATE)?;
    w.normalize_peak();
    Ok(w)
}

fn quantize(x: f64) -> i16 {
    (x * SCALE).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "can only write {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate
        )));
    }
    let mut writer = hound::WavWriter::create(path, spec()).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &w.samples {
        writer.write_sample(quantize(s))?;
    }
    writer.finalize()?;
    Ok(())
}
