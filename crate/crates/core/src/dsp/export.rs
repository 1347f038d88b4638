//! Spectrogram dumps for visual comparison: CSV (one row per frame) and
//! binary PGM (width = frames, height = bins, low frequencies at the bottom).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Spectrogram;
use crate::error::{Error, Result};

/// Dynamic range mapped onto the 0..=255 gray scale.
pub const DYNAMIC_RANGE_DB: f64 = 80.0;

pub fn to_csv(s: &Spectrogram) -> String {
    let mut out = String::new();
    for t in 0..s.frames {
        let row = s.mag_row(t);
        for (k, m) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{m}");
        }
        out.push('\n');
    }
    out
}

fn to_db(m: f64) -> f64 {
    20.0 * m.max(1e-12).log10()
}

/// 8-bit grayscale image; the loudest bin is white, anything 80 dB below is black.
pub fn to_pgm(s: &Spectrogram) -> Vec<u8> {
    let top = s.mag.iter().copied().map(to_db).fold(f64::NEG_INFINITY, f64::max);
    let floor = top - DYNAMIC_RANGE_DB;
    let mut out = format!("P5\n{} {}\n255\n", s.frames, s.bins).into_bytes();
    for k in (0..s.bins).rev() {
        for t in 0..s.frames {
            let db = to_db(s.mag[t * s.bins + k]);
            let level = ((db - floor) / DYNAMIC_RANGE_DB).clamp(0.0, 1.0);
            out.push((level * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, s: &Spectrogram) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv(s)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, s: &Spectrogram) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_pgm(s)).map_err(|e| Error::io(path, e))
}

/// Parses the header of a binary PGM written by [`to_pgm`]: `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let bad = || Error::invalid("malformed PGM");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = &bytes[pos + 1..];
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels))
}
