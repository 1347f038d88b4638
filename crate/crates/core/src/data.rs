//! Synthetic noisy/clean pairs and manifest handling.
//!
//! The synthetic clean source is harmonic "pseudo-speech": a few harmonics
//! of a random fundamental under a 4 Hz half-wave envelope, so utterances
//! contain both voiced stretches and noise-only gaps. Real recordings can be
//! used instead through file sources or a hand-written manifest.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Mixtures are scaled down jointly so no sample exceeds this magnitude.
pub const HEADROOM_PEAK: f64 = 0.99;
pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_TAG: &str = "# causal-se manifest v";
/// Shortest allowed utterance: two analysis windows.
pub const MIN_SAMPLES: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub enum CleanSource {
    PseudoSpeech,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSource {
    White,
    Pink,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixSpec {
    pub id: String,
    pub clean: CleanSource,
    pub noise: NoiseSource,
    /// `f64::INFINITY` gives a noise-free pair.
    pub snr_db: f64,
    pub seed: u64,
    pub duration_s: f64,
}

impl MixSpec {
    pub fn samples(&self) -> usize {
        (self.duration_s * f64::from(SAMPLE_RATE)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples() < MIN_SAMPLES {
            return Err(Error::invalid(format!(
                "{}: duration {} s is shorter than two windows",
                self.id, self.duration_s
            )));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::invalid(format!("{}: SNR must be a number or +inf", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub noisy: Waveform,
    pub clean: Waveform,
}

pub fn pseudo_speech(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let f0 = rng.gen_range(100.0..220.0);
    let harmonics = rng.gen_range(3..=6);
    let partials: Vec<(f64, f64, f64)> = (1..=harmonics)
        .map(|k| {
            let k = k as f64;
            (k * f0, rng.gen_range(0.5..1.0) / k, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let env_phase = rng.gen_range(0.1..PI / 2.0);
    let norm: f64 = partials.iter().map(|p| p.1).sum();
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = (2.0 * PI * 4.0 * t + env_phase).sin().max(0.0);
            let tone: f64 = partials
                .iter()
                .map(|(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum();
            0.5 * env * tone / norm
        })
        .collect()
}

pub fn white_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// White noise through a three-pole approximation of a 1/f filter.
pub fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            b0 = 0.99765 * b0 + w * 0.099_046;
            b1 = 0.963 * b1 + w * 0.296_516_4;
            b2 = 0.57 * b2 + w * 1.052_691_3;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Adds `noise` scaled so that `10·log10(‖clean‖² / ‖α·noise‖²) = snr_db`.
/// Returns `(noisy, clean)`.
pub fn mix(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if clean.len() != noise.len() {
        return Err(Error::invalid(format!(
            "mix: clean has {} samples, noise has {}",
            clean.len(),
            noise.len()
        )));
    }
    let ec = energy(clean);
    if ec == 0.0 {
        return Err(Error::invalid("mix: clean signal is silent"));
    }
    if snr_db == f64::INFINITY {
        return Ok((clean.to_vec(), clean.to_vec()));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("mix: bad SNR {snr_db}")));
    }
    let en = energy(noise);
    if en == 0.0 {
        return Err(Error::invalid("mix: noise signal is silent"));
    }
    let alpha = (ec / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy = clean.iter().zip(noise).map(|(c, n)| c + alpha * n).collect();
    Ok((noisy, clean.to_vec()))
}

/// Scales both signals by one factor so their joint peak is at most
/// [`HEADROOM_PEAK`]. Returns the factor.
pub fn apply_headroom(noisy: &mut [f64], clean: &mut [f64]) -> f64 {
    let peak = noisy.iter().chain(clean.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    if peak <= HEADROOM_PEAK {
        return 1.0;
    }
    let g = HEADROOM_PEAK / peak;
    noisy.iter_mut().chain(clean.iter_mut()).for_each(|v| *v *= g);
    g
}

/// First `n` samples of a file, looping it if it is shorter.
fn file_samples(path: &Path, n: usize) -> Result<Vec<f64>> {
    let w = wav::read(path)?;
    if w.is_empty() {
        return Err(Error::invalid(format!("{} is empty", path.display())));
    }
    Ok(w.samples.iter().copied().cycle().take(n).collect())
}

/// Builds one pair. Returns it with the headroom factor that was applied.
pub fn generate(spec: &MixSpec) -> Result<(Utterance, f64)> {
    spec.validate()?;
    let n = spec.samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let clean = match &spec.clean {
        CleanSource::PseudoSpeech => pseudo_speech(n, &mut rng),
        CleanSource::File(p) => file_samples(p, n)?,
    };
    let noise = match &spec.noise {
        NoiseSource::White => white_noise(n, &mut rng),
        NoiseSource::Pink => pink_noise(n, &mut rng),
        NoiseSource::File(p) => file_samples(p, n)?,
    };
    let (mut noisy, mut clean) = mix(&clean, &noise, spec.snr_db)?;
    let scale = apply_headroom(&mut noisy, &mut clean);
    Ok((
        Utterance {
            id: spec.id.clone(),
            noisy: Waveform::new(noisy, SAMPLE_RATE)?,
            clean: Waveform::new(clean, SAMPLE_RATE)?,
        },
        scale,
    ))
}

/// `n` pseudo-speech specs cycling through `snr_grid`, alternating white and pink noise.
pub fn toy_specs(n: usize, seed: u64, snr_grid: &[f64], duration_s: f64) -> Vec<MixSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| MixSpec {
            id: format!("utt{i:04}"),
            clean: CleanSource::PseudoSpeech,
            noise: if i % 2 == 0 { NoiseSource::White } else { NoiseSource::Pink },
            snr_db: snr_grid[i % snr_grid.len()],
            seed: rng.gen(),
            duration_s,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub noisy: PathBuf,
    pub clean: PathBuf,
    pub snr_db: f64,
    pub seed: u64,
    /// Joint headroom factor applied to the pair.
    pub scale: f64,
}

/// A list of pairs. Relative paths resolve against `root`, the directory
/// the manifest file lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let version = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix(MANIFEST_TAG))
            .and_then(|v| v.trim().parse::<u32>().ok());
        match version {
            Some(MANIFEST_VERSION) => {}
            Some(v) => {
                return Err(Error::invalid(format!(
                    "{}: manifest version {v} is not supported",
                    path.display()
                )))
            }
            None => {
                return Err(Error::invalid(format!(
                    "{}: missing `{MANIFEST_TAG}{MANIFEST_VERSION}` header",
                    path.display()
                )))
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let entries = reader.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("{MANIFEST_TAG}{MANIFEST_VERSION}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            for e in &self.entries {
                w.serialize(e)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Another manifest sharing this one's root.
    fn rerooted(&self, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root: self.root.clone(),
            entries,
        }
    }

    /// Reads every pair.
    pub fn load(&self) -> Result<Vec<Utterance>> {
        self.entries
            .iter()
            .map(|e| {
                let noisy = wav::read(self.resolve(&e.noisy))?;
                let clean = wav::read(self.resolve(&e.clean))?;
                if noisy.len() != clean.len() {
                    return Err(Error::invalid(format!(
                        "{}: noisy and clean lengths differ ({} vs {})",
                        e.id,
                        noisy.len(),
                        clean.len()
                    )));
                }
                Ok(Utterance {
                    id: e.id.clone(),
                    noisy,
                    clean,
                })
            })
            .collect()
    }
}

/// Writes `{id}_noisy.wav` / `{id}_clean.wav` for every spec and a
/// `manifest.csv` into `dir`.
pub fn synth_dataset(specs: &[MixSpec], dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(specs.len());
    for spec in specs {
        let (u, scale) = generate(spec)?;
        let noisy = PathBuf::from(format!("{}_noisy.wav", spec.id));
        let clean = PathBuf::from(format!("{}_clean.wav", spec.id));
        wav::write(dir.join(&noisy), &u.noisy)?;
        wav::write(dir.join(&clean), &u.clean)?;
        entries.push(ManifestEntry {
            id: spec.id.clone(),
            noisy,
            clean,
            snr_db: spec.snr_db,
            seed: spec.seed,
            scale,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.write(dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Seeded shuffle, then the first `round(n·train_fraction)` items (at least
/// one, leaving at least one) go to training.
pub fn split_items<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = items.len();
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} item(s)")));
    }
    let mut items = items.to_vec();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let val = items.split_off(n_train);
    Ok((items, val))
}

pub fn split(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    let (train, val) = split_items(&manifest.entries, train_fraction, seed)?;
    Ok((manifest.rerooted(train), manifest.rerooted(val)))
}
