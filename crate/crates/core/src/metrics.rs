//! Normalized quality scores in `[0, 1]`.
//!
//! A [`MetricFn`] pairs a raw score on (enhanced, clean) waveforms with a
//! monotone map onto `[0, 1]`. The built-in metric is segment-free SNR; any
//! external tool that takes two WAV paths and prints a number can be wrapped
//! with [`ExternalMetric`].

use std::io::Write as _;
use std::path::Path;
use std::process::Command;

use log::warn;

use crate::dsp::{snr_db, wav, Waveform};
use crate::error::{Error, Result};

/// SNR window mapped onto `[0, 1]`, in dB.
pub const QSNR_FLOOR_DB: f64 = -10.0;
pub const QSNR_CEIL_DB: f64 = 30.0;
/// Raw range of PESQ scores.
pub const PESQ_RANGE: (f64, f64) = (-0.5, 4.5);

pub trait MetricFn: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, enhanced: &Waveform, clean: &Waveform) -> Result<f64>;
    fn normalize(&self, raw: f64) -> f64;

    fn score(&self, enhanced: &Waveform, clean: &Waveform) -> Result<f64> {
        Ok(self.normalize(self.evaluate(enhanced, clean)?))
    }
}

fn check_pair(enhanced: &Waveform, clean: &Waveform) -> Result<()> {
    if enhanced.len() != clean.len() {
        return Err(Error::Metric(format!(
            "length mismatch: enhanced has {} samples, clean has {}",
            enhanced.len(),
            clean.len()
        )));
    }
    if clean.energy() == 0.0 {
        return Err(Error::Metric("clean reference is all zeros".into()));
    }
    Ok(())
}

/// SNR of the enhanced signal against the clean reference, in dB.
/// A perfect estimate gives `+inf`.
pub fn snr_raw(enhanced: &Waveform, clean: &Waveform) -> Result<f64> {
    check_pair(enhanced, clean)?;
    Ok(snr_db(&enhanced.samples, &clean.samples))
}

/// `clip((snr + 10) / 40, 0, 1)`.
pub fn normalize_snr(db: f64) -> f64 {
    if db.is_nan() {
        return 0.0;
    }
    ((db - QSNR_FLOOR_DB) / (QSNR_CEIL_DB - QSNR_FLOOR_DB)).clamp(0.0, 1.0)
}

pub fn q_snr(enhanced: &Waveform, clean: &Waveform) -> Result<f64> {
    Ok(normalize_snr(snr_raw(enhanced, clean)?))
}

/// Affine map of `[lo, hi]` onto `[0, 1]`, clamping (with a warning) outside.
pub fn normalize_range(raw: f64, (lo, hi): (f64, f64)) -> f64 {
    let q = (raw - lo) / (hi - lo);
    if !(0.0..=1.0).contains(&q) {
        warn!("raw score {raw} outside [{lo}, {hi}], clamped");
    }
    if q.is_nan() {
        0.0
    } else {
        q.clamp(0.0, 1.0)
    }
}

pub fn normalize_pesq(raw: f64) -> f64 {
    normalize_range(raw, PESQ_RANGE)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct QSnr;

impl MetricFn for QSnr {
    fn name(&self) -> &str {
        "qsnr"
    }

    fn evaluate(&self, enhanced: &Waveform, clean: &Waveform) -> Result<f64> {
        snr_raw(enhanced, clean)
    }

    fn normalize(&self, raw: f64) -> f64 {
        normalize_snr(raw)
    }
}

/// Runs a shell command per evaluation. `{enhanced}` and `{clean}` in the
/// template are replaced by paths of temporary WAV files; the command must
/// print a single number on stdout.
#[derive(Clone, Debug)]
pub struct ExternalMetric {
    template: String,
    range: (f64, f64),
}

impl ExternalMetric {
    /// Raw scores are taken to lie in `range` (PESQ's by default).
    pub fn new(template: impl Into<String>, range: (f64, f64)) -> Result<Self> {
        let template = template.into();
        if !template.contains("{enhanced}") || !template.contains("{clean}") {
            return Err(Error::Metric(format!(
                "command template `{template}` needs both {{enhanced}} and {{clean}} placeholders"
            )));
        }
        if !(range.0 < range.1) {
            return Err(Error::Metric(format!("empty score range {range:?}")));
        }
        Ok(Self { template, range })
    }

    pub fn pesq(template: impl Into<String>) -> Result<Self> {
        Self::new(template, PESQ_RANGE)
    }

    fn run(&self, enhanced: &Path, clean: &Path) -> Result<f64> {
        let cmd = self
            .template
            .replace("{enhanced}", &enhanced.to_string_lossy())
            .replace("{clean}", &clean.to_string_lossy());
        let out = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .map_err(|e| Error::Metric(format!("could not run `{cmd}`: {e}")))?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        let stderr = String::from_utf8_lossy(&out.stderr);
        if !out.status.success() {
            return Err(Error::Metric(format!(
                "`{cmd}` failed with {}: stdout `{}` stderr `{}`",
                out.status,
                stdout.trim(),
                stderr.trim()
            )));
        }
        stdout.trim().parse::<f64>().map_err(|_| {
            Error::Metric(format!(
                "`{cmd}` printed `{}`, expected one number (stderr `{}`)",
                stdout.trim(),
                stderr.trim()
            ))
        })
    }
}

impl MetricFn for ExternalMetric {
    fn name(&self) -> &str {
        "external"
    }

    fn evaluate(&self, enhanced: &Waveform, clean: &Waveform) -> Result<f64> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let (e_path, c_path) = (dir.path().join("enhanced.wav"), dir.path().join("clean.wav"));
        wav::write(&e_path, enhanced)?;
        wav::write(&c_path, clean)?;
        self.run(&e_path, &c_path)
    }

    fn normalize(&self, raw: f64) -> f64 {
        normalize_range(raw, self.range)
    }
}

/// Parses `qsnr` or `external:<command template>`.
pub fn parse_metric(spec: &str, range: (f64, f64)) -> Result<Box<dyn MetricFn>> {
    if spec == "qsnr" {
        Ok(Box::new(QSnr))
    } else if let Some(cmd) = spec.strip_prefix("external:") {
        Ok(Box::new(ExternalMetric::new(cmd, range)?))
    } else {
        Err(Error::invalid(format!(
            "unknown metric `{spec}`, expected `qsnr` or `external:<cmd>`"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub utterance: String,
    pub q_noisy: f64,
    pub q_enhanced: f64,
}

impl ReportRow {
    pub fn delta(&self) -> f64 {
        self.q_enhanced - self.q_noisy
    }
}

/// Per-utterance scores and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(rows: Vec<ReportRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Metric("evaluation set is empty".into()));
        }
        Ok(Self { rows })
    }

    fn mean(&self, f: impl Fn(&ReportRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_noisy(&self) -> f64 {
        self.mean(|r| r.q_noisy)
    }

    pub fn mean_enhanced(&self) -> f64 {
        self.mean(|r| r.q_enhanced)
    }

    pub fn mean_delta(&self) -> f64 {
        self.mean(ReportRow::delta)
    }

    /// `utterance,q_noisy,q_enhanced,delta`, one row per utterance and a final `mean` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["utterance", "q_noisy", "q_enhanced", "delta"])?;
        for r in &self.rows {
            w.write_record([
                r.utterance.clone(),
                format!("{:.6}", r.q_noisy),
                format!("{:.6}", r.q_enhanced),
                format!("{:.6}", r.delta()),
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            format!("{:.6}", self.mean_noisy()),
            format!("{:.6}", self.mean_enhanced()),
            format!("{:.6}", self.mean_delta()),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Metric(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    fn sine(n: usize) -> Waveform {
        wave((0..n).map(|i| 0.5 * (i as f64 * 0.07).sin()).collect())
    }

    #[test]
    fn perfect_estimate_scores_one() {
        let c = sine(800);
        assert_eq!(q_snr(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn zero_db_scores_a_quarter() {
        let c = sine(800);
        // estimate = 0 has error energy equal to the clean energy
        let e = wave(vec![0.0; 800]);
        let q = q_snr(&e, &c).unwrap();
        assert!((q - 0.25).abs() < 1e-12, "{q}");
    }

    #[test]
    fn anti_signal() {
        let c = sine(800);
        let e = wave(c.samples.iter().map(|v| -v).collect());
        let want = (10.0 * 0.25f64.log10() + 10.0) / 40.0;
        let got = q_snr(&e, &c).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.0995).abs() < 1e-4);
    }

    #[test]
    fn bad_pairs_are_errors() {
        assert!(q_snr(&sine(10), &sine(11)).is_err());
        assert!(q_snr(&sine(10), &wave(vec![0.0; 10])).is_err());
    }

    #[test]
    fn pesq_normalization() {
        assert_eq!(normalize_pesq(4.5), 1.0);
        assert_eq!(normalize_pesq(-0.5), 0.0);
        assert!((normalize_pesq(2.454) - 0.5908).abs() < 1e-12);
        assert_eq!(normalize_pesq(9.0), 1.0);
        assert_eq!(normalize_pesq(-3.0), 0.0);
    }

    #[test]
    fn snr_score_increases_as_noise_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sine(4000);
        let noise: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = -1.0;
        for level in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02] {
            let e = wave(c.samples.iter().zip(&noise).map(|(s, n)| s + level * n).collect());
            let q = q_snr(&e, &c).unwrap();
            assert!(q > last, "level {level}: {q} <= {last}");
            last = q;
        }
    }

    proptest! {
        #[test]
        fn joint_scaling_invariance(gain in 0.01f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..200).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let e: Vec<f64> = c.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
            let a = q_snr(&wave(e.clone()), &wave(c.clone())).unwrap();
            let b = q_snr(
                &wave(e.iter().map(|v| v * gain).collect()),
                &wave(c.iter().map(|v| v * gain).collect()),
            ).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn normalizers_are_monotone_and_bounded(a in -100f64..100.0, b in -100f64..100.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(normalize_snr(lo) <= normalize_snr(hi));
            prop_assert!(normalize_pesq(lo) <= normalize_pesq(hi));
            for q in [normalize_snr(a), normalize_pesq(a)] {
                prop_assert!((0.0..=1.0).contains(&q));
            }
        }
    }

    #[test]
    fn external_stub_constant() {
        let m = ExternalMetric::pesq("echo 4.5 # {enhanced} {clean}").unwrap();
        let c = sine(600);
        assert_eq!(m.score(&c, &c).unwrap(), 1.0);
        let m = ExternalMetric::pesq("echo 9 # {enhanced} {clean}").unwrap();
        assert_eq!(m.score(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn external_failures_carry_output() {
        let c = sine(600);
        let m = ExternalMetric::pesq("echo oops; exit 3 # {enhanced} {clean}").unwrap();
        let err = m.score(&c, &c).unwrap_err().to_string();
        assert!(err.contains("oops"), "{err}");
        let m = ExternalMetric::pesq("echo not-a-number # {enhanced} {clean}").unwrap();
        let err = m.score(&c, &c).unwrap_err().to_string();
        assert!(err.contains("not-a-number"), "{err}");
        assert!(ExternalMetric::pesq("echo 1").is_err());
    }

    #[test]
    fn external_sees_the_files() {
        // the stub only succeeds when both placeholders name nonempty files
        let m = ExternalMetric::new("test -s {enhanced} && test -s {clean} && echo 0.5", (0.0, 1.0)).unwrap();
        let c = sine(600);
        assert_eq!(m.score(&c, &c).unwrap(), 0.5);
    }

    #[test]
    fn parse_metric_specs() {
        assert_eq!(parse_metric("qsnr", PESQ_RANGE).unwrap().name(), "qsnr");
        assert_eq!(
            parse_metric("external:echo 1 {enhanced} {clean}", PESQ_RANGE).unwrap().name(),
            "external"
        );
        assert!(parse_metric("pesq", PESQ_RANGE).is_err());
    }

    #[test]
    fn report_csv() {
        assert!(EvalReport::new(vec![]).is_err());
        let r = EvalReport::new(vec![
            ReportRow {
                utterance: "a".into(),
                q_noisy: 0.25,
                q_enhanced: 0.5,
            },
            ReportRow {
                utterance: "b".into(),
                q_noisy: 0.5,
                q_enhanced: 0.5,
            },
        ])
        .unwrap();
        assert_eq!(
            r.to_csv().unwrap(),
            "utterance,q_noisy,q_enhanced,delta\n\
             a,0.250000,0.500000,0.250000\n\
             b,0.500000,0.500000,0.000000\n\
             mean,0.375000,0.500000,0.125000\n"
        );
    }
}
