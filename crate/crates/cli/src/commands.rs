use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use causal_se::autodiff::Tensor;
use causal_se::checkpoint::Checkpoint;
use causal_se::data::{self, synth_dataset, toy_specs, CleanSource, Manifest, MixSpec, NoiseSource};
use causal_se::dsp::{compress, export, resynthesize, wav, FrameParams, Stft, Waveform, SAMPLE_RATE};
use causal_se::generator::{
    count_params, enhanced_linear, GeneratorConfig, GeneratorWeights, HeadMode, StreamEnhancer,
    REFERENCE_MS_PER_FRAME, REFERENCE_PARAM_COUNT,
};
use causal_se::pipeline::{self, prepare_all, synthetic_sets, Prepared};
use causal_se::training::{metricgan_finetune, pretrain as run_pretrain, TrainLog};

use crate::{usage, Context, Failure, Outcome};

pub const MIN_BENCH_FRAMES: usize = 10;

fn log_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".log.csv");
        PathBuf::from(name)
    })
}

/// Train/validation sets from a manifest, or the synthetic set described by `[data]`.
fn datasets(ctx: &Context, manifest: Option<&Path>) -> Result<(Vec<Prepared>, Vec<Prepared>), Failure> {
    let d = &ctx.config.data;
    match manifest {
        None => Ok(synthetic_sets(d)?),
        Some(path) => {
            let utts = Manifest::read(path)?.load()?;
            let (train, val) = data::split_items(&utts, d.train_fraction, d.seed)?;
            let stft = Stft::new(FrameParams::default());
            Ok((prepare_all(&train, &stft)?, prepare_all(&val, &stft)?))
        }
    }
}

/// Loads `--ckpt` and makes its generator config the resolved one.
fn load_generator(ctx: &mut Context) -> Result<(Checkpoint, GeneratorWeights), Failure> {
    let ck = Checkpoint::load(ctx.ckpt()?)?;
    let gcfg = ck.header.generator.clone();
    if let Some(mode) = ctx.mode_flag {
        if mode != gcfg.head_mode {
            return Err(usage(format!(
                "--mode {mode:?} conflicts with the checkpoint's {:?} head",
                gcfg.head_mode
            )));
        }
    }
    ctx.config.generator = gcfg;
    let weights = ck.generator_weights()?;
    Ok((ck, weights))
}

fn write_log(log: &TrainLog, path: &Path) -> Outcome {
    log.write_csv(path)?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn synth_data(ctx: &mut Context, pairs: Option<usize>, duration: Option<f64>) -> Outcome {
    let out = ctx.out()?.to_path_buf();
    if let Some(n) = pairs {
        ctx.config.data.pairs = n;
    }
    if let Some(s) = duration {
        ctx.config.data.duration_s = s;
    }
    ctx.config.validate().map_err(|e| usage(e.to_string()))?;
    ctx.print_config()?;
    let d = &ctx.config.data;
    let manifest = synth_dataset(&toy_specs(d.pairs, d.seed, &d.snr_grid, d.duration_s), &out)?;
    println!("wrote {} pairs to {}", manifest.len(), out.join("manifest.csv").display());
    Ok(())
}

pub fn pretrain(ctx: &Context, manifest: Option<&Path>, log: Option<PathBuf>, identity: bool) -> Outcome {
    let out = ctx.out()?;
    ctx.print_config()?;
    let gcfg = &ctx.config.generator;
    if identity {
        if gcfg.head_mode != HeadMode::Mask {
            return Err(usage("--identity needs a mask head"));
        }
        Checkpoint::generator(gcfg, &GeneratorWeights::identity_mask(gcfg)?)
            .with_meta("phase", "identity")
            .save(out)?;
        println!("wrote identity-mask checkpoint {}", out.display());
        return Ok(());
    }
    let (train, val) = datasets(ctx, manifest)?;
    let result = run_pretrain(&ctx.config, &train, &val, ctx.metric.as_ref(), Some(out))?;
    write_log(&result.log, &log_path(out, log))?;
    println!(
        "pretrain: best epoch {} val_l1 {:.6}, checkpoint {}",
        result.best_epoch,
        result.best_val_l1,
        out.display()
    );
    Ok(())
}

pub fn finetune(ctx: &mut Context, manifest: Option<&Path>, log: Option<PathBuf>) -> Outcome {
    let out = ctx.out()?.to_path_buf();
    let (_, pretrained) = load_generator(ctx)?;
    ctx.print_config()?;
    let (train, val) = datasets(ctx, manifest)?;
    let result = metricgan_finetune(&ctx.config, &pretrained, &train, &val, ctx.metric.as_ref(), Some(&out))?;
    write_log(&result.log, &log_path(&out, log))?;
    println!(
        "finetune: val score {:.6} -> {:.6} (best epoch {}), checkpoint {}",
        result.initial_val_q,
        result.best_val_q,
        result.best_epoch,
        out.display()
    );
    Ok(())
}

pub fn enhance(ctx: &mut Context, input: &Path) -> Outcome {
    let out = ctx.out()?.to_path_buf();
    let (_, weights) = load_generator(ctx)?;
    ctx.print_config()?;
    let noisy = wav::read(input)?;
    let enhanced = pipeline::enhance(&ctx.config.generator, &weights, &noisy)?;
    wav::write(&out, &enhanced)?;
    println!(
        "enhanced {} ({} samples) -> {} ({} samples)",
        input.display(),
        noisy.len(),
        out.display(),
        enhanced.len()
    );
    Ok(())
}

/// Runs every frame of `noisy` through a fresh stream; returns the `T × F`
/// output and the wall time of each push in milliseconds.
fn stream_frames(
    cfg: &GeneratorConfig,
    weights: &GeneratorWeights,
    compressed: &[f64],
    frames: usize,
) -> Result<(Tensor, Vec<f64>), Failure> {
    let mut enhancer = StreamEnhancer::new(cfg, weights)?;
    let bins = cfg.freq_bins;
    let mut rows = Vec::with_capacity(frames * bins);
    let mut times = Vec::with_capacity(frames);
    for (t, frame) in compressed.chunks_exact(bins).enumerate() {
        let start = Instant::now();
        rows.extend(enhancer.push(t, frame)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((Tensor::new(vec![frames, bins], rows)?, times))
}

pub fn stream(ctx: &mut Context, input: &Path) -> Outcome {
    let out = ctx.out()?.to_path_buf();
    let (_, weights) = load_generator(ctx)?;
    ctx.print_config()?;
    let gcfg = &ctx.config.generator;
    let stft = Stft::new(FrameParams::default());
    let spec = stft.analyze(&wav::read(input)?)?;
    let (output, times) = stream_frames(gcfg, &weights, &compress(&spec)?.mag, spec.frames)?;
    let linear = enhanced_linear(&output, &spec, gcfg.head_mode)?;
    wav::write(&out, &resynthesize(&linear, &spec, stft.params())?)?;
    println!(
        "streamed {} frames, mean {:.4} ms/frame -> {}",
        spec.frames,
        mean(&times),
        out.display()
    );
    Ok(())
}

pub fn score_pair(ctx: &Context, enhanced: &Path, clean: &Path) -> Outcome {
    ctx.print_config()?;
    let raw = ctx.metric.evaluate(&wav::read(enhanced)?, &wav::read(clean)?)?;
    println!("{raw}");
    Ok(())
}

pub fn eval(ctx: &mut Context, manifest: Option<&Path>) -> Outcome {
    let (_, weights) = load_generator(ctx)?;
    ctx.print_config()?;
    let (_, val) = datasets(ctx, manifest)?;
    let stft = Stft::new(FrameParams::default());
    let report = pipeline::evaluate(&ctx.config.generator, &weights, &val, &stft, ctx.metric.as_ref())?;
    if let Some(out) = &ctx.out {
        report.write_csv(out)?;
        info!("wrote {}", out.display());
    }
    println!(
        "eval ({}, {} utterances): noisy {:.6} enhanced {:.6} delta {:+.6}",
        ctx.metric.name(),
        report.rows.len(),
        report.mean_noisy(),
        report.mean_enhanced(),
        report.mean_delta()
    );
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

/// Without `--ckpt` the generator is freshly initialized from the resolved config.
pub fn bench(ctx: &mut Context, frames: usize) -> Outcome {
    if frames < MIN_BENCH_FRAMES {
        return Err(usage(format!("--frames must be at least {MIN_BENCH_FRAMES}, got {frames}")));
    }
    let weights = if ctx.ckpt.is_some() {
        load_generator(ctx)?.1
    } else {
        let mut rng = rand_seed(ctx.config.train.seed);
        GeneratorWeights::init(&ctx.config.generator, &mut rng)?
    };
    ctx.print_config()?;
    let gcfg = &ctx.config.generator;
    let params = FrameParams::default();
    let samples = params.output_len(frames);
    let spec = MixSpec {
        id: "bench".into(),
        clean: CleanSource::PseudoSpeech,
        noise: NoiseSource::White,
        snr_db: 5.0,
        seed: ctx.config.train.seed,
        duration_s: samples as f64 / f64::from(SAMPLE_RATE),
    };
    let (utt, _) = data::generate(&spec)?;
    let noisy = Waveform::new(utt.noisy.samples[..samples].to_vec(), SAMPLE_RATE)?;
    let analyzed = Stft::new(params).analyze(&noisy)?;
    let (_, times) = stream_frames(gcfg, &weights, &compress(&analyzed)?.mag, frames)?;
    println!("frames: {frames}");
    println!("d_model: {}", gcfg.d_model);
    println!("params: {} (config count {})", weights.param_count(), count_params(gcfg));
    println!("mean_ms_per_frame: {:.6}", mean(&times));
    println!("median_ms_per_frame: {:.6}", median(&times));
    println!("reference_ms_per_frame: {REFERENCE_MS_PER_FRAME}");
    println!("reference_params: {REFERENCE_PARAM_COUNT}");
    Ok(())
}

fn rand_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

pub fn export_spec(ctx: &mut Context, input: &Path, clean: Option<&Path>, outdir: &Path) -> Outcome {
    let (_, weights) = load_generator(ctx)?;
    ctx.print_config()?;
    let gcfg = &ctx.config.generator;
    let stft = Stft::new(FrameParams::default());
    let noisy = stft.analyze(&wav::read(input)?)?;
    let c = compress(&noisy)?;
    let output = weights.infer(gcfg, &Tensor::new(vec![c.frames, c.bins], c.mag)?)?;
    let mut panels = vec![
        ("noisy", noisy.clone()),
        ("enhanced", enhanced_linear(&output, &noisy, gcfg.head_mode)?),
    ];
    if let Some(path) = clean {
        panels.push(("clean", stft.analyze(&wav::read(path)?)?));
    }
    fs::create_dir_all(outdir).map_err(|e| Failure::Runtime(format!("{}: {e}", outdir.display())))?;
    for (name, s) in &panels {
        export::write_csv(outdir.join(format!("{name}.csv")), s)?;
        export::write_pgm(outdir.join(format!("{name}.pgm")), s)?;
    }
    println!(
        "wrote {} panels ({} frames x {} bins) to {}",
        panels.len(),
        noisy.frames,
        noisy.bins,
        outdir.display()
    );
    Ok(())
}
