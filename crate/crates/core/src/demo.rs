//! End-to-end smoke run on synthetic data:
//! synthesize → degrade → train → enhance → evaluate.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, AudioBuffer, SpectralConfig, WavFormat};
use crate::degradation::{degrade, item_seed, sample_recipe};
use crate::diffusion::{enhance, sampler_params};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvaluationReport};
use crate::synth::{self, SynthConfig};
use crate::trainer::{load_for_inference, ExperimentConfig, PairDataset, Trainer};

#[derive(Clone, Debug)]
pub struct DemoOptions {
    pub seed: u64,
    pub utterances: usize,
    pub utterance_seconds: f64,
    /// Defaults to the configured total step count.
    pub steps: Option<usize>,
    /// Skip training and enhance with this checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub use_ema: bool,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            seed: 0,
            utterances: 4,
            utterance_seconds: 0.3,
            steps: None,
            checkpoint: None,
            use_ema: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub steps: usize,
    /// Generator total per step (empty when training was skipped).
    pub generator_total: Vec<f64>,
    pub lsd_degraded: f64,
    pub lsd_enhanced: f64,
    pub checkpoint: PathBuf,
}

impl DemoSummary {
    /// Relative drop between the means of the first and last `window` steps.
    pub fn loss_drop(&self, window: usize) -> Option<f64> {
        let n = self.generator_total.len();
        if n < 2 * window || window == 0 {
            return None;
        }
        let head: f64 = self.generator_total[..window].iter().sum::<f64>() / window as f64;
        let tail: f64 = self.generator_total[n - window..].iter().sum::<f64>() / window as f64;
        Some(1.0 - tail / head)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn utt_name(i: usize) -> String {
    format!("utt{i:02}")
}

/// Clean and degraded training pairs, written under `out_dir`.
pub fn synthesize_pairs(
    cfg: &ExperimentConfig,
    opts: &DemoOptions,
    out_dir: &Path,
) -> Result<Vec<(AudioBuffer, AudioBuffer)>> {
    let sr = cfg.architecture.sample_rate;
    let hop = cfg.architecture.hop();
    let len = ((opts.utterance_seconds * sr as f64).round() as usize / hop).max(1) * hop;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let synth_cfg = SynthConfig {
        sample_rate: sr,
        ..SynthConfig::default()
    };
    let assets = synth::synthetic_assets(&mut rng, sr);
    for d in ["clean", "degraded"] {
        fs::create_dir_all(out_dir.join(d))?;
    }
    let mut manifest = BufWriter::new(File::create(out_dir.join("manifest.jsonl"))?);
    let mut pairs = Vec::new();
    for i in 0..opts.utterances {
        let clean = synth::utterance(&mut rng, &synth_cfg, len).audio;
        let recipe = sample_recipe(item_seed(opts.seed, i as u64), &cfg.degradation, &assets);
        let (degraded, mut entry) = degrade(&clean, &recipe, &assets)?;
        let name = utt_name(i);
        entry.clean_path = Some(format!("clean/{name}.wav"));
        entry.degraded_path = Some(format!("degraded/{name}.wav"));
        write_wav(out_dir.join(format!("clean/{name}.wav")), &clean, WavFormat::Float32)?;
        write_wav(out_dir.join(format!("degraded/{name}.wav")), &degraded, WavFormat::Float32)?;
        writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
        pairs.push((clean, degraded));
    }
    manifest.flush()?;
    // train on exactly what was written
    pairs
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let name = utt_name(i);
            Ok((
                read_wav(out_dir.join(format!("clean/{name}.wav")))?,
                read_wav(out_dir.join(format!("degraded/{name}.wav")))?,
            ))
        })
        .collect()
}

/// Runs every stage in `out_dir` and fails, naming the stage, if the
/// enhanced outputs are not closer to the references than the inputs.
pub fn run_pipeline_demo(cfg: &ExperimentConfig, opts: &DemoOptions, out_dir: &Path) -> Result<DemoSummary> {
    let mut cfg = cfg.clone();
    cfg.train.seed = opts.seed;
    let seg_seconds = {
        let hop = cfg.architecture.hop();
        let sr = cfg.architecture.sample_rate as f64;
        ((opts.utterance_seconds * sr).round() as usize / hop).max(1) * hop
    } as f64
        / cfg.architecture.sample_rate as f64;
    cfg.train.segment_seconds = seg_seconds;
    cfg.train.batch_size = opts.utterances;
    stage("config", cfg.validate())?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;

    let pairs = stage("degrade", synthesize_pairs(&cfg, opts, out_dir))?;

    let (steps, generator_total, checkpoint) = match &opts.checkpoint {
        Some(path) => (0, Vec::new(), path.clone()),
        None => {
            let steps = opts.steps.unwrap_or(cfg.train.total_steps);
            let (losses, path) = stage("train", train_demo(&cfg, pairs.clone(), steps, out_dir))?;
            (steps, losses, path)
        }
    };

    stage("enhance", enhance_dir(&checkpoint, opts.use_ema, &cfg, out_dir, opts.seed))?;

    let spectral = SpectralConfig::with_sizes(256, 64);
    let report = stage("evaluate", evaluate_demo(out_dir, &spectral))?;
    let baseline = stage(
        "evaluate",
        evaluate(
            &out_dir.join("clean"),
            &out_dir.join("degraded"),
            &EvalOptions {
                native: vec!["lsd".into()],
                ..EvalOptions::native_only(spectral.clone(), None)
            },
        ),
    )?;
    let lsd_enhanced = report.aggregate("lsd").map(|a| a.0).unwrap_or(f64::INFINITY);
    let lsd_degraded = baseline.aggregate("lsd").map(|a| a.0).unwrap_or(f64::NAN);
    let summary = DemoSummary {
        seed: opts.seed,
        steps,
        generator_total,
        lsd_degraded,
        lsd_enhanced,
        checkpoint,
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    if !(lsd_enhanced < lsd_degraded) {
        return Err(Error::Stage {
            stage: "evaluate",
            source: Box::new(Error::InvalidInput(format!(
                "enhanced LSD {lsd_enhanced:.3} dB is not below degraded LSD {lsd_degraded:.3} dB"
            ))),
        });
    }
    Ok(summary)
}

fn train_demo(
    cfg: &ExperimentConfig,
    pairs: Vec<(AudioBuffer, AudioBuffer)>,
    steps: usize,
    out_dir: &Path,
) -> Result<(Vec<f64>, PathBuf)> {
    let data = PairDataset::new(pairs)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = BufWriter::new(File::create(out_dir.join("train.tsv"))?);
    let records = trainer.run(&data, steps, Some(&mut log), None)?;
    log.flush()?;
    let losses = records.iter().filter_map(|r| r.get("generator_total")).collect();
    let path = trainer.save(&out_dir.join("checkpoints"))?;
    Ok((losses, path))
}

fn enhance_dir(checkpoint: &Path, use_ema: bool, cfg: &ExperimentConfig, out_dir: &Path, seed: u64) -> Result<()> {
    let (model, store, _) = load_for_inference(checkpoint, use_ema)?;
    let sampler = sampler_params(&model.schedule, cfg.sampler.steps, cfg.sampler.epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    fs::create_dir_all(out_dir.join("enhanced"))?;
    let mut names: Vec<_> = fs::read_dir(out_dir.join("degraded"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    names.sort();
    for p in names {
        let y = read_wav(&p)?;
        let x = enhance(&model, &store, &y, &sampler, &mut rng)?;
        write_wav(out_dir.join("enhanced").join(p.file_name().unwrap()), &x, WavFormat::Float32)?;
    }
    Ok(())
}

fn evaluate_demo(out_dir: &Path, spectral: &SpectralConfig) -> Result<EvaluationReport> {
    let opts = EvalOptions::native_only(spectral.clone(), Some(out_dir.join("degraded")));
    let report = evaluate(&out_dir.join("clean"), &out_dir.join("enhanced"), &opts)?;
    fs::write(out_dir.join("report.tsv"), report.to_tsv())?;
    Ok(report)
}
