use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resound_core::audio::{read_wav, write_wav, SpectralConfig, WavFormat};
use resound_core::degradation::{degrade, item_seed, sample_recipe, to_rate, AssetStore};
use resound_core::demo::{run_pipeline_demo, DemoOptions};
use resound_core::diffusion::{enhance, sampler_params};
use resound_core::eval::{evaluate, EvalOptions, MetricAdapter, NATIVE_METRICS};
use resound_core::lora::{load_adapters, train_synthetic_predictor, FinetuneSession, PhonemePredictor};
use resound_core::synth;
use resound_core::trainer::{load_for_inference, save_model, ExperimentConfig, PairDataset, Trainer};
use resound_core::{Error, Result};

#[derive(Parser)]
#[command(name = "resound", version, about = "Universal speech restoration with score-based diffusion")]
struct Cli {
    /// Preset name (`desk`, `paper`) or path to a TOML configuration.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Every file the command writes goes under this directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate degradations of clean recordings.
    Degrade(DegradeArgs),
    /// Main-stage training from a degradation manifest.
    Train(TrainArgs),
    /// Low-rank adaptation with the phoneme-fidelity loss.
    Finetune(FinetuneArgs),
    /// Restore degraded recordings with a trained model.
    Enhance(EnhanceArgs),
    /// Score estimates against references.
    Evaluate(EvaluateArgs),
    /// Synthetic end-to-end run: degrade, train, enhance, evaluate.
    Demo(DemoArgs),
}

#[derive(Args)]
struct DegradeArgs {
    /// Directory of clean `.wav` files.
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    noise_dir: Option<PathBuf>,
    #[arg(long)]
    music_dir: Option<PathBuf>,
    #[arg(long)]
    rir_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Degradation manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the configured total.
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Training checkpoint of the base model.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 16)]
    rank: usize,
    /// Defaults to the configured fine-tuning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 4.0)]
    segment_seconds: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Start from the moving-average weights.
    #[arg(long)]
    ema: bool,
    /// Saved phoneme predictor; one is trained on synthetic speech otherwise.
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    predictor_steps: usize,
    /// Also write a checkpoint with the adapters folded in.
    #[arg(long)]
    merge: bool,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of degraded `.wav` files.
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    ema: bool,
    /// Adapter file written by `finetune`.
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Defaults to the configured sampler step count.
    #[arg(long)]
    sampler_steps: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    reference_dir: PathBuf,
    #[arg(long)]
    estimate_dir: PathBuf,
    /// Degraded inputs, enabling `snr_gain`.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Native metric; repeatable. Defaults to all native metrics.
    #[arg(long = "metric")]
    metrics: Vec<String>,
    /// `name=command` with `{ref}` and `{est}` placeholders; repeatable.
    #[arg(long = "adapter")]
    adapters: Vec<String>,
    #[arg(long, default_value_t = 512)]
    fft_size: usize,
    #[arg(long, default_value_t = 128)]
    hop_length: usize,
}

#[derive(Args)]
struct DemoArgs {
    /// Defaults to the configured total.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 4)]
    utterances: usize,
    #[arg(long, default_value_t = 0.3)]
    utterance_seconds: f64,
    /// Enhance and evaluate with `--checkpoint` only.
    #[arg(long, requires = "checkpoint")]
    skip_train: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    ema: bool,
}

enum Outcome {
    Done,
    Partial(usize),
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match cli.config.as_deref() {
        None => ExperimentConfig::desk(),
        Some(name @ ("desk" | "paper")) => ExperimentConfig::preset(name)?,
        Some(path) => ExperimentConfig::load(Path::new(path))?,
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

fn file_name(p: &Path) -> &std::ffi::OsStr {
    p.file_name().expect("listed files have names")
}

fn run_degrade(cli: &Cli, args: &DegradeArgs) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let sr = cfg.degradation.sample_rate;
    let seed = cfg.train.seed;
    let assets = if args.noise_dir.is_none() && args.music_dir.is_none() && args.rir_dir.is_none() {
        log::warn!("no asset directories given; using synthetic noise and room responses");
        synth::synthetic_assets(&mut ChaCha8Rng::seed_from_u64(seed), sr)
    } else {
        AssetStore::load_dirs(args.noise_dir.as_deref(), args.music_dir.as_deref(), args.rir_dir.as_deref(), sr)?
    };
    let out = &cli.out_dir;
    fs::create_dir_all(out.join("clean"))?;
    fs::create_dir_all(out.join("degraded"))?;
    let mut manifest = BufWriter::new(File::create(out.join("manifest.jsonl"))?);
    let mut skipped = 0;
    for (i, path) in wav_files(&args.input_dir)?.iter().enumerate() {
        let name = file_name(path).to_string_lossy().into_owned();
        let result = read_wav(path).and_then(|clean| {
            let clean = to_rate(clean, sr);
            let recipe = sample_recipe(item_seed(seed, i as u64), &cfg.degradation, &assets);
            let (degraded, mut entry) = degrade(&clean, &recipe, &assets)?;
            write_wav(out.join("clean").join(&name), &clean, WavFormat::Float32)?;
            write_wav(out.join("degraded").join(&name), &degraded, WavFormat::Float32)?;
            entry.clean_path = Some(format!("clean/{name}"));
            entry.degraded_path = Some(format!("degraded/{name}"));
            Ok(entry)
        });
        match result {
            Ok(entry) => writeln!(manifest, "{}", serde_json::to_string(&entry)?)?,
            Err(e) => {
                log::error!("{name}: {e}");
                skipped += 1;
            }
        }
    }
    manifest.flush()?;
    Ok(if skipped > 0 { Outcome::Partial(skipped) } else { Outcome::Done })
}

fn run_train(cli: &Cli, args: &TrainArgs) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let data = PairDataset::from_manifest(&args.manifest, cfg.architecture.sample_rate)?;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::load(path, Some(&cfg))?,
        None => Trainer::new(cfg.clone())?,
    };
    let steps = args.steps.unwrap_or_else(|| cfg.train.total_steps.saturating_sub(trainer.step));
    let ckpt_dir = cli.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut log = BufWriter::new(File::create(cli.out_dir.join("train.tsv"))?);
    trainer.run(&data, steps, Some(&mut log), Some(&ckpt_dir))?;
    log.flush()?;
    let path = trainer.save(&ckpt_dir)?;
    println!("{}", path.display());
    Ok(Outcome::Done)
}

fn run_finetune(cli: &Cli, args: &FinetuneArgs) -> Result<Outcome> {
    let mut trainer = Trainer::load(&args.checkpoint, None)?;
    if cli.config.is_some() {
        let cfg = load_config(cli)?;
        trainer.config.lora = cfg.lora;
        trainer.config.finetune = cfg.finetune;
        trainer.config.predictor = cfg.predictor;
    }
    trainer.config.lora.rank = args.rank;
    if let Some(lr) = args.lr {
        trainer.config.finetune.lr = lr;
    }
    trainer.config.lora.validate()?;
    let seed = cli.seed.unwrap_or(trainer.config.train.seed);
    let sr = trainer.config.architecture.sample_rate;
    if trainer.config.predictor.sample_rate != sr {
        return Err(Error::Config(format!(
            "predictor runs at {} Hz, model at {sr} Hz",
            trainer.config.predictor.sample_rate
        )));
    }
    fs::create_dir_all(&cli.out_dir)?;
    let predictor: PhonemePredictor = match &args.predictor {
        Some(path) => bincode::deserialize_from(std::io::BufReader::new(File::open(path)?))?,
        None => {
            let (p, _) = train_synthetic_predictor(&trainer.config.predictor, 64, sr as usize, args.predictor_steps, seed)?;
            bincode::serialize_into(BufWriter::new(File::create(cli.out_dir.join("predictor.bin"))?), &p)?;
            p
        }
    };
    let data = PairDataset::from_manifest(&args.manifest, sr)?;
    let hop = trainer.config.architecture.hop();
    let segment = (((args.segment_seconds * sr as f64).round() as usize) / hop).max(1) * hop;
    let mut session = FinetuneSession::from_trainer(&trainer, predictor, args.ema, seed)?;
    log::info!(
        "{} adapted layers, {} trainable parameters",
        session.report.adapted.len(),
        session.report.trainable
    );
    let mut log = BufWriter::new(File::create(cli.out_dir.join("finetune.tsv"))?);
    let history = session.run(&data, args.steps, args.batch, segment, Some(&mut log))?;
    log.flush()?;
    session.save_adapters(&cli.out_dir.join("adapters.bin"))?;
    let skipped = history.iter().filter(|l| l.skipped).count();
    if args.merge {
        let base_step = session.base_step;
        let (model, store, config) = session.merged()?;
        save_model(&cli.out_dir.join("merged.ckpt"), &model, &store, &config, base_step)?;
    }
    Ok(if skipped > 0 { Outcome::Partial(skipped) } else { Outcome::Done })
}

fn run_enhance(cli: &Cli, args: &EnhanceArgs) -> Result<Outcome> {
    let (mut model, mut store, manifest) = load_for_inference(&args.checkpoint, args.ema)?;
    if let Some(path) = &args.adapters {
        load_adapters(&mut model, &mut store, path)?;
    }
    let cfg = if cli.config.is_some() { load_config(cli)? } else { manifest.config };
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    let steps = args.sampler_steps.unwrap_or(cfg.sampler.steps);
    let sampler = sampler_params(&model.schedule, steps, cfg.sampler.epsilon)?;
    let out = cli.out_dir.join("enhanced");
    fs::create_dir_all(&out)?;
    let mut skipped = 0;
    for (i, path) in wav_files(&args.input_dir)?.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, i as u64));
        let result = read_wav(path).and_then(|y| {
            let y = to_rate(y, model.config.sample_rate);
            let x = enhance(&model, &store, &y, &sampler, &mut rng)?;
            write_wav(out.join(file_name(path)), &x, WavFormat::Float32)
        });
        if let Err(e) = result {
            log::error!("{}: {e}", path.display());
            skipped += 1;
        }
    }
    Ok(if skipped > 0 { Outcome::Partial(skipped) } else { Outcome::Done })
}

fn parse_adapter(spec: &str) -> Result<MetricAdapter> {
    let (name, command) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("adapter {spec:?} is not name=command")))?;
    let command: Vec<String> = command.split_whitespace().map(str::to_string).collect();
    if name.is_empty() || command.is_empty() {
        return Err(Error::Config(format!("adapter {spec:?} is not name=command")));
    }
    Ok(MetricAdapter::new(name, command))
}

fn run_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<Outcome> {
    let native = if args.metrics.is_empty() {
        NATIVE_METRICS.iter().map(|s| s.to_string()).collect()
    } else {
        args.metrics.clone()
    };
    let opts = EvalOptions {
        native,
        adapters: args.adapters.iter().map(|s| parse_adapter(s)).collect::<Result<_>>()?,
        input_dir: args.input_dir.clone(),
        spectral: SpectralConfig::with_sizes(args.fft_size, args.hop_length),
    };
    let report = evaluate(&args.reference_dir, &args.estimate_dir, &opts)?;
    fs::create_dir_all(&cli.out_dir)?;
    let tsv = report.to_tsv();
    fs::write(cli.out_dir.join("report.tsv"), &tsv)?;
    print!("{tsv}");
    for stem in &report.skipped {
        log::warn!("{stem}: no counterpart, skipped");
    }
    let problems = report.skipped.len() + report.rows.iter().filter(|r| !r.errors.is_empty()).count();
    Ok(if problems > 0 { Outcome::Partial(problems) } else { Outcome::Done })
}

fn run_demo(cli: &Cli, args: &DemoArgs) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let opts = DemoOptions {
        seed: cfg.train.seed,
        utterances: args.utterances,
        utterance_seconds: args.utterance_seconds,
        steps: args.steps,
        checkpoint: if args.skip_train { args.checkpoint.clone() } else { None },
        use_ema: args.ema,
    };
    let summary = run_pipeline_demo(&cfg, &opts, &cli.out_dir)?;
    println!(
        "lsd degraded {:.3} dB, enhanced {:.3} dB",
        summary.lsd_degraded, summary.lsd_enhanced
    );
    if let Some(drop) = summary.loss_drop(50) {
        println!("generator loss drop {:.1}%", 100.0 * drop);
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are failures; 2 is reserved for partial results
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Degrade(a) => run_degrade(&cli, a),
        Command::Train(a) => run_train(&cli, a),
        Command::Finetune(a) => run_finetune(&cli, a),
        Command::Enhance(a) => run_enhance(&cli, a),
        Command::Evaluate(a) => run_evaluate(&cli, a),
        Command::Demo(a) => run_demo(&cli, a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(n)) => {
            eprintln!("completed with {n} skipped item(s)");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
