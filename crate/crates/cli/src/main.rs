//! `node-imgnet`: train, apply, evaluate and ablate the denoiser.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for usage or
//! configuration errors.

mod settings;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use node_imgnet::ablation::{run_ablation, ABLATION_HEADER};
use node_imgnet::checkpoint::{load_checkpoint, save_checkpoint};
use node_imgnet::data::{add_gaussian_noise, make_dataset, DatasetConfig, PatchSpec};
use node_imgnet::metrics::psnr;
use node_imgnet::netpbm::{is_supported, load_image, save_image};
use node_imgnet::rng::{stream, Stream};
use node_imgnet::synth::{synth_images, SynthConfig};
use node_imgnet::train::{input_psnr, AdamConfig, TrainConfig, Trainer, LOG_HEADER};
use node_imgnet::{Denoiser, Offsets, Tensor, VectorFieldConfig};

use settings::Settings;

#[derive(Parser)]
#[command(name = "node-imgnet", version, about = "Image denoising with a neural ODE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser and write a checkpoint, log and manifest.
    Train(RunArgs),
    /// Denoise image files with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Report per-image PSNR of a checkpoint on a set of images.
    Eval(EvalArgs),
    /// Train one model per solver step count and tabulate cost and PSNR.
    Ablate(AblateArgs),
}

/// Flags shared by every command that builds a dataset. Each one overrides
/// the config file.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of PGM/PPM images, or `synth` for procedural images.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed noise level on the 0-255 scale.
    #[arg(long, conflicts_with = "blind")]
    sigma: Option<f64>,
    /// Noise level range `lo:hi`, drawn per patch.
    #[arg(long)]
    blind: Option<String>,
    /// Solver steps N (0 = bare vector field).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patches_per_image: Option<usize>,
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    eval_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    synth_count: Option<usize>,
    #[arg(long)]
    synth_size: Option<usize>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use randomized solver offsets drawn from this seed.
    #[arg(long)]
    stochastic_seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clean images: a directory or `synth`.
    #[arg(long)]
    data: String,
    /// Directory of noisy images with the same file names as `--data`.
    /// Without it, noise is added to the clean images.
    #[arg(long, conflicts_with_all = ["sigma", "blind"])]
    noisy: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    blind: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    stochastic_seed: Option<u64>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    synth_count: usize,
    #[arg(long, default_value_t = 48)]
    synth_size: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated solver step counts.
    #[arg(long, default_value = "0,1,2,4")]
    sweep: String,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<node_imgnet::Error> for Failure {
    fn from(e: node_imgnet::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Denoise(args) => cmd_denoise(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(value) = std::env::var("NODE_IMGNET_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("NODE_IMGNET_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn resolve(args: &RunArgs) -> Result<Settings, Failure> {
    let mut s = Settings::default();
    if let Some(path) = &args.config {
        s.apply_file(path).map_err(Failure::Usage)?;
    }
    let mut set = |key: &str, value: Option<String>| -> Outcome {
        match value {
            Some(v) => s.set(key, &v).map_err(Failure::Usage),
            None => Ok(()),
        }
    };
    set("data", args.data.clone())?;
    set("out", args.out.as_ref().map(|p| p.display().to_string()))?;
    set("seed", args.seed.map(|v| v.to_string()))?;
    set("sigma", args.sigma.map(|v| v.to_string()))?;
    set("blind", args.blind.clone())?;
    set("steps", args.steps.map(|v| v.to_string()))?;
    set("hidden", args.hidden.map(|v| v.to_string()))?;
    set("channels", args.channels.map(|v| v.to_string()))?;
    set("patch_size", args.patch_size.map(|v| v.to_string()))?;
    set("patches_per_image", args.patches_per_image.map(|v| v.to_string()))?;
    set("augment", args.augment.then(|| "true".to_string()))?;
    set("eval_fraction", args.eval_fraction.map(|v| v.to_string()))?;
    set("epochs", args.epochs.map(|v| v.to_string()))?;
    set("batch", args.batch.map(|v| v.to_string()))?;
    set("max_steps", args.max_steps.map(|v| v.to_string()))?;
    set("lr", args.lr.map(|v| v.to_string()))?;
    set("synth_count", args.synth_count.map(|v| v.to_string()))?;
    set("synth_size", args.synth_size.map(|v| v.to_string()))?;
    s.validate().map_err(Failure::Usage)?;
    Ok(s)
}

/// Image files of a directory, sorted by name.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("data directory not found: {}", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_supported(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Named clean images from a directory or the procedural generator.
fn load_images(data: &str, channels: usize, count: usize, size: usize, seed: u64) -> Result<Vec<(String, Tensor<f32>)>, Failure> {
    if data == "synth" {
        let config = SynthConfig {
            count,
            channels,
            height: size,
            width: size,
            seed,
        };
        return Ok(synth_images(&config)?
            .into_iter()
            .enumerate()
            .map(|(i, img)| (format!("synth_{i:04}"), img))
            .collect());
    }
    let files = image_files(Path::new(data))?;
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let img: Tensor<f32> = load_image(&path)?;
        if img.shape().channels != channels {
            return Err(Failure::Runtime(anyhow::anyhow!(
                "{} has {} channels, expected {channels}",
                path.display(),
                img.shape().channels
            )));
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((name, img));
    }
    Ok(out)
}

fn prepare_out(dir: &Path, settings: &Settings) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let record = settings.resolved();
    fs::write(dir.join("resolved_config.txt"), &record).context("writing resolved config")?;
    eprint!("resolved config:\n{record}");
    Ok(())
}

fn field_config(s: &Settings) -> VectorFieldConfig {
    VectorFieldConfig::new(s.channels, s.hidden).with_seed(s.seed)
}

fn train_config(s: &Settings) -> TrainConfig {
    TrainConfig {
        batch_size: s.batch,
        max_epochs: s.epochs,
        seed: s.seed,
        max_steps: s.max_steps,
        adam: AdamConfig {
            lr: s.lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn dataset(s: &Settings) -> Result<node_imgnet::data::Dataset, Failure> {
    let images: Vec<Tensor<f32>> = load_images(&s.data, s.channels, s.synth_count, s.synth_size, s.seed)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    let config = DatasetConfig {
        patch: PatchSpec {
            patch_size: s.patch_size,
            patches_per_image: s.patches_per_image,
        },
        noise: s.noise,
        augment: s.augment,
        eval_fraction: s.eval_fraction,
        seed: s.seed,
    };
    Ok(make_dataset(&images, &config)?)
}

fn cmd_train(args: &RunArgs) -> Outcome {
    let s = resolve(args)?;
    let data = dataset(&s)?;
    prepare_out(&s.out, &s)?;
    fs::write(s.out.join("manifest.csv"), data.manifest().join("\n") + "\n").context("writing manifest")?;

    let mut model = Denoiser::build(field_config(&s), s.steps)?;
    let mut trainer = Trainer::new(train_config(&s), &model)?;
    eprintln!(
        "training: {} parameters, N = {}, {} train / {} eval patches, noisy eval PSNR {:.2} dB",
        model.param_count(),
        s.steps,
        data.train.len(),
        data.eval.len(),
        input_psnr(&data.eval)?
    );

    let log_path = s.out.join("train_log.csv");
    let ckpt_path = s.out.join("checkpoint.nimg");
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(log_file, "{LOG_HEADER}").context("writing log")?;

    // The trainer is borrowed by `run`, so checkpoints are written between
    // epochs by running one epoch at a time.
    let max_epochs = s.epochs;
    let mut stop = None;
    for epoch in 1..=max_epochs {
        trainer.config.max_epochs = epoch;
        let mut write_err = None;
        let reason = trainer.run(&mut model, &data, |r| {
            eprintln!(
                "epoch {:>3}  train {:.6}  eval {:.6}  psnr {:.3} dB  lr {:.2e}  {:.1}s",
                r.epoch, r.train_loss, r.eval_loss, r.eval_psnr, r.lr, r.seconds
            );
            if let Err(e) = writeln!(
                log_file,
                "{},{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.eval_loss, r.eval_psnr, r.lr, r.seconds
            ) {
                write_err = Some(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(anyhow::Error::from(e).context("writing log").into());
        }
        save_checkpoint(&ckpt_path, &model, &trainer.adam, &trainer.log, s.seed)?;
        if reason != node_imgnet::train::StopReason::MaxEpochs || epoch == max_epochs {
            stop = Some(reason);
            break;
        }
    }
    let stop = stop.expect("at least one epoch");
    eprintln!("stopped: {} after {} steps; wrote {}", stop.as_str(), trainer.steps(), s.out.display());
    Ok(())
}

fn offsets(seed: Option<u64>) -> Offsets {
    seed.map_or(Offsets::Zero, Offsets::Sampled)
}

fn cmd_denoise(args: &DenoiseArgs) -> Outcome {
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let files = if args.input.is_dir() {
        image_files(&args.input)?
    } else if args.input.is_file() {
        vec![args.input.clone()]
    } else {
        return Err(Failure::Usage(format!("input not found: {}", args.input.display())));
    };
    if files.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!("no PGM/PPM images in {}", args.input.display())));
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for path in files {
        let noisy: Tensor<f32> = load_image(&path)?;
        let out = ckpt
            .model
            .denoise(&noisy, offsets(args.stochastic_seed))
            .with_context(|| format!("denoising {}", path.display()))?;
        let target = args.out.join(path.file_name().expect("file has a name"));
        save_image(&out.clamp(0.0, 1.0), &target)?;
        eprintln!("{} -> {}", path.display(), target.display());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Outcome {
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let channels = ckpt.model.config().image_channels;
    let clean = load_images(&args.data, channels, args.synth_count, args.synth_size, args.seed)?;
    if clean.is_empty() {
        return Err(Failure::Runtime(node_imgnet::Error::EmptyDataset.into()));
    }
    let noise = match (&args.sigma, &args.blind) {
        (_, Some(b)) => settings::parse_blind(b).map_err(Failure::Usage)?,
        (Some(s), None) => node_imgnet::data::NoiseSpec::fixed(*s).map_err(|e| Failure::Usage(e.to_string()))?,
        (None, None) => node_imgnet::data::NoiseSpec::Fixed { sigma: 25.0 },
    };

    let mut csv = String::from("image,noisy_psnr,denoised_psnr\n");
    let (mut sum_in, mut sum_out) = (0.0, 0.0);
    for (i, (name, clean)) in clean.iter().enumerate() {
        let noisy: Tensor<f32> = match &args.noisy {
            Some(dir) => {
                let img = load_image(dir.join(name))?;
                if img.shape() != clean.shape() {
                    bail_runtime(format!("{name}: noisy and clean shapes differ"))?;
                }
                img
            }
            None => add_gaussian_noise(clean, &noise, &mut stream(args.seed, Stream::EvalNoise, i as u64)).0,
        };
        let out = ckpt
            .model
            .denoise(&noisy, offsets(args.stochastic_seed))
            .with_context(|| format!("denoising {name}"))?;
        let p_in = psnr(&noisy, clean, 1.0)?.decibels;
        let p_out = psnr(&out, clean, 1.0)?.decibels;
        sum_in += p_in;
        sum_out += p_out;
        csv.push_str(&format!("{name},{p_in:.4},{p_out:.4}\n"));
    }
    let n = clean.len() as f64;
    match &args.out {
        Some(path) => fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    eprintln!("mean over {} images: noisy {:.4} dB, denoised {:.4} dB", clean.len(), sum_in / n, sum_out / n);
    Ok(())
}

fn bail_runtime(msg: String) -> Outcome {
    let err: anyhow::Result<()> = (|| bail!(msg))();
    err.map_err(Failure::Runtime)
}

fn parse_sweep(text: &str) -> Result<Vec<usize>, Failure> {
    let sweep: Result<Vec<usize>, _> = text.split(',').map(|t| t.trim().parse()).collect();
    match sweep {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Failure::Usage(format!("sweep `{text}` must be a comma-separated list of step counts"))),
    }
}

fn cmd_ablate(args: &AblateArgs) -> Outcome {
    let sweep = parse_sweep(&args.sweep)?;
    let s = resolve(&args.run)?;
    let data = dataset(&s)?;
    prepare_out(&s.out, &s)?;
    let csv_path = s.out.join("ablation.csv");
    let mut file = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    writeln!(file, "{ABLATION_HEADER}").context("writing ablation table")?;
    println!("{ABLATION_HEADER}");
    let mut write_err = None;
    run_ablation(&field_config(&s), &train_config(&s), &data, &sweep, |row| {
        println!("{}", row.csv());
        if let Err(e) = writeln!(file, "{}", row.csv()) {
            write_err = Some(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e).context("writing ablation table").into());
    }
    Ok(())
}
