use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use jrn_core::checkpoint::{load_checkpoint, save_checkpoint};
use jrn_core::datagen::{generate_dataset, NUM_CLASSES};
use jrn_core::influence::{emit_report, influence_csv, measure};
use jrn_core::io::{load_dataset, write_dataset};
use jrn_core::metrics::{csv_header, csv_row, evaluate_inputs, evaluate_network};
use jrn_core::train::train_with;
use jrn_core::{build_jrn, Error, JrnConfig, NoiseConfig, TrainConfig, Variant};
use log::info;

/// Offset between the network-initialization seed and the sample-order seed,
/// so the two never draw from the same ChaCha stream.
const SHUFFLE_SEED_OFFSET: u64 = 0x5851_F42D_4C95_7F2D;

#[derive(Parser)]
#[command(name = "jrn", version, about = "Joint depth and semantic refinement networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of corrupted predictions and ground truth.
    GenData(GenDataArgs),
    /// Train one network variant and write its checkpoint and loss trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset, alongside the raw inputs.
    Eval(EvalArgs),
    /// Measure cross-modality influence for one or more checkpoints.
    Influence(InfluenceArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 32)]
    count: usize,
    /// Image side length; must be divisible by 8.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Depth noise standard deviation, meters.
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    /// Depth blur radius, pixels.
    #[arg(long, default_value_t = 2)]
    blur: usize,
    /// Label flip rate.
    #[arg(long, default_value_t = 0.15)]
    flip: f64,
    /// Softmax temperature of the semantic input.
    #[arg(long, default_value_t = 0.5)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = PossibleValuesParser::new(Variant::ALL.map(|v| v.name())))]
    variant: String,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base learning rate.
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Multiplier applied to the base learning rate.
    #[arg(long, default_value_t = 5.0)]
    lr_scale: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InfluenceArgs {
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let noise = NoiseConfig {
        depth_noise_sigma: a.sigma,
        depth_blur_radius: a.blur,
        label_flip_rate: a.flip,
        sem_smoothing: a.temperature,
    };
    let samples = generate_dataset::<f32>(a.count, a.size, a.seed, &noise)?;
    let manifest = write_dataset(&samples, &a.out)?;
    println!("wrote {} scenes of {}x{} to {}", samples.len(), a.size, a.size, manifest.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let data = load_dataset(&a.manifest)?;
    let k = data.first().map_or(NUM_CLASSES, |s| s.num_classes());
    let mut net = build_jrn::<f32>(&JrnConfig::for_variant(variant, k, a.seed))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        lr_scale: a.lr_scale,
        momentum: a.momentum,
        seed: a.seed.wrapping_add(SHUFFLE_SEED_OFFSET),
    };
    info!("training {variant} ({} parameters) on {} samples for {} epochs", net.num_params(), data.len(), a.epochs);
    let per_epoch = data.len();
    let mut epoch_sum = 0.0;
    let trace = train_with(&mut net, &data, &cfg, |r| {
        epoch_sum += r.joint();
        if (r.iteration + 1) % per_epoch == 0 {
            info!("epoch {} mean joint loss {:.5}", r.epoch, epoch_sum / per_epoch as f64);
            epoch_sum = 0.0;
        }
    })?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let ckpt = a.out_dir.join(format!("{variant}.jrnw"));
    save_checkpoint(&net, &ckpt)?;
    let mut csv = String::from("iteration,epoch,sample,depth_loss,semantic_loss,loss\n");
    for r in &trace {
        writeln!(csv, "{},{},{},{},{},{}", r.iteration, r.epoch, r.sample, r.depth_loss, r.semantic_loss, r.joint())?;
    }
    let loss_path = a.out_dir.join(format!("{variant}_loss.csv"));
    fs::write(&loss_path, csv).with_context(|| format!("writing {}", loss_path.display()))?;
    println!("wrote {} and {}", ckpt.display(), loss_path.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let net = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.manifest)?;
    let refined = evaluate_network(&net, &data)?;
    let input = evaluate_inputs(&data)?;
    let body = format!(
        "{}\n{}\n{}\n",
        csv_header(net.num_classes()),
        csv_row("input", &input),
        csv_row(net.variant().name(), &refined)
    );
    write_or_print(a.out.as_deref(), &body)
}

fn influence(a: &InfluenceArgs) -> Result<()> {
    let data = load_dataset(&a.manifest)?;
    let mut points = Vec::with_capacity(a.checkpoints.len());
    for path in &a.checkpoints {
        let net = load_checkpoint(path)?;
        let p = measure(&net, &data).with_context(|| format!("measuring {}", path.display()))?;
        info!("{}: omega D->S' {:.4}, omega S->D' {:.4}", p.variant, p.omega_d_to_s, p.omega_s_to_d);
        points.push(p);
    }
    let files = emit_report(&points, &a.out_dir)?;
    print!("{}", influence_csv(&points));
    info!("wrote {}", files.table.display());
    Ok(())
}

fn write_or_print(path: Option<&Path>, body: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Influence(a) => influence(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
