//! `freetalk`: synthesize data, train the two stages, animate meshes from
//! audio, evaluate predictions, and convert sequence formats.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use freetalk_core::config::{load_config, write_resolved, AtsTrainConfig, StmTrainConfig};
use freetalk_core::data::synth::{synth_data, SyntheticDatasetSpec};
use freetalk_core::pipeline::{
    animate, evaluate, export_sequence, load_prediction, AnimateRequest, EvaluateRequest,
    ExportFormat,
};
use freetalk_core::train::ats_train::train_ats;
use freetalk_core::train::stm_train::train_stm;
use freetalk_core::CoreError;

#[derive(Parser)]
#[command(name = "freetalk", version, about = "Emotion-conditioned speech-to-3D-face animation on arbitrary meshes")]
struct Cli {
    /// JSON config file (schema depends on the subcommand).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Bounded worker pool for parallelizable phases.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (ellipsoid faces, sweep audio, dense frames).
    SynthData,
    /// Train the audio-to-landmark diffusion stage.
    AtsTrain,
    /// Train the landmark-to-mesh densifier stage.
    StmTrain,
    /// Animate a mesh from audio and an affect label.
    Animate(AnimateArgs),
    /// Compute the metric suite for predictions against a dataset.
    Evaluate(EvaluateArgs),
    /// Convert a packed sequence to per-frame meshes (or repack it).
    Export(ExportArgs),
}

#[derive(Args)]
struct AnimateArgs {
    #[arg(long)]
    audio: PathBuf,
    #[arg(long, default_value = "neutral")]
    emotion: String,
    #[arg(long, default_value_t = 1)]
    intensity: u32,
    #[arg(long)]
    mesh: PathBuf,
    /// Landmark spec JSON sidecar for the mesh family.
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    ats: PathBuf,
    #[arg(long)]
    stm: PathBuf,
    /// obj | ply | packed
    #[arg(long, default_value = "obj")]
    format: String,
    /// Animation frame rate (default: the checkpoint's training rate).
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long, default_value_t = 100)]
    ddim_steps: usize,
    /// Also write per-frame cross-attention matrices.
    #[arg(long)]
    dump_attention: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset root (ground truth bundles).
    #[arg(long)]
    dataset: PathBuf,
    /// Predictions root: <pred>/<sequence-id>/ per sequence, or a single
    /// prediction when exactly one --seq is given.
    #[arg(long)]
    pred: PathBuf,
    /// Sequence ids (repeatable); default: all dense test-split sequences.
    #[arg(long = "seq")]
    sequences: Vec<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// Input packed sequence (.ftk) or a directory of frame meshes.
    #[arg(long)]
    input: PathBuf,
    /// obj | ply | packed
    #[arg(long, default_value = "obj")]
    format: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                CoreError::Config(_) => 2,
                CoreError::Parse { .. } | CoreError::Validation(_) | CoreError::Io { .. } => 3,
                CoreError::Numerical(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match &cli.command {
        Command::SynthData => {
            let mut spec: SyntheticDatasetSpec = match &cli.config {
                Some(path) => SyntheticDatasetSpec::load(path)?,
                None => SyntheticDatasetSpec::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let out = cli
                .out
                .clone()
                .ok_or_else(|| CoreError::Config("synth-data needs --out".into()))?;
            let manifest = synth_data(&spec, &out)?;
            write_resolved(&out, &spec)?;
            println!(
                "dataset {:?}: {} identities, {} sequences -> {}",
                manifest.dataset_id,
                manifest.identities.len(),
                manifest.sequences.len(),
                out.display()
            );
            Ok(())
        }
        Command::AtsTrain => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| CoreError::Config("ats-train needs --config".into()))?;
            let mut config: AtsTrainConfig = load_config(path)?;
            apply_overrides(&mut config.seed, &mut config.out_dir, &mut config.workers, &cli);
            let outcome = train_ats(&config)?;
            println!(
                "trained {} epochs ({} steps); best val loss {:.6e}; checkpoint {}",
                outcome.epochs_run,
                outcome.steps_run,
                outcome.best_val_loss,
                outcome.checkpoint.display()
            );
            Ok(())
        }
        Command::StmTrain => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| CoreError::Config("stm-train needs --config".into()))?;
            let mut config: StmTrainConfig = load_config(path)?;
            apply_overrides(&mut config.seed, &mut config.out_dir, &mut config.workers, &cli);
            let outcome = train_stm(&config)?;
            println!(
                "trained {} epochs ({} steps); best val loss {:.6e}; checkpoint {}",
                outcome.epochs_run,
                outcome.steps_run,
                outcome.best_val_loss,
                outcome.checkpoint.display()
            );
            Ok(())
        }
        Command::Animate(args) => {
            let out_dir = cli
                .out
                .clone()
                .ok_or_else(|| CoreError::Config("animate needs --out".into()))?;
            let request = AnimateRequest {
                audio: args.audio.clone(),
                emotion: args.emotion.clone(),
                intensity: args.intensity,
                mesh: args.mesh.clone(),
                landmarks: args.landmarks.clone(),
                ats_checkpoint: args.ats.clone(),
                stm_checkpoint: args.stm.clone(),
                out_dir,
                format: args.format.parse::<ExportFormat>()?,
                seed: cli.seed.unwrap_or(0),
                fps: args.fps,
                ddim_steps: args.ddim_steps,
                dump_attention: args.dump_attention,
            };
            let summary = animate(&request)?;
            println!(
                "animated {} frames -> {}",
                summary.n_frames,
                summary.out_dir.display()
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let out_dir = cli
                .out
                .clone()
                .ok_or_else(|| CoreError::Config("evaluate needs --out".into()))?;
            let request = EvaluateRequest {
                dataset: args.dataset.clone(),
                predictions: args.pred.clone(),
                sequences: args.sequences.clone(),
                out_dir: out_dir.clone(),
                workers: cli.workers.unwrap_or(1),
            };
            let reports = evaluate(&request)?;
            println!("evaluated {} sequence(s) -> {}", reports.len(), out_dir.display());
            Ok(())
        }
        Command::Export(args) => {
            let out_dir = cli
                .out
                .clone()
                .ok_or_else(|| CoreError::Config("export needs --out".into()))?;
            let format = args.format.parse::<ExportFormat>()?;
            let seq = load_prediction(&args.input)?;
            let written = export_sequence(&out_dir, &seq.faces, &seq.frames, format)?;
            println!("wrote {} file(s) -> {}", written.len(), out_dir.display());
            Ok(())
        }
    }
}

fn apply_overrides(seed: &mut u64, out_dir: &mut String, workers: &mut usize, cli: &Cli) {
    if let Some(s) = cli.seed {
        *seed = s;
    }
    if let Some(o) = &cli.out {
        *out_dir = o.to_string_lossy().to_string();
    }
    if let Some(w) = cli.workers {
        *workers = w;
    }
}
