//! `mmvt`: spectrogram extraction, training, inference, logit dumping,
//! ensemble evaluation, gradient checking and token-geometry tables.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::TrainOverrides;

#[derive(Debug, Parser)]
#[command(name = "mmvt", version, about = "Multimodal multiview video transformer toolkit")]
pub struct Cli {
    /// Worker threads; 1 keeps every run bit-reproducible.
    #[arg(long, global = true, env = "MMVT_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Log-mel spectrogram stream of a WAV file, one 96×64 image per frame.
    ExtractSpec(ExtractSpecArgs),
    /// Train a model on a clip manifest.
    Train(Box<TrainArgs>),
    /// Print per-clip predictions of a checkpoint as JSON lines.
    Infer(InferArgs),
    /// Write four-crop logits of every manifest clip as JSON lines.
    DumpLogits(DumpLogitsArgs),
    /// Score an ensemble of dumped logits against manifest labels.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter of a tiny model.
    Gradcheck(GradcheckArgs),
    /// Per-view token geometry of a model string.
    Shapes(ShapesArgs),
}

#[derive(Debug, Args)]
pub struct ExtractSpecArgs {
    /// Input PCM WAV file.
    #[arg(long)]
    pub wav: std::path::PathBuf,
    /// Number of video frames (25 fps) to cover.
    #[arg(long)]
    pub frames: usize,
    /// Output `.mmt` tensor `[frames, 96, 64]`.
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Seed of the SpecAugment masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Apply one time and one frequency mask.
    #[arg(long)]
    pub specaugment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model string, e.g. "B/2:R+S/4:S+Ti/8:F".
    #[arg(long, value_parser = config::parse_spec)]
    pub model: mmvt_core::ModelSpec,
    /// JSON list of clips.
    #[arg(long)]
    pub manifest: std::path::PathBuf,
    /// JSON training config; flags override its values.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Output directory (model.ckpt, metrics.jsonl, run_config.json).
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// JSON list of clips.
    #[arg(long)]
    pub manifest: std::path::PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpLogitsArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// JSON list of clips.
    #[arg(long)]
    pub manifest: std::path::PathBuf,
    /// Id recorded with every logit record.
    #[arg(long)]
    pub model_id: String,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `*.jsonl` logit files.
    #[arg(long)]
    pub logits: std::path::PathBuf,
    /// JSON `{verb_models, noun_models}`.
    #[arg(long)]
    pub ensemble: std::path::PathBuf,
    /// JSON list of clips supplying the labels.
    #[arg(long)]
    pub manifest: std::path::PathBuf,
    /// Output JSON report.
    #[arg(long)]
    pub report: std::path::PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed of the parameters and inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ShapesArgs {
    /// Model string, e.g. "B/2:R+S/4:S+Ti/8:F".
    #[arg(long, value_parser = config::parse_spec)]
    pub model: mmvt_core::ModelSpec,
    /// Frames per clip.
    #[arg(long)]
    pub frames: usize,
    /// Square input resolution in pixels.
    #[arg(long)]
    pub res: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", commands::error_line(&e));
            ExitCode::from(1)
        }
    }
}
