//! `icm` — one entry point for every workflow: dataset generation,
//! recognizer pretraining, codec training, evaluation, real encode/decode,
//! RD sweeps, BD-rate tables, bit-allocation maps and the branch-position
//! ablation.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use icm_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "icm", version, about = "Task-driven learned image compression workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set loss.alpha=0.5 (also spelled
    /// --loss.alpha 0.5).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory name under out_dir; derived from the subcommand and
    /// config digest when omitted.
    #[arg(long)]
    run_name: Option<String>,
    /// Allow writing into an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Export synthetic samples (PNG image, PGM mask, presence flags).
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of samples to export.
        #[arg(long, default_value_t = 16)]
        count: u64,
    },
    /// Train the frozen recognition model and save its checkpoint.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a codec under the configured loss variant.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Recognizer checkpoint (required for every variant but rd_image).
        #[arg(long)]
        recognizer: Option<PathBuf>,
    },
    /// Evaluate a codec checkpoint: bpp (estimated and real) and task quality.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        recognizer: PathBuf,
    },
    /// Compress one PNG into a bitstream.
    Encode {
        /// Input image; dimensions must be multiples of 8.
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Decompress a bitstream back into a PNG.
    Decode {
        bitstream: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train and evaluate across a lambda grid for several loss variants;
    /// emit RD curves and the BD-rate matrix.
    RdSweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated lambda grid; task-specific default when omitted.
        #[arg(long)]
        lambdas: Option<String>,
        /// Comma-separated loss variants (default: task,task_aux).
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        recognizer: PathBuf,
    },
    /// Recompute a BD-rate matrix from an rd_points.csv.
    BdRate {
        /// Points file produced by rd-sweep.
        #[arg(long)]
        points: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render the bit-allocation map of an image under a checkpoint,
    /// optionally with a signed difference map against a second checkpoint.
    Bitmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Second checkpoint for a w/-vs-w/o style difference map.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Output path prefix; writes <prefix>_map.pgm and <prefix>_diff.pgm.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compare auxiliary-branch insertion positions (and no branch) across
    /// seeds at one lambda.
    AblatePositions {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated training seeds (default: 1,2,3).
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        recognizer: PathBuf,
    },
}

/// Rewrite `--section.key value` / `--section.key=value` sugar into
/// `--set section.key=value` before clap sees the args.
fn preprocess_args(args: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut i = 0;
    let looks_dotted = |s: &str| {
        s.strip_prefix("--").is_some_and(|body| {
            let key = body.split('=').next().unwrap_or("");
            key.contains('.')
                && key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
        })
    };
    while i < args.len() {
        let a = &args[i];
        if looks_dotted(a) {
            let body = &a[2..];
            if body.contains('=') {
                out.push("--set".into());
                out.push(body.to_string());
            } else if i + 1 < args.len() {
                out.push("--set".into());
                out.push(format!("{body}={}", args[i + 1]));
                i += 1;
            } else {
                out.push(a.clone());
            }
        } else {
            out.push(a.clone());
        }
        i += 1;
    }
    out
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument { .. }
        | Error::ShapeMismatch { .. }
        | Error::Domain { .. }
        | Error::LabelOutOfRange { .. }
        | Error::PaddingRequired { .. }
        | Error::NoQualityOverlap => 2,
        Error::Checkpoint(_)
        | Error::ModelMismatch { .. }
        | Error::CorruptStream(_)
        | Error::OutOfSupport { .. } => 3,
        Error::NonFinite { .. } | Error::AuditFailed { .. } | Error::PretrainGate { .. } => 4,
        Error::Io(_) | Error::Png(_) => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::InvalidArgument { .. } => "invalid_argument",
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::Domain { .. } => "domain",
        Error::LabelOutOfRange { .. } => "label_out_of_range",
        Error::PaddingRequired { .. } => "padding_required",
        Error::NoQualityOverlap => "no_quality_overlap",
        Error::Checkpoint(_) => "checkpoint",
        Error::ModelMismatch { .. } => "model_mismatch",
        Error::CorruptStream(_) => "corrupt_stream",
        Error::OutOfSupport { .. } => "out_of_support",
        Error::NonFinite { .. } => "non_finite",
        Error::AuditFailed { .. } => "audit_failed",
        Error::PretrainGate { .. } => "pretrain_gate",
        Error::Io(_) => "io",
        Error::Png(_) => "png",
    }
}

fn main() -> ExitCode {
    let args = preprocess_args(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let result = match cli.cmd {
        Cmd::GenData { common, count } => commands::gen_data(&common, count),
        Cmd::Pretrain { common } => commands::pretrain(&common),
        Cmd::Train { common, recognizer } => commands::train(&common, recognizer.as_deref()),
        Cmd::Eval {
            common,
            checkpoint,
            recognizer,
        } => commands::eval(&common, &checkpoint, &recognizer),
        Cmd::Encode {
            image,
            checkpoint,
            output,
        } => commands::encode(&image, &checkpoint, &output),
        Cmd::Decode {
            bitstream,
            checkpoint,
            output,
        } => commands::decode(&bitstream, &checkpoint, &output),
        Cmd::RdSweep {
            common,
            lambdas,
            variants,
            recognizer,
        } => commands::rd_sweep(&common, lambdas.as_deref(), variants.as_deref(), &recognizer),
        Cmd::BdRate { points, output } => commands::bd_rate_cmd(&points, &output),
        Cmd::Bitmap {
            checkpoint,
            image,
            compare,
            output,
        } => commands::bitmap(&checkpoint, &image, compare.as_deref(), &output),
        Cmd::AblatePositions {
            common,
            seeds,
            recognizer,
        } => commands::ablate_positions(&common, seeds.as_deref(), &recognizer),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code_for(&e);
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": {
                        "code": code,
                        "kind": error_kind(&e),
                        "message": e.to_string(),
                    }
                })
            );
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_flags_become_set_args() {
        let args = vec![
            "icm".to_string(),
            "train".into(),
            "--loss.variant".into(),
            "TaskAux".into(),
            "--loss.alpha=0.5".into(),
            "--run-name".into(),
            "x".into(),
        ];
        let got = preprocess_args(args);
        assert_eq!(
            got,
            vec![
                "icm",
                "train",
                "--set",
                "loss.variant=TaskAux",
                "--set",
                "loss.alpha=0.5",
                "--run-name",
                "x"
            ]
        );
    }
}
