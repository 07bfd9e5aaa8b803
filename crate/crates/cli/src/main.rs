mod commands;
mod dataset;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "msvm",
    about = "Echocardiography segmentation with a windowed state-space decoder",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset with exact masks
    Synth {
        /// Number of samples to generate
        #[arg(long)]
        count: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Base seed; sample i derives from seed + i
        #[arg(long)]
        seed: u64,
        /// Mask classes: 2 (background/cavity) or 3 (adds the ring)
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Square canvas extent in pixels
        #[arg(long, default_value_t = 112)]
        size: usize,
        /// Split tag written to the manifest (train/val/test)
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a model on a dataset directory
    Train {
        /// Dataset directory (uses samples tagged train)
        #[arg(long)]
        data: PathBuf,
        /// Config file of `key = value` lines
        #[arg(long)]
        config: PathBuf,
        /// Output directory for model.ckpt and train.csv
        #[arg(long)]
        out: PathBuf,
        /// Replace windowed-scan decoder blocks with plain residual blocks
        #[arg(long)]
        no_lms: bool,
        /// Drop auxiliary heads and force their loss weight to zero
        #[arg(long)]
        no_aux: bool,
        /// Bypass multiscale attention aggregation before the main head
        #[arg(long)]
        no_msaa: bool,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset and write metrics CSV
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Segment one PGM image and write the class mask plus an overlay
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mask_out: PathBuf,
    },
    /// Run the finite-difference gradient suite over every operation
    Gradcheck {
        /// Check at f64 precision (tighter threshold) instead of f32
        #[arg(long = "f64")]
        use_f64: bool,
    },
}

fn run(cli: Cli) -> msv_mamba::error::Result<i32> {
    match cli.cmd {
        Cmd::Synth {
            count,
            out,
            seed,
            classes,
            size,
            split,
        } => {
            commands::synth(count, &out, seed, classes, size, &split)?;
            Ok(0)
        }
        Cmd::Train {
            data,
            config,
            out,
            no_lms,
            no_aux,
            no_msaa,
            resume,
        } => {
            let flags = commands::TrainFlags {
                no_lms,
                no_aux,
                no_msaa,
            };
            commands::train(&data, &config, &out, &flags, resume.as_deref())?;
            Ok(0)
        }
        Cmd::Eval { data, ckpt, csv } => {
            commands::eval(&data, &ckpt, &csv)?;
            Ok(0)
        }
        Cmd::Predict {
            image,
            ckpt,
            mask_out,
        } => {
            commands::predict(&image, &ckpt, &mask_out)?;
            Ok(0)
        }
        Cmd::Gradcheck { use_f64 } => commands::gradcheck(use_f64),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
