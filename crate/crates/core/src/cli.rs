//! Command-line front end.

use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand};
use image::GrayImage;

use crate::config::TrainConfig;
use crate::data::{
    collate, load_binary_png, prepare_dataset, read_gray, read_rgb, save_binary_png, BitemporalSample,
    DEFAULT_TILE_SIZE,
};
use crate::decoder::{predict_binary, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::BinaryMap;
use crate::render::save_error_map;
use crate::trainer::{evaluate, load_checkpoint, train};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "HCGMNET_OUTPUT_DIR";

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "hcgmnet", version, about = "Bi-temporal remote-sensing change detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile a raw A/B/label dataset into fixed-size patches with manifests.
    Prepare {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
        tile_size: usize,
    },
    /// Train from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a prepared split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: String,
        /// Prepared dataset root; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        /// JSON report path; defaults to `<checkpoint>/eval_<split>.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict a binary change map for one image pair.
    Predict {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Render a colour-coded error map from a prediction and its label.
    Visualize {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        label: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. }
        | Error::Image { .. }
        | Error::Sample { .. }
        | Error::Layout(_)
        | Error::DatasetMissing(_)
        | Error::EmptySplit(_)
        | Error::PretrainedUnavailable(_)
        | Error::IncompatibleCheckpoint(_)
        | Error::Serde(_) => EXIT_DATA,
        Error::Tensor(_) | Error::Shape(_) | Error::NonFiniteLoss { .. } => EXIT_RUNTIME,
    }
}

/// Predict the binary change map of an arbitrary-size pair whose sides are
/// multiples of 16.
pub fn predict_pair(checkpoint: &Path, a: &Path, b: &Path, threshold: f64) -> Result<BinaryMap> {
    let (net, _, _) = load_checkpoint(checkpoint)?;
    let (img_a, img_b) = (read_rgb(a)?, read_rgb(b)?);
    let blank = GrayImage::new(img_a.width(), img_a.height());
    let id = a
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sample = BitemporalSample::from_images(id, &img_a, &img_b, &blank)?;
    let batch = collate(&[sample], DType::F32)?;
    let output = net.forward(&batch.image_a, &batch.image_b, false)?;
    let mut maps = predict_binary(&output.final_map, threshold)?;
    Ok(maps.remove(0))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { root, out, tile_size } => {
            for (split, count) in prepare_dataset(&root, &out, tile_size)? {
                println!("{split}: {count}");
            }
        }
        Command::Train { config } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
                cfg.output_dir = dir.into();
            }
            let outcome = train(&cfg)?;
            let best = &outcome.best.meta;
            println!("best epoch {} (step {}): {}", best.epoch, best.step, best.val_report);
            println!(
                "checkpoints: {} {}",
                outcome.best.dir.display(),
                outcome.last.dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            split,
            dataset_root,
            report,
        } => {
            let result = evaluate(&checkpoint, &split, dataset_root.as_deref())?;
            let path = report.unwrap_or_else(|| checkpoint.join(format!("eval_{split}.json")));
            result.write_json(&path)?;
            println!("{split}: {}", result.report);
        }
        Command::Predict {
            a,
            b,
            checkpoint,
            out,
            threshold,
        } => {
            let map = predict_pair(&checkpoint, &a, &b, threshold)?;
            save_binary_png(&map, &out)?;
        }
        Command::Visualize { pred, label, out } => {
            let (pred, label) = (load_binary_png(&pred)?, binary_label(&label)?);
            save_error_map(&pred, &label, &out)?;
        }
    }
    Ok(())
}

fn binary_label(path: &Path) -> Result<BinaryMap> {
    let img = read_gray(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMap::new(h, w, img.into_raw().into_iter().map(|v| u8::from(v != 0)).collect())
}

/// Parse `args`, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(main_with_args(["hcgmnet", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with_args(["hcgmnet", "eval", "--split", "test"]), EXIT_USAGE);
    }

    #[test]
    fn help_succeeds() {
        assert_eq!(main_with_args(["hcgmnet", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_classes() {
        assert_eq!(exit_code(&Error::EmptySplit("test".into())), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::NonFiniteLoss {
                step: 3,
                value: f64::NAN
            }),
            EXIT_RUNTIME
        );
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    }

    #[test]
    fn missing_config_file_is_data_error() {
        assert_eq!(
            main_with_args(["hcgmnet", "train", "--config", "/no/such.toml"]),
            EXIT_DATA
        );
    }
}
