//! Optimization loop, validation-based checkpoint selection and evaluation.
//!
//! A checkpoint is a directory holding `params.safetensors` (every registry
//! entry, batch-norm running statistics included), `optimizer.safetensors`
//! and `meta.json` (epoch, step, validation scores, configuration).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{check_disjoint, collate, load_manifest, Batch, DatasetManifest};
use crate::decoder::{predict_binary, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{accumulate, scores, ConfusionMatrix, MetricReport};
use crate::model::HcgmNet;
use crate::nn::ParamStore;
use crate::optim::AdamW;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const META_FILE: &str = "meta.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub best_val_f1: f64,
    pub val_report: MetricReport,
    pub val_confusion: ConfusionMatrix,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub report: MetricReport,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub steps: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
}

/// Evaluation result together with what was evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub checkpoint: String,
    pub report: MetricReport,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// Confusion matrix of the network over a manifest in inference mode,
/// one per batch, in manifest order.
pub fn confusion_per_batch(
    net: &HcgmNet,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<Vec<ConfusionMatrix>> {
    let dtype = DType::F32;
    let mut out = Vec::new();
    for start in (0..manifest.len()).step_by(batch_size) {
        let end = (start + batch_size).min(manifest.len());
        let samples = (start..end)
            .map(|i| manifest.load_sample(i))
            .collect::<Result<Vec<_>>>()?;
        let batch = collate(&samples, dtype)?;
        let output = net.forward(&batch.image_a, &batch.image_b, false)?;
        let preds = predict_binary(&output.final_map, DEFAULT_THRESHOLD)?;
        let cm = preds
            .iter()
            .zip(&batch.labels)
            .map(|(p, l)| accumulate(p, l))
            .sum::<Result<ConfusionMatrix>>()?;
        out.push(cm);
    }
    Ok(out)
}

/// Micro-averaged scores over a whole split.
pub fn evaluate_manifest(
    net: &HcgmNet,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<(MetricReport, ConfusionMatrix)> {
    if manifest.is_empty() {
        return Err(Error::EmptySplit(manifest.split.clone()));
    }
    let cm: ConfusionMatrix = confusion_per_batch(net, manifest, batch_size)?.into_iter().sum();
    Ok((scores(&cm)?, cm))
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ParamStore,
    optimizer: &AdamW,
    meta: &CheckpointMeta,
) -> Result<Checkpoint> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors: std::collections::HashMap<String, candle_core::Tensor> = params.tensors().into_iter().collect();
    candle_core::safetensors::save(&tensors, dir.join(PARAMS_FILE))?;
    optimizer.save(&dir.join(OPTIMIZER_FILE))?;
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::Serde(e.to_string()))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        meta: meta.clone(),
    })
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

/// Rebuild the network described by a checkpoint and load its parameters.
/// Any missing, unexpected or reshaped entry is reported.
pub fn load_checkpoint(dir: &Path) -> Result<(HcgmNet, ParamStore, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let mut model_config = meta.config.model_config();
    // The checkpoint already carries the trunk weights.
    model_config.backbone.pretrained = false;
    let (net, store) = HcgmNet::build(&model_config, meta.config.seed, DType::F32)?;
    let path = dir.join(PARAMS_FILE);
    let tensors = candle_core::safetensors::load(&path, &Device::Cpu)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    store.load(&tensors.into_iter().collect())?;
    Ok((net, store, meta))
}

pub fn load_optimizer(dir: &Path, config: &TrainConfig) -> Result<AdamW> {
    AdamW::load(config.optimizer(), &dir.join(OPTIMIZER_FILE))
}

/// Evaluate a checkpoint on `split` of `dataset_root` (defaults to the root
/// it was trained on) with the training batch size.
pub fn evaluate(checkpoint: &Path, split: &str, dataset_root: Option<&Path>) -> Result<EvalReport> {
    let (net, _, meta) = load_checkpoint(checkpoint)?;
    let root = dataset_root
        .map(Path::to_path_buf)
        .unwrap_or_else(|| meta.config.dataset_root.clone());
    let manifest = load_manifest(&root, split)?;
    let (report, confusion) = evaluate_manifest(&net, &manifest, meta.config.batch_size)?;
    Ok(EvalReport {
        dataset: root.display().to_string(),
        split: split.to_string(),
        checkpoint: checkpoint.display().to_string(),
        report,
        confusion,
    })
}

/// One optimization step in training mode. `observe` sees the loss before
/// the finiteness check, so a diverging value is still recorded.
pub fn train_step(
    net: &HcgmNet,
    params: &ParamStore,
    optimizer: &mut AdamW,
    batch: &Batch,
    step: usize,
    mut observe: impl FnMut(&LossBreakdown) -> Result<()>,
) -> Result<LossBreakdown> {
    let output = net.forward(&batch.image_a, &batch.image_b, true)?;
    let objective = total_loss(&output.coarse, &output.final_map, &batch.target)?;
    let loss = objective.breakdown;
    observe(&loss)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            value: loss.total,
        });
    }
    let grads = objective.total.backward()?;
    optimizer.step(params, &grads)?;
    Ok(loss)
}

fn create_log(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    Ok(w)
}

fn log_line(w: &mut BufWriter<File>, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Run the full schedule. Every epoch ends with a validation pass; the
/// checkpoint with the highest validation F1 is kept in `<output>/best` and
/// the most recent one in `<output>/last`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let root = &config.dataset_root;
    if !root.is_dir() {
        return Err(Error::DatasetMissing(root.clone()));
    }
    let train_set = load_manifest(root, "train")?;
    let val_set = load_manifest(root, "val")?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    check_disjoint(&[&train_set, &val_set])?;

    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.toml"), config.to_toml_string()?).map_err(|e| Error::io(out, e))?;
    let train_log_path = out.join(TRAIN_LOG);
    let val_log_path = out.join(VAL_LOG);
    let mut train_log = create_log(&train_log_path, LossBreakdown::CSV_HEADER)?;
    let mut val_log = create_log(&val_log_path, "epoch,step,f1,precision,recall,oa,iou,tp,fp,tn,fn")?;

    let (net, params) = HcgmNet::build(&config.model_config(), config.seed, DType::F32)?;
    let mut optimizer = AdamW::new(config.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut last: Option<Checkpoint> = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let s = if config.augment {
                        train_set.load_sample_augmented(i, &mut rng)?
                    } else {
                        train_set.load_sample(i)?
                    };
                    if (s.height, s.width) != (config.tile_size, config.tile_size) {
                        return Err(Error::Sample {
                            id: s.id.clone(),
                            reason: format!(
                                "size {}×{} differs from tile_size {}",
                                s.height, s.width, config.tile_size
                            ),
                        });
                    }
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = collate(&samples, DType::F32)?;
            let loss = train_step(&net, &params, &mut optimizer, &batch, step, |loss| {
                log_line(&mut train_log, &train_log_path, &loss.csv_row(step))
            })?;
            steps.push(loss);
            step += 1;
        }

        let (report, confusion) = evaluate_manifest(&net, &val_set, config.batch_size)?;
        log_line(
            &mut val_log,
            &val_log_path,
            &format!(
                "{epoch},{step},{},{},{},{},{},{},{},{},{}",
                report.f1,
                report.precision,
                report.recall,
                report.oa,
                report.iou,
                confusion.tp,
                confusion.fp,
                confusion.tn,
                confusion.fn_
            ),
        )?;
        epochs.push(EpochRecord {
            epoch,
            step,
            report,
            confusion,
        });
        let improved = best.as_ref().is_none_or(|b| report.f1 > b.meta.best_val_f1);
        let best_f1 = if improved {
            report.f1
        } else {
            best.as_ref().map_or(report.f1, |b| b.meta.best_val_f1)
        };
        let meta = CheckpointMeta {
            epoch,
            step,
            best_val_f1: best_f1,
            val_report: report,
            val_confusion: confusion,
            config: config.clone(),
        };
        if improved {
            best = Some(save_checkpoint(&out.join("best"), &params, &optimizer, &meta)?);
        }
        last = Some(save_checkpoint(&out.join("last"), &params, &optimizer, &meta)?);
    }

    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        last: last.expect("at least one epoch"),
        steps,
        epochs,
    })
}
