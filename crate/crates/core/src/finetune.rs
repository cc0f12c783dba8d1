//! Supervised phase-recognition fine-tuning with class-rebalanced sampling.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, TrainingState};
use crate::data::{clip_index, make_batches, plan_epoch, sample_clip, ClipParams, ClipRef, DatasetManifest, WindowMode};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MacroScores};
use crate::model::{clips_to_tokens, log_softmax_last, ModelConfig, PhaseClassifier};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::LrSchedule;
use crate::seed;

const ORDER_STREAM: u64 = 0x6674_6f72;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub rebalance: bool,
    pub seed: u64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub grad_clip: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            base_lr: 5e-4,
            final_lr: 5e-5,
            warmup_epochs: 5,
            rebalance: true,
            seed: 0,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            grad_clip: Some(5.0),
            eval_batch_size: 16,
        }
    }
}

impl FinetuneConfig {
    pub fn desk_scale() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            warmup_epochs: 1,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            final_lr: self.final_lr,
            warmup_epochs: self.warmup_epochs as f64,
            epochs: self.epochs as f64,
        }
    }

    pub fn lr_at(&self, epoch_fraction: f64) -> f64 {
        self.schedule().lr_at(epoch_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return Err(Error::Config("need 0 < final_lr <= base_lr".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} rows of logits", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Range(format!("label {bad} outside [0, {k})")));
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (b, 1), &Device::Cpu)?;
    let picked = log_softmax_last(logits)?.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Confusion matrix of `model` over non-overlapping windows of `manifest`.
/// Each window contributes one sample labeled by its last frame.
pub fn evaluate(model: &PhaseClassifier, manifest: &DatasetManifest, batch_size: usize) -> Result<ConfusionMatrix> {
    let (t, _, h, w) = model.config().input_shape;
    let params = ClipParams {
        frames: t,
        size: (h, w),
        mode: WindowMode::Evaluation,
    };
    let mut cm = ConfusionMatrix::new(model.config().n_classes);
    let batches = make_batches(Arc::new(manifest.clone()), params, batch_size, false, false, 0)?;
    for batch in batches.prefetch(2) {
        let clips = batch?;
        for (clip, pred) in clips.iter().zip(model.predict(&clips)?) {
            let truth = clip.label.ok_or_else(|| Error::Empty("evaluation clip has no label".into()))?;
            cm.accumulate(truth, pred.label)?;
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val: Option<MacroScores>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub const METRICS_LOG_HEADER: &str = "epoch,train_loss,val_precision,val_recall,val_jaccard";

/// Builds a classifier, copying the encoder from a pre-training checkpoint
/// when one is given.
pub fn classifier_from(init: Option<&Checkpoint>, model_cfg: &ModelConfig, seed: u64) -> Result<PhaseClassifier> {
    let classifier = PhaseClassifier::new(model_cfg, DType::F32, seed::derive(seed, 1))?;
    if let Some(ckpt) = init {
        let same_encoder = ckpt.model_config.embed_dim == model_cfg.embed_dim
            && ckpt.model_config.encoder_depth == model_cfg.encoder_depth
            && ckpt.model_config.token_geometry == model_cfg.token_geometry
            && ckpt.model_config.input_shape == model_cfg.input_shape;
        if !same_encoder {
            return Err(Error::Config(
                "checkpoint encoder is incompatible with the requested model".into(),
            ));
        }
        for (name, _) in classifier.params().iter().filter(|(n, _)| n.starts_with("encoder.")) {
            let host = ckpt
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
            classifier.params().assign(name, &host.to_tensor()?)?;
        }
    }
    Ok(classifier)
}

/// Loads a fine-tuned classifier.
pub fn load_classifier(ckpt: &Checkpoint) -> Result<PhaseClassifier> {
    if ckpt.kind != CheckpointKind::Finetune {
        return Err(Error::Checkpoint("not a fine-tuning checkpoint".into()));
    }
    let classifier = PhaseClassifier::new(&ckpt.model_config, DType::F32, 0)?;
    ckpt.restore_params(classifier.params())?;
    Ok(classifier)
}

/// Fine-tunes encoder and head on `train`, selecting the epoch with the best
/// validation macro Jaccard. Writes `metrics.csv`, `best.ckpt` and
/// `final.ckpt` into `out_dir`.
pub fn finetune(
    init: Option<&Checkpoint>,
    model_cfg: &ModelConfig,
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    cfg: &FinetuneConfig,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if let Some(ckpt) = init {
        if ckpt.kind != CheckpointKind::Pretrain {
            return Err(Error::Checkpoint("fine-tuning starts from a pre-training checkpoint".into()));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = classifier_from(init, model_cfg, cfg.seed)?;
    let (t, _, h, w) = model_cfg.input_shape;
    let clip_params = ClipParams {
        frames: t,
        size: (h, w),
        mode: WindowMode::Training,
    };
    let index = clip_index(train, t, WindowMode::Training);
    if index.is_empty() {
        return Err(Error::Config("training split yields no clips".into()));
    }
    if let Some(&bad) = index.iter().map(|c| &c.label).find(|&&l| l >= model_cfg.n_classes) {
        return Err(Error::Range(format!(
            "label {bad} outside the model's {} classes",
            model_cfg.n_classes
        )));
    }
    if cfg.rebalance {
        let present: BTreeSet<usize> = index.iter().map(|c| c.label).collect();
        let absent: Vec<usize> = (0..model_cfg.n_classes).filter(|c| !present.contains(c)).collect();
        if !absent.is_empty() {
            log::warn!("classes {absent:?} have no training clips and are excluded from resampling");
        }
    }

    let mut optimizer = AdamW::new(AdamWConfig {
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    });
    let steps_per_epoch = index.len().div_ceil(cfg.batch_size);
    let metrics_path = out_dir.join("metrics.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );
    writeln!(log, "{METRICS_LOG_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let capture = |step: u64, epoch: u64, opt: Option<&AdamW>| {
        Checkpoint::capture(
            CheckpointKind::Finetune,
            model_cfg,
            serde_json::to_value(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
            TrainingState { epoch, step, seed: cfg.seed },
            model.params(),
            opt,
        )
    };

    let mut history = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let best_path = out_dir.join("best.ckpt");
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order_seed = seed::derive_path(cfg.seed, &[ORDER_STREAM, epoch as u64]);
        let plan = plan_epoch(&index, cfg.batch_size, true, cfg.rebalance, order_seed)?;
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        for (b, refs) in plan.batches.iter().enumerate() {
            let clips = refs
                .iter()
                .map(|r: &ClipRef| sample_clip(train, &r.video_id, r.start_frame, clip_params.frames, clip_params.size))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = refs.iter().map(|r| r.label).collect();
            let tokens = clips_to_tokens(&clips, model_cfg, DType::F32)?;
            let logits = model.logits(&tokens)?;
            let loss = cross_entropy(&logits, &labels)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss {value} at epoch {epoch} batch {b}")));
            }
            let preds: Vec<u32> = logits.argmax(1)?.to_vec1()?;
            correct += preds.iter().zip(&labels).filter(|(p, l)| **p as usize == **l).count();
            let lr = cfg.lr_at(epoch as f64 + b as f64 / steps_per_epoch as f64);
            let grads = loss.backward()?;
            optimizer.update(model.params(), &grads, lr, cfg.grad_clip)?;
            step += 1;
            loss_sum += value * labels.len() as f64;
            seen += labels.len();
        }
        let val_scores = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&model, v, cfg.eval_batch_size)?.macro_scores()?),
            _ => None,
        };
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val: val_scores,
        };
        let (p, r, j) = metrics
            .val
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |s| (s.precision, s.recall, s.jaccard));
        writeln!(log, "{},{},{},{},{}", metrics.epoch, metrics.train_loss, p, r, j)
            .map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "epoch {} loss {:.4} train acc {:.3} val jaccard {:.3}",
            metrics.epoch,
            metrics.train_loss,
            metrics.train_accuracy,
            j
        );
        if let Some(s) = &metrics.val {
            if best.map_or(true, |(_, bj)| s.jaccard > bj) {
                best = Some((metrics.epoch, s.jaccard));
                capture(step, metrics.epoch as u64, None)?.save(&best_path)?;
            }
        }
        history.push(metrics);
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = out_dir.join("final.ckpt");
    capture(step, cfg.epochs as u64, Some(&optimizer))?.save(&final_checkpoint)?;
    Ok(FinetuneOutcome {
        history,
        best_epoch: best.map(|(e, _)| e),
        best_checkpoint: best.map(|_| best_path),
        final_checkpoint,
    })
}
