//! Masked-reconstruction pre-training.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, TrainingState};
use crate::data::{clip_index, plan_epoch, sample_clip, ClipParams, ClipRef, DatasetManifest, EpochPlan, VideoClip, WindowMode};
use crate::error::{Error, Result};
use crate::gaze::{accumulate_per_token, default_sigma, render_heatmap};
use crate::masking::{plan_for, MaskPlan, MaskStrategy};
use crate::model::{clips_to_tokens, reconstruction_loss, MaskedAutoencoder, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::LrSchedule;
use crate::seed;

const ORDER_STREAM: u64 = 0x6f72_6465;
const MASK_STREAM: u64 = 0x6d61_736b;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub rho: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub strategy: MaskStrategy,
    pub seed: u64,
    /// Gaze Gaussian width in pixels; defaults to one 16 px token at 224 px, scaled.
    pub sigma: Option<f64>,
    pub grad_clip: Option<f64>,
    /// Stops early after this many optimizer steps; the schedule still spans `epochs`.
    pub max_steps: Option<u64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            rho: 0.9,
            tau: 0.5,
            epochs: 800,
            batch_size: 256,
            base_lr: 1e-3,
            final_lr: 1e-4,
            warmup_epochs: 20,
            weight_decay: 1e-4,
            betas: (0.9, 0.95),
            strategy: MaskStrategy::Gaze,
            seed: 0,
            sigma: None,
            grad_clip: Some(5.0),
            max_steps: None,
        }
    }
}

impl PretrainConfig {
    /// Same recipe with CPU-sized batch and run length.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            warmup_epochs: 2,
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
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return fail(format!(
                "need 0 < final_lr ({}) <= base_lr ({})",
                self.final_lr, self.base_lr
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail(format!("rho must be in (0, 1], got {}", self.rho));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub mse: f64,
    pub lr: f64,
    pub masked_token_count: usize,
}

/// Masks for a batch of clips. Clip `i` of step `step` draws from the stream
/// `(seed, step, i)`.
pub fn plan_masks(
    clips: &[VideoClip],
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    step: u64,
) -> Result<Vec<MaskPlan>> {
    let (_, _, h, w) = model_cfg.input_shape;
    let sigma = cfg.sigma.unwrap_or_else(|| default_sigma(w));
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let heatmap = render_heatmap(&clip.gaze_points, h, w, sigma)?;
            let mass = accumulate_per_token(&heatmap, model_cfg.token_geometry)?;
            let s = seed::derive_path(cfg.seed, &[MASK_STREAM, step, i as u64]);
            plan_for(cfg.strategy, &mass, cfg.rho, cfg.tau, s)
        })
        .collect()
}

fn load_clips(manifest: &DatasetManifest, params: &ClipParams, refs: &[ClipRef]) -> Result<Vec<VideoClip>> {
    refs.iter()
        .map(|r| sample_clip(manifest, &r.video_id, r.start_frame, params.frames, params.size))
        .collect()
}

/// Owns the model, optimizer and data cursor of one pre-training run.
pub struct Pretrainer {
    cfg: PretrainConfig,
    model: MaskedAutoencoder,
    optimizer: AdamW,
    manifest: Arc<DatasetManifest>,
    clip_params: ClipParams,
    index: Vec<ClipRef>,
    steps_per_epoch: u64,
    step: u64,
    epoch_plan: Option<(u64, EpochPlan)>,
}

impl Pretrainer {
    pub fn new(manifest: Arc<DatasetManifest>, cfg: PretrainConfig, model_cfg: &ModelConfig) -> Result<Self> {
        Self::with_dtype(manifest, cfg, model_cfg, DType::F32)
    }

    pub fn with_dtype(
        manifest: Arc<DatasetManifest>,
        cfg: PretrainConfig,
        model_cfg: &ModelConfig,
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate()?;
        if manifest.is_empty() {
            return Err(Error::Config("pre-training split contains no videos".into()));
        }
        let (t, _, h, w) = model_cfg.input_shape;
        let clip_params = ClipParams {
            frames: t,
            size: (h, w),
            mode: WindowMode::Training,
        };
        let index = clip_index(&manifest, t, WindowMode::Training);
        if index.is_empty() {
            return Err(Error::Config(format!("no video has the {t} frames a clip needs")));
        }
        let steps_per_epoch = index.len().div_ceil(cfg.batch_size) as u64;
        let model = MaskedAutoencoder::new(model_cfg, dtype, seed::derive(cfg.seed, 0))?;
        let optimizer = AdamW::new(cfg.optimizer());
        Ok(Self {
            cfg,
            model,
            optimizer,
            manifest,
            clip_params,
            index,
            steps_per_epoch,
            step: 0,
            epoch_plan: None,
        })
    }

    /// Rebuilds a run from a pre-training checkpoint, continuing at its step.
    pub fn from_checkpoint(ckpt: &Checkpoint, manifest: Arc<DatasetManifest>) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Pretrain {
            return Err(Error::Checkpoint("not a pre-training checkpoint".into()));
        }
        let cfg: PretrainConfig = serde_json::from_value(ckpt.train_config.clone())
            .map_err(|e| Error::Checkpoint(format!("train_config: {e}")))?;
        let dtype = ckpt.params.values().next().map_or(DType::F32, |h| h.dtype);
        let mut run = Self::with_dtype(manifest, cfg, &ckpt.model_config, dtype)?;
        ckpt.restore_params(run.model.params())?;
        if let Some(opt) = &ckpt.optimizer {
            run.optimizer = opt.restore()?;
        }
        run.step = ckpt.state.step;
        Ok(run)
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &MaskedAutoencoder {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.cfg.epochs as u64 * self.steps_per_epoch;
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn current_batch(&mut self) -> Result<Vec<ClipRef>> {
        let epoch = self.epoch();
        if self.epoch_plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let s = seed::derive_path(self.cfg.seed, &[ORDER_STREAM, epoch]);
            let plan = plan_epoch(&self.index, self.cfg.batch_size, true, false, s)?;
            self.epoch_plan = Some((epoch, plan));
        }
        let (_, plan) = self.epoch_plan.as_ref().unwrap();
        Ok(plan.batches[(self.step % self.steps_per_epoch) as usize].clone())
    }

    /// Loss of the next batch under the current parameters, without updating.
    pub fn peek_loss(&mut self) -> Result<f64> {
        let refs = self.current_batch()?;
        let clips = load_clips(&self.manifest, &self.clip_params, &refs)?;
        let plans = plan_masks(&clips, self.model.config(), &self.cfg, self.step)?;
        let tokens = clips_to_tokens(&clips, self.model.config(), self.model.params().dtype())?;
        let pred = self.model.forward(&tokens, &plans)?;
        let loss = reconstruction_loss(&pred, &tokens, &plans)?;
        Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    /// Runs one optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let refs = self.current_batch()?;
        let clips = load_clips(&self.manifest, &self.clip_params, &refs)?;
        let plans = plan_masks(&clips, self.model.config(), &self.cfg, self.step)?;
        let tokens = clips_to_tokens(&clips, self.model.config(), self.model.params().dtype())?;
        let lr = self.cfg.lr_at(self.step as f64 / self.steps_per_epoch as f64);

        let pred = self.model.forward(&tokens, &plans)?;
        let loss = reconstruction_loss(&pred, &tokens, &plans)?;
        let mse = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !mse.is_finite() {
            let ids: Vec<String> = refs.iter().map(|r| format!("{}@{}", r.video_id, r.start_frame)).collect();
            return Err(Error::NonFinite(format!(
                "loss {mse} at step {} (lr {lr:e}), batch [{}]",
                self.step + 1,
                ids.join(", ")
            )));
        }
        let grads = loss.backward()?;
        self.optimizer
            .update(self.model.params(), &grads, lr, self.cfg.grad_clip)?;
        self.step += 1;
        Ok(LossReport {
            step: self.step,
            mse,
            lr,
            masked_token_count: plans.iter().map(MaskPlan::total_masked).sum(),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(
            CheckpointKind::Pretrain,
            self.model.config(),
            serde_json::to_value(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
            TrainingState {
                epoch: self.epoch(),
                step: self.step,
                seed: self.cfg.seed,
            },
            self.model.params(),
            Some(&self.optimizer),
        )
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub reports: Vec<LossReport>,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOSS_LOG_HEADER: &str = "step,mse,lr,masked_token_count";

/// Trains to completion, writing `loss.csv`, periodic checkpoints under
/// `checkpoints/` (every tenth of the epochs) and `final.ckpt` into `out_dir`.
/// On a non-finite loss, writes `nan_dump.txt` and returns the error.
pub fn pretrain(
    manifest: &DatasetManifest,
    cfg: &PretrainConfig,
    model_cfg: &ModelConfig,
    out_dir: &Path,
) -> Result<PretrainOutcome> {
    let run = Pretrainer::new(Arc::new(manifest.clone()), cfg.clone(), model_cfg)?;
    run_to_end(run, out_dir)
}

/// Continues `run` until its last step with the same outputs as [`pretrain`].
pub fn run_to_end(mut run: Pretrainer, out_dir: &Path) -> Result<PretrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("loss.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(run.step() > 0)
            .write(true)
            .truncate(run.step() == 0)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?,
    );
    if run.step() == 0 {
        writeln!(log, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let every_epochs = (run.config().epochs as u64 / 10).max(1);
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    while !run.is_finished() {
        let report = match run.train_step() {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                let dump = out_dir.join("nan_dump.txt");
                let _ = std::fs::write(&dump, format!("{e}\n"));
                log::error!("{e}; diagnostics in {}", dump.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(
            log,
            "{},{},{},{}",
            report.step, report.mse, report.lr, report.masked_token_count
        )
        .map_err(|e| Error::io(&log_path, e))?;
        if report.step % 10 == 0 || report.step == 1 {
            log::info!("step {} mse {:.5} lr {:.3e}", report.step, report.mse, report.lr);
        }
        reports.push(report);
        let at_epoch_end = run.step() % run.steps_per_epoch() == 0;
        if at_epoch_end && run.epoch() % every_epochs == 0 && !run.is_finished() {
            let path = out_dir
                .join("checkpoints")
                .join(format!("step_{:08}.ckpt", run.step()));
            run.checkpoint()?.save(&path)?;
            checkpoints.push(path);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join("final.ckpt");
    run.checkpoint()?.save(&final_checkpoint)?;
    Ok(PretrainOutcome {
        reports,
        final_checkpoint,
        checkpoints,
    })
}
