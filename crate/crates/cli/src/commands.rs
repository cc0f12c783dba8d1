use std::path::{Path, PathBuf};

use gazemae::checkpoint::Checkpoint;
use gazemae::data::{generate_synthetic_dataset, load_manifest, Split, SyntheticSpec, PHASE_NAMES};
use gazemae::finetune::{evaluate, finetune as run_finetune, load_classifier, FinetuneConfig};
use gazemae::masking::MaskStrategy;
use gazemae::model::{ModelConfig, Pooling, Preset};
use gazemae::pretrain::{pretrain as run_pretrain, PretrainConfig};
use serde_json::json;

use crate::config::{self, RunConfig, View};
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Creates `<out>/<command>-<timestamp>-<seed>[-<suffix>]`, adding a counter
/// if the name is taken.
pub fn run_dir(out: &Path, command: &str, seed: u64, suffix: Option<&str>) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%3f");
    let base = match suffix {
        Some(s) => format!("{command}-{stamp}-{seed}-{s}"),
        None => format!("{command}-{stamp}-{seed}"),
    };
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}.{n}") };
        let dir = out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

pub fn write_echo(path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::write(path, config::render(cfg)).map_err(|e| io_err(path, e))
}

fn model_config(v: &View) -> Result<ModelConfig, CliError> {
    let preset: Preset = v.get("preset")?;
    Ok(ModelConfig::from_preset(preset))
}

fn strategies(v: &View) -> Result<Vec<MaskStrategy>, CliError> {
    let raw = v.required("strategy")?;
    let mut out = Vec::new();
    for part in raw.split(',').map(str::trim) {
        let s: MaskStrategy = part
            .parse()
            .map_err(|e| CliError::Usage(format!("invalid value `{part}` for key `strategy`: {e}")))?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

fn pretrain_config(v: &View, strategy: MaskStrategy) -> Result<PretrainConfig, CliError> {
    let cfg = PretrainConfig {
        rho: v.get("rho")?,
        tau: v.get("tau")?,
        epochs: v.get("epochs")?,
        batch_size: v.get("batch_size")?,
        base_lr: v.get("base_lr")?,
        final_lr: v.get("final_lr")?,
        warmup_epochs: v.get("warmup_epochs")?,
        weight_decay: v.get("weight_decay")?,
        betas: (v.get("beta1")?, v.get("beta2")?),
        strategy,
        seed: v.get("seed")?,
        sigma: v.optional("sigma")?,
        grad_clip: v.optional("grad_clip")?,
        max_steps: v.optional("max_steps")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let v = View(cfg);
    let model_cfg = model_config(&v)?;
    let strategies = strategies(&v)?;
    let runs = strategies
        .iter()
        .map(|&s| pretrain_config(&v, s))
        .collect::<Result<Vec<_>, _>>()?;
    let data = v.required("data")?;
    let manifest = load_manifest(data, Split::Train)?;
    let out = PathBuf::from(v.required("out")?);
    let sweep = runs.len() > 1;
    for run in runs {
        let dir = run_dir(&out, "pretrain", run.seed, sweep.then(|| run.strategy.as_str()))?;
        let mut echo = cfg.clone();
        echo.insert("strategy".into(), run.strategy.to_string());
        write_echo(&dir.join("config.txt"), &echo)?;
        log::info!("pre-training ({} masking) into {}", run.strategy, dir.display());
        run_pretrain(&manifest, &run, &model_cfg, &dir)?;
        println!("{}", dir.display());
    }
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let v = View(cfg);
    let fcfg = FinetuneConfig {
        epochs: v.get("epochs")?,
        batch_size: v.get("batch_size")?,
        base_lr: v.get("base_lr")?,
        final_lr: v.get("final_lr")?,
        warmup_epochs: v.get("warmup_epochs")?,
        rebalance: v.get("rebalance")?,
        seed: v.get("seed")?,
        weight_decay: v.get("weight_decay")?,
        betas: (v.get("beta1")?, v.get("beta2")?),
        grad_clip: v.optional("grad_clip")?,
        eval_batch_size: v.get("eval_batch_size")?,
    };
    fcfg.validate()?;
    let n_classes: usize = v.get("n_classes")?;
    if n_classes == 0 || n_classes > PHASE_NAMES.len() {
        return Err(CliError::Usage(format!(
            "invalid value `{n_classes}` for key `n_classes`: expected 1..={}",
            PHASE_NAMES.len()
        )));
    }
    let pooling: Pooling = v.get("pooling")?;
    let init = v
        .optional::<PathBuf>("checkpoint")?
        .map(Checkpoint::load)
        .transpose()?;
    let base = match &init {
        Some(ckpt) => ckpt.model_config.clone(),
        None => model_config(&v)?,
    };
    let model_cfg = ModelConfig { n_classes, pooling, ..base };
    let data = v.required("data")?;
    let train = load_manifest(data, Split::Train)?;
    let val = load_manifest(data, Split::Val)?;
    let dir = run_dir(Path::new(v.required("out")?), "finetune", fcfg.seed, None)?;
    write_echo(&dir.join("config.txt"), cfg)?;
    log::info!("fine-tuning into {}", dir.display());
    let outcome = run_finetune(
        init.as_ref(),
        &model_cfg,
        &train,
        (!val.is_empty()).then_some(&val),
        &fcfg,
        &dir,
    )?;
    if let Some(epoch) = outcome.best_epoch {
        log::info!("best validation epoch {epoch}");
    }
    println!("{}", dir.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let v = View(cfg);
    let split: Split = v.get("split")?;
    let batch_size: usize = v.get("batch_size")?;
    let ckpt_path = PathBuf::from(v.required("checkpoint")?);
    let model = load_classifier(&Checkpoint::load(&ckpt_path)?)?;
    let manifest = load_manifest(v.required("data")?, split)?;
    let cm = evaluate(&model, &manifest, batch_size)?;
    let scores = cm.macro_scores()?;
    let name = |k: usize| PHASE_NAMES.get(k).copied().unwrap_or("unknown");
    let report = json!({
        "checkpoint": ckpt_path.display().to_string(),
        "split": split.as_str(),
        "evaluation_unit": "one prediction per non-overlapping clip window, scored against the phase of the clip's last frame",
        "n_clips": cm.total(),
        "macro": {
            "precision": scores.precision,
            "recall": scores.recall,
            "jaccard": scores.jaccard,
            "classes_averaged": scores.per_class.len(),
        },
        "per_class": scores.per_class.iter().map(|c| json!({
            "class": c.class,
            "name": name(c.class),
            "support": c.support,
            "precision": c.precision,
            "recall": c.recall,
            "jaccard": c.jaccard,
        })).collect::<Vec<_>>(),
        "support": (0..cm.n_classes()).map(|k| cm.support(k)).collect::<Vec<_>>(),
        "class_names": (0..cm.n_classes()).map(name).collect::<Vec<_>>(),
        "confusion_matrix": cm.counts(),
    });
    let text = serde_json::to_string_pretty(&report).expect("JSON values serialize");
    let dir = run_dir(Path::new(v.required("out")?), "eval", 0, None)?;
    write_echo(&dir.join("config.txt"), cfg)?;
    let path = dir.join("eval.json");
    std::fs::write(&path, format!("{text}\n")).map_err(|e| io_err(&path, e))?;
    println!("{text}");
    Ok(())
}

pub fn gen_synthetic(cfg: &RunConfig) -> Result<(), CliError> {
    let v = View(cfg);
    let spec = SyntheticSpec {
        n_videos: v.get("n_videos")?,
        frames_per_video: v.get("frames_per_video")?,
        frame_size: (v.get("height")?, v.get("width")?),
        n_classes: v.get("n_classes")?,
        split: (v.get("train_videos")?, v.get("val_videos")?, v.get("test_videos")?),
        gaze_noise_px: v.get("gaze_noise")?,
        jpeg_quality: v.get("jpeg_quality")?,
    };
    let out = PathBuf::from(v.required("out")?);
    generate_synthetic_dataset(&out, &spec, v.get("seed")?)?;
    write_echo(&out.join("synthetic_config.txt"), cfg)?;
    println!("{}", out.display());
    Ok(())
}
