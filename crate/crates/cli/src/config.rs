//! Flat `key = value` run configuration.
//!
//! Values resolve in three layers: preset defaults, then the `--config` file,
//! then command-line flags. Keys are snake_case in files and kebab-case as
//! flags (`batch_size` / `--batch-size`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub type RunConfig = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, help: &'static str) -> Key {
    Key { name, help }
}

const DATA: Key = key("data", "dataset root directory");
const OUT: Key = key("out", "directory that receives all run artifacts");
const PRESET: Key = key("preset", "model preset: vit_small or tiny_test");
const SEED: Key = key("seed", "master random seed");
const N_CLASSES: Key = key("n_classes", "number of phase classes");
const POOLING: Key = key("pooling", "classifier pooling: mean or class_token");

pub const PRETRAIN_KEYS: &[Key] = &[
    DATA,
    OUT,
    PRESET,
    key("strategy", "masking strategy: gaze, random, tube, or a comma list to sweep"),
    key("rho", "fraction of tokens masked per time index"),
    key("tau", "softmax temperature of gaze-guided masking"),
    key("sigma", "gaze Gaussian width in pixels, or auto"),
    key("epochs", "number of epochs the schedule spans"),
    key("batch_size", "clips per optimizer step"),
    key("base_lr", "peak learning rate after warmup"),
    key("final_lr", "learning rate at the last epoch"),
    key("warmup_epochs", "linear warmup length in epochs"),
    key("weight_decay", "AdamW decoupled weight decay"),
    key("beta1", "AdamW first-moment decay"),
    key("beta2", "AdamW second-moment decay"),
    key("grad_clip", "global gradient norm limit, or none"),
    key("max_steps", "stop after this many steps, or none"),
    SEED,
];

pub const FINETUNE_KEYS: &[Key] = &[
    DATA,
    OUT,
    PRESET,
    key("checkpoint", "pre-training checkpoint to start from, or none"),
    N_CLASSES,
    POOLING,
    key("epochs", "number of fine-tuning epochs"),
    key("batch_size", "clips per optimizer step"),
    key("eval_batch_size", "clips per validation batch"),
    key("base_lr", "peak learning rate after warmup"),
    key("final_lr", "learning rate at the last epoch"),
    key("warmup_epochs", "linear warmup length in epochs"),
    key("weight_decay", "AdamW decoupled weight decay"),
    key("beta1", "AdamW first-moment decay"),
    key("beta2", "AdamW second-moment decay"),
    key("grad_clip", "global gradient norm limit, or none"),
    key("rebalance", "inverse-frequency class resampling: true or false"),
    SEED,
];

pub const EVAL_KEYS: &[Key] = &[
    DATA,
    OUT,
    key("checkpoint", "fine-tuned checkpoint to evaluate"),
    key("split", "split to evaluate: train, val or test"),
    key("batch_size", "clips per batch"),
];

pub const GEN_SYNTHETIC_KEYS: &[Key] = &[
    OUT,
    key("n_videos", "number of videos"),
    key("frames_per_video", "stored frames per video"),
    key("height", "frame height in pixels"),
    key("width", "frame width in pixels"),
    N_CLASSES,
    key("train_videos", "videos in the train split"),
    key("val_videos", "videos in the val split"),
    key("test_videos", "videos in the test split"),
    key("gaze_noise", "half-width of the uniform gaze noise in pixels"),
    key("jpeg_quality", "JPEG quality of stored frames"),
    SEED,
];

pub const VIZ_MASK_KEYS: &[Key] = &[
    DATA,
    OUT,
    PRESET,
    key("split", "split containing the video"),
    key("video", "video id of the clip"),
    key("start", "first frame index of the clip"),
    key("rho", "fraction of tokens masked per time index"),
    key("tau", "softmax temperature of gaze-guided masking"),
    key("sigma", "gaze Gaussian width in pixels, or auto"),
    key("checkpoint", "pre-training checkpoint for reconstruction previews, or none"),
    SEED,
];

/// Preset-level defaults for one subcommand.
pub fn defaults(command: &str, preset: &str) -> Result<RunConfig, CliError> {
    let desk = match preset {
        "vit_small" => false,
        "tiny_test" => true,
        other => {
            return Err(CliError::Usage(format!(
                "invalid value `{other}` for key `preset` (expected vit_small or tiny_test)"
            )))
        }
    };
    let pairs: Vec<(&str, String)> = match command {
        "pretrain" => {
            let c = if desk {
                gazemae::pretrain::PretrainConfig::desk_scale()
            } else {
                gazemae::pretrain::PretrainConfig::default()
            };
            vec![
                ("data", String::new()),
                ("out", "runs".into()),
                ("strategy", c.strategy.to_string()),
                ("rho", c.rho.to_string()),
                ("tau", c.tau.to_string()),
                ("sigma", "auto".into()),
                ("epochs", c.epochs.to_string()),
                ("batch_size", c.batch_size.to_string()),
                ("base_lr", c.base_lr.to_string()),
                ("final_lr", c.final_lr.to_string()),
                ("warmup_epochs", c.warmup_epochs.to_string()),
                ("weight_decay", c.weight_decay.to_string()),
                ("beta1", c.betas.0.to_string()),
                ("beta2", c.betas.1.to_string()),
                ("grad_clip", opt_to_string(c.grad_clip)),
                ("max_steps", opt_to_string(c.max_steps)),
                ("seed", c.seed.to_string()),
            ]
        }
        "finetune" => {
            let c = if desk {
                gazemae::finetune::FinetuneConfig::desk_scale()
            } else {
                gazemae::finetune::FinetuneConfig::default()
            };
            vec![
                ("data", String::new()),
                ("out", "runs".into()),
                ("checkpoint", "none".into()),
                ("n_classes", gazemae::data::NUM_PHASES.to_string()),
                ("pooling", "mean".into()),
                ("epochs", c.epochs.to_string()),
                ("batch_size", c.batch_size.to_string()),
                ("eval_batch_size", c.eval_batch_size.to_string()),
                ("base_lr", c.base_lr.to_string()),
                ("final_lr", c.final_lr.to_string()),
                ("warmup_epochs", c.warmup_epochs.to_string()),
                ("weight_decay", c.weight_decay.to_string()),
                ("beta1", c.betas.0.to_string()),
                ("beta2", c.betas.1.to_string()),
                ("grad_clip", opt_to_string(c.grad_clip)),
                ("rebalance", c.rebalance.to_string()),
                ("seed", c.seed.to_string()),
            ]
        }
        "eval" => vec![
            ("data", String::new()),
            ("out", "runs".into()),
            ("checkpoint", String::new()),
            ("split", "test".into()),
            ("batch_size", "16".into()),
        ],
        "gen-synthetic" => {
            let s = gazemae::data::SyntheticSpec::default();
            vec![
                ("out", String::new()),
                ("n_videos", s.n_videos.to_string()),
                ("frames_per_video", s.frames_per_video.to_string()),
                ("height", s.frame_size.0.to_string()),
                ("width", s.frame_size.1.to_string()),
                ("n_classes", s.n_classes.to_string()),
                ("train_videos", s.split.0.to_string()),
                ("val_videos", s.split.1.to_string()),
                ("test_videos", s.split.2.to_string()),
                ("gaze_noise", s.gaze_noise_px.to_string()),
                ("jpeg_quality", s.jpeg_quality.to_string()),
                ("seed", "0".into()),
            ]
        }
        "viz-mask" => vec![
            ("data", String::new()),
            ("out", "runs".into()),
            ("split", "train".into()),
            ("video", String::new()),
            ("start", "0".into()),
            ("rho", "0.9".into()),
            ("tau", "0.5".into()),
            ("sigma", "auto".into()),
            ("checkpoint", "none".into()),
            ("seed", "0".into()),
        ],
        other => return Err(CliError::Usage(format!("unknown subcommand `{other}`"))),
    };
    let mut map: RunConfig = pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    if keys_for(command).iter().any(|k| k.name == "preset") {
        map.insert("preset".into(), preset.into());
    }
    Ok(map)
}

fn opt_to_string<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".into(), |v| v.to_string())
}

pub fn keys_for(command: &str) -> &'static [Key] {
    match command {
        "pretrain" => PRETRAIN_KEYS,
        "finetune" => FINETUNE_KEYS,
        "eval" => EVAL_KEYS,
        "gen-synthetic" => GEN_SYNTHETIC_KEYS,
        "viz-mask" => VIZ_MASK_KEYS,
        _ => &[],
    }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse(text: &str, allowed: &[Key], origin: &str) -> Result<RunConfig, CliError> {
    let mut map = RunConfig::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{origin}:{}: expected `key = value`, got `{line}`", n + 1))
        })?;
        let k = k.trim();
        if !allowed.iter().any(|a| a.name == k) {
            return Err(CliError::Usage(format!("{origin}:{}: unknown config key `{k}`", n + 1)));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("{origin}:{}: key `{k}` given twice", n + 1)));
        }
    }
    Ok(map)
}

pub fn read(path: &Path, allowed: &[Key]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text, allowed, &path.display().to_string())
}

/// Layers file values and flag values over the preset defaults.
pub fn resolve(command: &str, file: RunConfig, flags: RunConfig) -> Result<RunConfig, CliError> {
    let preset = flags
        .get("preset")
        .or_else(|| file.get("preset"))
        .map_or("vit_small", String::as_str)
        .to_string();
    let mut map = defaults(command, &preset)?;
    map.extend(file);
    map.extend(flags);
    Ok(map)
}

pub fn render(config: &RunConfig) -> String {
    config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Typed access to a resolved configuration.
pub struct View<'a>(pub &'a RunConfig);

impl View<'_> {
    pub fn str(&self, key: &str) -> Result<&str, CliError> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Usage(format!("missing config key `{key}`")))
    }

    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        match self.str(key)? {
            "" => Err(CliError::Usage(format!("key `{key}` is required (--{})", flag_name(key)))),
            v => Ok(v),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|e| CliError::Usage(format!("invalid value `{raw}` for key `{key}`: {e}")))
    }

    /// `none` maps to `None`.
    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.str(key)? {
            "none" | "auto" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = parse("rho = 0.75\ntau = 0.25\n", PRETRAIN_KEYS, "f").unwrap();
        let flags = RunConfig::from([("tau".to_string(), "1".to_string())]);
        let cfg = resolve("pretrain", file, flags).unwrap();
        assert_eq!(cfg["rho"], "0.75");
        assert_eq!(cfg["tau"], "1");
        assert_eq!(cfg["epochs"], "800");
    }

    #[test]
    fn preset_from_file_selects_desk_defaults() {
        let file = parse("preset = tiny_test", PRETRAIN_KEYS, "f").unwrap();
        let cfg = resolve("pretrain", file, RunConfig::new()).unwrap();
        assert_eq!(cfg["batch_size"], "8");
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse("# note\nstratgy = gaze\n", PRETRAIN_KEYS, "run.cfg").unwrap_err();
        assert!(e.to_string().contains("stratgy"), "{e}");
        assert!(e.to_string().contains("run.cfg:2"), "{e}");
    }

    #[test]
    fn echo_round_trips() {
        for cmd in ["pretrain", "finetune", "eval", "gen-synthetic", "viz-mask"] {
            let cfg = resolve(cmd, RunConfig::new(), RunConfig::new()).unwrap();
            assert_eq!(parse(&render(&cfg), keys_for(cmd), cmd).unwrap(), cfg);
        }
    }

    #[test]
    fn defaults_only_use_known_keys() {
        for cmd in ["pretrain", "finetune", "eval", "gen-synthetic", "viz-mask"] {
            for k in defaults(cmd, "tiny_test").unwrap().keys() {
                assert!(keys_for(cmd).iter().any(|a| a.name == k), "{cmd}: {k}");
            }
            assert_eq!(defaults(cmd, "tiny_test").unwrap().len(), keys_for(cmd).len(), "{cmd}");
        }
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let cfg = RunConfig::from([("rho".to_string(), "lots".to_string())]);
        assert!(matches!(View(&cfg).get::<f64>("rho"), Err(CliError::Usage(_))));
        assert!(matches!(defaults("pretrain", "vit_huge"), Err(CliError::Usage(_))));
    }
}
