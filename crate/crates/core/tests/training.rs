use std::path::Path;
use std::sync::Arc;

use gazemae::checkpoint::{Checkpoint, CheckpointKind};
use gazemae::data::{generate_synthetic_dataset, load_manifest, DatasetManifest, Split, SyntheticSpec};
use gazemae::finetune::{finetune, FinetuneConfig};
use gazemae::masking::MaskStrategy;
use gazemae::model::ModelConfig;
use gazemae::pretrain::{pretrain, run_to_end, PretrainConfig, Pretrainer};
use gazemae::Error;

fn dataset(root: &Path, n_classes: usize, split: (usize, usize, usize), frames: usize) -> DatasetManifest {
    let spec = SyntheticSpec {
        n_videos: split.0 + split.1 + split.2,
        frames_per_video: frames,
        n_classes,
        split,
        ..SyntheticSpec::default()
    };
    generate_synthetic_dataset(root, &spec, 21).unwrap();
    load_manifest(root, Split::Train).unwrap()
}

fn short(epochs: usize, seed: u64) -> PretrainConfig {
    PretrainConfig { epochs, warmup_epochs: 1, seed, ..PretrainConfig::desk_scale() }
}

#[test]
fn loss_log_and_checkpoint_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 3, (1, 0, 0), 12);
    let out = dir.path().join("run");
    let result = pretrain(&manifest, &short(10, 1), &ModelConfig::tiny_test(), &out).unwrap();
    // 9 clips of 4 frames in batches of 8: two steps per epoch.
    assert_eq!(result.reports.len(), 20);
    for r in &result.reports {
        assert!(r.mse.is_finite() && r.mse >= 0.0);
        assert_eq!(r.masked_token_count, if r.step % 2 == 1 { 2 * 57 * 8 } else { 2 * 57 });
    }
    let log = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,mse,lr,masked_token_count"));
    assert_eq!(lines.count(), 20);
    assert_eq!(result.checkpoints.len(), 9);
    assert!(out.join("checkpoints/step_00000002.ckpt").is_file());
    assert!(result.final_checkpoint.is_file());
    let last = Checkpoint::load(&result.final_checkpoint).unwrap();
    assert_eq!(last.kind, CheckpointKind::Pretrain);
    assert_eq!(last.state.step, 20);
}

#[test]
fn loss_trajectory_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 3, (2, 0, 0), 8);
    let cfg = PretrainConfig { max_steps: Some(6), ..short(10, 4) };
    let model = ModelConfig::tiny_test();
    pretrain(&manifest, &cfg, &model, &dir.path().join("a")).unwrap();
    pretrain(&manifest, &cfg, &model, &dir.path().join("b")).unwrap();
    let read = |d: &str| std::fs::read_to_string(dir.path().join(d).join("loss.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let other = PretrainConfig { seed: 5, ..cfg };
    pretrain(&manifest, &other, &model, &dir.path().join("c")).unwrap();
    assert_ne!(read("a"), read("c"));
}

#[test]
fn resumed_run_finishes_with_the_same_log() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Arc::new(dataset(&dir.path().join("data"), 3, (1, 0, 0), 12));
    let model = ModelConfig::tiny_test();
    let full = pretrain(&manifest, &short(5, 2), &model, &dir.path().join("full")).unwrap();

    let mut run = Pretrainer::new(manifest.clone(), short(5, 2), &model).unwrap();
    let partial = dir.path().join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    let mut head = String::from("step,mse,lr,masked_token_count\n");
    for _ in 0..3 {
        let r = run.train_step().unwrap();
        head.push_str(&format!("{},{},{},{}\n", r.step, r.mse, r.lr, r.masked_token_count));
    }
    std::fs::write(partial.join("loss.csv"), head).unwrap();
    run.checkpoint().unwrap().save(partial.join("mid.ckpt")).unwrap();
    drop(run);

    let ckpt = Checkpoint::load(partial.join("mid.ckpt")).unwrap();
    let resumed = Pretrainer::from_checkpoint(&ckpt, manifest).unwrap();
    assert_eq!(resumed.step(), 3);
    let tail = run_to_end(resumed, &partial).unwrap();
    assert_eq!(tail.reports.len(), full.reports.len() - 3);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("full/loss.csv")).unwrap(),
        std::fs::read_to_string(partial.join("loss.csv")).unwrap()
    );
}

#[test]
fn constant_gaze_and_random_masking_count_alike() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Arc::new(dataset(&dir.path().join("data"), 2, (1, 0, 0), 12));
    let counts = |strategy| -> Vec<usize> {
        let cfg = PretrainConfig { strategy, max_steps: Some(4), ..short(10, 3) };
        let mut run = Pretrainer::new(manifest.clone(), cfg, &ModelConfig::tiny_test()).unwrap();
        (0..4).map(|_| run.train_step().unwrap().masked_token_count).collect()
    };
    assert_eq!(counts(MaskStrategy::Gaze), counts(MaskStrategy::Random));
    assert_eq!(counts(MaskStrategy::Gaze), counts(MaskStrategy::Tube));
}

#[test]
fn diverging_run_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 2, (1, 0, 0), 12);
    let cfg = PretrainConfig {
        base_lr: 1e30,
        final_lr: 1e29,
        grad_clip: None,
        ..short(10, 6)
    };
    let out = dir.path().join("run");
    let err = pretrain(&manifest, &cfg, &ModelConfig::tiny_test(), &out).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err:?}");
    let dump = std::fs::read_to_string(out.join("nan_dump.txt")).unwrap();
    assert!(dump.contains("step") && dump.contains("lr") && dump.contains("v00@"), "{dump}");
}

#[test]
fn finetuning_learns_separable_classes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let train = dataset(&root, 3, (8, 2, 0), 24);
    let val = load_manifest(&root, Split::Val).unwrap();
    let model = ModelConfig { n_classes: 3, ..ModelConfig::tiny_test() };
    let cfg = FinetuneConfig { seed: 2, ..FinetuneConfig::desk_scale() };
    let out = finetune(None, &model, &train, Some(&val), &cfg, &dir.path().join("ft")).unwrap();
    assert_eq!(out.history.len(), 10);
    let last = out.history.last().unwrap();
    assert!(last.train_accuracy >= 0.95, "{:?}", out.history);

    let losses: Vec<f64> = out.history.iter().map(|m| m.train_loss).collect();
    let trailing: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in trailing.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{trailing:?}");
    }

    let metrics = std::fs::read_to_string(dir.path().join("ft/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,train_loss,val_precision,val_recall,val_jaccard"));
    assert_eq!(metrics.lines().count(), 11);
    let best = Checkpoint::load(out.best_checkpoint.unwrap()).unwrap();
    assert_eq!(best.kind, CheckpointKind::Finetune);
    assert!(out.final_checkpoint.is_file());
}

#[test]
fn absent_class_is_excluded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let train = dataset(&dir.path().join("data"), 2, (1, 0, 0), 8);
    let model = ModelConfig { n_classes: 4, ..ModelConfig::tiny_test() };
    let cfg = FinetuneConfig { epochs: 2, warmup_epochs: 1, ..FinetuneConfig::desk_scale() };
    let out = finetune(None, &model, &train, None, &cfg, &dir.path().join("ft")).unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out.best_checkpoint.is_none());
}

#[test]
fn finetuning_rejects_a_finetune_checkpoint_as_init() {
    let dir = tempfile::tempdir().unwrap();
    let train = dataset(&dir.path().join("data"), 2, (1, 0, 0), 8);
    let model = ModelConfig { n_classes: 2, ..ModelConfig::tiny_test() };
    let cfg = FinetuneConfig { epochs: 2, warmup_epochs: 1, ..FinetuneConfig::desk_scale() };
    let out = finetune(None, &model, &train, None, &cfg, &dir.path().join("a")).unwrap();
    let ckpt = Checkpoint::load(out.final_checkpoint).unwrap();
    let err = finetune(Some(&ckpt), &model, &train, None, &cfg, &dir.path().join("b")).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
}
