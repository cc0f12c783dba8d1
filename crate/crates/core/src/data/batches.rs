use std::collections::BTreeMap;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::distributions::WeightedIndex;
use rand::prelude::*;

use super::{sample_clip, DatasetManifest, VideoClip};
use crate::error::{Error, Result};
use crate::seed;

/// How clip windows are laid over each video's stored frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Every start position (stride 1).
    Training,
    /// Consecutive non-overlapping windows.
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipParams {
    pub frames: usize,
    /// (H, W) the frames are resized to.
    pub size: (usize, usize),
    pub mode: WindowMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRef {
    pub video_id: String,
    pub start_frame: usize,
    pub label: usize,
}

/// Enumerates the clip windows of every video in the manifest.
pub fn clip_index(manifest: &DatasetManifest, frames: usize, mode: WindowMode) -> Vec<ClipRef> {
    let stride = match mode {
        WindowMode::Training => 1,
        WindowMode::Evaluation => frames.max(1),
    };
    let mut out = Vec::new();
    for video in manifest.videos() {
        let n = video.records.len();
        if frames == 0 || n < frames {
            continue;
        }
        for start in (0..=n - frames).step_by(stride) {
            out.push(ClipRef {
                video_id: video.id.clone(),
                start_frame: start,
                label: video.records[start + frames - 1].phase_id,
            });
        }
    }
    out
}

/// Draws one epoch worth of indices into `labels`.
///
/// With `rebalance`, indices are drawn with replacement with probability
/// inversely proportional to their class frequency, so every class present
/// has the same expected count. Otherwise every index appears exactly once,
/// permuted when `shuffle` is set.
pub fn sample_indices(
    labels: &[usize],
    n_draws: usize,
    shuffle: bool,
    rebalance: bool,
    rng: &mut impl Rng,
) -> Vec<usize> {
    if labels.is_empty() {
        return Vec::new();
    }
    if rebalance {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in labels {
            *counts.entry(l).or_default() += 1;
        }
        let weights: Vec<f64> = labels.iter().map(|l| 1.0 / counts[l] as f64).collect();
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        (0..n_draws).map(|_| dist.sample(rng)).collect()
    } else {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        if shuffle {
            idx.shuffle(rng);
        }
        idx
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<Vec<ClipRef>>,
}

impl EpochPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Orders `index` into batches. The last batch may be short.
pub fn plan_epoch(
    index: &[ClipRef],
    batch_size: usize,
    shuffle: bool,
    rebalance: bool,
    seed: u64,
) -> Result<EpochPlan> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Config("no clips available to batch".into()));
    }
    let labels: Vec<usize> = index.iter().map(|c| c.label).collect();
    let mut rng = seed::rng(seed);
    let order = sample_indices(&labels, index.len(), shuffle, rebalance, &mut rng);
    let batches = order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| index[i].clone()).collect())
        .collect();
    Ok(EpochPlan { batches })
}

/// Iterator over loaded batches of one epoch.
pub struct Batches {
    inner: BatchesInner,
}

enum BatchesInner {
    Direct {
        manifest: Arc<DatasetManifest>,
        params: ClipParams,
        batches: std::vec::IntoIter<Vec<ClipRef>>,
    },
    Prefetched(mpsc::IntoIter<Result<Vec<VideoClip>>>),
}

fn load_batch(
    manifest: &DatasetManifest,
    params: &ClipParams,
    refs: &[ClipRef],
) -> Result<Vec<VideoClip>> {
    refs.iter()
        .map(|r| sample_clip(manifest, &r.video_id, r.start_frame, params.frames, params.size))
        .collect()
}

impl Batches {
    pub fn new(manifest: Arc<DatasetManifest>, params: ClipParams, plan: EpochPlan) -> Self {
        Self {
            inner: BatchesInner::Direct {
                manifest,
                params,
                batches: plan.batches.into_iter(),
            },
        }
    }

    /// Moves loading to a background thread that stays at most `depth`
    /// batches ahead. Delivery order is unchanged.
    pub fn prefetch(self, depth: usize) -> Self {
        match self.inner {
            BatchesInner::Direct {
                manifest,
                params,
                batches,
            } => {
                let (tx, rx) = mpsc::sync_channel(depth.max(1));
                thread::spawn(move || {
                    for refs in batches {
                        if tx.send(load_batch(&manifest, &params, &refs)).is_err() {
                            break;
                        }
                    }
                });
                Self {
                    inner: BatchesInner::Prefetched(rx.into_iter()),
                }
            }
            prefetched => Self { inner: prefetched },
        }
    }
}

impl Iterator for Batches {
    type Item = Result<Vec<VideoClip>>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.inner {
            BatchesInner::Direct {
                manifest,
                params,
                batches,
            } => batches.next().map(|refs| load_batch(manifest, params, &refs)),
            BatchesInner::Prefetched(rx) => rx.next(),
        }
    }
}

/// Plans and loads one epoch of batches from `manifest`.
pub fn make_batches(
    manifest: Arc<DatasetManifest>,
    params: ClipParams,
    batch_size: usize,
    shuffle: bool,
    rebalance: bool,
    seed: u64,
) -> Result<Batches> {
    if manifest.is_empty() {
        return Err(Error::Config(format!(
            "the {} split of {} contains no videos",
            manifest.split,
            manifest.root_path.display()
        )));
    }
    let index = clip_index(&manifest, params.frames, params.mode);
    let plan = plan_epoch(&index, batch_size, shuffle, rebalance, seed)?;
    Ok(Batches::new(manifest, params, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_100_10() -> Vec<usize> {
        let mut labels = vec![0; 100];
        labels.extend(vec![1; 10]);
        labels
    }

    fn frequency(draws: &[usize], labels: &[usize], class: usize) -> f64 {
        draws.iter().filter(|&&i| labels[i] == class).count() as f64 / draws.len() as f64
    }

    #[test]
    fn rebalanced_draws_equalize_classes() {
        let labels = labels_100_10();
        let draws = sample_indices(&labels, 10_000, true, true, &mut seed::rng(3));
        let f = frequency(&draws, &labels, 1);
        assert!((f - 0.5).abs() <= 0.03, "minority frequency {f}");
    }

    #[test]
    fn plain_draws_follow_dataset_frequency() {
        let labels = labels_100_10();
        let mut draws = Vec::new();
        let mut rng = seed::rng(5);
        while draws.len() < 10_000 {
            draws.extend(sample_indices(&labels, labels.len(), true, false, &mut rng));
        }
        let f = frequency(&draws, &labels, 1);
        assert!((f - 10.0 / 110.0).abs() <= 0.03);
    }

    #[test]
    fn rebalanced_counts_pass_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut labels = vec![0; 70];
        labels.extend(vec![1; 25]);
        labels.extend(vec![2; 5]);
        let draws = sample_indices(&labels, 10_000, true, true, &mut seed::rng(11));
        let expected = draws.len() as f64 / 3.0;
        let stat: f64 = (0..3)
            .map(|c| {
                let o = draws.iter().filter(|&&i| labels[i] == c).count() as f64;
                (o - expected).powi(2) / expected
            })
            .sum();
        let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn plan_is_seed_deterministic() {
        let index: Vec<ClipRef> = (0..37)
            .map(|i| ClipRef {
                video_id: format!("v{}", i % 3),
                start_frame: i,
                label: i % 4,
            })
            .collect();
        let a = plan_epoch(&index, 5, true, true, 42).unwrap();
        let b = plan_epoch(&index, 5, true, true, 42).unwrap();
        let c = plan_epoch(&index, 5, true, true, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 8);
        assert_eq!(a.batches.last().unwrap().len(), 2);
    }

    #[test]
    fn unshuffled_plan_keeps_order() {
        let index: Vec<ClipRef> = (0..4)
            .map(|i| ClipRef {
                video_id: "v".into(),
                start_frame: i,
                label: 0,
            })
            .collect();
        let plan = plan_epoch(&index, 3, false, false, 0).unwrap();
        assert_eq!(plan.batches[0][2].start_frame, 2);
        assert_eq!(plan.batches[1][0].start_frame, 3);
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        let index = vec![ClipRef {
            video_id: "v".into(),
            start_frame: 0,
            label: 0,
        }];
        assert!(matches!(
            plan_epoch(&index, 0, false, false, 0),
            Err(Error::Config(_))
        ));
    }
}
