//! Dataset layout, loading, clip sampling and batch assembly.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   splits.txt                          # "<video_id> <train|val|test>"
//!   videos/<video_id>/frames/000000.jpg
//!   annotations/phase/<video_id>.csv    # frame_idx,phase_id
//!   annotations/gaze/<video_id>.csv     # frame_idx,x_norm,y_norm,valid
//! ```

mod batches;
mod synthetic;

pub use batches::{
    clip_index, make_batches, plan_epoch, sample_indices, Batches, ClipParams, ClipRef, EpochPlan,
    WindowMode,
};
pub use synthetic::{generate_synthetic_dataset, GeneratedDataset, Placement, SyntheticSpec};

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PHASE_NAMES: [&str; 9] = [
    "Disinfection",
    "Design",
    "Anesthesia",
    "Incision",
    "Dissection",
    "Hemostasis",
    "Irrigation",
    "Closure",
    "Dressing",
];

pub const NUM_PHASES: usize = PHASE_NAMES.len();

/// Stored frame rate of the extracted frames, frames per second.
pub const STORED_FPS: Rational = Rational { num: 1, den: 2 };

pub const PHASE_HEADER: [&str; 2] = ["frame_idx", "phase_id"];
pub const GAZE_HEADER: [&str; 4] = ["frame_idx", "x_norm", "y_norm", "valid"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rational {
    pub num: u32,
    pub den: u32,
}

impl Rational {
    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// A gaze sample in normalized image coordinates. `(0,0)` is the top-left
/// corner of the frame and `(1,1)` the bottom-right corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazePoint {
    pub x_norm: f64,
    pub y_norm: f64,
    pub valid: bool,
}

impl GazePoint {
    pub fn new(x_norm: f64, y_norm: f64) -> Self {
        Self {
            x_norm,
            y_norm,
            valid: true,
        }
    }

    pub fn invalid() -> Self {
        Self {
            x_norm: 0.0,
            y_norm: 0.0,
            valid: false,
        }
    }

    /// Gaze located at the center of pixel `(row, col)` in an `height x width` frame.
    pub fn at_pixel(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self::new(
            (col as f64 + 0.5) / width as f64,
            (row as f64 + 0.5) / height as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_idx: u32,
    pub phase_id: usize,
    pub gaze: GazePoint,
}

#[derive(Debug, Clone)]
pub struct VideoEntry {
    pub id: String,
    pub records: Vec<FrameRecord>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root_path: PathBuf,
    pub split: Split,
    pub fps: Rational,
    /// (height, width) of the stored frames.
    pub frame_size: (usize, usize),
    videos: Vec<VideoEntry>,
}

impl DatasetManifest {
    pub fn video_ids(&self) -> Vec<&str> {
        self.videos.iter().map(|v| v.id.as_str()).collect()
    }

    pub fn videos(&self) -> &[VideoEntry] {
        &self.videos
    }

    pub fn records(&self, video_id: &str) -> Result<&[FrameRecord]> {
        self.videos
            .iter()
            .find(|v| v.id == video_id)
            .map(|v| v.records.as_slice())
            .ok_or_else(|| Error::Load {
                video_id: video_id.to_string(),
                reason: format!("not part of the {} split", self.split),
            })
    }

    pub fn frame_path(&self, video_id: &str, frame_idx: u32) -> PathBuf {
        frame_path(&self.root_path, video_id, frame_idx)
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

pub fn frame_path(root: &Path, video_id: &str, frame_idx: u32) -> PathBuf {
    root.join("videos")
        .join(video_id)
        .join("frames")
        .join(format!("{frame_idx:06}.jpg"))
}

pub fn phase_csv_path(root: &Path, video_id: &str) -> PathBuf {
    root.join("annotations")
        .join("phase")
        .join(format!("{video_id}.csv"))
}

pub fn gaze_csv_path(root: &Path, video_id: &str) -> PathBuf {
    root.join("annotations")
        .join("gaze")
        .join(format!("{video_id}.csv"))
}

/// Reads `splits.txt` into `(video_id, split)` pairs in file order.
pub fn read_splits(root: &Path) -> Result<Vec<(String, Split)>> {
    let path = root.join("splits.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.clone(),
            line: line_no,
            reason,
        };
        let mut parts = line.split_whitespace();
        let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(format!("expected `<video_id> <split>`, got `{line}`")));
        };
        let split = split.parse::<Split>().map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(id.to_string()) {
            return Err(parse_err(format!("video `{id}` listed more than once")));
        }
        out.push((id.to_string(), split));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct PhaseRow {
    pub frame_idx: u32,
    pub phase_id: i64,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct GazeRow {
    pub frame_idx: u32,
    pub x_norm: f64,
    pub y_norm: f64,
    pub valid: i64,
}

fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<(u64, R)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let parse_err = |line: u64, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let found = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(parse_err(
            1,
            format!("expected header `{}`", header.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for result in reader.deserialize::<R>() {
        match result {
            Ok(row) => {
                // Header is line 1; data rows are numbered from 2.
                let line = rows.len() as u64 + 2;
                rows.push((line, row));
            }
            Err(e) => {
                let line = e
                    .position()
                    .map(|p| p.line())
                    .unwrap_or(rows.len() as u64 + 2);
                return Err(parse_err(line, e.to_string()));
            }
        }
    }
    Ok(rows)
}

/// Parses and joins the phase and gaze annotations of one video.
pub fn load_records(root: &Path, video_id: &str) -> Result<Vec<FrameRecord>> {
    let phase_path = phase_csv_path(root, video_id);
    let gaze_path = gaze_csv_path(root, video_id);
    let phases = read_csv::<PhaseRow>(&phase_path, &PHASE_HEADER)?;
    let gazes = read_csv::<GazeRow>(&gaze_path, &GAZE_HEADER)?;

    for (line, row) in &phases {
        if !(0..NUM_PHASES as i64).contains(&row.phase_id) {
            return Err(Error::Parse {
                path: phase_path.clone(),
                line: *line,
                reason: format!("phase_id {} outside [0, {}]", row.phase_id, NUM_PHASES - 1),
            });
        }
    }
    for (line, row) in &gazes {
        let reason = if row.valid != 0 && row.valid != 1 {
            Some(format!("valid must be 0 or 1, got {}", row.valid))
        } else if row.valid == 1
            && !((0.0..=1.0).contains(&row.x_norm) && (0.0..=1.0).contains(&row.y_norm))
        {
            Some(format!(
                "gaze ({}, {}) outside the unit square",
                row.x_norm, row.y_norm
            ))
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(Error::Parse {
                path: gaze_path.clone(),
                line: *line,
                reason,
            });
        }
    }
    if phases.len() != gazes.len() {
        return Err(Error::Load {
            video_id: video_id.to_string(),
            reason: format!(
                "phase annotations have {} rows but gaze annotations have {}",
                phases.len(),
                gazes.len()
            ),
        });
    }

    let mut records = Vec::with_capacity(phases.len());
    let mut previous: Option<u32> = None;
    for ((line, p), (_, g)) in phases.iter().zip(&gazes) {
        if p.frame_idx != g.frame_idx {
            return Err(Error::Load {
                video_id: video_id.to_string(),
                reason: format!(
                    "frame_idx mismatch at line {line}: phase {} vs gaze {}",
                    p.frame_idx, g.frame_idx
                ),
            });
        }
        if previous.is_some_and(|prev| p.frame_idx <= prev) {
            return Err(Error::Parse {
                path: phase_path.clone(),
                line: *line,
                reason: "frame_idx must be strictly increasing".into(),
            });
        }
        previous = Some(p.frame_idx);
        records.push(FrameRecord {
            video_id: video_id.to_string(),
            frame_idx: p.frame_idx,
            phase_id: p.phase_id as usize,
            gaze: GazePoint {
                x_norm: g.x_norm,
                y_norm: g.y_norm,
                valid: g.valid == 1,
            },
        });
    }
    Ok(records)
}

/// Loads the videos belonging to `split`, validating that every one of them
/// has frames and both annotation files.
pub fn load_manifest(root: impl AsRef<Path>, split: Split) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut videos = Vec::new();
    for (id, s) in read_splits(root)? {
        if s != split {
            continue;
        }
        let missing = |what: &str, path: PathBuf| Error::Load {
            video_id: id.clone(),
            reason: format!("missing {what} at {}", path.display()),
        };
        let frames_dir = root.join("videos").join(&id).join("frames");
        if !frames_dir.is_dir() {
            return Err(missing("frames directory", frames_dir));
        }
        let phase = phase_csv_path(root, &id);
        if !phase.is_file() {
            return Err(missing("phase annotation file", phase));
        }
        let gaze = gaze_csv_path(root, &id);
        if !gaze.is_file() {
            return Err(missing("gaze annotation file", gaze));
        }
        let records = load_records(root, &id)?;
        videos.push(VideoEntry { id, records });
    }

    let frame_size = match videos.iter().find_map(|v| v.records.first()) {
        Some(first) => {
            let path = frame_path(root, &first.video_id, first.frame_idx);
            let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Load {
                video_id: first.video_id.clone(),
                reason: format!("cannot read {}: {e}", path.display()),
            })?;
            (h as usize, w as usize)
        }
        None => (0, 0),
    };

    Ok(DatasetManifest {
        root_path: root.to_path_buf(),
        split,
        fps: STORED_FPS,
        frame_size,
        videos,
    })
}

/// A `T x C x H x W` block of consecutive frames with their gaze samples.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub pixels: Array4<f32>,
    pub gaze_points: Vec<GazePoint>,
    pub label: Option<usize>,
    pub video_id: String,
    /// Position of the first frame within the video's record list.
    pub start_frame: usize,
}

impl VideoClip {
    /// (T, C, H, W)
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.pixels.dim()
    }
}

pub(crate) fn load_frame(path: &Path, size: (usize, usize)) -> Result<image::RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (h, w) = size;
    if img.height() as usize == h && img.width() as usize == w {
        Ok(img)
    } else {
        Ok(image::imageops::resize(
            &img,
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        ))
    }
}

/// Loads `frames` consecutive stored frames of `video_id` starting at record
/// position `start_frame`, resized to `size = (H, W)` and scaled to `[0, 1]`.
/// The clip label is the phase of its last frame.
pub fn sample_clip(
    manifest: &DatasetManifest,
    video_id: &str,
    start_frame: usize,
    frames: usize,
    size: (usize, usize),
) -> Result<VideoClip> {
    let records = manifest.records(video_id)?;
    if frames == 0 {
        return Err(Error::Config("clip length must be at least 1".into()));
    }
    if start_frame + frames > records.len() {
        return Err(Error::Range(format!(
            "clip [{start_frame}, {}) exceeds the {} stored frames of {video_id}",
            start_frame + frames,
            records.len()
        )));
    }
    let (h, w) = size;
    let window = &records[start_frame..start_frame + frames];
    let mut pixels = Array4::<f32>::zeros((frames, 3, h, w));
    for (t, rec) in window.iter().enumerate() {
        let img = load_frame(&manifest.frame_path(video_id, rec.frame_idx), size)?;
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[[t, c, y as usize, x as usize]] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(VideoClip {
        pixels,
        // Normalized coordinates are invariant under resizing the whole frame.
        gaze_points: window.iter().map(|r| r.gaze).collect(),
        label: window.last().map(|r| r.phase_id),
        video_id: video_id.to_string(),
        start_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(root: &Path, rel: &str, text: &str) {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, text).unwrap();
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!(matches!("dev".parse::<Split>(), Err(Error::Config(_))));
    }

    #[test]
    fn pixel_centers_map_to_normalized_coordinates() {
        let g = GazePoint::at_pixel(0, 3, 4, 8);
        assert_eq!((g.x_norm, g.y_norm, g.valid), (3.5 / 8.0, 0.5 / 4.0, true));
    }

    #[test]
    fn stored_rate_is_half_a_frame_per_second() {
        assert_eq!(STORED_FPS.as_f64(), 0.5);
        assert_eq!(PHASE_NAMES[0], "Disinfection");
        assert_eq!(PHASE_NAMES[8], "Dressing");
    }

    #[test]
    fn splits_file_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "splits.txt", "v00 train\nv01 val\nv02 holdout\n");
        match read_splits(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        write(dir.path(), "splits.txt", "v00 train\n\nv00 test\n");
        assert!(matches!(read_splits(dir.path()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn malformed_csv_row_reports_its_line() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "annotations/phase/v00.csv", "frame_idx,phase_id\n0,0\n1,zero\n");
        write(dir.path(), "annotations/gaze/v00.csv", "frame_idx,x_norm,y_norm,valid\n0,0.5,0.5,1\n1,0.5,0.5,1\n");
        match load_records(dir.path(), "v00") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 3);
                assert!(path.ends_with("v00.csv"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "annotations/phase/v00.csv", "frame,phase\n0,0\n");
        write(dir.path(), "annotations/gaze/v00.csv", "frame_idx,x_norm,y_norm,valid\n0,0.5,0.5,1\n");
        assert!(matches!(load_records(dir.path(), "v00"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn out_of_range_phase_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "annotations/phase/v00.csv", "frame_idx,phase_id\n0,9\n");
        write(dir.path(), "annotations/gaze/v00.csv", "frame_idx,x_norm,y_norm,valid\n0,0.5,0.5,1\n");
        assert!(load_records(dir.path(), "v00").is_err());
    }
}
