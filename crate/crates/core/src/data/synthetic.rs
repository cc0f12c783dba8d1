//! Deterministic synthetic gaze-video datasets.
//!
//! Each frame shows a lit "field" on a dark, noisy background with a bar whose
//! orientation and color identify the phase class. The bar drifts slowly
//! between frames and the gaze sample is placed on it with bounded noise, so
//! gaze marks the region that carries the label.

use std::f64::consts::PI;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use rand::Rng;

use super::{
    frame_path, gaze_csv_path, load_manifest, phase_csv_path, DatasetManifest, GazeRow, PhaseRow,
    Split, NUM_PHASES,
};
use crate::error::{Error, Result};
use crate::seed;

const PALETTE: [[f64; 3]; NUM_PHASES] = [
    [0.95, 0.25, 0.20],
    [0.20, 0.85, 0.30],
    [0.25, 0.40, 0.95],
    [0.95, 0.85, 0.20],
    [0.85, 0.25, 0.90],
    [0.20, 0.90, 0.90],
    [1.00, 0.60, 0.15],
    [0.60, 0.95, 0.60],
    [0.95, 0.95, 0.95],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    /// (H, W) of the stored frames.
    pub frame_size: (usize, usize),
    pub n_classes: usize,
    /// Number of videos assigned to (train, val, test), in id order.
    pub split: (usize, usize, usize),
    /// Half-width of the uniform noise added to the gaze point, in pixels.
    pub gaze_noise_px: f64,
    pub jpeg_quality: u8,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 21,
            frames_per_video: 24,
            frame_size: (64, 64),
            n_classes: NUM_PHASES,
            split: (14, 2, 5),
            gaze_noise_px: 2.0,
            jpeg_quality: 90,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let (tr, va, te) = self.split;
        if tr + va + te != self.n_videos {
            return Err(Error::Config(format!(
                "split {tr}/{va}/{te} does not add up to {} videos",
                self.n_videos
            )));
        }
        if self.n_classes == 0 || self.n_classes > NUM_PHASES {
            return Err(Error::Config(format!(
                "n_classes must be in [1, {NUM_PHASES}], got {}",
                self.n_classes
            )));
        }
        if self.frames_per_video < self.n_classes {
            return Err(Error::Config(format!(
                "{} frames cannot hold {} phases",
                self.frames_per_video, self.n_classes
            )));
        }
        let (h, w) = self.frame_size;
        if h < 16 || w < 16 {
            return Err(Error::Config("frames must be at least 16x16".into()));
        }
        if self.gaze_noise_px < 0.0 {
            return Err(Error::Config("gaze noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Where the class pattern and the gaze point were placed in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub video_id: String,
    pub frame_idx: u32,
    pub phase_id: usize,
    /// Axis-aligned bounds of the bar, `(x0, y0, x1, y1)` in pixels.
    pub bbox: (f64, f64, f64, f64),
    /// Gaze position in pixel coordinates `(x, y)`.
    pub gaze_px: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub root: PathBuf,
    pub placements: Vec<Placement>,
}

impl GeneratedDataset {
    pub fn manifest(&self, split: Split) -> Result<DatasetManifest> {
        load_manifest(&self.root, split)
    }
}

pub fn video_id(i: usize) -> String {
    format!("v{i:02}")
}

fn phase_schedule(frames: usize, n_classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let weights: Vec<f64> = (0..n_classes).map(|_| rng.gen_range(0.5..2.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut lengths: Vec<usize> = weights
        .iter()
        .map(|w| ((frames as f64 * w / total).floor() as usize).max(1))
        .collect();
    while lengths.iter().sum::<usize>() > frames {
        let longest = (0..n_classes).max_by_key(|&i| lengths[i]).unwrap();
        lengths[longest] -= 1;
    }
    while lengths.iter().sum::<usize>() < frames {
        let longest = (0..n_classes).max_by_key(|&i| lengths[i]).unwrap();
        lengths[longest] += 1;
    }
    lengths
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
        .collect()
}

struct Bar {
    cx: f64,
    cy: f64,
    angle: f64,
    half_len: f64,
    half_thick: f64,
}

impl Bar {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= self.half_len && across.abs() <= self.half_thick
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let ex = self.half_len * c.abs() + self.half_thick * s.abs();
        let ey = self.half_len * s.abs() + self.half_thick * c.abs();
        (self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey)
    }
}

fn render_frame(bar: &Bar, color: [f64; 3], size: (usize, usize), rng: &mut impl Rng) -> RgbImage {
    let (h, w) = size;
    let field_radius = 0.32 * h.min(w) as f64;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            // Pixel centers sit at half-integer coordinates.
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = ((px - bar.cx).powi(2) + (py - bar.cy).powi(2)).sqrt();
            let lit = (1.0 - r / field_radius).clamp(0.0, 1.0);
            let mut rgb = [
                0.06 + 0.45 * lit,
                0.05 + 0.30 * lit,
                0.05 + 0.28 * lit,
            ];
            if bar.contains(px, py) {
                rgb = color;
            }
            let noise: f64 = rng.gen_range(-0.03..0.03);
            let to_u8 = |v: f64| ((v + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([to_u8(rgb[0]), to_u8(rgb[1]), to_u8(rgb[2])]));
        }
    }
    img
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn write_jpeg(path: &Path, img: &RgbImage, quality: u8) -> Result<()> {
    create_parent(path)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = JpegEncoder::new_with_quality(BufWriter::new(file), quality);
    encoder.encode_image(img)?;
    Ok(())
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    create_parent(path)?;
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::io(path, e.into()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes a synthetic dataset under `root` and returns the placement log.
pub fn generate_synthetic_dataset(
    root: impl AsRef<Path>,
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<GeneratedDataset> {
    spec.validate()?;
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let (h, w) = spec.frame_size;
    let min_side = h.min(w) as f64;
    let half_len = 0.22 * min_side;
    let half_thick = 0.07 * min_side;
    let margin = half_len + 2.0;

    let mut splits = String::new();
    let mut placements = Vec::new();
    for v in 0..spec.n_videos {
        let id = video_id(v);
        let split = if v < spec.split.0 {
            Split::Train
        } else if v < spec.split.0 + spec.split.1 {
            Split::Val
        } else {
            Split::Test
        };
        splits.push_str(&format!("{id} {split}\n"));

        let mut rng = seed::rng(seed::derive(seed, v as u64));
        let phases = phase_schedule(spec.frames_per_video, spec.n_classes, &mut rng);
        let mut cx = rng.gen_range(margin..w as f64 - margin);
        let mut cy = rng.gen_range(margin..h as f64 - margin);
        let mut phase_rows = Vec::with_capacity(phases.len());
        let mut gaze_rows = Vec::with_capacity(phases.len());
        for (f, &phase) in phases.iter().enumerate() {
            cx = (cx + rng.gen_range(-2.0..2.0)).clamp(margin, w as f64 - margin);
            cy = (cy + rng.gen_range(-2.0..2.0)).clamp(margin, h as f64 - margin);
            let bar = Bar {
                cx,
                cy,
                angle: phase as f64 * PI / spec.n_classes as f64,
                half_len,
                half_thick,
            };
            let img = render_frame(&bar, PALETTE[phase], spec.frame_size, &mut rng);
            write_jpeg(&frame_path(root, &id, f as u32), &img, spec.jpeg_quality)?;

            let r = spec.gaze_noise_px;
            let (nx, ny) = if r > 0.0 {
                (rng.gen_range(-r..=r), rng.gen_range(-r..=r))
            } else {
                (0.0, 0.0)
            };
            let gx = (cx + nx).clamp(0.0, w as f64);
            let gy = (cy + ny).clamp(0.0, h as f64);
            phase_rows.push(PhaseRow {
                frame_idx: f as u32,
                phase_id: phase as i64,
            });
            gaze_rows.push(GazeRow {
                frame_idx: f as u32,
                x_norm: gx / w as f64,
                y_norm: gy / h as f64,
                valid: 1,
            });
            placements.push(Placement {
                video_id: id.clone(),
                frame_idx: f as u32,
                phase_id: phase,
                bbox: bar.bbox(),
                gaze_px: (gx, gy),
            });
        }
        write_csv(&phase_csv_path(root, &id), &phase_rows)?;
        write_csv(&gaze_csv_path(root, &id), &gaze_rows)?;
    }
    let splits_path = root.join("splits.txt");
    std::fs::write(&splits_path, splits).map_err(|e| Error::io(&splits_path, e))?;

    Ok(GeneratedDataset {
        root: root.to_path_buf(),
        placements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_every_class_in_order() {
        let mut rng = seed::rng(1);
        let s = phase_schedule(30, 9, &mut rng);
        assert_eq!(s.len(), 30);
        assert!(s.windows(2).all(|p| p[0] <= p[1]));
        for c in 0..9 {
            assert!(s.contains(&c));
        }
    }

    #[test]
    fn bar_bbox_contains_bar_pixels() {
        let bar = Bar {
            cx: 20.0,
            cy: 25.0,
            angle: 0.7,
            half_len: 9.0,
            half_thick: 3.0,
        };
        let (x0, y0, x1, y1) = bar.bbox();
        for y in 0..64 {
            for x in 0..64 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if bar.contains(px, py) {
                    assert!(px >= x0 && px <= x1 && py >= y0 && py <= y1);
                }
            }
        }
    }

    #[test]
    fn inconsistent_split_is_rejected() {
        let spec = SyntheticSpec {
            n_videos: 3,
            split: (1, 1, 0),
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_synthetic_dataset(dir.path(), &spec, 0),
            Err(Error::Config(_))
        ));
    }
}
