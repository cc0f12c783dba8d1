//! `viz-mask`: per-frame panels of RGB, gaze heatmap overlay, random mask and
//! gaze-guided mask.
//!
//! Heatmaps are drawn with a piecewise-linear "jet" colormap,
//! `r = clamp(1.5 - |4v - 3|)`, `g = clamp(1.5 - |4v - 2|)`,
//! `b = clamp(1.5 - |4v - 1|)`, blended over the frame at alpha 0.5.
//! Masked tokens are filled with RGB (128, 128, 128).

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use gazemae::checkpoint::{Checkpoint, CheckpointKind};
use gazemae::data::{load_manifest, sample_clip, Split, VideoClip};
use gazemae::gaze::{accumulate_per_token, default_sigma, render_heatmap, GazeHeatmap};
use gazemae::geometry::{patchify, unpatchify, TokenGrid};
use gazemae::masking::{plan_for, MaskPlan, MaskStrategy};
use gazemae::model::{clips_to_tokens, MaskedAutoencoder, ModelConfig, Preset};
use gazemae::seed;
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array4};

use crate::commands::{run_dir, write_echo};
use crate::config::{RunConfig, View};
use crate::CliError;

pub const MASK_GRAY: Rgb<u8> = Rgb([128, 128, 128]);

pub fn jet(v: f64) -> [f64; 3] {
    let f = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_rgb(pixels: &Array4<f32>, t: usize) -> RgbImage {
    let (_, _, h, w) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = |c| to_u8(pixels[[t, c, y as usize, x as usize]] as f64);
        Rgb([p(0), p(1), p(2)])
    })
}

fn overlay(rgb: &RgbImage, heat: &GazeHeatmap, t: usize, valid: bool) -> RgbImage {
    if !valid {
        return RgbImage::new(rgb.width(), rgb.height());
    }
    RgbImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let c = jet(heat.values[[t, y as usize, x as usize]].clamp(0.0, 1.0));
        let px = rgb.get_pixel(x, y);
        Rgb(std::array::from_fn(|i| to_u8(0.5 * px[i] as f64 / 255.0 + 0.5 * c[i])))
    })
}

fn masked(rgb: &RgbImage, plan: &MaskPlan, grid: &TokenGrid, t: usize) -> RgbImage {
    let g = grid.geometry;
    let row = t / g.frames;
    let mut out = rgb.clone();
    for s in 0..grid.spatial() {
        if !plan.mask[[row, s]] {
            continue;
        }
        let (r, c) = (s / grid.cols, s % grid.cols);
        for y in r * g.height..(r + 1) * g.height {
            for x in c * g.width..(c + 1) * g.width {
                out.put_pixel(x as u32, y as u32, MASK_GRAY);
            }
        }
    }
    out
}

fn side_by_side(panels: &[RgbImage]) -> RgbImage {
    let (w, h) = (panels[0].width(), panels[0].height());
    let mut out = RgbImage::new(w * panels.len() as u32, h);
    for (i, p) in panels.iter().enumerate() {
        image::imageops::replace(&mut out, p, (i as u32 * w) as i64, 0);
    }
    out
}

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn reconstruction(
    ckpt: &Checkpoint,
    clip: &VideoClip,
    plan: &MaskPlan,
) -> Result<Array4<f32>, CliError> {
    let cfg = &ckpt.model_config;
    let model = MaskedAutoencoder::new(cfg, DType::F32, 0)?;
    ckpt.restore_params(model.params())?;
    let tokens = clips_to_tokens(std::slice::from_ref(clip), cfg, DType::F32)?;
    let pred = model
        .forward(&tokens, std::slice::from_ref(plan))
        .and_then(|p| Ok(p.squeeze(0)?.to_vec2::<f32>()?))?;
    let mut rows: Array2<f32> = patchify(&clip.pixels, cfg.token_geometry)?;
    for (values, idx) in pred.iter().zip(plan.masked_indices()) {
        for (dst, &v) in rows.row_mut(idx).iter_mut().zip(values) {
            *dst = v;
        }
    }
    Ok(unpatchify(&rows, cfg.token_geometry, clip.shape())?)
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let v = View(cfg);
    let rho: f64 = v.get("rho")?;
    let tau: f64 = v.get("tau")?;
    let master: u64 = v.get("seed")?;
    let split: Split = v.get("split")?;
    let video = v.required("video")?.to_string();
    let start: usize = v.get("start")?;
    let ckpt = v
        .optional::<PathBuf>("checkpoint")?
        .map(Checkpoint::load)
        .transpose()?;
    if let Some(c) = &ckpt {
        if c.kind != CheckpointKind::Pretrain {
            return Err(CliError::Usage("reconstruction previews need a pre-training checkpoint".into()));
        }
    }
    let model_cfg = match &ckpt {
        Some(c) => c.model_config.clone(),
        None => ModelConfig::from_preset(v.get::<Preset>("preset")?),
    };
    let (t, _, h, w) = model_cfg.input_shape;
    let sigma = v.optional("sigma")?.unwrap_or_else(|| default_sigma(w));

    let manifest = load_manifest(v.required("data")?, split)?;
    if !manifest.video_ids().contains(&video.as_str()) {
        return Err(CliError::Usage(format!("video `{video}` is not in the {split} split")));
    }
    let clip = sample_clip(&manifest, &video, start, t, (h, w)).map_err(|e| match e {
        gazemae::Error::Range(m) => CliError::Usage(format!("invalid clip locator: {m}")),
        other => other.into(),
    })?;

    let grid = model_cfg.grid()?;
    let heat = render_heatmap(&clip.gaze_points, h, w, sigma)?;
    let mass = accumulate_per_token(&heat, model_cfg.token_geometry)?;
    let gaze_plan = plan_for(MaskStrategy::Gaze, &mass, rho, tau, seed::derive(master, 1))?;
    let random_plan = plan_for(MaskStrategy::Random, &mass, rho, tau, seed::derive(master, 2))?;

    let dir = run_dir(std::path::Path::new(v.required("out")?), "viz-mask", master, None)?;
    write_echo(&dir.join("config.txt"), cfg)?;
    write_text(&dir.join("mask_gaze.txt"), &gaze_plan.to_rle())?;
    write_text(&dir.join("mask_random.txt"), &random_plan.to_rle())?;
    let mut csv = Vec::new();
    writeln!(csv, "t,s,d").unwrap();
    for ((r, s), d) in mass.d.indexed_iter() {
        writeln!(csv, "{r},{s},{d}").unwrap();
    }
    write_text(&dir.join("gaze_mass.csv"), &String::from_utf8(csv).unwrap())?;

    let recon = match &ckpt {
        Some(c) => Some(reconstruction(c, &clip, &gaze_plan)?),
        None => None,
    };
    for f in 0..t {
        let valid = clip.gaze_points[f].valid;
        if !valid {
            log::warn!("frame {} of {video} has no valid gaze; heatmap panel left black", start + f);
        }
        let rgb = frame_rgb(&clip.pixels, f);
        let panels = [
            rgb.clone(),
            overlay(&rgb, &heat, f, valid),
            masked(&rgb, &random_plan, &grid, f),
            masked(&rgb, &gaze_plan, &grid, f),
        ];
        save(&side_by_side(&panels), &dir.join(format!("frame_{f:02}.png")))?;
        if let Some(pixels) = &recon {
            let panels = [rgb.clone(), masked(&rgb, &gaze_plan, &grid, f), frame_rgb(pixels, f)];
            save(&side_by_side(&panels), &dir.join(format!("recon_{f:02}.png")))?;
        }
    }
    println!("{}", dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
    }
}
