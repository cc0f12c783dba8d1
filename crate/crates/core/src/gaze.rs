//! Gaze heatmaps and per-token gaze mass.

use ndarray::{Array2, Array3};

use crate::data::GazePoint;
use crate::error::{Error, Result};
use crate::geometry::TokenGeometry;

/// Default Gaussian width in pixels at 224x224 (one token width).
pub const DEFAULT_SIGMA_224: f64 = 16.0;

/// `T x H x W` non-negative gaze field. Valid frames peak at 1 at the gaze
/// point; frames without a valid gaze sample are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeHeatmap {
    pub values: Array3<f64>,
    pub sigma: f64,
}

/// Gaze mass `d[t, s]` of each space-time token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGazeMass {
    pub d: Array2<f64>,
    pub geometry: TokenGeometry,
}

/// Scales the default sigma to a frame of the given width.
pub fn default_sigma(width: usize) -> f64 {
    DEFAULT_SIGMA_224 * width as f64 / 224.0
}

/// Renders an unnormalized Gaussian around each valid gaze point.
///
/// Pixel `(y, x)` has its center at normalized position
/// `((x + 0.5) / W, (y + 0.5) / H)`.
pub fn render_heatmap(
    gaze_points: &[GazePoint],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<GazeHeatmap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let mut values = Array3::<f64>::zeros((gaze_points.len(), height, width));
    let denom = 2.0 * sigma * sigma;
    for (mut frame, gaze) in values.outer_iter_mut().zip(gaze_points) {
        if !gaze.valid {
            continue;
        }
        let gx = gaze.x_norm * width as f64 - 0.5;
        let gy = gaze.y_norm * height as f64 - 0.5;
        let col: Vec<f64> = (0..width).map(|x| (x as f64 - gx).powi(2)).collect();
        for ((y, x), v) in frame.indexed_iter_mut() {
            *v = (-(col[x] + (y as f64 - gy).powi(2)) / denom).exp();
        }
    }
    Ok(GazeHeatmap { values, sigma })
}

/// Sums heatmap values over every token's `T_c x H_c x W_c` pixel cube.
pub fn accumulate_per_token(
    heatmap: &GazeHeatmap,
    geometry: TokenGeometry,
) -> Result<TokenGazeMass> {
    let (t, h, w) = heatmap.values.dim();
    let grid = geometry.grid(t, h, w)?;
    let mut d = Array2::<f64>::zeros((grid.temporal, grid.spatial()));
    for ((f, y, x), &v) in heatmap.values.indexed_iter() {
        let s = (y / geometry.height) * grid.cols + x / geometry.width;
        d[[f / geometry.frames, s]] += v;
    }
    Ok(TokenGazeMass { d, geometry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_force(values: &Array3<f64>, g: TokenGeometry) -> Array2<f64> {
        let (t, h, w) = values.dim();
        let (nr, rows, cols) = (t / g.frames, h / g.height, w / g.width);
        let mut d = Array2::zeros((nr, rows * cols));
        for tt in 0..nr {
            for r in 0..rows {
                for c in 0..cols {
                    let mut sum = 0.0;
                    for f in tt * g.frames..(tt + 1) * g.frames {
                        for y in r * g.height..(r + 1) * g.height {
                            for x in c * g.width..(c + 1) * g.width {
                                sum += values[[f, y, x]];
                            }
                        }
                    }
                    d[[tt, r * cols + c]] = sum;
                }
            }
        }
        d
    }

    #[test]
    fn peak_is_one_at_gaze_pixel() {
        for sigma in [0.5, 4.0, 16.0] {
            let hm = render_heatmap(&[GazePoint::at_pixel(30, 41, 64, 64)], 64, 64, sigma).unwrap();
            assert_eq!(hm.values[[0, 30, 41]], 1.0);
            let max = hm.values.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn invalid_frame_is_zero() {
        let pts = [GazePoint::at_pixel(3, 3, 16, 16), GazePoint::invalid()];
        let hm = render_heatmap(&pts, 16, 16, 2.0).unwrap();
        assert!(hm.values.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 0.0));
        assert!(hm.values.index_axis(ndarray::Axis(0), 0).iter().any(|&v| v > 0.0));
    }

    #[test]
    fn one_sigma_step_value() {
        let hm = render_heatmap(&[GazePoint::at_pixel(112, 112, 224, 224)], 224, 224, 16.0).unwrap();
        // exp(-16^2 / (2 * 16^2)) evaluated independently
        let expected = (-0.5f64).exp();
        assert!((hm.values[[0, 112, 128]] - expected).abs() < 1e-12);
        assert!((hm.values[[0, 112, 128]] - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        for sigma in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                render_heatmap(&[GazePoint::new(0.5, 0.5)], 8, 8, sigma),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn constant_field_fills_every_token() {
        let hm = GazeHeatmap {
            values: Array3::ones((10, 224, 224)),
            sigma: 1.0,
        };
        let mass = accumulate_per_token(&hm, TokenGeometry::new(2, 16, 16)).unwrap();
        assert_eq!(mass.d.dim(), (5, 196));
        assert!(mass.d.iter().all(|&v| v == 512.0));
    }

    #[test]
    fn delta_field_hits_one_token() {
        let mut values = Array3::zeros((4, 32, 32));
        // token (t=0, s=3): frames 0..2, rows 0..8, cols 24..32
        values[[1, 5, 27]] = 5.0;
        let hm = GazeHeatmap { values, sigma: 1.0 };
        let mass = accumulate_per_token(&hm, TokenGeometry::new(2, 8, 8)).unwrap();
        for ((t, s), &v) in mass.d.indexed_iter() {
            assert_eq!(v, if (t, s) == (0, 3) { 5.0 } else { 0.0 });
        }
    }

    #[test]
    fn indivisible_volume_is_shape_error() {
        let hm = GazeHeatmap {
            values: Array3::zeros((3, 32, 32)),
            sigma: 1.0,
        };
        assert!(matches!(
            accumulate_per_token(&hm, TokenGeometry::new(2, 8, 8)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matches_brute_force_on_random_fields() {
        let mut rng = crate::seed::rng(9);
        for g in [TokenGeometry::new(1, 4, 4), TokenGeometry::new(2, 8, 4), TokenGeometry::new(2, 16, 16)] {
            let values = Array3::from_shape_fn((4, 32, 48), |_| rng.gen::<f64>());
            let hm = GazeHeatmap { values, sigma: 1.0 };
            let d = accumulate_per_token(&hm, g).unwrap().d;
            let oracle = brute_force(&hm.values, g);
            for (a, b) in d.iter().zip(oracle.iter()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shifting_gaze_by_one_token_shifts_argmax() {
        let g = TokenGeometry::new(1, 16, 16);
        let argmax = |col: usize| {
            let hm = render_heatmap(&[GazePoint::at_pixel(88, col, 224, 224)], 224, 224, 16.0).unwrap();
            let d = accumulate_per_token(&hm, g).unwrap().d;
            d.row(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        for col in [40, 72, 104, 136] {
            assert_eq!(argmax(col + 16), argmax(col) + 1);
        }
    }

    proptest! {
        #[test]
        fn mass_is_conserved(x in 0.0f64..1.0, y in 0.0f64..1.0, sigma in 0.5f64..20.0) {
            let pts = [GazePoint::new(x, y), GazePoint::new(y, x)];
            let hm = render_heatmap(&pts, 32, 32, sigma).unwrap();
            let mass = accumulate_per_token(&hm, TokenGeometry::new(2, 8, 8)).unwrap();
            let total: f64 = hm.values.sum();
            let tokens: f64 = mass.d.sum();
            prop_assert!((total - tokens).abs() <= 1e-5 * total.max(1e-12));
            prop_assert!(hm.values.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn raising_a_pixel_raises_exactly_one_token(f in 0usize..4, y in 0usize..16, x in 0usize..16, bump in 0.01f64..3.0) {
            let mut rng = crate::seed::rng((f * 256 + y * 16 + x) as u64);
            let values = Array3::from_shape_fn((4, 16, 16), |_| rng.gen::<f64>());
            let g = TokenGeometry::new(2, 4, 4);
            let before = accumulate_per_token(&GazeHeatmap { values: values.clone(), sigma: 1.0 }, g).unwrap().d;
            let mut raised = values;
            raised[[f, y, x]] += bump;
            let after = accumulate_per_token(&GazeHeatmap { values: raised, sigma: 1.0 }, g).unwrap().d;
            let changed: Vec<_> = before.iter().zip(after.iter()).filter(|(a, b)| b > a).collect();
            prop_assert_eq!(changed.len(), 1);
        }
    }
}
