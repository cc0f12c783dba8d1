//! Space-time cube geometry shared by gaze accumulation, masking and the model.
//!
//! Tokens are enumerated time-major: token `(t, s)` has flat index
//! `t * N_s + s`, with spatial index `s = row * (W / W_c) + col`. Inside a token
//! pixels are laid out as `(frame, channel, y, x)`.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of one space-time cube `(T_c, H_c, W_c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGeometry {
    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }

    /// Splits a `T x H x W` volume into a token grid.
    pub fn grid(&self, frames: usize, height: usize, width: usize) -> Result<TokenGrid> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Shape(format!("degenerate token geometry {self:?}")));
        }
        if frames % self.frames != 0 || height % self.height != 0 || width % self.width != 0 {
            return Err(Error::Shape(format!(
                "volume {frames}x{height}x{width} is not divisible by token {}x{}x{}",
                self.frames, self.height, self.width
            )));
        }
        Ok(TokenGrid {
            geometry: *self,
            temporal: frames / self.frames,
            rows: height / self.height,
            cols: width / self.width,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub geometry: TokenGeometry,
    /// N_r
    pub temporal: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    /// N_s
    pub fn spatial(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.temporal * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per token for `channels` input channels.
    pub fn token_pixels(&self, channels: usize) -> usize {
        let g = self.geometry;
        g.frames * channels * g.height * g.width
    }

    /// (t, row, col) of a flat token index.
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let s = index % self.spatial();
        (index / self.spatial(), s / self.cols, s % self.cols)
    }
}

/// Rearranges `T x C x H x W` pixels into one row of `T_c*C*H_c*W_c` values per token.
pub fn patchify(pixels: &Array4<f32>, geometry: TokenGeometry) -> Result<Array2<f32>> {
    let (t, c, h, w) = pixels.dim();
    let grid = geometry.grid(t, h, w)?;
    let g = geometry;
    let mut out = Array2::<f32>::zeros((grid.len(), grid.token_pixels(c)));
    for (token, mut row) in out.outer_iter_mut().enumerate() {
        let (tt, rr, cc) = grid.coords(token);
        let mut k = 0;
        for dt in 0..g.frames {
            for ch in 0..c {
                for dy in 0..g.height {
                    for dx in 0..g.width {
                        row[k] = pixels[[tt * g.frames + dt, ch, rr * g.height + dy, cc * g.width + dx]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: &Array2<f32>,
    geometry: TokenGeometry,
    shape: (usize, usize, usize, usize),
) -> Result<Array4<f32>> {
    let (t, c, h, w) = shape;
    let grid = geometry.grid(t, h, w)?;
    if tokens.dim() != (grid.len(), grid.token_pixels(c)) {
        return Err(Error::Shape(format!(
            "expected {}x{} token matrix, got {:?}",
            grid.len(),
            grid.token_pixels(c),
            tokens.dim()
        )));
    }
    let g = geometry;
    let mut out = Array4::<f32>::zeros(shape);
    for (token, row) in tokens.outer_iter().enumerate() {
        let (tt, rr, cc) = grid.coords(token);
        let mut k = 0;
        for dt in 0..g.frames {
            for ch in 0..c {
                for dy in 0..g.height {
                    for dx in 0..g.width {
                        out[[tt * g.frames + dt, ch, rr * g.height + dy, cc * g.width + dx]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_arithmetic() {
        let grid = TokenGeometry::new(2, 16, 16).grid(10, 224, 224).unwrap();
        assert_eq!(grid.spatial(), 196);
        assert_eq!(grid.temporal, 5);
        assert_eq!(grid.len(), 980);
        assert_eq!(grid.token_pixels(3), 1536);
        assert!(TokenGeometry::new(2, 16, 16).grid(9, 224, 224).is_err());
    }

    #[test]
    fn patch_rows_hold_cube_pixels() {
        let pixels = Array4::from_shape_fn((4, 3, 8, 8), |(t, c, y, x)| {
            (t * 1000 + c * 100 + y * 10 + x) as f32
        });
        let tokens = patchify(&pixels, TokenGeometry::new(2, 4, 4)).unwrap();
        assert_eq!(tokens.dim(), (8, 2 * 3 * 16));
        // token (t=1, row=1, col=0): frames 2..4, y 4..8, x 0..4
        let row = tokens.row(4 + 2);
        assert_eq!(row[0], 2000.0 + 40.0);
        assert_eq!(row[row.len() - 1], 3000.0 + 200.0 + 73.0);
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(seed in 0u64..1000) {
            let pixels = Array4::from_shape_fn((4, 3, 8, 12), |(t, c, y, x)| {
                ((seed as usize + t * 7 + c * 13 + y * 17 + x * 19) % 97) as f32
            });
            let g = TokenGeometry::new(2, 4, 4);
            let back = unpatchify(&patchify(&pixels, g).unwrap(), g, pixels.dim()).unwrap();
            prop_assert_eq!(back, pixels);
        }
    }
}
