use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::geometry::TokenGrid;

/// Fixed sinusoidal space-time position table of shape `(L, dim)`.
///
/// The encoding is separable: one sin/cos table per axis (t, row, col),
/// summed. Channel pair `j` of axis `a` uses frequency
/// `10000^(-(3j + a) / (3 dim / 2))`, so the three axes never share a
/// frequency and `(t, row, col)` permutations do not alias.
pub fn sincos_table(grid: &TokenGrid, dim: usize, dtype: DType) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("position encoding width {dim} must be even")));
    }
    let pairs = dim / 2;
    let span = (3 * pairs) as f64;
    let freq = |j: usize, axis: usize| 10000f64.powf(-((3 * j + axis) as f64) / span);
    let mut table = Vec::with_capacity(grid.len() * dim);
    for index in 0..grid.len() {
        let (t, r, c) = grid.coords(index);
        for j in 0..pairs {
            let (mut s, mut co) = (0.0, 0.0);
            for (axis, pos) in [t, r, c].into_iter().enumerate() {
                let angle = pos as f64 * freq(j, axis);
                s += angle.sin();
                co += angle.cos();
            }
            table.push(s);
            table.push(co);
        }
    }
    Ok(Tensor::from_vec(table, (grid.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}
