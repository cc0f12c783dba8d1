use candle_core::{Tensor, Var, D};

use super::params::{Init, ParamStore};
use crate::error::Result;

const LN_EPS: f64 = 1e-6;

/// Numerically stable softmax over the last dimension. The subtracted row
/// maximum is detached; softmax is invariant to it so gradients are unchanged.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.create(
            &format!("{name}.weight"),
            &[d_out, d_in],
            Init::XavierUniform {
                fan_in: d_in,
                fan_out: d_out,
            },
        )?;
        let bias = store.create(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// Applies `x W^T + b` over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let flat = x.reshape(((), d_in))?;
        let y = flat
            .matmul(&self.weight.t()?)?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.create(&format!("{name}.weight"), &[dim], Init::Ones)?,
            beta: store.create(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim)?,
            heads,
        })
    }

    /// `x`: (B, L, F)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, f) = x.dims3()?;
        let hd = f / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, f))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s[1][0] - 1.0).abs() < 1e-12);
        let ls: Vec<Vec<f64>> = log_softmax_last(&x).unwrap().to_vec2().unwrap();
        assert!((ls[0][2] - s[0][2].ln()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut store = ParamStore::new(DType::F64, 0);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn linear_handles_batched_input() {
        let mut store = ParamStore::new(DType::F32, 1);
        let lin = Linear::new(&mut store, "l", 5, 3).unwrap();
        let x = Tensor::ones((2, 7, 5), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 7, 3]);
    }
}
