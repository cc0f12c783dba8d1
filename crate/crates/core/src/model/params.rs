use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform over `(fan_in, fan_out)`.
    XavierUniform { fan_in: usize, fan_out: usize },
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Trainable parameters keyed by canonical dotted names.
///
/// Initial values depend only on `(seed, name)`, not on construction order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` defined twice")));
        }
        let n: usize = shape.iter().product();
        let mut rng = seed::rng(seed::derive(self.seed, name_hash(name)));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites the parameter `name` with `values`.
    pub fn assign(&self, name: &str, values: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != values.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                values.dims()
            )));
        }
        var.set(&values.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(DType::F32, 5);
        let wa = a.create("x.weight", &[3, 4], Init::Normal(0.02)).unwrap();
        a.create("y.weight", &[2], Init::Normal(0.02)).unwrap();
        let mut b = ParamStore::new(DType::F32, 5);
        b.create("y.weight", &[2], Init::Normal(0.02)).unwrap();
        let wb = b.create("x.weight", &[3, 4], Init::Normal(0.02)).unwrap();
        let va: Vec<f32> = wa.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = wb.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.count(), 14);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(DType::F32, 0);
        s.create("a", &[1], Init::Zeros).unwrap();
        assert!(s.create("a", &[1], Init::Zeros).is_err());
    }
}
