//! Versioned single-file checkpoints.
//!
//! A checkpoint is a safetensors file. Tensors:
//!
//! - `param.<name>`: model parameters under their canonical dotted names
//! - `adam.m.<name>`, `adam.v.<name>`: AdamW first and second moments
//!
//! String metadata:
//!
//! | key            | value                                           |
//! |----------------|-------------------------------------------------|
//! | `format`       | `gazemae-checkpoint`                            |
//! | `version`      | `1`                                             |
//! | `kind`         | `pretrain` or `finetune`                        |
//! | `model_config` | JSON of [`ModelConfig`]                         |
//! | `train_config` | JSON of the training configuration              |
//! | `state`        | JSON of [`TrainingState`] (epoch, step, seed)   |
//! | `optimizer`    | JSON of [`AdamWConfig`] plus its step, optional |

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::optim::{AdamW, AdamWConfig};

pub const FORMAT: &str = "gazemae-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

/// Position of a training run. Every random stream of a run is derived from
/// `(seed, step)`, so these fields are the complete RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: u64,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl HostTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let bytes = match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        };
        Ok(Self {
            dtype: t.dtype(),
            shape: t.dims().to_vec(),
            bytes,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = match self.dtype {
            DType::F32 => {
                let v: Vec<f32> = self
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &Device::Cpu)?
            }
            DType::F64 => {
                let v: Vec<f64> = self
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        };
        Ok(t)
    }

    fn st_dtype(&self) -> Dtype {
        match self.dtype {
            DType::F64 => Dtype::F64,
            _ => Dtype::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, HostTensor>,
    pub second_moment: BTreeMap<String, HostTensor>,
}

impl OptimizerState {
    pub fn capture(opt: &AdamW) -> Result<Self> {
        let host = |m: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, HostTensor>> {
            m.iter()
                .map(|(k, t)| Ok((k.clone(), HostTensor::from_tensor(t)?)))
                .collect()
        };
        Ok(Self {
            config: opt.config,
            step: opt.step,
            first_moment: host(&opt.first_moment)?,
            second_moment: host(&opt.second_moment)?,
        })
    }

    pub fn restore(&self) -> Result<AdamW> {
        let dev = |m: &BTreeMap<String, HostTensor>| -> Result<BTreeMap<String, Tensor>> {
            m.iter().map(|(k, h)| Ok((k.clone(), h.to_tensor()?))).collect()
        };
        Ok(AdamW {
            config: self.config,
            step: self.step,
            first_moment: dev(&self.first_moment)?,
            second_moment: dev(&self.second_moment)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model_config: ModelConfig,
    pub train_config: serde_json::Value,
    pub state: TrainingState,
    pub params: BTreeMap<String, HostTensor>,
    pub optimizer: Option<OptimizerState>,
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn capture(
        kind: CheckpointKind,
        model_config: &ModelConfig,
        train_config: serde_json::Value,
        state: TrainingState,
        params: &ParamStore,
        optimizer: Option<&AdamW>,
    ) -> Result<Self> {
        let params = params
            .iter()
            .map(|(k, v)| Ok((k.clone(), HostTensor::from_tensor(v.as_tensor())?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            kind,
            model_config: model_config.clone(),
            train_config,
            state,
            params,
            optimizer: optimizer.map(OptimizerState::capture).transpose()?,
        })
    }

    /// Copies every parameter of `store` from this checkpoint.
    pub fn restore_params(&self, store: &ParamStore) -> Result<()> {
        for name in store.names() {
            let host = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")))?;
            store.assign(name, &host.to_tensor()?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut entries: Vec<(String, &HostTensor)> = self
            .params
            .iter()
            .map(|(k, v)| (format!("param.{k}"), v))
            .collect();
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), VERSION.to_string());
        meta.insert("kind".to_string(), json(&self.kind)?.trim_matches('"').to_string());
        meta.insert("model_config".to_string(), json(&self.model_config)?);
        meta.insert("train_config".to_string(), json(&self.train_config)?);
        meta.insert("state".to_string(), json(&self.state)?);
        if let Some(opt) = &self.optimizer {
            meta.insert(
                "optimizer".to_string(),
                json(&OptimizerMeta {
                    config: opt.config,
                    step: opt.step,
                })?,
            );
            entries.extend(opt.first_moment.iter().map(|(k, v)| (format!("adam.m.{k}"), v)));
            entries.extend(opt.second_moment.iter().map(|(k, v)| (format!("adam.v.{k}"), v)));
        }
        let views = entries
            .iter()
            .map(|(k, h)| {
                TensorView::new(h.st_dtype(), h.shape.clone(), &h.bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("{k}: {e:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize_to_file(views, &Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e:?}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| bad(format!("{e:?}")))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("missing metadata".into()))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        if field("format")? != FORMAT {
            return Err(bad("not a checkpoint file".into()));
        }
        let version: u32 = field("version")?.parse().map_err(|_| bad("bad version".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let parse = |k: &str| -> Result<serde_json::Value> {
            serde_json::from_str(&field(k)?).map_err(|e| bad(format!("`{k}`: {e}")))
        };
        let kind: CheckpointKind = serde_json::from_value(serde_json::Value::String(field("kind")?))
            .map_err(|e| bad(e.to_string()))?;
        let model_config: ModelConfig =
            serde_json::from_value(parse("model_config")?).map_err(|e| bad(e.to_string()))?;
        let state: TrainingState =
            serde_json::from_value(parse("state")?).map_err(|e| bad(e.to_string()))?;
        let train_config = parse("train_config")?;
        let opt_meta: Option<OptimizerMeta> = match meta.get("optimizer") {
            Some(s) => Some(serde_json::from_str(s).map_err(|e| bad(e.to_string()))?),
            None => None,
        };

        let tensors = SafeTensors::deserialize(&buf).map_err(|e| bad(format!("{e:?}")))?;
        let mut params = BTreeMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, view) in tensors.tensors() {
            let dtype = match view.dtype() {
                Dtype::F32 => DType::F32,
                Dtype::F64 => DType::F64,
                other => return Err(bad(format!("`{name}` has unsupported dtype {other:?}"))),
            };
            let host = HostTensor {
                dtype,
                shape: view.shape().to_vec(),
                bytes: view.data().to_vec(),
            };
            if let Some(k) = name.strip_prefix("param.") {
                params.insert(k.to_string(), host);
            } else if let Some(k) = name.strip_prefix("adam.m.") {
                first.insert(k.to_string(), host);
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                second.insert(k.to_string(), host);
            } else {
                return Err(bad(format!("unexpected tensor `{name}`")));
            }
        }
        let optimizer = opt_meta.map(|m| OptimizerState {
            config: m.config,
            step: m.step,
            first_moment: first,
            second_moment: second,
        });
        Ok(Self {
            kind,
            model_config,
            train_config,
            state,
            params,
            optimizer,
        })
    }
}
