//! Checkpoints as safetensors files: parameter tensors under `param.<name>`,
//! AdamW moments under `adam_m.<name>` / `adam_v.<name>`, and JSON metadata
//! carrying the format version, encoder config and training state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualStreamModel, EncoderConfig};
use crate::objectives::LossConfig;
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::trainer::{TrainConfig, TrainState};

pub const FORMAT: &str = "lexlat-checkpoint";
pub const VERSION: u32 = 1;

/// Everything besides the model weights and optimizer moments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: Option<TrainConfig>,
    pub loss: Option<LossConfig>,
    pub state: Option<TrainState>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: DualStreamModel,
    pub meta: CheckpointMeta,
    pub optimizer: Option<AdamW>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    config: AdamWConfig,
    steps: BTreeMap<String, u64>,
}

fn ck_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
    Ok(values.iter().flat_map(|v| v.to_le_bytes()).collect())
}

fn bytes_f32(data: &[u8]) -> Vec<f32> {
    data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn save_checkpoint(model: &DualStreamModel, meta: &CheckpointMeta, optimizer: Option<&AdamW>, path: &Path) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for p in model.params().params() {
        buffers.push((format!("param.{}", p.name), p.var.dims().to_vec(), f32_bytes(p.var.as_tensor())?));
    }
    let mut info = HashMap::new();
    info.insert("format".to_string(), FORMAT.to_string());
    info.insert("version".to_string(), VERSION.to_string());
    info.insert("encoder".to_string(), serde_json::to_string(model.config())?);
    info.insert("meta".to_string(), serde_json::to_string(meta)?);
    if let Some(opt) = optimizer {
        let mut steps = BTreeMap::new();
        for (name, m) in opt.state() {
            buffers.push((format!("adam_m.{name}"), m.m.dims().to_vec(), f32_bytes(&m.m)?));
            buffers.push((format!("adam_v.{name}"), m.v.dims().to_vec(), f32_bytes(&m.v)?));
            steps.insert(name.clone(), m.steps);
        }
        info.insert("adam".to_string(), serde_json::to_string(&AdamMeta { config: opt.config, steps })?);
    }
    let views = buffers
        .iter()
        .map(|(name, shape, data)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), data).map_err(ck_err)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(views, Some(info), path).map_err(ck_err)
}

/// Field-by-field differences between two encoder configs.
fn config_diff(stored: &EncoderConfig, expected: &EncoderConfig) -> Result<Vec<String>> {
    let a = serde_json::to_value(stored)?;
    let b = serde_json::to_value(expected)?;
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return Ok(vec!["encoder config is not an object".into()]);
    };
    Ok(a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, expected {}", b.get(k).map_or("<missing>".into(), |x| x.to_string())))
        .collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_inner(path, None)
}

/// Like [`load_checkpoint`] but fails with a diagnostic if the stored encoder
/// config differs from `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &EncoderConfig) -> Result<Checkpoint> {
    load_inner(path, Some(expected))
}

fn load_inner(path: &Path, expected: Option<&EncoderConfig>) -> Result<Checkpoint> {
    let buffer = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&buffer).map_err(ck_err)?;
    let info = header.metadata().clone().unwrap_or_default();
    let get = |k: &str| info.get(k).ok_or_else(|| Error::Checkpoint(format!("{}: missing '{k}' metadata", path.display())));
    if get("format")? != FORMAT {
        return Err(Error::Checkpoint(format!("{}: not a {FORMAT} file", path.display())));
    }
    let version: u32 = get("version")?.parse().map_err(ck_err)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("{}: version {version}, this build reads version {VERSION}", path.display())));
    }
    let config: EncoderConfig = serde_json::from_str(get("encoder")?)?;
    if let Some(expected) = expected {
        let diff = config_diff(&config, expected)?;
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!("config mismatch in {}: {}", path.display(), diff.join("; "))));
        }
    }
    let meta: CheckpointMeta = serde_json::from_str(get("meta")?)?;

    let tensors = SafeTensors::deserialize(&buffer).map_err(ck_err)?;
    let model = DualStreamModel::new(config, 0)?;
    let mut values = BTreeMap::new();
    for p in model.params().params() {
        let view = tensors.tensor(&format!("param.{}", p.name)).map_err(ck_err)?;
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{}: expected f32", p.name)));
        }
        values.insert(p.name.clone(), (view.shape().to_vec(), bytes_f32(view.data())));
    }
    let n_params = tensors.names().iter().filter(|n| n.starts_with("param.")).count();
    if n_params != values.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {n_params} parameters, model has {}", values.len())));
    }
    model.params().load(&values)?;

    let optimizer = match info.get("adam") {
        None => None,
        Some(raw) => {
            let adam: AdamMeta = serde_json::from_str(raw)?;
            let mut state = BTreeMap::new();
            for (name, steps) in adam.steps {
                let load = |prefix: &str| -> Result<Tensor> {
                    let view = tensors.tensor(&format!("{prefix}.{name}")).map_err(ck_err)?;
                    Ok(Tensor::from_vec(bytes_f32(view.data()), view.shape(), &Device::Cpu)?)
                };
                state.insert(name.clone(), Moments { m: load("adam_m")?, v: load("adam_v")?, steps });
            }
            Some(AdamW::restore(adam.config, state))
        }
    };
    Ok(Checkpoint { model, meta, optimizer })
}
