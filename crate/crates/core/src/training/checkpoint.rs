//! Checkpoint directory layout:
//!
//! ```text
//! manifest.json          architecture, loss weights, EMA settings
//! params.safetensors     weights used for inference (averaged when `ema`)
//! raw.safetensors        } full training state, present when
//! ema.safetensors        } `has_training_state`
//! adam_m.safetensors     }
//! adam_v.safetensors     }
//! state.json             }
//! ```

use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sdtnet_tensor::{Float, ParamStore, ShapeError, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::step::TrainingState;
use crate::networks::{NetworkBundle, NetworkConfig};
use crate::objectives::LossWeights;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub anatomy_channels: usize,
    pub n_z: usize,
    pub height: usize,
    pub width: usize,
    pub weights: LossWeights,
    pub ema_decay: f64,
    /// Whether `params.safetensors` holds the parameter average.
    pub ema: bool,
    pub has_training_state: bool,
    pub step: u64,
    pub epoch: usize,
    pub network: NetworkConfig,
}

impl Manifest {
    pub fn new(network: &NetworkConfig, weights: LossWeights, ema_decay: f64, ema: bool) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            anatomy_channels: network.anatomy_channels,
            n_z: network.n_z,
            height: network.height,
            width: network.width,
            weights,
            ema_decay,
            ema,
            has_training_state: false,
            step: 0,
            epoch: 0,
            network: network.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateCounters {
    step: u64,
    epoch: usize,
    /// `None` before the first validation.
    best_val_loss: Option<f64>,
    evals_without_improvement: usize,
    critic_low_streak: usize,
    adam_steps: Vec<u64>,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

fn write_store<F: Float>(path: &Path, store: &ParamStore<F>) -> Result<()> {
    let wide = std::mem::size_of::<F>() == 8;
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(_, name, t)| {
            let data = if wide {
                t.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect()
            } else {
                t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect()
            };
            (name.to_string(), t.shape().to_vec(), data)
        })
        .collect();
    let dtype = if wide { Dtype::F64 } else { Dtype::F32 };
    let views = bytes
        .iter()
        .map(|(n, s, d)| Ok((n.clone(), TensorView::new(dtype, s.clone(), d).map_err(|e| ckpt_err(path, e))?)))
        .collect::<Result<Vec<_>>>()?;
    let buf = safetensors::serialize(views, &None).map_err(|e| ckpt_err(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads tensors into a store laid out like `like`; names and shapes must match.
fn read_store<F: Float>(path: &Path, like: &ParamStore<F>) -> Result<ParamStore<F>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| ckpt_err(path, e))?;
    let mut loaded = ParamStore::new();
    for (name, view) in st.tensors() {
        let data: Vec<F> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
            other => return Err(ckpt_err(path, format!("unsupported dtype {other:?} for {name}"))),
        };
        loaded.add(name, Tensor::new(view.shape(), data)?);
    }
    if loaded.len() != like.len() {
        return Err(Error::Shape(ShapeError::new(format!(
            "{}: {} tensors stored, architecture has {}",
            path.display(),
            loaded.len(),
            like.len()
        ))));
    }
    let mut out = like.clone();
    out.load_from(&loaded)?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ckpt_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| ckpt_err(path, e))
}

/// Writes inference weights only.
pub fn save_weights<F: Float>(dir: &Path, manifest: &Manifest, params: &ParamStore<F>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = manifest.clone();
    m.has_training_state = false;
    write_store(&dir.join("params.safetensors"), params)?;
    write_json(&dir.join("manifest.json"), &m)
}

/// Writes the full training state; inference weights are the average.
pub fn save_checkpoint<F: Float>(dir: &Path, manifest: &Manifest, state: &TrainingState<F>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = manifest.clone();
    m.ema = true;
    m.has_training_state = true;
    m.step = state.step;
    m.epoch = state.epoch;
    write_store(&dir.join("params.safetensors"), &state.ema)?;
    write_store(&dir.join("raw.safetensors"), &state.raw)?;
    write_store(&dir.join("ema.safetensors"), &state.ema)?;
    write_store(&dir.join("adam_m.safetensors"), &state.adam.m)?;
    write_store(&dir.join("adam_v.safetensors"), &state.adam.v)?;
    let c = state.adam.config;
    let counters = StateCounters {
        step: state.step,
        epoch: state.epoch,
        best_val_loss: state.best_val_loss.is_finite().then_some(state.best_val_loss),
        evals_without_improvement: state.evals_without_improvement,
        critic_low_streak: state.critic_low_streak,
        adam_steps: state.adam.steps.clone(),
        adam_beta1: c.beta1,
        adam_beta2: c.beta2,
        adam_eps: c.eps,
    };
    write_json(&dir.join("state.json"), &counters)?;
    write_json(&dir.join("manifest.json"), &m)
}

pub struct Checkpoint<F> {
    pub manifest: Manifest,
    /// Architecture with the inference weights.
    pub bundle: NetworkBundle<F>,
    pub state: Option<TrainingState<F>>,
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join("manifest.json"))?;
    if m.format_version != FORMAT_VERSION {
        return Err(ckpt_err(dir, format!("unsupported format version {}", m.format_version)));
    }
    if m.anatomy_channels != m.network.anatomy_channels || m.n_z != m.network.n_z {
        return Err(ckpt_err(dir, "manifest summary disagrees with its network section"));
    }
    Ok(m)
}

/// Loads a checkpoint. With `expected`, the stored architecture must match it.
pub fn load_checkpoint<F: Float>(dir: &Path, expected: Option<&NetworkConfig>) -> Result<Checkpoint<F>> {
    let manifest = load_manifest(dir)?;
    if let Some(e) = expected {
        if e != &manifest.network {
            return Err(Error::Shape(ShapeError::new(format!(
                "checkpoint has C_a={}, n_z={}, {}x{}; expected C_a={}, n_z={}, {}x{}",
                manifest.anatomy_channels,
                manifest.n_z,
                manifest.height,
                manifest.width,
                e.anatomy_channels,
                e.n_z,
                e.height,
                e.width
            ))));
        }
    }
    let mut bundle = NetworkBundle::<F>::new(manifest.network.clone(), 0)
        .map_err(|e| ckpt_err(dir, format!("invalid stored architecture: {e}")))?;
    bundle.params = read_store(&dir.join("params.safetensors"), &bundle.params)?;
    let state = if manifest.has_training_state {
        let c: StateCounters = read_json(&dir.join("state.json"))?;
        let like = &bundle.params;
        if c.adam_steps.len() != like.len() {
            return Err(ckpt_err(dir, "optimiser step counts do not match the parameters"));
        }
        Some(TrainingState {
            raw: read_store(&dir.join("raw.safetensors"), like)?,
            ema: read_store(&dir.join("ema.safetensors"), like)?,
            adam: Adam {
                config: AdamConfig {
                    beta1: c.adam_beta1,
                    beta2: c.adam_beta2,
                    eps: c.adam_eps,
                },
                m: read_store(&dir.join("adam_m.safetensors"), like)?,
                v: read_store(&dir.join("adam_v.safetensors"), like)?,
                steps: c.adam_steps,
            },
            step: c.step,
            epoch: c.epoch,
            best_val_loss: c.best_val_loss.unwrap_or(f64::INFINITY),
            evals_without_improvement: c.evals_without_improvement,
            critic_low_streak: c.critic_low_streak,
        })
    } else {
        None
    };
    Ok(Checkpoint { manifest, bundle, state })
}

/// Replaces the parameters of `bundle` with the checkpoint's inference weights.
pub fn load_weights_into<F: Float>(dir: &Path, bundle: &mut NetworkBundle<F>) -> Result<Manifest> {
    let manifest = load_manifest(dir)?;
    bundle.params = read_store(&dir.join("params.safetensors"), &bundle.params)?;
    Ok(manifest)
}
