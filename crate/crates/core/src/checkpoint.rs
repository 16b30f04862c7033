//! Checkpoint files.
//!
//! Layout: the 8-byte magic `AVDFCKPT`, a little-endian `u32` header length,
//! a JSON header, then the tensor blobs back to back. The header records the
//! model config, stage, step, a digest of the RNG position, and a table of
//! tensors with their shapes and byte offsets. Blobs default to `f64` so a
//! resumed run is bit-identical to an uninterrupted one; `f32` halves the
//! size for models that are only evaluated.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::corpus::write_atomic;
use crate::error::{AvdfError, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Matrix;
use crate::train::{Adam, EarlyStop, Stage, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"AVDFCKPT";
pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EarlyStopMeta {
    best_step: u64,
    best_of1: f64,
    best_loss: f64,
    bad_evals: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: String,
    stage: Stage,
    step: u64,
    seed: u64,
    rng_digest: String,
    dtype: Dtype,
    model: ModelConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    adam_step: u64,
    #[serde(default)]
    stopped: bool,
    #[serde(default)]
    early_stop: Option<EarlyStopMeta>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Digest of the RNG position. All training randomness derives from the
/// seed and step, so these two values pin it down completely.
pub fn rng_digest(seed: u64, step: u64) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(step.to_le_bytes());
    hex::encode(h.finalize())
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train_config: Option<TrainConfig>,
    pub metadata: serde_json::Value,
}

pub fn save(
    path: &Path,
    state: &TrainState,
    train_config: Option<&TrainConfig>,
    dtype: Dtype,
    metadata: serde_json::Value,
) -> Result<()> {
    let mut tensors: Vec<(String, &Matrix)> = Vec::new();
    for (id, name, value) in state.model.params.iter() {
        tensors.push((format!("param/{name}"), value));
        if state.adam.step > 0 {
            tensors.push((format!("adam.m/{name}"), &state.adam.m[id.0]));
            tensors.push((format!("adam.v/{name}"), &state.adam.v[id.0]));
        }
    }
    if let Some(es) = &state.early_stop {
        for (_, name, value) in es.best_params.iter() {
            tensors.push((format!("best/{name}"), value));
        }
    }

    let mut blobs = Vec::new();
    let mut table = Vec::with_capacity(tensors.len());
    for (name, m) in &tensors {
        table.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset: blobs.len(),
        });
        for &x in m.as_slice() {
            match dtype {
                Dtype::F64 => blobs.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => blobs.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    let seed = train_config.map_or(0, |t| t.seed);
    let header = Header {
        format_version: format!("{FORMAT_MAJOR}.{FORMAT_MINOR}"),
        stage: state.stage,
        step: state.step,
        seed,
        rng_digest: rng_digest(seed, state.step),
        dtype,
        model: state.model.config.clone(),
        train: train_config.cloned(),
        adam_step: state.adam.step,
        stopped: state.stopped,
        early_stop: state.early_stop.as_ref().map(|es| EarlyStopMeta {
            best_step: es.best_step,
            best_of1: es.best_of1,
            best_loss: es.best_loss,
            bad_evals: es.bad_evals,
        }),
        tensors: table,
        metadata,
    };
    let header = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + header.len() + blobs.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&blobs);
    write_atomic(path, &bytes)
}

fn parse<'b>(bytes: &'b [u8], path: &Path) -> Result<(Header, &'b [u8])> {
    let format = |reason: String| AvdfError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(format("not a checkpoint (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(12..12 + len).ok_or_else(|| AvdfError::Corrupt {
        path: path.to_path_buf(),
        reason: "header truncated".into(),
    })?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| format(format!("unreadable header: {e}")))?;
    let major = header
        .format_version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(format(format!(
            "unsupported format version {} (this build reads {FORMAT_MAJOR}.x)",
            header.format_version
        )));
    }
    if header.rng_digest != rng_digest(header.seed, header.step) {
        return Err(AvdfError::Corrupt {
            path: path.to_path_buf(),
            reason: "RNG digest does not match seed and step".into(),
        });
    }
    Ok((header, &bytes[12 + len..]))
}

fn read_tensor(blobs: &[u8], e: &TensorEntry, dtype: Dtype, path: &Path) -> Result<Matrix> {
    let w = dtype.width();
    let n = e.rows * e.cols;
    let raw = e
        .offset
        .checked_add(n * w)
        .and_then(|end| blobs.get(e.offset..end))
        .ok_or_else(|| AvdfError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("tensor {} runs past the end of the file", e.name),
        })?;
    let data = raw
        .chunks_exact(w)
        .map(|c| match dtype {
            Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
        })
        .collect();
    Matrix::from_vec(e.rows, e.cols, data)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| AvdfError::io(path, e))?;
    let (header, blobs) = parse(&bytes, path)?;
    let mut params = ParamStore::new();
    let mut best = ParamStore::new();
    let mut moments: Vec<(String, bool, Matrix)> = Vec::new();
    for e in &header.tensors {
        let m = read_tensor(blobs, e, header.dtype, path)?;
        match e.name.split_once('/') {
            Some(("param", n)) => {
                params.insert(n, m);
            }
            Some(("best", n)) => {
                best.insert(n, m);
            }
            Some(("adam.m", n)) => moments.push((n.to_string(), true, m)),
            Some(("adam.v", n)) => moments.push((n.to_string(), false, m)),
            _ => {
                return Err(AvdfError::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("unknown tensor {}", e.name),
                })
            }
        }
    }
    let model = Model::from_params(header.model.clone(), params)?;
    let mut adam = Adam::new(&model.params);
    adam.step = header.adam_step;
    for (name, is_m, m) in moments {
        let id = model.params.id(&name).ok_or_else(|| AvdfError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("optimizer state for unknown parameter {name}"),
        })?;
        if m.shape() != model.params.get(id).shape() {
            return Err(AvdfError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("optimizer state shape for {name}"),
            });
        }
        if is_m {
            adam.m[id.0] = m;
        } else {
            adam.v[id.0] = m;
        }
    }
    let early_stop = match header.early_stop {
        Some(meta) => Some(EarlyStop {
            best_step: meta.best_step,
            best_of1: meta.best_of1,
            best_loss: meta.best_loss,
            bad_evals: meta.bad_evals,
            best_params: Model::from_params(header.model.clone(), best)?.params,
        }),
        None => None,
    };
    Ok(Checkpoint {
        state: TrainState {
            stage: header.stage,
            model,
            adam,
            step: header.step,
            early_stop,
            stopped: header.stopped,
        },
        train_config: header.train,
        metadata: header.metadata,
    })
}

/// Load a checkpoint's weights for inference: the best validated
/// parameters when recorded, the latest otherwise. With `expected`, a
/// checkpoint of a different architecture is a configuration error.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, Stage)> {
    let ckpt = load(path)?;
    let model = ckpt.state.best_model();
    if let Some(want) = expected {
        if !want.same_architecture(&model.config) {
            return Err(AvdfError::Config(format!(
                "{} holds a different architecture than requested",
                path.display()
            )));
        }
    }
    Ok((model, ckpt.state.stage))
}
