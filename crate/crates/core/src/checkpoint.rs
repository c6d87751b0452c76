//! Self-describing tensor files and model checkpoints.
//!
//! File layout: the 8-byte magic `LIMACCKP`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then raw
//! little-endian `f64` tensor data at the offsets the header lists.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{EncoderBundle, EncoderConfig, EncoderError};
use crate::model::{ActModel, ModelConfig, ModelError};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"LIMACCKP";
pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "limac-tensors";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported or corrupt checkpoint: {0}")]
    VersionMismatch(String),
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub format: String,
    pub version: u32,
    pub byte_order: String,
    /// Free-form metadata (configs, counters).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_tensor_file(
    path: &Path,
    meta: serde_json::Value,
    tensors: &[(String, &Array2<f64>)],
) -> Result<(), CheckpointError> {
    let mut offset = 0u64;
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
                offset,
            };
            offset += (t.len() * 8) as u64;
            e
        })
        .collect();
    let header = TensorHeader {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        byte_order: "little".into(),
        meta,
        tensors: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        let mut put = |b: &[u8]| w.write_all(b).map_err(io_err(&tmp));
        put(MAGIC)?;
        put(&FORMAT_VERSION.to_le_bytes())?;
        put(&(header.len() as u64).to_le_bytes())?;
        put(&header)?;
        for (_, t) in tensors {
            for v in t.iter() {
                put(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_tensor_file(path: &Path) -> Result<(TensorHeader, Vec<(String, Array2<f64>)>), CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let bad = |m: &str| CheckpointError::VersionMismatch(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(|_| bad("truncated version"))?;
    let version = u32::from_le_bytes(u32b);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(|_| bad("truncated header length"))?;
    let hlen = u64::from_le_bytes(u64b);
    if hlen > 1 << 30 {
        return Err(bad("implausible header length"));
    }
    let mut hbytes = vec![0u8; hlen as usize];
    r.read_exact(&mut hbytes).map_err(|_| bad("truncated header"))?;
    let header: TensorHeader =
        serde_json::from_slice(&hbytes).map_err(|e| CheckpointError::VersionMismatch(format!("header: {e}")))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION || header.byte_order != "little" {
        return Err(bad("header format fields do not match"));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(io_err(path))?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let end = start + n * 8;
        if end > data.len() {
            return Err(bad(&format!("tensor {} extends past end of file", e.name)));
        }
        let vals: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), vals).expect("shape matches length");
        out.push((e.name.clone(), arr));
    }
    Ok((header, out))
}

/// Prefixes used for the two parameter sets inside a model checkpoint.
const MODEL_PREFIX: &str = "model.";
const ENCODER_PREFIX: &str = "encoder.";

pub(crate) fn named_tensors<'s>(prefix: &str, set: &'s ParamSet) -> Vec<(String, &'s Array2<f64>)> {
    set.iter().map(|p| (format!("{prefix}{}", p.name), &p.value)).collect()
}

pub(crate) fn fill_params(
    prefix: &str,
    set: &mut ParamSet,
    tensors: &[(String, Array2<f64>)],
) -> Result<(), CheckpointError> {
    for p in set.iter_mut() {
        let name = format!("{prefix}{}", p.name);
        let t = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::ConfigMismatch(format!("missing tensor {name}")))?;
        if t.dim() != p.value.dim() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.dim(),
                p.value.dim()
            )));
        }
        p.value.assign(t);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    model_config: ModelConfig,
    encoder_config: EncoderConfig,
}

pub fn save_checkpoint(model: &ActModel, bundle: &EncoderBundle, path: &Path) -> Result<(), CheckpointError> {
    let meta = CheckpointMeta {
        model_config: model.config().clone(),
        encoder_config: bundle.config().clone(),
    };
    let mut tensors = named_tensors(MODEL_PREFIX, model.params());
    tensors.extend(named_tensors(ENCODER_PREFIX, bundle.params()));
    write_tensor_file(path, serde_json::to_value(meta).expect("configs serialize"), &tensors)
}

fn rebuild(meta: &CheckpointMeta) -> Result<(ActModel, EncoderBundle), CheckpointError> {
    let model = ActModel::new(meta.model_config.clone())
        .map_err(|e: ModelError| CheckpointError::ConfigMismatch(e.to_string()))?;
    let bundle = EncoderBundle::new(meta.encoder_config.clone())
        .map_err(|e: EncoderError| CheckpointError::ConfigMismatch(e.to_string()))?;
    Ok((model, bundle))
}

/// Loads a checkpoint using the configs stored in its header.
pub fn load_checkpoint(path: &Path) -> Result<(ActModel, EncoderBundle), CheckpointError> {
    let (header, tensors) = read_tensor_file(path)?;
    let meta: CheckpointMeta = serde_json::from_value(header.meta)
        .map_err(|e| CheckpointError::VersionMismatch(format!("checkpoint metadata: {e}")))?;
    let (mut model, mut bundle) = rebuild(&meta)?;
    fill_params(MODEL_PREFIX, model.params_mut(), &tensors)?;
    fill_params(ENCODER_PREFIX, bundle.params_mut(), &tensors)?;
    Ok((model, bundle))
}

/// Loads a checkpoint and refuses it unless its configs equal the expected
/// ones.
pub fn load_checkpoint_expecting(
    path: &Path,
    model_cfg: &ModelConfig,
    encoder_cfg: &EncoderConfig,
) -> Result<(ActModel, EncoderBundle), CheckpointError> {
    let (model, bundle) = load_checkpoint(path)?;
    if model.config() != model_cfg {
        return Err(CheckpointError::ConfigMismatch(format!(
            "model config {:?} differs from expected {:?}",
            model.config(),
            model_cfg
        )));
    }
    if bundle.config() != encoder_cfg {
        return Err(CheckpointError::ConfigMismatch(format!(
            "encoder config {:?} differs from expected {:?}",
            bundle.config(),
            encoder_cfg
        )));
    }
    Ok((model, bundle))
}
