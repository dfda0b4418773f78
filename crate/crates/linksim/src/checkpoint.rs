//! Single-file checkpoint container.
//!
//! Layout: an 8-byte magic, a u32 format version, a u32 endianness marker,
//! a u64 manifest length, the JSON manifest, then raw little-endian f64
//! tensor data. The manifest names every tensor with its partition, shape
//! and byte offset into the data section; model parameters come first in
//! registration order, optimizer moments after them under the `optimizer`
//! partition label (`optim.m.<name>` / `optim.v.<name>`).
//!
//! Nothing in the file depends on wall-clock time or environment, so the
//! same parameters and config always serialize to the same bytes, and
//! `load(save(x))` returns `x` bit-for-bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamSet, Partition, Tensor};
use crate::training::{Adam, TrainState};

pub const MAGIC: &[u8; 8] = b"LNKSIMCK";
pub const VERSION: u32 = 1;
const ENDIAN_MARK: u32 = 0x0102_0304;
/// Partition label for optimizer-moment records (not a model partition).
pub const OPTIMIZER_TAG: &str = "optimizer";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {got} (this build reads {want})")]
    Version { got: u32, want: u32 },
    #[error("byte-order marker mismatch (file written on an incompatible platform)")]
    Endianness,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    partition: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
    /// Element count (f64s, not bytes).
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config_hash: String,
    config: serde_json::Value,
    train_state: TrainState,
    tensors: Vec<TensorRecord>,
}

/// Everything a checkpoint holds, rebuilt into live objects. Loaded
/// parameters start fully trainable; callers re-apply a tuning mode.
pub struct Checkpoint {
    pub params: ParamSet,
    pub state: TrainState,
    pub config_hash: String,
    pub config: serde_json::Value,
    moments: Vec<(String, Tensor, Tensor)>,
}

impl Checkpoint {
    /// Rebuilds the optimizer exactly as it was at save time. Bias
    /// correction resumes from the recorded update count.
    pub fn adam(&self) -> Result<Adam, CkptError> {
        let mut adam = Adam::new();
        adam.set_t(self.state.step);
        for (name, m, v) in &self.moments {
            let id = self
                .params
                .id(name)
                .map_err(|_| CkptError::Corrupt(format!("moments for unknown parameter {name:?}")))?;
            adam.restore(id, m.clone(), v.clone());
        }
        Ok(adam)
    }
}

fn push_tensor(
    records: &mut Vec<TensorRecord>,
    data: &mut Vec<u8>,
    name: &str,
    partition: &str,
    t: &Tensor,
) {
    records.push(TensorRecord {
        name: name.to_string(),
        partition: partition.to_string(),
        shape: t.shape().to_vec(),
        offset: data.len() as u64,
        len: t.len() as u64,
    });
    for v in t.data() {
        data.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters, optimizer moments, training state and the
/// effective config into one buffer.
pub fn to_bytes(
    params: &ParamSet,
    adam: Option<&Adam>,
    state: &TrainState,
    config: &serde_json::Value,
    config_hash: &str,
) -> Vec<u8> {
    let mut records = Vec::new();
    let mut data = Vec::new();
    for id in params.ids() {
        push_tensor(
            &mut records,
            &mut data,
            params.name(id),
            params.partition(id).as_str(),
            params.value(id),
        );
    }
    if let Some(adam) = adam {
        for id in params.ids() {
            if let Some((m, v)) = adam.moments(id) {
                let name = params.name(id);
                push_tensor(&mut records, &mut data, &format!("optim.m.{name}"), OPTIMIZER_TAG, m);
                push_tensor(&mut records, &mut data, &format!("optim.v.{name}"), OPTIMIZER_TAG, v);
            }
        }
    }
    let manifest = Manifest {
        version: VERSION,
        config_hash: config_hash.to_string(),
        config: config.clone(),
        train_state: *state,
        tensors: records,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serialization");

    let mut out = Vec::with_capacity(24 + manifest_bytes.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ENDIAN_MARK.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&data);
    out
}

pub fn save(
    path: &Path,
    params: &ParamSet,
    adam: Option<&Adam>,
    state: &TrainState,
    config: &serde_json::Value,
    config_hash: &str,
) -> Result<(), CkptError> {
    let bytes = to_bytes(params, adam, state, config, config_hash);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn read_tensor(data: &[u8], rec: &TensorRecord) -> Result<Tensor, CkptError> {
    let start = rec.offset as usize;
    let bytes = (rec.len as usize)
        .checked_mul(8)
        .ok_or_else(|| CkptError::Corrupt(format!("tensor {:?} length overflow", rec.name)))?;
    let end = start
        .checked_add(bytes)
        .filter(|&e| e <= data.len())
        .ok_or_else(|| CkptError::Corrupt(format!("tensor {:?} outside data section", rec.name)))?;
    let expect: usize = rec.shape.iter().product();
    if expect != rec.len as usize {
        return Err(CkptError::Corrupt(format!(
            "tensor {:?}: shape {:?} does not hold {} elements",
            rec.name, rec.shape, rec.len
        )));
    }
    let values: Vec<f64> = data[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(&rec.shape, values))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CkptError> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(CkptError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CkptError::Version { got: version, want: VERSION });
    }
    if u32::from_le_bytes(bytes[12..16].try_into().unwrap()) != ENDIAN_MARK {
        return Err(CkptError::Endianness);
    }
    let mlen = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let data_start = 24usize
        .checked_add(mlen)
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| CkptError::Corrupt("manifest length exceeds file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[24..data_start])
        .map_err(|e| CkptError::Corrupt(format!("manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(CkptError::Version { got: manifest.version, want: VERSION });
    }
    let data = &bytes[data_start..];

    let mut params = ParamSet::new();
    let mut moments: Vec<(String, Option<Tensor>, Option<Tensor>)> = Vec::new();
    for rec in &manifest.tensors {
        let t = read_tensor(data, rec)?;
        if rec.partition == OPTIMIZER_TAG {
            let (kind, base) = rec
                .name
                .strip_prefix("optim.m.")
                .map(|b| ('m', b))
                .or_else(|| rec.name.strip_prefix("optim.v.").map(|b| ('v', b)))
                .ok_or_else(|| {
                    CkptError::Corrupt(format!("unrecognized optimizer record {:?}", rec.name))
                })?;
            match moments.iter_mut().find(|(n, _, _)| n == base) {
                Some(slot) => {
                    let field = if kind == 'm' { &mut slot.1 } else { &mut slot.2 };
                    if field.is_some() {
                        return Err(CkptError::Corrupt(format!("duplicate record {:?}", rec.name)));
                    }
                    *field = Some(t);
                }
                None => {
                    let (m, v) =
                        if kind == 'm' { (Some(t), None) } else { (None, Some(t)) };
                    moments.push((base.to_string(), m, v));
                }
            }
        } else {
            let partition = Partition::from_str(&rec.partition).ok_or_else(|| {
                CkptError::Corrupt(format!("unknown partition {:?}", rec.partition))
            })?;
            if params.id(&rec.name).is_ok() {
                return Err(CkptError::Corrupt(format!("duplicate tensor {:?}", rec.name)));
            }
            params.add(&rec.name, partition, t);
        }
    }
    let moments = moments
        .into_iter()
        .map(|(n, m, v)| match (m, v) {
            (Some(m), Some(v)) => Ok((n, m, v)),
            _ => Err(CkptError::Corrupt(format!("unpaired optimizer moments for {n:?}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Checkpoint {
        params,
        state: manifest.train_state,
        config_hash: manifest.config_hash,
        config: manifest.config,
        moments,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    from_bytes(&fs::read(path)?)
}
