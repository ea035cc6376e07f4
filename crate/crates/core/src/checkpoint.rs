//! Binary checkpoints: a `M2DN` header, raw parameter tensors in path order,
//! and a trailing JSON block with the run metadata.

use std::fs;
use std::path::Path;

use m2dan_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::losses::HyperParams;
use crate::model::{ModelBundle, ModelSpec};
use crate::training::{EpochRecord, Objective, TrainState};

pub const MAGIC: &[u8; 4] = b"M2DN";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    hp: HyperParams,
    objective: Objective,
    step: u64,
    history: Vec<EpochRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidSpec(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a training state to bytes.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (path, t) in state.model.params.iter() {
        put_u32(&mut out, path.len())?;
        out.extend_from_slice(path.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = Meta {
        spec: state.model.spec.clone(),
        hp: state.hp.clone(),
        objective: state.objective,
        step: state.step,
        history: state.history.clone(),
    };
    out.extend_from_slice(serde_json::to_string(&meta)?.as_bytes());
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses checkpoint bytes against the parameter layout of `spec`.
pub fn decode(bytes: &[u8], spec: &ModelSpec) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let mut expected = spec.param_specs();
    expected.sort_by(|a, b| a.path.cmp(&b.path));
    let mut params = ParamSet::new();
    for want in &expected {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptFile("parameter path is not UTF-8".into()))?
            .to_string();
        if path != want.path {
            return Err(Error::SpecMismatch(format!(
                "expected parameter {}, found {path}",
                want.path
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        if shape != want.shape {
            return Err(Error::SpecMismatch(format!(
                "{path} has shape {shape:?}, spec wants {:?}",
                want.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::CorruptFile("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(path, Tensor::new(&shape, data, true)?)?;
    }
    let tail = &bytes[r.pos..];
    let meta: Meta = serde_json::from_slice(tail)
        .map_err(|e| Error::CorruptFile(format!("metadata block: {e}")))?;
    if &meta.spec != spec {
        return Err(Error::SpecMismatch("stored model spec differs".into()));
    }
    Ok(TrainState {
        model: ModelBundle {
            spec: meta.spec,
            params,
        },
        hp: meta.hp,
        objective: meta.objective,
        step: meta.step,
        history: meta.history,
    })
}

pub fn load_checkpoint(path: &Path, spec: &ModelSpec) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes, spec)
}

/// Reads only the model spec stored in a checkpoint.
pub fn peek_spec(path: &Path) -> Result<ModelSpec> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    // Skip the tensors without knowing the spec.
    while let Some(&b) = bytes.get(r.pos) {
        if b == b'{' && serde_json::from_slice::<Meta>(&bytes[r.pos..]).is_ok() {
            break;
        }
        let len = r.u32()? as usize;
        r.take(len)?;
        let rank = r.u32()? as usize;
        let mut numel = 1usize;
        for _ in 0..rank {
            numel = numel.saturating_mul(r.u32()? as usize);
        }
        r.take(numel.saturating_mul(8))?;
    }
    let meta: Meta = serde_json::from_slice(&bytes[r.pos..])
        .map_err(|e| Error::CorruptFile(format!("metadata block: {e}")))?;
    Ok(meta.spec)
}
