//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "RSPOCKPT"
//! version      u32      1
//! d            u32      model width
//! n_items      u32      catalogue size
//! history_len  u32      10
//! n_params     u64
//! params       n_params × f64, tensors in `Tensor::ALL` order:
//!              item_emb, pos_emb, ln1_gain, ln1_bias, wq, wk, wv, wo,
//!              ln2_gain, ln2_bias, w1, b1, w2, b2 (each row-major)
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 JSON
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, PolicyModel};
use crate::error::{Error, Result};
use crate::HISTORY_LEN;

const MAGIC: &[u8; 8] = b"RSPOCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Po,
    Oracle,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Po => "po",
            Stage::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub seed: u64,
    pub steps: u64,
    pub tool_version: String,
}

impl CheckpointMeta {
    pub fn new(stage: Stage, seed: u64, steps: u64) -> Self {
        CheckpointMeta {
            stage,
            seed,
            steps,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: PolicyModel,
}

impl Checkpoint {
    pub fn new(model: PolicyModel, meta: CheckpointMeta) -> Self {
        Checkpoint { meta, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.model.params();
        let meta = serde_json::to_vec(&self.meta).expect("metadata serialises");
        let mut out = Vec::with_capacity(40 + p.len() * 8 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(p.d() as u32).to_le_bytes());
        out.extend_from_slice(&(p.n_items() as u32).to_le_bytes());
        out.extend_from_slice(&(HISTORY_LEN as u32).to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for x in p.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let d = r.u32()? as usize;
        let n_items = r.u32()? as usize;
        let hist = r.u32()? as usize;
        if hist != HISTORY_LEN {
            return Err(Error::Checkpoint(format!("history length {hist} != {HISTORY_LEN}")));
        }
        let n_params = r.u64()? as usize;
        let mut params = ParamSet::zeros(n_items, d);
        if params.len() != n_params {
            return Err(Error::Checkpoint(format!(
                "parameter count {n_params} inconsistent with d={d}, n_items={n_items}"
            )));
        }
        for x in params.as_mut_slice() {
            *x = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            meta,
            model: PolicyModel::from_params(params),
        })
    }

    /// Writes the checkpoint, creating parent directories as needed.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
