//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RDFORGE1"
//! u64 header length, then that many bytes of UTF-8 JSON
//! per tensor, sorted by name:
//!     u32 name length, name bytes, u32 rank, u64 per dim, f64 per value
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::multitask::TaskSpec;
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizers::TokenizerModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RDFORGE1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    encoder: EncoderConfig,
    tasks: Vec<TaskSpec>,
    alt: bool,
    tokenizer: Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {}", msg.into()))
}

pub fn checkpoint_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        encoder: model.config.clone(),
        tasks: model.task_specs(),
        alt: model.alt,
        tokenizer: serde_json::from_str(&model.tokenizer.to_json()?)?,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params.num_values());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in model.params.iter() {
        if !t.is_finite() {
            return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn model_from_checkpoint_bytes(buf: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic").ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let len = r.u64("header length")?;
    if len > r.remaining() as u64 {
        return Err(corrupt(format!(
            "header length {len} exceeds the {} remaining bytes",
            r.remaining()
        )));
    }
    let json = r.take(len as usize, "header")?;
    let value: Value = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
    if let Some(v) = value.get("version").and_then(Value::as_u64) {
        if v != CHECKPOINT_VERSION as u64 {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {v}, expected {CHECKPOINT_VERSION}"
            )));
        }
    }
    let header: Header = serde_json::from_value(value).map_err(|e| corrupt(format!("header: {e}")))?;
    let tokenizer = TokenizerModel::from_json(&header.tokenizer.to_string())?;

    let mut params = ParamStore::new();
    let mut last: Option<String> = None;
    while r.remaining() > 0 {
        let n = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(corrupt(format!("tensor {name} out of order or duplicated")));
        }
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(corrupt(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dims")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| corrupt(format!("truncated while reading tensor {name}")))?;
        let bytes = r.take(count * 8, "tensor values")?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
        }
        params.insert(name.clone(), Tensor::new(shape, data)?);
        last = Some(name);
    }
    TrainedModel::from_parts(header.encoder, &header.tasks, tokenizer, header.alt, params)
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let buf = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    model_from_checkpoint_bytes(&buf)
}
