//! Binary checkpoint: `FXBT`, version, config, metadata, named tensors,
//! then an FNV-1a checksum over everything before it. Integers are u32 and
//! floats f32, all little-endian.

use std::path::Path;

use flexibit_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FXBT";
const VERSION: u32 = 1;

/// Provenance of a checkpoint, stored as JSON inside the file.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training regime, e.g. a task name.
    pub regime: String,
    pub seed: u64,
    pub epochs: usize,
    /// Set on fine-tuned models: the regime they started from and the task
    /// they were tuned on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetuned_from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_task: Option<String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn config_words(c: &ModelConfig) -> [usize; 10] {
    [
        c.layers,
        c.heads,
        c.hidden_dim,
        c.slot_dim,
        c.ff_mult,
        c.context,
        c.agent_vocab,
        c.key_vocab,
        c.action_vocab,
        c.rtg_vocab,
    ]
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn save_checkpoint<F: Scalar>(path: &Path, params: &ModelParams<F>, meta: &CheckpointMeta) -> Result<()> {
    let mut out = Vec::with_capacity(4 * params.count() + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    for w in config_words(&params.config) {
        put_u32(&mut out, w);
    }
    let meta = serde_json::to_vec(meta).expect("metadata serializes");
    put_u32(&mut out, meta.len());
    out.extend_from_slice(&meta);
    put_u32(&mut out, params.tensors.len());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Reads a checkpoint and checks it against `expected`, when given.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing FXBT header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut w = [0usize; 10];
    for v in &mut w {
        *v = r.u32()?;
    }
    let config = ModelConfig {
        layers: w[0],
        heads: w[1],
        hidden_dim: w[2],
        slot_dim: w[3],
        ff_mult: w[4],
        context: w[5],
        agent_vocab: w[6],
        key_vocab: w[7],
        action_vocab: w[8],
        rtg_vocab: w[9],
    };
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::ConfigMismatch(format!("file has {config:?}, expected {want:?}")));
        }
    }
    config
        .validate()
        .map_err(|e| Error::ConfigMismatch(format!("stored config is invalid: {e}")))?;
    let meta_len = r.u32()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let layout = config.layout();
    let n = r.u32()?;
    if n != layout.len() {
        return Err(Error::ConfigMismatch(format!("{n} tensors, config needs {}", layout.len())));
    }
    let mut names = Vec::with_capacity(n);
    let mut tensors = Vec::with_capacity(n);
    for (want_name, want_shape) in layout {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if name != want_name || shape != want_shape {
            return Err(Error::ConfigMismatch(format!(
                "parameter {name} {shape:?}, expected {want_name} {want_shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        let data: Vec<f32> = r
            .take(4 * count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
        names.push(name);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((ModelParams { config, names, tensors }, meta))
}
