//! Binary checkpoints.
//!
//! Layout, all integers 32-bit little-endian:
//!
//! ```text
//! "CLMP" | version | entry count
//! per entry: name length | UTF-8 name | rank | dims… | values as f32
//! config length | UTF-8 JSON {"config": RunConfig, "ama": {...}}
//! ```
//!
//! Parameters are stored at 32-bit precision; everything else in the JSON
//! blob round-trips exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ama::M;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::Model;

pub const MAGIC: &[u8; 4] = b"CLMP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AmaSnapshot {
    pi: [f64; M],
    initial_losses: Option<[f64; M]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    config: RunConfig,
    ama: AmaSnapshot,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field fits in 32 bits");
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(model: &Model, config: &RunConfig) -> Vec<u8> {
    let params = &model.params;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, params.len());
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        put_u32(&mut out, name.len());
        out.extend_from_slice(name);
        let t = params.get(id);
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let blob = Blob {
        config: config.clone(),
        ama: AmaSnapshot {
            pi: model.ama.pi,
            initial_losses: model.ama.initial_losses,
        },
    };
    let json = serde_json::to_string(&blob).expect("checkpoint blob serializes");
    put_u32(&mut out, json.len());
    out.extend_from_slice(json.as_bytes());
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, config: &RunConfig) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, config)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated at byte offset {}: {what} needs {n} bytes, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Rebuild the model described by the stored config and restore every
/// parameter and the aggregation state.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, RunConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a CLMP checkpoint".into()));
    }
    r.pos = 4;
    let version = r.u32("format version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|_| Error::Checkpoint(format!("parameter name at offset {} is not UTF-8", r.pos - len)))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} has an impossible shape {shape:?}")))?;
        let raw = r.take(numel, &format!("values of {name}"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        entries.push(Entry { name, shape, values });
    }
    let len = r.u32("config length")?;
    let json = r.take(len, "config blob")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    let blob: Blob = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("config blob: {e}")))?;
    blob.config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;

    let config = blob.config;
    let mut model = Model::new(&config.model(), config.train.switches(), config.train.seed)?;
    if entries.len() != model.params.len() {
        let missing = model
            .params
            .ids()
            .map(|id| model.params.name(id).to_string())
            .find(|n| !entries.iter().any(|e| &e.name == n));
        return Err(Error::Checkpoint(match missing {
            Some(n) => format!("parameter {n} missing from checkpoint"),
            None => format!("{} entries, config implies {}", entries.len(), model.params.len()),
        }));
    }
    for e in entries {
        let id = model
            .params
            .find(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} not in the configured model", e.name)))?;
        let expect = model.params.get(id).shape();
        if expect != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, config implies {:?}",
                e.name, e.shape, expect
            )));
        }
        model.params.set(id, &e.values)?;
    }
    model.ama.pi = blob.ama.pi;
    model.ama.initial_losses = blob.ama.initial_losses;
    Ok((model, config))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, RunConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
