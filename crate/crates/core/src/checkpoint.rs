//! Parameter checkpoints.
//!
//! Layout: magic `PTSK`, a version byte, a little-endian `u32` header length,
//! a JSON header (config, config hash, tensor index), the tensors as
//! little-endian `f64` in index order, and a CRC32 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PtsmConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::model::Ptsm;
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PTSK";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum EntryKind {
    Param { group: ParamGroup, decay: bool },
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    #[serde(flatten)]
    kind: EntryKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: PtsmConfig,
    config_hash: String,
    tensors: Vec<Entry>,
}

pub fn encode(model: &Ptsm, config: &PtsmConfig) -> Result<Vec<u8>> {
    if model.config != config.model {
        return Err(Error::Checkpoint("model dimensions differ from the config being saved".into()));
    }
    let mut entries = Vec::new();
    let mut payload: Vec<&Tensor> = Vec::new();
    for (name, p) in model.store.params() {
        entries.push(Entry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            kind: EntryKind::Param {
                group: p.group,
                decay: p.decay,
            },
        });
        payload.push(&p.value);
    }
    for (name, b) in model.store.buffers() {
        entries.push(Entry {
            name: name.clone(),
            shape: b.shape().to_vec(),
            kind: EntryKind::Buffer,
        });
        payload.push(b);
    }
    let header = Header {
        config: config.clone(),
        config_hash: config.hash(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in payload {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<(Ptsm, PtsmConfig)> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 13 {
        return Err(bad(format!("file of {} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(bad(format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")));
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let json = body
        .get(9..9 + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.config.hash() != header.config_hash {
        return Err(bad("config hash does not match the embedded config".into()));
    }
    header.config.validate()?;
    let mut at = 9 + hlen;
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = body
            .get(at..at + 8 * n)
            .ok_or_else(|| bad(format!("payload truncated at {}", e.name)))?;
        at += 8 * n;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data)?;
        match e.kind {
            EntryKind::Param { group, decay } => store.insert(e.name, t, group, decay),
            EntryKind::Buffer => store.insert_buffer(e.name, t),
        }
    }
    if at != body.len() {
        return Err(bad(format!("{} unexpected trailing bytes", body.len() - at)));
    }
    let model = Ptsm::from_store(&header.config.model, store)?;
    Ok((model, header.config))
}

pub fn save(model: &Ptsm, config: &PtsmConfig, path: &Path) -> Result<()> {
    io::write_atomic(path, &encode(model, config)?)
}

pub fn load(path: &Path) -> Result<(Ptsm, PtsmConfig)> {
    decode(&io::read(path)?)
}
