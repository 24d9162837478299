//! Binary checkpoints.
//!
//! Layout: `b"GPLC"`, format version (u32 LE), header length (u64 LE), a
//! JSON header, every tensor as little-endian f64 in header order, and a
//! SHA-256 digest of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GPLC";
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    /// "param" or "buffer".
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    class_of: Vec<usize>,
    summary: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(model: &Model, summary: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, store) in [("param", &model.params), ("buffer", &model.buffers)] {
        for (name, t) in store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                group: group.to_string(),
                shape: t.shape().to_vec(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        class_of: model.spec.class_of(),
        summary,
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
    if bytes.len() < 16 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
    let header: Header = serde_json::from_slice(&body[16..header_end])?;
    header.spec.validate()?;
    if header.class_of != header.spec.class_of() {
        return Err(corrupt("class assignment disagrees with the model spec"));
    }

    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let mut at = header_end;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = at + n * 8;
        if end > body.len() {
            return Err(corrupt(format!("tensor {} overruns file", e.name)));
        }
        let data = body[at..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at = end;
        let t = Tensor::new(e.shape, data)?;
        match e.group.as_str() {
            "param" => params.insert(e.name, t),
            "buffer" => buffers.insert(e.name, t),
            other => return Err(corrupt(format!("unknown tensor group {other}"))),
        }
    }
    if at != body.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }

    // Every tensor a fresh model of this spec has must be present with the
    // same shape.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let reference = Model::new(header.spec.clone(), &mut rng)?;
    for (store, refs, group) in [(&params, &reference.params, "param"), (&buffers, &reference.buffers, "buffer")] {
        for (name, t) in refs.iter() {
            let got = store.get(name).map_err(|_| corrupt(format!("missing {group} {name}")))?;
            if got.shape() != t.shape() {
                return Err(corrupt(format!("{group} {name} has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if store.len() != refs.len() {
            return Err(corrupt(format!("unexpected extra {group} tensors")));
        }
    }
    Ok((
        Model {
            spec: header.spec,
            params,
            buffers,
        },
        header.summary,
    ))
}

pub fn save_checkpoint(path: &Path, model: &Model, summary: serde_json::Value) -> Result<()> {
    crate::fsutil::atomic_write(path, &encode_checkpoint(model, summary)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_checkpoint(&std::fs::read(path)?)
}
