//! Named-tensor checkpoint container.
//!
//! `ESEGCKPT` | u32 version | u64 header length | JSON header | tensor blobs.
//! The header lists each entry's name with the byte offset and length of its
//! tensor blob, counted from the first byte after the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::graph::Params;
use crate::model::ModelConfig;
use crate::scalar::{ElemType, Scalar};

const MAGIC: &[u8; 8] = b"ESEGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub state: TrainState,
    pub model: Option<ModelConfig>,
    pub params: Params<T>,
    pub ema: Option<Params<T>>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    elem: ElemType,
    state: TrainState,
    model: Option<ModelConfig>,
    entries: Vec<Entry>,
}

const PARAM: &str = "param/";
const EMA: &str = "ema/";

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut blobs = Vec::new();
    let mut entries = Vec::new();
    let groups = [(PARAM, Some(&ckpt.params)), (EMA, ckpt.ema.as_ref())];
    for (prefix, params) in groups {
        for (name, t) in params.into_iter().flat_map(|p| p.iter()) {
            let blob = encode_tensor(t)?;
            entries.push(Entry {
                name: format!("{prefix}{name}"),
                offset: blobs.len() as u64,
                len: blob.len() as u64,
            });
            blobs.extend_from_slice(&blob);
        }
    }
    let header = serde_json::to_vec(&Header {
        elem: T::ELEM,
        state: ckpt.state,
        model: ckpt.model.clone(),
        entries,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blobs);
    std::fs::write(path, out)?;
    Ok(())
}

fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..body])?;
    Ok((header, body))
}

/// Element type of a checkpoint file, read from its header only.
pub fn checkpoint_elem(path: impl AsRef<Path>) -> Result<ElemType> {
    let bytes = std::fs::read(path)?;
    Ok(read_header(&bytes)?.0.elem)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)?;
    let (header, body) = read_header(&bytes)?;
    if header.elem != T::ELEM {
        return Err(Error::Format(format!(
            "checkpoint holds {:?}, requested {:?}",
            header.elem,
            T::ELEM
        )));
    }
    let blobs = &bytes[body..];
    let mut params = Params::new();
    let mut ema = Params::new();
    let mut seen = std::collections::BTreeSet::new();
    for e in &header.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Format(format!("duplicate entry `{}`", e.name)));
        }
        let (start, len) = (e.offset as usize, e.len as usize);
        let blob = start
            .checked_add(len)
            .and_then(|end| blobs.get(start..end))
            .ok_or_else(|| Error::Format(format!("entry `{}` lies outside the file", e.name)))?;
        let (t, used) = decode_tensor::<T>(blob)?;
        if used != len {
            return Err(Error::Format(format!("entry `{}` has trailing bytes", e.name)));
        }
        if let Some(n) = e.name.strip_prefix(PARAM) {
            params.insert(n, t);
        } else if let Some(n) = e.name.strip_prefix(EMA) {
            ema.insert(n, t);
        } else {
            return Err(Error::Format(format!("unknown entry group in `{}`", e.name)));
        }
    }
    Ok(Checkpoint {
        state: header.state,
        model: header.model,
        params,
        ema: (!ema.is_empty()).then_some(ema),
    })
}
