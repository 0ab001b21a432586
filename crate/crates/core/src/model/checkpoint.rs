//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `STSEQCK1`, the header length as a little-endian
//! u64, a UTF-8 JSON header, then every parameter as little-endian f32 values
//! in manifest order. Manifest offsets are byte offsets from the start of the
//! payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DiffArray, Real};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"STSEQCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

pub fn write<F: Real, W: Write>(mut out: W, config: &serde_json::Value, store: &ParamStore<F>) -> Result<()> {
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for id in store.ids() {
        let value = store.get(id);
        let bytes = 4 * value.len() as u64;
        params.push(ManifestEntry {
            name: store.name(id).to_string(),
            shape: value.shape().to_vec(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        dtype: "f32le".into(),
        config: config.clone(),
        params,
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for id in store.ids() {
        for &x in store.get(id).data() {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn read<F: Real, R: Read>(mut input: R) -> Result<(Header, ParamStore<F>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::contract("not a checkpoint: bad magic"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 30 {
        return Err(Error::contract(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len as usize];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.format_version != FORMAT_VERSION || header.dtype != "f32le" {
        return Err(Error::contract(format!(
            "unsupported checkpoint version {} / dtype {}",
            header.format_version, header.dtype
        )));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let mut store = ParamStore::new();
    for entry in &header.params {
        let count: usize = entry.shape.iter().product();
        let (start, end) = (entry.offset as usize, (entry.offset + entry.bytes) as usize);
        if entry.bytes != 4 * count as u64 || end > payload.len() {
            return Err(Error::contract(format!("corrupt manifest entry {}", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|b| F::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        store.add(entry.name.clone(), DiffArray::new(entry.shape.clone(), data)?);
    }
    Ok((header, store))
}

pub fn save<F: Real>(path: &Path, config: &serde_json::Value, store: &ParamStore<F>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(file), config, store)
}

pub fn load<F: Real>(path: &Path) -> Result<(Header, ParamStore<F>)> {
    read(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Copies values from a loaded store into `target` by name and shape.
pub fn restore_into<F: Real>(target: &mut ParamStore<F>, loaded: &ParamStore<F>) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::contract(format!(
            "checkpoint holds {} parameters, model has {}",
            loaded.len(),
            target.len()
        )));
    }
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let name = target.name(id).to_string();
        let src = loaded
            .find(&name)
            .ok_or_else(|| Error::contract(format!("checkpoint lacks parameter {name}")))?;
        if loaded.get(src).shape() != target.get(id).shape() {
            return Err(Error::Dimension {
                op: "restore",
                lhs: target.get(id).shape().to_vec(),
                rhs: loaded.get(src).shape().to_vec(),
            });
        }
        target.set(id, loaded.get(src).data().to_vec())?;
    }
    Ok(())
}
