//! Binary checkpoint format.
//!
//! ```text
//! "MHELAB01"                      8-byte magic
//! u64 LE                          header length in bytes
//! header (UTF-8, LF-separated)    version=1
//!                                 ModelConfig as key=value lines
//!                                 param=<name> <d0>x<d1>... <byte offset>
//! payload                         little-endian f32 tensors in manifest order
//! ```
//!
//! Byte offsets are relative to the start of the payload.

use std::fs;
use std::path::Path;

use crate::error::ModelError;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MHELAB01";
const MAGIC_FAMILY: &[u8; 6] = b"MHELAB";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes `model` with every tensor stored as f32.
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut header = format!("version={FORMAT_VERSION}\n");
    for line in model.config().to_kv_lines() {
        header.push_str(&line);
        header.push('\n');
    }
    let mut offset = 0usize;
    let params = model.named_params();
    for (name, t) in &params {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("param={name} {} {offset}\n", shape.join("x")));
        offset += 4 * t.numel();
    }
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, t) in &params {
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Parses a checkpoint produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>, ModelError> {
    if bytes.len() < 8 {
        return Err(ModelError::Truncated(format!("{} bytes, shorter than the magic", bytes.len())));
    }
    let magic = &bytes[..8];
    if magic != MAGIC {
        if &magic[..6] == MAGIC_FAMILY {
            return Err(ModelError::Version {
                found: String::from_utf8_lossy(magic).into_owned(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        return Err(ModelError::Format("bad magic bytes".into()));
    }
    if bytes.len() < 16 {
        return Err(ModelError::Truncated("missing header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ModelError::Truncated(format!("header claims {header_len} bytes")))?;
    let header = std::str::from_utf8(&bytes[16..payload_start])
        .map_err(|e| ModelError::Format(format!("header is not UTF-8: {e}")))?;

    let mut kv = Vec::new();
    let mut manifest = Vec::new();
    let mut version = None;
    for line in header.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Format(format!("header line without '=': {line:?}")))?;
        match k {
            "version" => version = Some(v.to_string()),
            "param" => manifest.push(parse_entry(v)?),
            _ => kv.push((k, v)),
        }
    }
    match version.as_deref() {
        Some(v) if v == FORMAT_VERSION.to_string() => {}
        Some(v) => {
            return Err(ModelError::Version {
                found: v.to_string(),
                expected: FORMAT_VERSION.to_string(),
            })
        }
        None => return Err(ModelError::Format("header has no version".into())),
    }
    let cfg = ModelConfig::from_kv(kv)?;
    let mut model = Model::<f32>::build(cfg)?;
    let payload = &bytes[payload_start..];

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if manifest.len() != names.len() {
        return Err(ModelError::Format(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.len(),
            names.len()
        )));
    }
    let mut expected_offset = 0;
    for ((entry, name), t) in manifest.iter().zip(&names).zip(model.params_mut()) {
        if &entry.name != name {
            return Err(ModelError::Format(format!("manifest order: found {}, expected {name}", entry.name)));
        }
        if entry.shape != t.shape() {
            return Err(ModelError::ShapeMismatch {
                name: name.clone(),
                manifest: entry.shape.clone(),
                model: t.shape().to_vec(),
            });
        }
        if entry.offset != expected_offset {
            return Err(ModelError::Format(format!("{name}: offset {} != {expected_offset}", entry.offset)));
        }
        let n = t.numel();
        let end = entry.offset + 4 * n;
        if end > payload.len() {
            return Err(ModelError::Truncated(format!("{name} needs bytes up to {end}, payload has {}", payload.len())));
        }
        for (dst, chunk) in t.data_mut().iter_mut().zip(payload[entry.offset..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(ModelError::Format(format!(
            "{} trailing payload bytes",
            payload.len() - expected_offset
        )));
    }
    Ok(model)
}

fn parse_entry(v: &str) -> Result<ManifestEntry, ModelError> {
    let bad = || ModelError::Format(format!("malformed manifest entry {v:?}"));
    let mut it = v.split(' ');
    let name = it.next().ok_or_else(bad)?.to_string();
    let shape = it
        .next()
        .ok_or_else(bad)?
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    let offset = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if it.next().is_some() {
        return Err(bad());
    }
    Ok(ManifestEntry { name, shape, offset })
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>, ModelError> {
    from_bytes(&fs::read(path)?)
}

/// Checks that two models hold bit-identical tensors.
pub fn same_parameters<T: Scalar>(a: &Model<T>, b: &Model<T>) -> bool {
    let (pa, pb) = (a.named_params(), b.named_params());
    pa.len() == pb.len()
        && pa.iter().zip(&pb).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && bits(ta) == bits(tb)
        })
}

fn bits<T: Scalar>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.as_f64().to_bits()).collect()
}
