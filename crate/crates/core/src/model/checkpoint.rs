//! `.qeck` checkpoint container.
//!
//! Layout:
//!
//! ```text
//! [8 ASCII decimal digits: manifest length N]
//! [N bytes: UTF-8 JSON manifest]
//! [tensor buffers: little-endian f32]
//! ```
//!
//! Tensor offsets in the manifest are byte offsets from the start of the
//! buffer section, i.e. from byte `8 + N` of the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::QEModel;
use crate::encoder::{EncoderConfig, PoolingStrategy};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "qeck";
pub const VERSION: u32 = 1;
pub const HEADER_DIGITS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub pooling: PoolingStrategy,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes `model` into the container format.
pub fn to_bytes(model: &QEModel) -> Result<Vec<u8>> {
    let names = QEModel::expected_shapes(&model.config);
    let mut entries = Vec::with_capacity(names.len());
    let mut offset = 0u64;
    for ((name, _), t) in names.into_iter().zip(model.tensors()) {
        let count = t.numel() as u64;
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            count,
        });
        offset += count * 4;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config,
        pooling: model.pooling,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    if json.len() >= 10usize.pow(HEADER_DIGITS as u32) {
        return Err(Error::Manifest(format!(
            "manifest of {} bytes does not fit an {HEADER_DIGITS}-digit length prefix",
            json.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_DIGITS + json.len() + offset as usize);
    out.extend_from_slice(format!("{:0width$}", json.len(), width = HEADER_DIGITS).as_bytes());
    out.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes `model` to `path`, returning the number of bytes written (the
/// file's size on disk).
pub fn save_checkpoint(model: &QEModel, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<QEModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Parses the manifest without touching the tensor buffers.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_DIGITS {
        return Err(Error::Corruption(format!(
            "file is {} bytes, shorter than the length prefix",
            bytes.len()
        )));
    }
    let prefix = &bytes[..HEADER_DIGITS];
    if !prefix.iter().all(u8::is_ascii_digit) {
        return Err(Error::Manifest("length prefix is not 8 ASCII digits".into()));
    }
    let len: usize = std::str::from_utf8(prefix)
        .expect("ascii digits")
        .parse()
        .expect("ascii digits parse");
    let end = HEADER_DIGITS + len;
    if bytes.len() < end {
        return Err(Error::Corruption(format!(
            "manifest declares {len} bytes but only {} follow the prefix",
            bytes.len() - HEADER_DIGITS
        )));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_DIGITS..end]).map_err(|e| Error::Manifest(e.to_string()))?;
    Ok((manifest, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<QEModel> {
    let (manifest, data_start) = read_manifest(bytes)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Manifest(format!(
            "unsupported container {} v{}",
            manifest.format, manifest.version
        )));
    }
    manifest.config.validate()?;
    let data = &bytes[data_start..];
    let expected = QEModel::expected_shapes(&manifest.config);
    if manifest.tensors.len() != expected.len() {
        return Err(Error::Corruption(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }

    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Corruption(format!(
                "tensor {} {:?} where {name} {shape:?} was expected",
                entry.name, entry.shape
            )));
        }
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if entry.count != numel {
            return Err(Error::Corruption(format!(
                "{name} declares {} elements for shape {shape:?}",
                entry.count
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.count * 4)
            .ok_or_else(|| Error::Corruption(format!("{name} offset overflows")))?;
        if end > data.len() as u64 {
            return Err(Error::Corruption(format!(
                "{name} spans bytes {}..{end} but the buffer section holds {}",
                entry.offset,
                data.len()
            )));
        }
        spans.push((entry.offset, end));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(Error::Corruption("tensor buffers overlap".into()));
    }
    let covered: u64 = spans.iter().map(|(s, e)| e - s).sum();
    if covered != data.len() as u64 {
        return Err(Error::Corruption(format!(
            "buffer section holds {} bytes, tensors account for {covered}",
            data.len()
        )));
    }

    let tensors = manifest
        .tensors
        .iter()
        .map(|entry| {
            let start = entry.offset as usize;
            let raw = &data[start..start + entry.count as usize * 4];
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(entry.shape.clone(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = QEModel::from_tensors(manifest.config, manifest.pooling, tensors).map_err(|e| match e {
        Error::Numeric(msg) => Error::Corruption(msg),
        other => other,
    })?;
    Ok(model)
}
