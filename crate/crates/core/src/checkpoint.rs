//! On-disk tensor archive: a directory with `manifest.json` and
//! `tensors.bin` (little-endian f32 blobs at 64-byte alignment, CRC32 per
//! tensor).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub byte_len: usize,
    pub crc32: u32,
}

/// Everything in `manifest.json`. `sections` carries caller-defined JSON
/// (config echo, optimizer, training state).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    #[serde(default)]
    pub sections: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Writes `tensors` (any scalar type, stored as f32) plus the manifest.
pub fn write_archive<T: Scalar>(
    dir: &Path,
    kind: &str,
    sections: BTreeMap<String, serde_json::Value>,
    tensors: &BTreeMap<String, &Tensor<T>>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = BTreeMap::new();
    for (name, t) in tensors {
        let pad = (ALIGN - blob.len() % ALIGN) % ALIGN;
        blob.resize(blob.len() + pad, 0);
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        let bytes = &blob[offset..];
        entries.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                byte_len: bytes.len(),
                crc32: crc32fast::hash(bytes),
            },
        );
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        sections,
        tensors: entries,
    };
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, &blob).map_err(|e| Error::io(&tpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::InvalidInput(format!("{}: no format_version", mpath.display())))?
        as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

/// Reads and checksums every tensor of an archive.
pub fn read_archive<T: Scalar>(dir: &Path) -> Result<(Manifest, BTreeMap<String, Tensor<T>>)> {
    let manifest = read_manifest(dir)?;
    let tpath = dir.join(TENSORS_FILE);
    let blob = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let mut out = BTreeMap::new();
    for (name, e) in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::InvalidInput(format!("tensor `{name}`: unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if e.byte_len != n * 4 || e.offset + e.byte_len > blob.len() {
            return Err(Error::InvalidInput(format!(
                "tensor `{name}`: extent {}+{} does not fit shape {:?} in a {}-byte file",
                e.offset,
                e.byte_len,
                e.shape,
                blob.len()
            )));
        }
        let bytes = &blob[e.offset..e.offset + e.byte_len];
        if crc32fast::hash(bytes) != e.crc32 {
            return Err(Error::Checksum(name.clone()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.insert(name.clone(), Tensor::from_vec(&e.shape, data));
    }
    Ok((manifest, out))
}

/// Parameter-only archive (e.g. a bare encoder).
pub fn save_params<T: Scalar>(
    dir: &Path,
    kind: &str,
    sections: BTreeMap<String, serde_json::Value>,
    params: &ParamStore<T>,
) -> Result<Manifest> {
    let tensors = params.iter().map(|(k, v)| (k.to_string(), v)).collect();
    write_archive(dir, kind, sections, &tensors)
}

pub fn load_params<T: Scalar>(dir: &Path) -> Result<(Manifest, ParamStore<T>)> {
    let (m, tensors) = read_archive(dir)?;
    let mut store = ParamStore::new();
    for (k, v) in tensors {
        store.insert(k, v);
    }
    Ok((m, store))
}
