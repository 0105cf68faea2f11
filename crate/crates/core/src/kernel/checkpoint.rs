//! Parameter checkpoints: a flat little-endian binary plus a text manifest.
//!
//! For each named parameter the binary holds its extents as `u64` followed by
//! its values as `f32`. The manifest (`<file>.manifest`) has one
//! tab-separated line per parameter: name, extents joined by `x`, and the
//! byte offset of the parameter's first extent.

use std::fs;
use std::path::{Path, PathBuf};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn manifest_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn encode(params: &[(String, Tensor<f32>)]) -> (Vec<u8>, Vec<ManifestEntry>) {
    let mut bytes = Vec::new();
    let mut manifest = Vec::with_capacity(params.len());
    for (name, t) in params {
        manifest.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset: bytes.len() as u64 });
        for &e in t.shape() {
            bytes.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, manifest)
}

pub fn render_manifest(manifest: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in manifest {
        let shape: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("{}\t{}\t{}\n", e.name, shape.join("x"), e.offset));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Format(format!("manifest line {}: expected 3 fields", i + 1)));
            }
            let shape = cols[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("manifest line {}: bad shape: {e}", i + 1)))?;
            let offset = cols[2]
                .parse()
                .map_err(|e| Error::Format(format!("manifest line {}: bad offset: {e}", i + 1)))?;
            Ok(ManifestEntry { name: cols[0].to_string(), shape, offset })
        })
        .collect()
}

pub fn decode(bytes: &[u8], manifest: &[ManifestEntry]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest {
        let mut pos = e.offset as usize;
        let n: usize = e.shape.iter().product();
        let need = pos + 8 * e.shape.len() + 4 * n;
        if need > bytes.len() {
            return Err(Error::Length(format!("parameter {} needs {need} bytes, file has {}", e.name, bytes.len())));
        }
        for &d in &e.shape {
            let stored = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            if stored != d as u64 {
                return Err(Error::Consistency(format!(
                    "parameter {}: manifest extent {d} but file stores {stored}",
                    e.name
                )));
            }
            pos += 8;
        }
        let data = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, params: &[(String, Tensor<f32>)]) -> Result<()> {
    let (bytes, manifest) = encode(params);
    fs::write(path, bytes)?;
    fs::write(manifest_path(path), render_manifest(&manifest))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path)?;
    let manifest = parse_manifest(&fs::read_to_string(manifest_path(path))?)?;
    decode(&bytes, &manifest)
}
