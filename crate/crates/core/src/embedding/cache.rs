//! Persistent embedding caches.
//!
//! Binary layout: magic `AIR1`, `u32` LE dim, `u64` LE count, then
//! `count * dim` `f32` LE values row-major. The manifest lives next to the
//! binary file as `<file>.manifest.csv` with header `index,label,source_path`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::vector::EmbeddingVector;
use crate::error::{AirError, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"AIR1";
const HEADER_LEN: u64 = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub label: String,
    pub source_path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    dim: u32,
    rows: Vec<f32>,
    manifest: Vec<ManifestEntry>,
}

impl EmbeddingCache {
    pub fn new(dim: u32) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            manifest: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn count(&self) -> usize {
        self.manifest.len()
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn push(&mut self, row: &EmbeddingVector, label: &str, source_path: &str) -> Result<()> {
        if row.dim() != self.dim() {
            return Err(AirError::DimMismatch {
                expected: self.dim(),
                got: row.dim(),
            });
        }
        self.rows.extend_from_slice(row.as_slice());
        self.manifest.push(ManifestEntry {
            index: self.manifest.len() as u64,
            label: label.to_string(),
            source_path: source_path.to_string(),
        });
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn embedding(&self, i: usize) -> Result<EmbeddingVector> {
        EmbeddingVector::new(self.row(i).to_vec())
    }

    /// Rows grouped by label, labels in first-appearance order.
    pub fn by_label(&self) -> Result<Vec<(String, Vec<EmbeddingVector>)>> {
        let mut groups: Vec<(String, Vec<EmbeddingVector>)> = Vec::new();
        for (i, entry) in self.manifest.iter().enumerate() {
            let e = self.embedding(i)?;
            match groups.iter_mut().find(|(l, _)| *l == entry.label) {
                Some((_, v)) => v.push(e),
                None => groups.push((entry.label.clone(), vec![e])),
            }
        }
        Ok(groups)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.csv");
    PathBuf::from(s)
}

pub fn cache_store(cache: &EmbeddingCache, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + cache.rows.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&cache.dim.to_le_bytes());
    buf.extend_from_slice(&(cache.count() as u64).to_le_bytes());
    for v in &cache.rows {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;

    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(manifest_path(path))?;
    w.write_record(["index", "label", "source_path"])?;
    for e in &cache.manifest {
        w.write_record([e.index.to_string().as_str(), &e.label, &e.source_path])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cache_load(path: &Path) -> Result<EmbeddingCache> {
    let bytes = fs::read(path)?;
    let found = bytes.len() as u64;
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        if bytes.len() < 4 {
            return Err(AirError::TruncatedFile {
                path: path.to_path_buf(),
                expected: HEADER_LEN,
                found,
            });
        }
        return Err(AirError::BadMagic(path.to_path_buf()));
    }
    if found < HEADER_LEN {
        return Err(AirError::TruncatedFile {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found,
        });
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = HEADER_LEN + count * dim as u64 * 4;
    if found < expected {
        return Err(AirError::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let rows: Vec<f32> = bytes[HEADER_LEN as usize..expected as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut reader = csv::Reader::from_path(manifest_path(path))?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["index", "label", "source_path"] {
        return Err(AirError::ManifestMismatch(format!("unexpected header {headers:?}")));
    }
    let mut manifest = Vec::new();
    for rec in reader.deserialize() {
        let entry: ManifestEntry = rec?;
        if entry.index != manifest.len() as u64 {
            return Err(AirError::ManifestMismatch(format!(
                "row {} has index {}",
                manifest.len(),
                entry.index
            )));
        }
        manifest.push(entry);
    }
    if manifest.len() as u64 != count {
        return Err(AirError::ManifestMismatch(format!(
            "binary has {count} rows, manifest has {}",
            manifest.len()
        )));
    }
    Ok(EmbeddingCache { dim, rows, manifest })
}
