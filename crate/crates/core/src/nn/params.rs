use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Precision, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter layout in topology order. Two networks of the same topology
/// always produce equal manifests.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(ManifestEntry::len).sum()
    }

    /// Canonical byte encoding: per entry `layer u32 | role u8 | rank u8 | dims u32…`, all LE.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(&(e.layer as u32).to_le_bytes());
            out.push(match e.role {
                ParamRole::Weight => 0,
                ParamRole::Bias => 1,
            });
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        out
    }

    /// CRC32 of [`Manifest::canonical_bytes`]; guards against mismatched models on the wire.
    pub fn topology_hash(&self) -> u32 {
        crc32fast::hash(&self.canonical_bytes())
    }

    /// Manifest entry that owns flat index `index`.
    pub fn entry_at(&self, index: usize) -> Option<&ManifestEntry> {
        let mut start = 0;
        for e in &self.entries {
            if index < start + e.len() {
                return Some(e);
            }
            start += e.len();
        }
        None
    }
}

/// A model's parameters as one flat vector plus its layout manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams<T> {
    values: Vec<T>,
    manifest: Arc<Manifest>,
}

impl<T: Real> FlatParams<T> {
    pub fn new(values: Vec<T>, manifest: Arc<Manifest>) -> Result<Self> {
        if values.len() != manifest.total_len() {
            return Err(Error::shape(format!(
                "manifest describes {} parameters, got {}",
                manifest.total_len(),
                values.len()
            )));
        }
        Ok(Self { values, manifest })
    }

    pub fn zeros(manifest: Arc<Manifest>) -> Self {
        Self {
            values: vec![T::zero(); manifest.total_len()],
            manifest,
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn shared_manifest(&self) -> &Arc<Manifest> {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// CRC32 over the little-endian bytes of every value at native precision.
    pub fn checksum(&self) -> u32 {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for &v in &self.values {
            v.write_le(&mut bytes);
        }
        crc32fast::hash(&bytes)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| v.as_f64() as f32).collect()
    }

    pub fn from_f32(values: &[f32], manifest: Arc<Manifest>) -> Result<Self> {
        Self::new(
            values.iter().map(|&v| T::of_f64(v as f64)).collect(),
            manifest,
        )
    }
}
