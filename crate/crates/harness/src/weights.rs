//! Checkpoint container: magic, format version, JSON manifest, raw f64 data.
//!
//! Layout: `b"KVGW"`, `u32` version, `u64` manifest length (all little
//! endian), the manifest JSON, then every tensor's `f64` values back to back
//! in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use kvgate_core::indexer::{IndexerConfig, IndexerParams};
use kvgate_core::math::Matrix;
use kvgate_core::memory::MemorySlowWeights;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const MAGIC: &[u8; 4] = b"KVGW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named tensors, kept sorted by name.
#[derive(Debug, Clone, Default)]
pub struct WeightsContainer {
    tensors: BTreeMap<String, Tensor>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Format(msg.into()))
}

impl WeightsContainer {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), Tensor { shape, data });
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.insert(name, vec![m.rows(), m.cols()], m.as_slice().to_vec());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| HarnessError::Format(format!("missing tensor {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        if t.shape.len() != 2 {
            return format_err(format!("tensor {name} is not a matrix"));
        }
        Ok(Matrix::from_vec(t.shape[0], t.shape[1], t.data.clone())?)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f64".into(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len() * 8;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            format_version: FORMAT_VERSION,
            tensors,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return format_err("not a weights container");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return format_err(format!("container version {version} unsupported"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| HarnessError::Format("manifest runs past the end".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| HarnessError::Format(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return format_err("manifest version disagrees with header");
        }
        let data = &bytes[data_start..];
        let mut expected = 0;
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return format_err(format!("tensor {} has dtype {}", e.name, e.dtype));
            }
            if e.offset != expected {
                return format_err(format!("tensor {} overlaps or leaves a gap", e.name));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > data.len() {
                return format_err(format!("tensor {} runs past the end", e.name));
            }
            let values = data[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected = end;
            if tensors.insert(e.name.clone(), Tensor { shape: e.shape, data: values }).is_some() {
                return format_err(format!("duplicate tensor {}", e.name));
            }
        }
        if expected != data.len() {
            return format_err("trailing bytes after the last tensor");
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn put_indexers(&mut self, params: &[IndexerParams]) {
        for (l, p) in params.iter().enumerate() {
            self.insert_matrix(format!("idx.{l}.u_q"), &p.u_q);
            self.insert_matrix(format!("idx.{l}.u_k"), &p.u_k);
            self.insert_matrix(format!("idx.{l}.g"), &p.g);
        }
    }

    pub fn indexers(&self, n_layers: usize, config: IndexerConfig) -> Result<Vec<IndexerParams>> {
        (0..n_layers)
            .map(|l| {
                let p = IndexerParams {
                    config,
                    u_q: self.matrix(&format!("idx.{l}.u_q"))?,
                    u_k: self.matrix(&format!("idx.{l}.u_k"))?,
                    g: self.matrix(&format!("idx.{l}.g"))?,
                };
                let width = config.n_heads * config.d_index;
                if p.u_q.rows() != width || p.u_k.rows() != config.d_index || p.g.rows() != config.n_heads {
                    return format_err(format!("indexer tensors of layer {l} do not match the config"));
                }
                Ok(p)
            })
            .collect()
    }

    pub fn has_memories(&self) -> bool {
        self.contains("mem.0.w_phi")
    }

    pub fn put_memories(&mut self, slow: &[MemorySlowWeights]) {
        for (l, s) in slow.iter().enumerate() {
            self.insert_matrix(format!("mem.{l}.w_phi"), &s.w_phi);
            self.insert(format!("mem.{l}.b_phi"), vec![s.b_phi.len()], s.b_phi.clone());
            self.insert(format!("mem.{l}.w_g"), vec![s.w_g.len()], s.w_g.clone());
            self.insert(format!("mem.{l}.bias"), vec![1], vec![s.bias]);
        }
    }

    pub fn memories(&self, n_layers: usize) -> Result<Vec<MemorySlowWeights>> {
        (0..n_layers)
            .map(|l| {
                let w_phi = self.matrix(&format!("mem.{l}.w_phi"))?;
                let b_phi = self.get(&format!("mem.{l}.b_phi"))?.data.clone();
                let w_g = self.get(&format!("mem.{l}.w_g"))?.data.clone();
                let bias = self.get(&format!("mem.{l}.bias"))?.data.clone();
                if b_phi.len() != w_phi.rows() || w_g.len() != w_phi.cols() || bias.len() != 1 {
                    return format_err(format!("memory tensors of layer {l} are inconsistent"));
                }
                Ok(MemorySlowWeights {
                    w_phi,
                    b_phi,
                    w_g,
                    bias: bias[0],
                })
            })
            .collect()
    }
}
