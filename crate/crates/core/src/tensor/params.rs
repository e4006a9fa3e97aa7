use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn push_glorot<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> usize {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.push(name, Tensor::raw(rows, cols, data))
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.push(name, Tensor::zeros(rows, cols))
    }

    pub fn push_filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> usize {
        self.push(name, Tensor::raw(rows, cols, vec![v; rows * cols]))
    }

    /// Registers every tensor as a trainable leaf of `g`, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    pub fn fill(&mut self, v: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub model: Option<serde_json::Value>,
}

/// Flat little-endian `f64` file plus a JSON manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: ParamStore, seed: u64, step: u64) -> Self {
        let manifest = CheckpointManifest {
            names: params.names.clone(),
            shapes: params.tensors.iter().map(|t| vec![t.rows(), t.cols()]).collect(),
            seed,
            step,
            model: None,
        };
        Self { manifest, params }
    }

    pub fn write_values<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(self.params.n_values() * 8);
        for t in &self.params.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
    }

    pub fn read_values<R: Read>(manifest: CheckpointManifest, mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::io("<checkpoint>", e))?;
        let total: usize = manifest.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if buf.len() != total * 8 || manifest.names.len() != manifest.shapes.len() {
            return Err(Error::Format {
                path: "<checkpoint>".into(),
                reason: format!("expected {total} values, found {} bytes", buf.len()),
            });
        }
        let mut values = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut params = ParamStore::new();
        for (name, shape) in manifest.names.iter().zip(&manifest.shapes) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            params.push(name.clone(), Tensor::new(shape.clone(), data)?);
        }
        Ok(Self { manifest, params })
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let f = std::fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        self.write_values(std::io::BufWriter::new(f))?;
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let f = std::fs::File::open(&bin).map_err(|e| Error::io(&bin, e))?;
        Self::read_values(manifest, f)
    }
}
