use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::Mat;
use crate::error::{DvcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter storage. Registration order is stable, so two
/// stores built by the same constructor with the same RNG are identical.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    frozen: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform initialisation.
    pub fn add_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn add_full(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), v))
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Append every parameter of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Vec<ParamId> {
        other
            .ids()
            .map(|id| {
                let new = self.add(format!("{prefix}{}", other.name(id)), other.value(id).clone());
                self.frozen[new.0] = other.is_frozen(id);
                new
            })
            .collect()
    }

    /// Write one raw little-endian `f64` file per parameter plus `params.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, (name, value)) in self.names.iter().zip(&self.values).enumerate() {
            let file = format!("p{i:04}.f64");
            let bytes: Vec<u8> = value.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(dir.join(&file), bytes)?;
            entries.push(ParamEntry { name: name.clone(), file, shape: [value.nrows(), value.ncols()] });
        }
        let manifest = ParamManifest { tensors: entries };
        std::fs::write(dir.join("params.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Overwrite values from a directory written by [`ParamStore::save`].
    /// Names and shapes must match exactly.
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let text = std::fs::read_to_string(dir.join("params.json"))
            .map_err(|e| DvcError::Checkpoint(format!("{}: {e}", dir.join("params.json").display())))?;
        let manifest: ParamManifest = serde_json::from_str(&text)?;
        let by_name: BTreeMap<&str, &ParamEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        if by_name.len() != self.len() {
            return Err(DvcError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                by_name.len(),
                self.len()
            )));
        }
        for i in 0..self.len() {
            let name = &self.names[i];
            let entry =
                by_name.get(name.as_str()).ok_or_else(|| DvcError::Checkpoint(format!("missing tensor {name}")))?;
            let expected = self.values[i].dim();
            if (entry.shape[0], entry.shape[1]) != expected {
                return Err(DvcError::Checkpoint(format!(
                    "tensor {name}: shape {:?} != expected {expected:?}",
                    entry.shape
                )));
            }
            let path = dir.join(&entry.file);
            let bytes = std::fs::read(&path)?;
            if bytes.len() != expected.0 * expected.1 * 8 {
                return Err(DvcError::Checkpoint(format!("{}: truncated tensor", path.display())));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            self.values[i] = Array2::from_shape_vec(expected, data).expect("length checked");
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct ParamManifest {
    tensors: Vec<ParamEntry>,
}
