//! Named parameter arrays, their optimizer state, and the checkpoint format
//! (flat little-endian fp64 binary plus a JSON manifest of name/shape/offset).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, TensorId};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("checkpoint i/o at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All trainable (and freezable) arrays of a run, keyed by dotted names
/// such as `geo.grid.l0` or `lora.b2.q.b`. BTreeMap keeps iteration order
/// stable, which the optimizer and checkpoint writer rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "{name}");
        self.entries.insert(name.to_string(), ParamEntry { shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry, ParamError> {
        self.entries.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry, ParamError> {
        self.entries.get_mut(name).ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    /// FNV-1a over the raw bits of a name's values; detects any mutation.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, entry) in self.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for v in &entry.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Maps parameter names to tape leaves for one graph build, so that each
/// parameter is inserted once per tape and its gradient can be read back
/// by name after the reverse sweep.
#[derive(Default)]
pub struct LeafSet {
    map: BTreeMap<String, TensorId>,
}

impl LeafSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert (or reuse) `name` as a trainable leaf.
    pub fn leaf(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> TensorId {
        if let Some(&id) = self.map.get(name) {
            return id;
        }
        let entry = store.get(name).expect("registered parameter");
        let id = tape
            .leaf(entry.data.clone(), entry.shape.clone())
            .expect("store entries are consistent");
        self.map.insert(name.to_string(), id);
        id
    }

    /// Insert (or reuse) `name` as a frozen constant: no gradient flows.
    pub fn frozen(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> TensorId {
        if let Some(&id) = self.map.get(name) {
            return id;
        }
        let entry = store.get(name).expect("registered parameter");
        let id = tape
            .constant(entry.data.clone(), entry.shape.clone())
            .expect("store entries are consistent");
        self.map.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.map.get(name).copied()
    }

    /// Collect gradients for every registered leaf, zeros where none flowed.
    pub fn gradients(&self, tape: &Tape, grads: &crate::tensor::Gradients) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .filter(|(_, &id)| tape.requires_grad(id))
            .map(|(name, &id)| (name.clone(), grads.get_or_zeros(id, tape.data(id).len())))
            .collect()
    }
}

/// Adam over one parameter group. Moments are stored per name and persist
/// across stages in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over `grads`; parameters without an entry are untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<(), ParamError> {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (name, g) in grads {
            let entry = store.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                entry.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn moment_arrays(&self) -> impl Iterator<Item = (String, &Vec<f64>)> {
        self.m
            .iter()
            .map(|(k, v)| (format!("m.{k}"), v))
            .chain(self.v.iter().map(|(k, v)| (format!("v.{k}"), v)))
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestArray {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: serde_json::Value,
    arrays: Vec<ManifestArray>,
}

/// Writes `<stem>.bin` and `<stem>.json`: params, optimizer moments, and a
/// caller-supplied metadata blob.
pub fn save_checkpoint(
    stem: &Path,
    store: &ParamStore,
    optimizers: &BTreeMap<String, &Adam>,
    meta: serde_json::Value,
) -> Result<(), ParamError> {
    let mut arrays = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64], blob: &mut Vec<u8>| {
        arrays.push(ManifestArray { name, shape, offset: blob.len() as u64 });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, entry) in store.iter() {
        push(format!("param.{name}"), entry.shape.clone(), &entry.data, &mut blob);
    }
    for (group, adam) in optimizers {
        for (name, data) in adam.moment_arrays() {
            push(format!("adam.{group}.{name}"), vec![data.len()], data, &mut blob);
        }
        push(format!("adam.{group}.step_count"), vec![1], &[adam.step_count as f64], &mut blob);
    }

    let io = |source| ParamError::Io { path: stem.display().to_string(), source };
    let bin_path = stem.with_extension("bin");
    let mut f = fs::File::create(&bin_path).map_err(io)?;
    f.write_all(&blob).map_err(io)?;
    let manifest = Manifest { meta, arrays };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ParamError::Manifest(e.to_string()))?;
    fs::write(stem.with_extension("json"), json).map_err(io)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub meta: serde_json::Value,
    pub store: ParamStore,
    pub optimizers: BTreeMap<String, Adam>,
}

/// Reads a checkpoint written by [`save_checkpoint`]. `stem` may point at
/// either the `.json` manifest or the bare stem.
pub fn load_checkpoint(stem: &Path) -> Result<LoadedCheckpoint, ParamError> {
    let stem = if stem.extension().is_some() { stem.with_extension("") } else { stem.to_path_buf() };
    let io = |source| ParamError::Io { path: stem.display().to_string(), source };
    let json = fs::read_to_string(stem.with_extension("json")).map_err(io)?;
    let manifest: Manifest =
        serde_json::from_str(&json).map_err(|e| ParamError::Manifest(e.to_string()))?;
    let blob = fs::read(stem.with_extension("bin")).map_err(io)?;

    let mut store = ParamStore::new();
    let mut optimizers: BTreeMap<String, Adam> = BTreeMap::new();
    for arr in &manifest.arrays {
        let count: usize = arr.shape.iter().product();
        let start = arr.offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(ParamError::Manifest(format!("array {} exceeds blob", arr.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if let Some(name) = arr.name.strip_prefix("param.") {
            store.insert(name, arr.shape.clone(), data);
        } else if let Some(rest) = arr.name.strip_prefix("adam.") {
            let (group, field) = rest
                .split_once('.')
                .ok_or_else(|| ParamError::Manifest(format!("bad adam entry {}", arr.name)))?;
            let adam = optimizers.entry(group.to_string()).or_insert_with(Adam::new);
            if field == "step_count" {
                adam.step_count = data[0] as u64;
            } else if let Some(name) = field.strip_prefix("m.") {
                adam.m.insert(name.to_string(), data);
            } else if let Some(name) = field.strip_prefix("v.") {
                adam.v.insert(name.to_string(), data);
            } else {
                return Err(ParamError::Manifest(format!("bad adam entry {}", arr.name)));
            }
        } else {
            return Err(ParamError::Manifest(format!("unknown array {}", arr.name)));
        }
    }
    Ok(LoadedCheckpoint { meta: manifest.meta, store, optimizers })
}
