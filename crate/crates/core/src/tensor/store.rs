//! Named parameter storage, the SGD-with-momentum update, and binary
//! checkpoints. Entries keep insertion order so updates, checkpoints, and
//! reloads are reproducible byte for byte.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use super::array::Array;
use super::graph::Tensor;
use super::scalar::Scalar;

const MAGIC: &[u8; 6] = b"GCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic at offset 0: {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated checkpoint at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed checkpoint at offset {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("checkpoint names do not match store: missing {missing:?}, extra {extra:?}")]
    NameSetMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("checkpoint tensor {name} has shape {found:?}, store expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct Entry<E: Scalar> {
    name: String,
    value: Array<E>,
    velocity: Vec<E>,
}

/// Ordered name -> tensor map holding everything a model learns.
pub struct ParameterStore<E: Scalar> {
    entries: Vec<Entry<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Scalar> Default for ParameterStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> std::fmt::Debug for ParameterStore<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut d = f.debug_map();
        for e in &self.entries {
            d.entry(&e.name, &e.value.shape());
        }
        d.finish()
    }
}

impl<E: Scalar> ParameterStore<E> {
    pub fn new() -> Self {
        ParameterStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array<E>) {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.to_string(), self.entries.len());
        let velocity = vec![E::zero(); value.numel()];
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            velocity,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Array<E>> {
        self.by_name.get(name).map(|&i| &self.entries[i].value)
    }

    /// Trainable graph leaf sharing the stored payload (no copy).
    pub fn param(&self, name: &str) -> Tensor<E> {
        let arr = self
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        Tensor::param(arr.clone())
    }

    /// Constant graph leaf sharing the stored payload.
    pub fn constant(&self, name: &str) -> Tensor<E> {
        let arr = self
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        Tensor::leaf(arr.clone())
    }

    /// One SGD step: `v = momentum * v + g; w = w - lr * v`. Parameters
    /// without a gradient entry stay untouched.
    pub fn sgd_step(&mut self, grads: &Gradients<E>, lr: E, momentum: E) {
        for entry in &mut self.entries {
            let g = match grads.get(&entry.name) {
                Some(g) => g,
                None => continue,
            };
            assert_eq!(
                g.len(),
                entry.value.numel(),
                "gradient size mismatch for {}",
                entry.name
            );
            let w = entry.value.data_mut();
            for i in 0..w.len() {
                entry.velocity[i] = momentum * entry.velocity[i] + g[i];
                w[i] = w[i] - lr * entry.velocity[i];
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Add `delta` to one scalar of a stored parameter (finite-difference probes).
    pub fn nudge(&mut self, name: &str, index: usize, delta: E) {
        let i = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let w = self.entries[i].value.data_mut();
        w[index] = w[index] + delta;
    }
}

impl ParameterStore<f32> {
    /// Writes `GCKPT1 | count | {name_len, name, rank, extents i64, payload f32}`,
    /// all little-endian, entries in store order.
    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            let shape = e.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as i64).to_le_bytes())?;
            }
            for &v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint_file(&self, path: &Path) -> io::Result<()> {
        let f = std::fs::File::create(path)?;
        let mut buf = io::BufWriter::new(f);
        self.save_checkpoint(&mut buf)?;
        buf.flush()
    }

    /// Replaces every stored value from the checkpoint. The name sets must
    /// match exactly and shapes must agree; momentum state resets.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), CheckpointError> {
        let parsed = parse_checkpoint(bytes)?;
        let mut missing: Vec<String> = Vec::new();
        for e in &self.entries {
            if !parsed.iter().any(|(n, _, _)| n == &e.name) {
                missing.push(e.name.clone());
            }
        }
        let extra: Vec<String> = parsed
            .iter()
            .map(|(n, _, _)| n.clone())
            .filter(|n| !self.by_name.contains_key(n))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(CheckpointError::NameSetMismatch { missing, extra });
        }
        for (name, shape, data) in parsed {
            let idx = self.by_name[&name];
            let entry = &mut self.entries[idx];
            if entry.value.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: entry.value.shape().to_vec(),
                    found: shape,
                });
            }
            entry.value = Array::from_vec(&shape, data);
            entry.velocity = vec![0.0; entry.value.numel()];
        }
        Ok(())
    }

    pub fn load_checkpoint_file(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        self.load_checkpoint(&bytes)
    }

    /// Builds a store with the checkpoint's own entries and order.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let parsed = parse_checkpoint(bytes)?;
        let mut store = ParameterStore::new();
        for (name, shape, data) in parsed {
            if store.by_name.contains_key(&name) {
                return Err(CheckpointError::Malformed {
                    offset: 0,
                    msg: format!("duplicate tensor name {name}"),
                });
            }
            store.insert(&name, Array::from_vec(&shape, data));
        }
        Ok(store)
    }
}

type ParsedTensor = (String, Vec<usize>, Vec<f32>);

fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<ParsedTensor>, CheckpointError> {
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *off + n > bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: *off,
                needed: *off + n - bytes.len(),
            });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let magic = take(&mut off, MAGIC.len())?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_off = off;
        let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec()).map_err(|_| {
            CheckpointError::Malformed {
                offset: name_off,
                msg: "tensor name is not UTF-8".into(),
            }
        })?;
        let rank = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed {
                offset: off - 4,
                msg: format!("implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let ext_off = off;
            let e = i64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            if e < 0 {
                return Err(CheckpointError::Malformed {
                    offset: ext_off,
                    msg: format!("negative extent {e}"),
                });
            }
            shape.push(e as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut off, numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, data));
    }
    if off != bytes.len() {
        return Err(CheckpointError::Malformed {
            offset: off,
            msg: format!("{} trailing bytes", bytes.len() - off),
        });
    }
    Ok(out)
}

/// Accumulated gradients keyed by parameter name. Accumulation order is the
/// caller's call order, so summing per-clip contributions clip by clip stays
/// bit-stable.
pub struct Gradients<E: Scalar> {
    entries: Vec<(String, Vec<E>)>,
    by_name: HashMap<String, usize>,
}

impl<E: Scalar> Default for Gradients<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Gradients<E> {
    pub fn new() -> Self {
        Gradients {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: &[E]) {
        match self.by_name.get(name) {
            Some(&i) => {
                let dst = &mut self.entries[i].1;
                assert_eq!(dst.len(), grad.len(), "gradient size changed for {name}");
                for (d, s) in dst.iter_mut().zip(grad) {
                    *d = *d + *s;
                }
            }
            None => {
                self.by_name.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), grad.to_vec()));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[E]> {
        self.by_name.get(name).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn merge(&mut self, other: &Gradients<E>) {
        for (name, g) in &other.entries {
            self.accumulate(name, g);
        }
    }

    pub fn scale(&mut self, s: E) {
        for (_, g) in &mut self.entries {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Uniform init in `[-bound, bound]` with `bound = sqrt(1 / fan_in)`, the
/// usual scheme for small conv stacks. Samples are drawn in f64 and cast, so
/// an f32 and an f64 model see the same underlying sequence.
pub fn fan_in_uniform<E: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Array<E> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Array::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_frozen_example() {
        // f(w) = w^2, w = 1, grad = 2, lr = 0.1, momentum = 0 -> w = 0.8
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Array::scalar(1.0));
        let mut grads = Gradients::new();
        grads.accumulate("w", &[2.0]);
        store.sgd_step(&grads, 0.1, 0.0);
        assert_eq!(store.get("w").unwrap().item(), 0.8);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Array::scalar(0.0));
        let mut grads = Gradients::new();
        grads.accumulate("w", &[1.0]);
        store.sgd_step(&grads, 1.0, 0.9); // v=1, w=-1
        store.sgd_step(&grads, 1.0, 0.9); // v=1.9, w=-2.9
        assert!((store.get("w").unwrap().item() + 2.9).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Array::from_vec(&[2], vec![1.5, -0.5]));
        let mut grads = Gradients::new();
        grads.accumulate("w", &[3.0, 4.0]);
        store.sgd_step(&grads, 0.0, 0.9);
        assert_eq!(store.get("w").unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("a.weight", Array::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 1.0e-7, -0.0, 5.5]));
        store.insert("a.bias", Array::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let mut bytes = Vec::new();
        store.save_checkpoint(&mut bytes).unwrap();
        let loaded = ParameterStore::from_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.names().collect::<Vec<_>>(), vec!["a.weight", "a.bias"]);
        for name in ["a.weight", "a.bias"] {
            let a = store.get(name).unwrap();
            let b = loaded.get(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn load_reports_missing_and_extra_names() {
        let mut a = ParameterStore::<f32>::new();
        a.insert("x", Array::scalar(1.0));
        let mut bytes = Vec::new();
        a.save_checkpoint(&mut bytes).unwrap();

        let mut b = ParameterStore::<f32>::new();
        b.insert("y", Array::scalar(2.0));
        match b.load_checkpoint(&bytes) {
            Err(CheckpointError::NameSetMismatch { missing, extra }) => {
                assert_eq!(missing, vec!["y".to_string()]);
                assert_eq!(extra, vec!["x".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation_carry_offsets() {
        assert!(matches!(
            ParameterStore::from_checkpoint(b"NOTCKP\0\0\0\0"),
            Err(CheckpointError::BadMagic { .. })
        ));
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Array::from_vec(&[4], vec![0.0; 4]));
        let mut bytes = Vec::new();
        store.save_checkpoint(&mut bytes).unwrap();
        let cut = bytes.len() - 3;
        match ParameterStore::from_checkpoint(&bytes[..cut]) {
            Err(CheckpointError::Truncated { offset, needed }) => {
                assert!(offset <= cut && needed == 3);
            }
            Err(other) => panic!("unexpected {other:?}"),
            Ok(_) => panic!("truncated checkpoint parsed"),
        }
    }
}
