//! Named parameter sets, the SGD optimizer, and the checkpoint container.
//!
//! Checkpoints are a versioned binary file holding every named f64 array
//! little-endian plus the config hash of the run that produced them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Tensor};

/// Ordered name -> tensor map. Iteration order is the name order, which keeps
/// every consumer (optimizer, checkpoint writer, hashing) deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t.detach());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| CoreError::Invalid(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Bind every parameter onto a tape; `trainable` decides the
    /// requires-grad flag per name.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let mut bound = BTreeMap::new();
        for (name, t) in &self.entries {
            bound.insert(name.clone(), tape.leaf(t, trainable(name)));
        }
        BoundParams { bound }
    }

    /// Exponential moving average update: self <- mu * self + (1 - mu) * other.
    pub fn ema_from(&mut self, other: &ParamSet, mu: f64) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(CoreError::Invalid(format!(
                "parameter layout mismatch: {} vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (name, mine) in self.entries.iter_mut() {
            let theirs = other
                .entries
                .get(name)
                .ok_or_else(|| CoreError::Invalid(format!("layout mismatch at '{name}'")))?;
            if mine.shape() != theirs.shape() {
                return Err(CoreError::Invalid(format!(
                    "shape mismatch at '{name}': {:?} vs {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
            let data: Vec<f64> = mine
                .data()
                .iter()
                .zip(theirs.data())
                .map(|(&a, &b)| mu * a + (1.0 - mu) * b)
                .collect();
            *mine = Tensor::from_vec(mine.shape().to_vec(), data)?;
        }
        Ok(())
    }

    /// Merge another set under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Split off the entries under a prefix, stripping it.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and raw values; used by frozen-parameter
    /// assertions.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        out
    }
}

/// Parameters bound to one tape for a forward pass.
pub struct BoundParams {
    bound: BTreeMap<String, Tensor>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.bound
            .get(name)
            .ok_or_else(|| CoreError::Invalid(format!("missing bound parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.bound.iter()
    }
}

/// SGD with momentum and decoupled-from-nothing classic weight decay
/// (decay folded into the gradient, matching the usual formulation).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Sgd {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// v <- m*v + (g + wd*theta); theta <- theta - lr*v, over `grads` keys.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let t = params.get(name)?.clone();
            if g.len() != t.len() {
                return Err(CoreError::Invalid(format!(
                    "gradient size mismatch at '{name}': {} vs {}",
                    g.len(),
                    t.len()
                )));
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut data = t.data().to_vec();
            for i in 0..g.len() {
                vel[i] = self.momentum * vel[i] + g[i] + self.weight_decay * data[i];
                data[i] -= lr * vel[i];
            }
            params.insert(name.clone(), Tensor::from_vec(t.shape().to_vec(), data)?);
        }
        Ok(())
    }

    /// Velocity buffers as named tensors (for checkpointing).
    pub fn state(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, v) in &self.velocity {
            out.insert(name.clone(), Tensor::from_vec(vec![v.len()], v.clone()).unwrap());
        }
        out
    }

    pub fn restore_state(&mut self, state: &ParamSet) {
        self.velocity.clear();
        for (name, t) in state.iter() {
            self.velocity.insert(name.clone(), t.data().to_vec());
        }
    }
}

/// Cosine-annealed learning rate from `lr0` down to zero.
pub fn cosine_lr(lr0: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * p).cos())
}

// ---- checkpoint io ----------------------------------------------------------

const MAGIC: &[u8; 8] = b"FCLCKPT1";

pub fn save_checkpoint(path: &Path, params: &ParamSet, config_hash: &[u8; 32]) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&1u32.to_le_bytes()).map_err(io)?;
    w.write_all(config_hash).map_err(io)?;
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(io)?;
    for (name, t) in params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(nb).map_err(io)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, [u8; 32])> {
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| CoreError::io(path.display().to_string(), e);
    let parse = |detail: &str| CoreError::Parse {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(parse("bad magic; not a checkpoint file"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != 1 {
        return Err(parse(&format!("unsupported checkpoint version {version}")));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash).map_err(io)?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(io)?;
    let count = u64::from_le_bytes(u64buf);

    let mut params = ParamSet::new();
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(io)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| parse("parameter name is not utf-8"))?;
        r.read_exact(&mut u32buf).map_err(io)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64buf).map_err(io)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().product::<usize>().max(1);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf).map_err(io)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    Ok((params, hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_endpoints() {
        let mk = |v: f64| {
            let mut p = ParamSet::new();
            p.insert("w", Tensor::from_vec(vec![1], vec![v]).unwrap());
            p
        };
        // mu = 1 leaves the teacher unchanged.
        let mut t = mk(2.0);
        t.ema_from(&mk(4.0), 1.0).unwrap();
        assert_eq!(t.get("w").unwrap().data(), &[2.0]);
        // mu = 0 copies the student.
        let mut t = mk(2.0);
        t.ema_from(&mk(4.0), 0.0).unwrap();
        assert_eq!(t.get("w").unwrap().data(), &[4.0]);
        // mu = 0.5 midpoint.
        let mut t = mk(2.0);
        t.ema_from(&mk(4.0), 0.5).unwrap();
        assert_eq!(t.get("w").unwrap().data(), &[3.0]);
    }

    #[test]
    fn ema_layout_mismatch_errors() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::zeros(vec![2]));
        let mut b = ParamSet::new();
        b.insert("v", Tensor::zeros(vec![2]));
        assert!(a.ema_from(&b, 0.5).is_err());
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap());
        let mut opt = Sgd::new(0.0, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5, -0.5]);
        opt.step(&mut p, &grads, 0.1).unwrap();
        let w = p.get("w").unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-15);
        assert!((w.data()[1] + 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let mut opt = Sgd::new(0.9, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        opt.step(&mut p, &grads, 1.0).unwrap(); // v=1, w=-1
        opt.step(&mut p, &grads, 1.0).unwrap(); // v=1.9, w=-2.9
        assert!((p.get("w").unwrap().data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_shape() {
        assert!((cosine_lr(1.0, 0.0) - 1.0).abs() < 1e-15);
        assert!(cosine_lr(1.0, 1.0).abs() < 1e-15);
        assert!((cosine_lr(1.0, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.fclckpt");
        let mut p = ParamSet::new();
        p.insert("b.weight", Tensor::from_vec(vec![2, 2], vec![1.5, -2.25, 0.0, 1e-17]).unwrap());
        p.insert("a.scalar", Tensor::scalar(42.0));
        let hash = [7u8; 32];
        save_checkpoint(&path, &p, &hash).unwrap();
        let (q, h2) = load_checkpoint(&path).unwrap();
        assert_eq!(h2, hash);
        assert_eq!(q.len(), 2);
        assert_eq!(q.get("b.weight").unwrap().data(), p.get("b.weight").unwrap().data());
        assert_eq!(q.get("a.scalar").unwrap().shape(), &[] as &[usize]);
        assert_eq!(p.content_hash(), q.content_hash());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
