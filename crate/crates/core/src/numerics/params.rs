//! Named parameter storage, initialization and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "CTXD" | version: u32 | count: u32
//! count x { name_len: u32 | name: utf8 | rank: u32 | dims: u32 x rank | offset: u64 }
//! data_len: u64 (in f32 values) | data: f32 x data_len
//! ```
//!
//! `offset` counts f32 values from the start of the data section.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTXD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Fan-in scaled normal init for a `[k,k,cin,cout]` convolution kernel.
    pub fn conv_normal(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor<f32> {
        let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng) as f32)
    }

    /// Fan-in scaled normal init for a depthwise `[k,k,c]` kernel.
    pub fn depthwise_normal(rng: &mut impl Rng, shape: [usize; 3]) -> Tensor<f32> {
        let fan_in = (shape[0] * shape[1]) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng) as f32)
    }

    /// Uniform Xavier init for a `[din, dout]` dense map.
    pub fn xavier(rng: &mut impl Rng, din: usize, dout: usize) -> Tensor<f32> {
        let a = (6.0 / (din + dout) as f64).sqrt();
        let uni = Uniform::new_inclusive(-a, a).expect("valid range");
        Tensor::from_fn(vec![din, dout], |_| uni.sample(rng) as f32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            offset += t.numel() as u64;
        }
        w.write_all(&offset.to_le_bytes())?;
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "checkpoint",
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r).map_err(|_| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = read_u32(r).map_err(|_| bad("truncated header"))? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r).map_err(|_| bad("truncated manifest"))? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("truncated manifest"))?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 name"))?;
            let rank = read_u32(r).map_err(|_| bad("truncated manifest"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r).map_err(|_| bad("truncated manifest"))? as usize);
            }
            let offset = read_u64(r).map_err(|_| bad("truncated manifest"))? as usize;
            manifest.push((name, shape, offset));
        }
        let total = read_u64(r).map_err(|_| bad("missing data length"))? as usize;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|_| bad("unreadable data"))?;
        if raw.len() != total * 4 {
            return Err(bad(&format!("data section holds {} bytes, expected {}", raw.len(), total * 4)));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut store = ParamStore::new();
        for (name, shape, offset) in manifest {
            let numel: usize = shape.iter().product();
            let slice = data
                .get(offset..offset + numel)
                .ok_or_else(|| bad(&format!("{name} lies outside the data section")))?;
            store.insert(name, Tensor::new(shape, slice.to_vec())?)?;
        }
        Ok(store)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Per-tape binding of store parameters to tape variables. Each parameter
/// becomes exactly one leaf, so repeated use accumulates into one gradient.
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new(store: &ParamStore) -> Self {
        Binding {
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape<f32>, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.param(store.get(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Bound `(id, var)` pairs in parameter order.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert("enc.w", ParamStore::conv_normal(&mut rng, [3, 3, 2, 4])).unwrap();
        s.insert("enc.b", Tensor::zeros(vec![4])).unwrap();
        s.insert("head.w", ParamStore::xavier(&mut rng, 4, 3)).unwrap();
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CTXD");
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.checksum(), s.checksum());
        assert_eq!(back, s);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_version_and_truncation() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();

        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(ParamStore::read_from(&mut wrong.as_slice()), Err(Error::Format { .. })));

        let mut ver = buf.clone();
        ver[4] = 9;
        assert!(matches!(ParamStore::read_from(&mut ver.as_slice()), Err(Error::Version { found: 9, .. })));

        let short = &buf[..buf.len() - 3];
        assert!(ParamStore::read_from(&mut &short[..]).is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = sample_store();
        assert!(s.insert("enc.b", Tensor::zeros(vec![1])).is_err());
    }
}
