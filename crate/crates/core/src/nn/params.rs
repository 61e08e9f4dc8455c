use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Optimizer parameter group; each group has its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub group: Group,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

const MAGIC: &[u8; 8] = b"KGIRW001";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Mat, group: Group) -> ParamId {
        self.params.push(Param {
            name: name.to_string(),
            value,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: (usize, usize),
        bound: f64,
        group: Group,
        rng: &mut R,
    ) -> ParamId {
        let value = Array2::from_shape_fn(shape, |_| rng.random_range(-bound..=bound));
        self.add(name, value, group)
    }

    /// Glorot-uniform weight matrix `fan_in x fan_out`.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: Group,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, (fan_in, fan_out), bound, group, rng)
    }

    pub fn add_zeros(&mut self, name: &str, shape: (usize, usize), group: Group) -> ParamId {
        self.add(name, Array2::zeros(shape), group)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Binary blob: magic, count, then per tensor name/shape/little-endian data.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[match p.group {
                Group::Encoder => 0,
                Group::Decoder => 1,
            }])?;
            let (r, c) = p.value.dim();
            w.write_all(&(r as u32).to_le_bytes())?;
            w.write_all(&(c as u32).to_le_bytes())?;
            for v in p.value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("weights blob: {m}"));
        let io = |e: std::io::Error| Error::Config(format!("weights blob: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let read_u32 = |r: &mut dyn Read| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(io)?;
            Ok(u32::from_le_bytes(b))
        };
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not utf-8"))?;
            let mut group = [0u8; 1];
            r.read_exact(&mut group).map_err(io)?;
            let group = match group[0] {
                0 => Group::Encoder,
                1 => Group::Decoder,
                _ => return Err(bad("unknown group")),
            };
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut b = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut b).map_err(io)?;
                data.push(f64::from_le_bytes(b));
            }
            let value = Array2::from_shape_vec((rows, cols), data).map_err(|_| bad("shape"))?;
            store.add(&name, value, group);
        }
        Ok(store)
    }

    /// Copies values from `other`, which must have the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                actual: other.len(),
            });
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.dim() != theirs.value.dim() {
                return Err(Error::Config(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    mine.name,
                    mine.value.dim(),
                    theirs.name,
                    theirs.value.dim()
                )));
            }
            mine.value.assign(&theirs.value);
        }
        Ok(())
    }
}

/// Sparse gradient set keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Mat>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, id: ParamId, g: Mat) {
        match self.grads.get_mut(&id) {
            Some(existing) => *existing += &g,
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.grads {
            self.accumulate(id, g);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().map(|(&id, g)| (id, g))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            *g *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blob_roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add_glorot("enc.w", 3, 4, Group::Encoder, &mut rng);
        store.add_zeros("dec.b", (1, 2), Group::Decoder);
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(store, back);
        assert!(ParamStore::read_from(&b"nonsense"[..]).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = Gradients::new();
        g.accumulate(ParamId(0), array![[3.0, 4.0]]);
        g.accumulate(ParamId(1), array![[12.0]]);
        assert_eq!(g.global_norm(), 13.0);
        let before = g.clip_global_norm(5.0);
        assert_eq!(before, 13.0);
        assert!((g.global_norm() - 5.0).abs() < 1e-12);
    }
}
