//! Named parameter storage, initialization, and bit-exact persistence.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;

use crate::tensor::Tensor;
use crate::TapeError;

const MAGIC: &[u8; 8] = b"DQPARAM1";

/// Identifies one parameter: the owning store's namespace plus its
/// position in that store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub(crate) namespace: u32,
    pub(crate) index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }

    pub fn namespace(self) -> u32 {
        self.namespace
    }
}

/// An ordered collection of named trainable tensors.
///
/// Values are reference counted so that binding a parameter onto a tape
/// does not copy it.
///
/// Stores that are bound onto the same tape must use distinct namespaces.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    namespace: u32,
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: BTreeMap<String, ParamId>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape() && bits_equal(a.data(), b.data()))
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_namespace(namespace: u32) -> Self {
        Self {
            namespace,
            ..Self::default()
        }
    }

    pub fn namespace(&self) -> u32 {
        self.namespace
    }

    fn make_id(&self, index: usize) -> ParamId {
        ParamId {
            namespace: self.namespace,
            index,
        }
    }

    fn check(&self, id: ParamId) -> usize {
        debug_assert_eq!(id.namespace, self.namespace, "parameter from another store");
        id.index
    }

    /// Panics on a duplicate name; parameter names are fixed by model code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.make_id(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|i| self.make_id(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[self.check(id)]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[self.check(id)])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.check(id);
        Arc::make_mut(&mut self.values[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[self.check(id)]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }

    /// Serializes names, shapes and raw little-endian values.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), TapeError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(value.rows() as u64).to_le_bytes())?;
            w.write_all(&(value.cols() as u64).to_le_bytes())?;
            for x in value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.num_scalars() * 8);
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TapeError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TapeError::Format("bad parameter file magic".into()));
        }
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TapeError::Format("parameter name is not utf-8".into()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            if store.index.contains_key(&name) {
                return Err(TapeError::Format(format!("duplicate parameter {name}")));
            }
            store.add(name, Tensor::from_vec(rows, cols, data));
        }
        Ok(store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TapeError> {
        Self::read_from(bytes)
    }

    /// Copies every parameter of `other` by name; fails on a missing name or
    /// a shape mismatch.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<(), TapeError> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let src = other
                .by_name(&name)
                .ok_or_else(|| TapeError::Format(format!("missing parameter {name}")))?;
            if src.shape() != self.get(id).shape() {
                return Err(TapeError::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    self.get(id).shape(),
                    src.shape()
                )));
            }
            *self.get_mut(id) = src.clone();
        }
        Ok(())
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64, TapeError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Glorot-uniform matrix of shape `fan_in x fan_out`.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in, fan_out, bound)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bytes_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("w", xavier(&mut rng, 3, 4));
        store.add(
            "b",
            Tensor::row_vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]),
        );
        let bytes = store.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(ParamStore::from_bytes(b"nonsense").is_err());
    }
}
