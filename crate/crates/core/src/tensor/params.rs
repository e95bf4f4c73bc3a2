use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use super::Real;
use crate::error::{KpxError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a stored array, used by the parameter-count audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    /// Dense or depthwise kernel-point weights.
    Kernel,
    /// Modulation-generator MLP (KPConvX / KPInv only).
    Modulation,
    /// Linear layers of blocks, decoders and heads.
    Linear,
    /// Batch-norm scale and shift.
    Norm,
    /// Non-trainable running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl<T> Param<T> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Named, ordered collection of model arrays.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "{name}");
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            grad: vec![T::zero(); value.len()],
            value,
            trainable: kind != ParamKind::Buffer,
            kind,
        });
        id
    }

    /// Adds a parameter drawn from `U(-bound, bound)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        kind: ParamKind,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
        self.add(name, shape, value, kind)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Two disjoint mutable views into one buffer-like parameter pair.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b);
        if a.0 < b.0 {
            let (lo, hi) = self.params.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.params.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|&v| U::of(v.f64())).collect(),
                    grad: p.grad.iter().map(|&v| U::of(v.f64())).collect(),
                    kind: p.kind,
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Snapshot of every array as a checkpoint (values stored as 32-bit).
    pub fn to_checkpoint(&self, config: Option<String>) -> Checkpoint {
        Checkpoint {
            config,
            entries: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        p.shape.clone(),
                        p.value.iter().map(|v| v.f64() as f32).collect(),
                    )
                })
                .collect(),
        }
    }

    /// Overwrites values from a checkpoint. Every stored array must be
    /// present with a matching shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let entries: HashMap<&str, (&Vec<usize>, &Vec<f32>)> = ckpt
            .entries
            .iter()
            .map(|(n, s, v)| (n.as_str(), (s, v)))
            .collect();
        for p in &mut self.params {
            let (shape, values) = entries
                .get(p.name.as_str())
                .ok_or_else(|| KpxError::contract(format!("checkpoint lacks `{}`", p.name)))?;
            if **shape != p.shape {
                return Err(KpxError::Shape {
                    op: "load_checkpoint",
                    lhs: p.shape.clone(),
                    rhs: (*shape).clone(),
                });
            }
            p.value = values.iter().map(|&v| T::of(v as f64)).collect();
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"KPXC";

/// Flat archive of `(name, shape, f32 values)` entries.
///
/// Layout, all integers little-endian:
///
/// ```text
/// "KPXC" | u32 version | u32 config_len | config (UTF-8) | u32 entry_count
/// entry: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 values[prod(dims)]
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Option<String>,
    pub entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = self.config.as_deref().unwrap_or("").as_bytes();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, shape, values) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| KpxError::Unsupported(format!("checkpoint: {m}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("version {version}")));
        }
        let cfg_len = read_u32(r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config = if cfg_len == 0 {
            None
        } else {
            Some(String::from_utf8(cfg).map_err(|_| bad("config is not UTF-8"))?)
        };
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, shape, values));
        }
        Ok(Checkpoint { config, entries })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_layout_is_little_endian() {
        let ckpt = Checkpoint {
            config: None,
            entries: vec![("w".into(), vec![1], vec![1.0])],
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let expected: Vec<u8> = [
            b"KPXC".to_vec(),
            1u32.to_le_bytes().to_vec(),
            0u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
            b"w".to_vec(),
            1u32.to_le_bytes().to_vec(),
            1u64.to_le_bytes().to_vec(),
            1.0f32.to_le_bytes().to_vec(),
        ]
        .concat();
        assert_eq!(buf, expected);
    }

    #[test]
    fn store_round_trips_through_checkpoint() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", &[2, 2], vec![0.5, -1.25, 3.0, 0.0], ParamKind::Linear);
        store.add("a.running", &[2], vec![1.0, 2.0], ParamKind::Buffer);
        let mut buf = Vec::new();
        store
            .to_checkpoint(Some("name = \"x\"".into()))
            .write_to(&mut buf)
            .unwrap();
        let ckpt = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(ckpt.config.as_deref(), Some("name = \"x\""));
        let mut other = store.clone();
        other.iter_mut().for_each(|p| p.value.iter_mut().for_each(|v| *v = 0.0));
        other.load_checkpoint(&ckpt).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(store.num_trainable(), 4);
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", &[3], vec![1.0, 2.0, 3.0], ParamKind::Kernel);
        let mut buf = Vec::new();
        store.to_checkpoint(None).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
