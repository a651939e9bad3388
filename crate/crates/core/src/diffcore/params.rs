use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{DiffError, Tensor};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Tensor,
}

/// Named parameters with a gradient slot of identical shape for each.
///
/// Names are dotted paths; the first segment is the owning network
/// (`fs.conv_w`, `cls.w`, ...), which is how optimizers and copies select
/// a sub-network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

const MAGIC: &[u8; 8] = b"WRANPRM1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        if self.entries.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        if !value.is_finite() {
            return Err(DiffError::NonFiniteParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name.to_string(), Entry { value, grad });
        Ok(())
    }

    /// Inserts a `shape` tensor drawn uniformly from `[-scale, scale]`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut Rng,
    ) -> Result<(), DiffError> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform(-scale, scale);
        }
        self.insert(name, t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, DiffError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, DiffError> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(DiffError::Shape(format!(
                "{name}: {:?} vs {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub(crate) fn value_and_grad_mut(&mut self, name: &str) -> Option<(&mut Tensor, &Tensor)> {
        self.entries.get_mut(name).map(|e| (&mut e.value, &e.grad))
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<(), DiffError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if e.grad.shape() != g.shape() {
            return Err(DiffError::Shape(format!("gradient for {name}")));
        }
        e.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| has_prefix(n, prefix))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Copies every `from.*` parameter to `to.*`, replacing existing values.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> Result<usize, DiffError> {
        let copies: Vec<(String, Tensor)> = self
            .entries
            .iter()
            .filter(|(n, _)| has_prefix(n, from))
            .map(|(n, e)| (format!("{to}{}", &n[from.len()..]), e.value.clone()))
            .collect();
        if copies.is_empty() {
            return Err(DiffError::UnknownParam(format!("{from}.*")));
        }
        let count = copies.len();
        for (name, value) in copies {
            match self.entries.get_mut(&name) {
                Some(e) => {
                    e.grad = Tensor::zeros(value.shape());
                    e.value = value;
                }
                None => self.insert(&name, value)?,
            }
        }
        Ok(count)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|n, _| !has_prefix(n, prefix));
    }

    /// Binary checkpoint: magic, record count, then per record the name,
    /// the extents and the raw little-endian `f64` values.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, e) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(e.value.shape().len() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, DiffError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DiffError::Format("bad parameter file magic".into()));
        }
        let count = read_u64(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| DiffError::Format("parameter name is not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }
}

fn has_prefix(name: &str, prefix: &str) -> bool {
    name.len() > prefix.len() && name.starts_with(prefix) && name.as_bytes()[prefix.len()] == b'.'
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            s.insert("a.w", Tensor::scalar(2.0)),
            Err(DiffError::DuplicateParam(_))
        ));
    }

    #[test]
    fn copy_prefix_is_deep() {
        let mut s = ParamStore::new();
        s.insert("fs.w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.insert("fsx.w", Tensor::vector(vec![9.0])).unwrap();
        assert_eq!(s.copy_prefix("fs", "ft").unwrap(), 1);
        s.set("ft.w", Tensor::vector(vec![5.0, 5.0])).unwrap();
        assert_eq!(s.get("fs.w").unwrap().data(), &[1.0, 2.0]);
        assert!(!s.contains("ft.x.w"));
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = Rng::new(4);
        let mut s = ParamStore::new();
        s.insert_uniform("enc.emb", &[3, 4], 0.5, &mut rng).unwrap();
        s.insert("cls.b", Tensor::vector(vec![-0.0, 1e-300, 3.5])).unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        let back = ParamStore::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn truncated_file_errors() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(ParamStore::read_from(bytes.as_slice()).is_err());
    }
}
