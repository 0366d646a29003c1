//! Named parameter collections and the `PSET` checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "PSET" | count | { name_len | name (UTF-8) | rank | dims[rank] | f64 LE × Π dims } × count
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PSET";

/// Trainable tensors keyed by unique name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        self.tensors
            .insert(name.to_string(), t.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamSet { tensors }
    }

    /// Inserts or replaces every tensor of `other`.
    pub fn merge(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// FNV-1a over names, shapes and the exact bytes of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            feed(name.as_bytes());
            for d in t.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AutodiffError::Format(format!("bad magic {magic:?}")));
        }
        let count = read_u32(&mut r)?;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| AutodiffError::Format(format!("name is not UTF-8: {e}")))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            out.insert(&name, Tensor::new(&shape, data)?)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::vector(vec![1.5, -2.0])).unwrap();
        p.insert(
            "a.w",
            Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        )
        .unwrap();
        p
    }

    #[test]
    fn names_iterate_sorted() {
        let names: Vec<_> = sample().names().map(str::to_string).collect();
        assert_eq!(names, ["a.w", "b"]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut p = sample();
        assert!(matches!(
            p.insert("b", Tensor::scalar(0.0)),
            Err(AutodiffError::DuplicateParam(_))
        ));
    }

    #[test]
    fn pset_roundtrip_is_exact() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PSET");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        let q = ParamSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = ParamSet::read_from(&b"NOPE\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, AutodiffError::Format(_)));
    }

    #[test]
    fn checksum_sees_single_bit_changes() {
        let p = sample();
        let mut q = p.clone();
        let v = q.get_mut("b").unwrap().data_mut();
        v[0] = f64::from_bits(v[0].to_bits() ^ 1);
        assert_ne!(p.checksum(), q.checksum());
    }
}
