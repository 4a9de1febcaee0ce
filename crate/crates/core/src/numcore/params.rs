use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// How a parameter was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    /// Normal with std `1/sqrt(fan_in)`, fan-in being all axes but the last.
    Standard,
    Zero,
    One,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub init: InitRule,
}

/// Named, ordered parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, init: InitRule) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name.to_string(), Param { value, init });
        Ok(())
    }

    /// Registers a parameter initialized by `init`.
    pub fn init(&mut self, name: &str, shape: &[usize], init: InitRule, rng: &mut impl Rng) -> Result<()> {
        let value = match init {
            InitRule::Zero => Tensor::zeros(shape),
            InitRule::One => Tensor::full(shape, 1.0),
            InitRule::Standard => {
                let fan_in: usize = shape[..shape.len().saturating_sub(1)].iter().product::<usize>().max(1);
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
        };
        self.insert(name, value, init)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn init_rule(&self, name: &str) -> Option<InitRule> {
        self.params.get(name).map(|p| p.init)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, p)| (k.as_str(), &mut p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copies values from `other` for every name present in both, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in &mut self.params {
            let src = other.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            if src.shape() != p.value.shape() {
                return Err(shape_err!("`{name}`: checkpoint {:?} vs model {:?}", src.shape(), p.value.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Writes the binary checkpoint format (`BVEC`, little-endian).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("parameter path too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            let rank = u8::try_from(p.value.rank()).map_err(|_| Error::Format("rank above 255".into()))?;
            w.write_all(&[rank])?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a BVEC checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter path is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let shape = (0..rank[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(read_f64(r)?);
            }
            store.insert(&name, Tensor::new(&shape, data)?, InitRule::Standard)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BVEC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_init_reads_zero_and_names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.init("a.w", &[3, 4], InitRule::Standard, &mut rng).unwrap();
        s.init("a.gate", &[4], InitRule::Zero, &mut rng).unwrap();
        assert!(s.get("a.gate").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.init("a.w", &[1], InitRule::Zero, &mut rng).is_err());
        assert_eq!(s.numel(), 16);
    }

    #[test]
    fn checkpoint_bytes_layout() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), InitRule::Standard).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let mut want = b"BVEC".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u16.to_le_bytes());
        want.push(b'w');
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        want.extend((-2.0f64).to_le_bytes());
        assert_eq!(buf, want);
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(matches!(ParamStore::read_from(&mut bytes.as_slice()), Err(Error::Format(_))));
    }
}
