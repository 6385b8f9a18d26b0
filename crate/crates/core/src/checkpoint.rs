//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ARENCKPT" | u32 version | u32 len, config UTF-8 | u32 entry count
//! per entry: u32 len, name UTF-8 | u8 dtype (0 = f32) | u8 rank | rank × u32 dims | f32 payload
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ARENCKPT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Configuration text plus named `f32` tensors, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub entries: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self {
            config: config.into(),
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        ensure!(!self.entries.contains_key(&name), "duplicate checkpoint entry {name}");
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("checkpoint has no entry {name}")))
    }

    /// Store every parameter of `store` under `prefix + name`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore<f32>) -> Result<()> {
        for (name, p) in store.iter() {
            let mut t = p.tensor.clone();
            t.clear_grad();
            self.insert(format!("{prefix}{name}"), t)?;
        }
        Ok(())
    }

    /// Overwrite every parameter of `store` from entries under `prefix`,
    /// listing all missing or mis-shaped entries on failure.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let mut problems = Vec::new();
        for (name, p) in store.iter() {
            match self.entries.get(&format!("{prefix}{name}")) {
                None => problems.push(format!("missing {prefix}{name}")),
                Some(t) if t.shape() != p.tensor.shape() => problems.push(format!(
                    "{prefix}{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    p.tensor.shape()
                )),
                Some(_) => {}
            }
        }
        ensure!(problems.is_empty(), "checkpoint does not fit the model: {}", problems.join("; "));
        for (name, p) in store.iter_mut() {
            p.tensor = self.entries[&format!("{prefix}{name}")].clone();
        }
        Ok(())
    }

    /// Total number of stored values under `prefix`.
    pub fn value_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config)?;
        out.extend_from_slice(&len_u32(self.entries.len())?.to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name)?;
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            out.reserve(t.len() * 4);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(r.error_at(0, "bad magic bytes, not a checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_at(8, format!("unsupported version {version}, expected {VERSION}")));
        }
        let config = r.string("config block")?;
        let count = r.u32("entry count")? as usize;
        let mut entries = IndexMap::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let start = r.pos;
            let ctx = |what: &str| format!("entry {i} {what}");
            let name = r.string(&ctx("name"))?;
            let ctx = |what: &str| format!("entry {i} ({name}) {what}");
            let dtype = r.u8(&ctx("dtype"))?;
            if dtype != DTYPE_F32 {
                return Err(r.error_at(r.pos as u64 - 1, ctx(&format!("has unknown dtype {dtype}"))));
            }
            let rank = r.u8(&ctx("rank"))? as usize;
            if !(1..=4).contains(&rank) {
                return Err(r.error_at(r.pos as u64 - 1, ctx(&format!("has invalid rank {rank}"))));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&ctx("dims"))? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.error_at(start as u64, ctx("has an overflowing shape")))?;
            let payload = r.take(n, &ctx("payload"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| r.error_at(start as u64, ctx(&e.to_string())))?;
            if entries.insert(name.clone(), tensor).is_some() {
                return Err(r.error_at(start as u64, format!("duplicate entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, entries })
    }

    /// Write via a temporary sibling file so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("length {n} does not fit in u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&len_u32(s.len())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.pos as u64,
                format!(
                    "truncated reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error_at(at, format!("{what} is not valid UTF-8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("[model]\nlevels = 1\n");
        c.insert("a.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0)).unwrap();
        c.insert("b", Tensor::new(&[3], vec![f32::MIN_POSITIVE, -0.0, 1e-40]).unwrap())
            .unwrap();
        c
    }

    #[test]
    fn byte_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"ARENCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        let cfg_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let p = 16 + cfg_len;
        assert_eq!(u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 2);
        // name "a.w", dtype, rank 2, dims 2 and 3, six floats
        assert_eq!(&bytes[p + 4..p + 8], &3u32.to_le_bytes());
        assert_eq!(&bytes[p + 8..p + 11], b"a.w");
        assert_eq!(bytes[p + 11], DTYPE_F32);
        assert_eq!(bytes[p + 12], 2);
        assert_eq!(&bytes[p + 13..p + 17], &2u32.to_le_bytes());
        assert_eq!(&bytes[p + 21..p + 25], &(-1.0f32).to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.entries.iter().zip(&back.entries) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncation_names_the_entry() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("entry 1 (b) payload"), "{msg}");
        assert!(matches!(err, Error::Checkpoint { .. }));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version 9"));
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { offset: 0, .. }));
    }

    #[test]
    fn restore_reports_every_mismatch() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a.w", Tensor::zeros(&[3, 2]), true).unwrap();
        store.insert("c", Tensor::zeros(&[1]), true).unwrap();
        let msg = sample().restore_store("", &mut store).unwrap_err().to_string();
        assert!(msg.contains("a.w") && msg.contains("missing c"), "{msg}");
    }
}
