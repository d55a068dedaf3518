//! Binary checkpoint format shared by every persisted model.
//!
//! ```text
//! "DALC"                       4 bytes magic
//! version        u32 LE        currently 1
//! seed           u64 LE
//! config_len     u32 LE, then  config_len bytes of UTF-8 `key=value` lines
//! tensor_count   u32 LE
//! per tensor:
//!   name_len     u32 LE, then  name bytes (UTF-8)
//!   ndim         u32 LE, then  ndim × u64 LE dims
//!   payload      product(dims) × f32 LE
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DALC";
pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[1];

/// Named tensors plus the configuration and seed that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl ModelCheckpoint {
    pub fn new(seed: u64) -> Self {
        ModelCheckpoint {
            seed,
            config: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("checkpoint config lacks `{key}`"),
            })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("checkpoint has no tensor `{name}`"),
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let config: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.err_at(0, format!("bad magic {magic:?}, expected \"DALC\"")));
        }
        let version = r.u32("version")?;
        if !SUPPORTED_VERSIONS.contains(&version) {
            return Err(r.err_at(
                4,
                format!("unsupported checkpoint version {version}; supported versions: {SUPPORTED_VERSIONS:?}"),
            ));
        }
        let seed = r.u64("seed")?;
        let config_len = r.u32("config length")? as usize;
        let config_start = r.pos;
        let text = std::str::from_utf8(r.take(config_len, "config")?)
            .map_err(|_| r.err_at(config_start as u64, "config is not UTF-8".into()))?;
        let mut config = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.err_at(config_start as u64, format!("config line `{line}` lacks `=`")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.err_at(name_at as u64, "tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("tensor rank")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64("tensor dim")? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let payload_at = r.pos;
            let numel = numel
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    r.err_at(
                        payload_at as u64,
                        format!("payload of `{name}` {dims:?} runs past end of file ({} bytes left)", r.remaining()),
                    )
                })?;
            let raw = r.take(numel * 4, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| r.err_at(payload_at as u64, e.to_string()))?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(r.err_at(r.pos as u64, format!("{} trailing bytes", r.remaining())));
        }
        Ok(ModelCheckpoint { seed, config, tensors })
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp-ckpt");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn err_at(&self, offset: u64, detail: String) -> Error {
        Error::Format { offset, detail }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.err_at(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ModelCheckpoint {
        let mut c = ModelCheckpoint::new(42);
        c.set("kind", "normnet");
        c.set("widths", "16,32,64");
        c.tensors.push(("a".into(), Tensor::new([2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()));
        c.tensors.push(("b".into(), Tensor::new([1], vec![7.25]).unwrap()));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config_value("widths").unwrap(), "16,32,64");
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            let err = ModelCheckpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{err}");
        }
    }

    #[test]
    fn corrupt_payload_length_reports_offset() {
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 2);
        match ModelCheckpoint::from_bytes(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert!(offset > 0),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn version_bump_names_supported_versions() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        let msg = ModelCheckpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("supported versions: [1]"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(values in proptest::collection::vec(any::<f32>(), 1..64), seed in any::<u64>()) {
            let mut c = ModelCheckpoint::new(seed);
            c.tensors.push(("t".into(), Tensor::new([values.len()], values.clone()).unwrap()));
            let back = ModelCheckpoint::from_bytes(&c.to_bytes()).unwrap();
            let got: Vec<u32> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back.seed, seed);
        }
    }
}
