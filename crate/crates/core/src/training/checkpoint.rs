//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GE2A"  u32 version
//! u32 config length, UTF-8 `key=value` lines
//! u64 step
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//!             u8 rank, rank × u32 dims, raw data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GE2A";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dtype: DType,
    pub tensor: Tensor,
}

impl StoredTensor {
    pub fn f64(tensor: Tensor) -> Self {
        StoredTensor { dtype: DType::F64, tensor }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Ordered `key=value` pairs; order is preserved through save and load.
    pub config: Vec<(String, String)>,
    pub step: u64,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.tensor.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut cfg = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("config entry `{k}` cannot be encoded as a key=value line")));
            }
            cfg.push_str(k);
            cfg.push('=');
            cfg.push_str(v);
            cfg.push('\n');
        }
        put_len(&mut out, cfg.len())?;
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_len(&mut out, self.tensors.len())?;
        for (name, st) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(st.dtype.code());
            let shape = st.tensor.shape();
            let rank = u8::try_from(shape.len()).map_err(|_| Error::Checkpoint(format!("{name}: rank too large")))?;
            out.push(rank);
            for &d in shape {
                put_len(&mut out, d)?;
            }
            match st.dtype {
                DType::F64 => st.tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                DType::F32 => st.tensor.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config block")?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let mut config = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("config line without `=`: {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let step = u64::from_le_bytes(r.take(8, "step")?.try_into().unwrap());
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = match r.take(1, "dtype")?[0] {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(Error::Checkpoint(format!("{name}: unknown dtype code {d}"))),
            };
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                DType::F64 => r
                    .take(n * 8, "tensor data")?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => r
                    .take(n * 4, "tensor data")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), StoredTensor { dtype, tensor }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, step, tensors })
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = cp.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    fn sample() -> Checkpoint {
        let params = ModelParams::init(&ModelConfig::micro(), 3).unwrap();
        let mut tensors: BTreeMap<_, _> =
            params.into_map().into_iter().map(|(k, t)| (format!("param/{k}"), StoredTensor::f64(t))).collect();
        tensors.insert(
            "extra/f32".into(),
            StoredTensor { dtype: DType::F32, tensor: Tensor::new(vec![2], vec![0.5, -1.25]).unwrap() },
        );
        Checkpoint { config: vec![("a".into(), "1".into()), ("b.c".into(), "x=y".into())], step: 42, tensors }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let cp = sample();
        let bytes = cp.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, cp);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config_value("b.c"), Some("x=y"));
    }

    #[test]
    fn empty_table() {
        let cp = Checkpoint::default();
        let bytes = cp.to_bytes().unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 4);
        assert!(Checkpoint::from_bytes(&bytes).unwrap().tensors.is_empty());
    }

    #[test]
    fn header_layout() {
        let cp = Checkpoint { config: vec![("k".into(), "v".into())], step: 7, tensors: BTreeMap::new() };
        let b = cp.to_bytes().unwrap();
        assert_eq!(&b[..4], b"GE2A");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &4u32.to_le_bytes());
        assert_eq!(&b[12..16], b"k=v\n");
        assert_eq!(&b[16..24], &7u64.to_le_bytes());
    }

    #[test]
    fn rejections() {
        let mut b = sample().to_bytes().unwrap();
        let good = b.clone();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("bad magic"));
        let mut v = good.clone();
        v[4] = 9;
        assert!(Checkpoint::from_bytes(&v).unwrap_err().to_string().contains("version"));
        let t = &good[..good.len() - 3];
        assert!(Checkpoint::from_bytes(t).unwrap_err().to_string().contains("truncated"));
    }
}
