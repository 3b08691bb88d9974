//! PGW1 weights container.
//!
//! ```text
//! "PGW1"                      4 bytes
//! version                     u16 LE (currently 1)
//! config length               u32 LE
//! config                      UTF-8 JSON of ModelConfig
//! tensor count                u32 LE
//! per tensor:
//!   name length               u32 LE
//!   name                      UTF-8
//!   rank                      u32 LE
//!   dims                      rank × u32 LE
//!   payload                   prod(dims) × f32 LE
//! ```
//!
//! Tensor names prefixed `pg.` carry purge statistics and are ignored by the
//! weights loader.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PGW1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            let expect: usize = shape.iter().product();
            if expect != data.len() {
                return Err(Error::ShapeMismatch {
                    field: name.clone(),
                    expected: format!("{expect} values"),
                    found: format!("{} values", data.len()),
                });
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad PGW1 magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported PGW1 version {version} (expected {VERSION})"
            )));
        }
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::format(format!("config block: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::format(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    fs::write(path, container.encode()?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    Container::decode(&fs::read(path)?)
}

impl ModelWeights {
    pub fn to_container(&self) -> Container {
        Container {
            config: self.config.clone(),
            tensors: self
                .tensors(true)
                .into_iter()
                .map(|t| (t.name, t.shape, t.data.iter().map(|&v| v as f32).collect()))
                .collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.config
            .validate()
            .map_err(|e| Error::format(format!("config block: {e}")))?;
        let mut by_name: HashMap<&str, (&[usize], &[f32])> = HashMap::new();
        for (n, s, d) in &c.tensors {
            if by_name.insert(n.as_str(), (s.as_slice(), d.as_slice())).is_some() {
                return Err(Error::format(format!("duplicate tensor `{n}`")));
            }
        }
        let mut w = ModelWeights::zeros(&c.config);
        let mut known = Vec::new();
        for t in w.tensors_mut(true) {
            let (shape, data) = by_name
                .get(t.name.as_str())
                .ok_or_else(|| Error::format(format!("missing tensor `{}`", t.name)))?;
            if *shape != t.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    field: t.name.clone(),
                    expected: format!("{:?}", t.shape),
                    found: format!("{shape:?}"),
                });
            }
            for (dst, src) in t.data.iter_mut().zip(data.iter()) {
                *dst = *src as f64;
            }
            known.push(t.name);
        }
        let mut unknown: Vec<&str> = by_name
            .keys()
            .filter(|n| !n.starts_with("pg.") && !known.iter().any(|k| k == *n))
            .copied()
            .collect();
        if !unknown.is_empty() {
            unknown.sort_unstable();
            return Err(Error::format(format!("unknown tensors {unknown:?}")));
        }
        if !w.all_finite() {
            return Err(Error::format("non-finite values in weights"));
        }
        Ok(w)
    }
}

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    write_container(path, &weights.to_container())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    ModelWeights::from_container(&read_container(path)?)
}

/// Loads weights and checks that the stored config equals `expected`, naming
/// the first differing field on mismatch.
pub fn load_weights_checked(path: &Path, expected: &ModelConfig) -> Result<ModelWeights> {
    let c = read_container(path)?;
    check_config(expected, &c.config)?;
    ModelWeights::from_container(&c)
}

pub(crate) fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<()> {
    let e = serde_json::to_value(expected)?;
    let f = serde_json::to_value(found)?;
    if let (Some(e), Some(f)) = (e.as_object(), f.as_object()) {
        for (key, ev) in e {
            let fv = f.get(key).cloned().unwrap_or(serde_json::Value::Null);
            if *ev != fv {
                return Err(Error::ShapeMismatch {
                    field: key.clone(),
                    expected: ev.to_string(),
                    found: fv.to_string(),
                });
            }
        }
    }
    Ok(())
}
