//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"PKCKPT\0\0"
//! u32     format version
//! u64     metadata length, then UTF-8 JSON {"config": .., "extra": ..}
//! u32     tensor count
//! per tensor: u32 name length, name, u32 rank, u64 dims[rank], f64 values
//! ```
//!
//! Parameters are stored under `param/<name>`; normalization and graph
//! constants under `buffer/<name>`. Values are written as `f64`, so an `f64`
//! model round-trips exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphSettings, Model, ModelConfig, Normalization};
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PKCKPT\0\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    /// Free-form run metadata (split, settings, provenance).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    extra: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

impl<T: Real> Checkpoint<T> {
    fn buffers(&self) -> Vec<(String, Vec<T>)> {
        let m = &self.model;
        vec![
            ("norm.channel_mean".into(), m.norm.channel_mean.clone()),
            ("norm.channel_std".into(), m.norm.channel_std.clone()),
            ("norm.target".into(), vec![m.norm.target_mean, m.norm.target_std]),
            (
                "graph".into(),
                vec![m.graph.threshold_km, m.graph.sigma_sq, m.graph.advection_scale],
            ),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&Meta {
            config: self.model.config.clone(),
            extra: self.extra.clone(),
        })
        .map_err(|e| bad(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let buffers = self.buffers();
        let count = self.model.params.len() + buffers.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            put_tensor(&mut out, &format!("param/{name}"), t.shape(), t.data());
        }
        for (name, values) in &buffers {
            put_tensor(&mut out, &format!("buffer/{name}"), &[values.len()], values);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(e.to_string()))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut buffers = std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let values = (0..numel)
                .map(|_| r.f64().map(T::lit))
                .collect::<Result<Vec<T>>>()?;
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p, Tensor::new(shape, values)?)?;
            } else if let Some(b) = name.strip_prefix("buffer/") {
                buffers.insert(b.to_string(), values);
            } else {
                return Err(bad(format!("unknown tensor section {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        let mut buf = |name: &str, len: Option<usize>| -> Result<Vec<T>> {
            let v = buffers.remove(name).ok_or_else(|| bad(format!("missing buffer {name}")))?;
            match len {
                Some(l) if v.len() != l => Err(bad(format!("buffer {name} has {} values, expected {l}", v.len()))),
                _ => Ok(v),
            }
        };
        let channel_mean = buf("norm.channel_mean", None)?;
        let channel_std = buf("norm.channel_std", Some(channel_mean.len()))?;
        let target = buf("norm.target", Some(2))?;
        let graph = buf("graph", Some(3))?;
        Ok(Self {
            model: Model {
                config: meta.config,
                params,
                norm: Normalization {
                    channel_mean,
                    channel_std,
                    target_mean: target[0],
                    target_std: target[1],
                },
                graph: GraphSettings {
                    threshold_km: graph[0],
                    sigma_sq: graph[1],
                    advection_scale: graph[2],
                },
            },
            extra: meta.extra,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint<f64> {
        let config = ModelConfig {
            hidden_dim: 4,
            readout_hidden: 3,
            ..Default::default()
        };
        Checkpoint {
            model: Model {
                params: init_params(&config, 9).unwrap(),
                config,
                norm: Normalization {
                    channel_mean: vec![0.1, -0.2, 1.0 / 3.0],
                    channel_std: vec![1.5, 2.5, std::f64::consts::PI],
                    target_mean: 42.123456789,
                    target_std: 7.0,
                },
                graph: GraphSettings {
                    threshold_km: 12.0,
                    sigma_sq: 8.5,
                    advection_scale: 0.1,
                },
            },
            extra: serde_json::json!({"held_out": [1, 2, 3]}),
        }
    }

    #[test]
    fn round_trip_is_value_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&wrong).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::<f64>::from_bytes(&version).is_err());
    }
}
