//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PBITTCKP"
//! version  u32
//! dtype    u8       scalar tag
//! spec     u32 length + UTF-8 JSON (architecture, BN config, RNG streams, config echo)
//! tensors  u32 count, then per tensor:
//!            u16 name length + name, u8 rank, rank x u32 dims, raw scalars
//! bn       u32 layer count, then per layer: u32 channels, means, variances
//! check    u64 FNV-1a of every preceding byte
//! ```
//!
//! Stripped checkpoints contain no `MP/` entries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnConfig, BnState};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{DualHeadNetwork, HeadSpec, Partition, StrippedModel, TrunkSpec};
use crate::rng::StreamState;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PBITTCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSpec {
    pub trunk: TrunkSpec,
    pub active: HeadSpec,
    pub passive: Option<HeadSpec>,
    pub bn_config: BnConfig,
    #[serde(default)]
    pub rng_streams: Vec<StreamState>,
    /// Resolved run configuration, when the checkpoint came from a run.
    #[serde(default)]
    pub config: Option<String>,
    /// Input normalization the model was trained with.
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub spec: CheckpointSpec,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub bn: Vec<BnState<T>>,
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_stripped(model: &StrippedModel<T>) -> Self {
        Checkpoint {
            spec: CheckpointSpec {
                trunk: model.trunk_spec().clone(),
                active: model.active_spec().clone(),
                passive: None,
                bn_config: model.bn_config(),
                rng_streams: Vec::new(),
                config: None,
                normalization: None,
            },
            tensors: model.params().iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            bn: model.bn_states().to_vec(),
        }
    }

    /// Full checkpoint including the passive head.
    pub fn from_network(net: &DualHeadNetwork<T>) -> Self {
        Checkpoint {
            spec: CheckpointSpec {
                trunk: net.trunk_spec().clone(),
                active: net.active_spec().clone(),
                passive: net.passive_spec().cloned(),
                bn_config: net.bn_config(),
                rng_streams: Vec::new(),
                config: None,
                normalization: None,
            },
            tensors: net.params().iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            bn: net.bn_states().to_vec(),
        }
    }

    pub fn is_stripped(&self) -> bool {
        self.spec.passive.is_none() && !self.tensors.keys().any(|n| n.starts_with(Partition::Passive.prefix()))
    }

    /// Drops the passive head, if any.
    pub fn stripped(mut self) -> Self {
        self.tensors.retain(|n, _| !n.starts_with(Partition::Passive.prefix()));
        self.spec.passive = None;
        self
    }

    pub fn into_model(self) -> Result<StrippedModel<T>> {
        let me = self.stripped();
        StrippedModel::from_parts(me.spec.trunk, me.spec.active, me.spec.bn_config, me.tensors, me.bn)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        let spec = serde_json::to_vec(&self.spec).expect("checkpoint spec serializes");
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out.extend_from_slice(&(self.bn.len() as u32).to_le_bytes());
        for s in &self.bn {
            out.extend_from_slice(&(s.running_mean.len() as u32).to_le_bytes());
            for &v in s.running_mean.iter().chain(&s.running_var) {
                v.write_le(&mut out);
            }
        }
        let check = fnv(&out);
        out.extend_from_slice(&check.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv(body).to_le_bytes() != tail {
            return Err(fail("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Cursor { bytes: body, pos: MAGIC.len() };
        let version = r.u32().ok_or_else(|| fail("truncated header".into()))?;
        if version != VERSION {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let tag = r.take(1).ok_or_else(|| fail("truncated header".into()))?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| fail(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(fail(format!("checkpoint holds {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let trunc = |what: &str| fail(format!("truncated {what}"));
        let len = r.u32().ok_or_else(|| trunc("spec"))? as usize;
        let spec: CheckpointSpec = serde_json::from_slice(r.take(len).ok_or_else(|| trunc("spec"))?)
            .map_err(|e| fail(format!("bad spec: {e}")))?;
        let count = r.u32().ok_or_else(|| trunc("tensor table"))?;
        let size = dtype.size();
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16().ok_or_else(|| trunc("tensor name"))? as usize;
            let name = std::str::from_utf8(r.take(n).ok_or_else(|| trunc("tensor name"))?)
                .map_err(|_| fail("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1).ok_or_else(|| trunc("tensor rank"))?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| trunc("tensor shape"))?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * size).ok_or_else(|| trunc(&format!("tensor {name}")))?;
            let data = raw.chunks_exact(size).map(T::read_le).collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| fail(format!("tensor {name}: {e}")))?
                .with_requires_grad(true);
            if tensors.insert(name.clone(), t).is_some() {
                return Err(fail(format!("duplicate tensor {name}")));
            }
        }
        let layers = r.u32().ok_or_else(|| trunc("bn table"))?;
        let mut bn = Vec::with_capacity(layers as usize);
        for _ in 0..layers {
            let c = r.u32().ok_or_else(|| trunc("bn state"))? as usize;
            let raw = r.take(2 * c * size).ok_or_else(|| trunc("bn state"))?;
            let vals: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
            bn.push(BnState {
                running_mean: vals[..c].to_vec(),
                running_var: vals[c..].to_vec(),
            });
        }
        if r.pos != body.len() {
            return Err(fail(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { spec, tensors, bn })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
