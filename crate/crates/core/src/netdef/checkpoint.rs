//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GFCK"                      magic
//! u32                         format version (1)
//! u32 + bytes                 JSON metadata (network def, per-layer flags, section tag)
//! u32                         tensor count
//! per tensor:
//!   u32 + bytes               UTF-8 name
//!   u8                        dtype code (0 = f32)
//!   u32                       rank
//!   u64 * rank                dims
//!   f32 * prod(dims)          payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netdef::params::{BnStats, LayerParams, ParamSet, Provenance};
use crate::netdef::spec::NetworkDef;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GFCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub ntk_scaled: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub section: Section,
    pub network: NetworkDef,
    #[serde(default)]
    pub layers: BTreeMap<String, LayerMeta>,
    /// Section-specific fields (e.g. the head kind).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let json = serde_json::to_vec(&self.meta)?;
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            r.pos = 0;
            return r.fail("bad magic, expected GFCK");
        }
        let version = r.u32("version")?;
        if version != VERSION {
            r.pos -= 4;
            return r.fail(format!("unsupported version {version}, expected {VERSION}"));
        }
        let len = r.u32("metadata length")? as usize;
        let at = r.pos;
        let json = r.take(len, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| Error::Format {
            offset: at as u64,
            msg: format!("bad metadata: {e}"),
        })?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| Error::Format {
                    offset: at as u64,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                r.pos -= 1;
                return r.fail(format!("unknown dtype code {dtype}"));
            }
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                r.pos -= 4;
                return r.fail(format!("bad rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.pos;
                let d = r.u64("dim")?;
                if d == 0 || d > (buf.len() as u64) {
                    r.pos = at;
                    return r.fail(format!("bad dimension {d}"));
                }
                shape.push(d as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Format {
                    offset: r.pos as u64,
                    msg: "tensor size overflows".into(),
                })?;
            let payload = r.take(numel * 4, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != buf.len() {
            return r.fail("trailing bytes after last tensor");
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("checkpoint has no tensor {name}"),
            })
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }
}

/// Packs a backbone into a checkpoint.
pub fn backbone_checkpoint(def: &NetworkDef, params: &ParamSet) -> Result<Checkpoint> {
    params.check(def)?;
    let mut layers = BTreeMap::new();
    let mut tensors = Vec::new();
    for (name, p) in params.iter() {
        layers.insert(
            name.to_string(),
            LayerMeta {
                ntk_scaled: p.ntk_scaled,
                provenance: p.provenance,
            },
        );
        tensors.push((format!("{name}.weight"), p.weight.clone()));
        if let Some(b) = &p.bias {
            tensors.push((format!("{name}.bias"), b.clone()));
        }
    }
    for (name, s) in params.bn_iter() {
        for (field, t) in [("gamma", &s.gamma), ("beta", &s.beta), ("mean", &s.mean), ("var", &s.var)] {
            tensors.push((format!("{name}.{field}"), t.clone()));
        }
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            section: Section::Backbone,
            network: def.clone(),
            layers,
            extra: serde_json::Value::Null,
        },
        tensors,
    })
}

/// Unpacks a backbone checkpoint, validating it against its own def.
pub fn backbone_from_checkpoint(ck: &Checkpoint) -> Result<(NetworkDef, ParamSet)> {
    if ck.meta.section != Section::Backbone {
        return Err(Error::Format {
            offset: 0,
            msg: "checkpoint is not a backbone section".into(),
        });
    }
    let def = ck.meta.network.clone();
    def.validate()?;
    let mut params = ParamSet::new();
    for layer in &def.layers {
        match layer {
            crate::netdef::LayerSpec::BatchNorm { name, .. } => {
                params.insert_bn(
                    name,
                    BnStats {
                        gamma: ck.tensor(&format!("{name}.gamma"))?.clone(),
                        beta: ck.tensor(&format!("{name}.beta"))?.clone(),
                        mean: ck.tensor(&format!("{name}.mean"))?.clone(),
                        var: ck.tensor(&format!("{name}.var"))?.clone(),
                    },
                );
            }
            other => {
                let Some(name) = other.param_name() else { continue };
                let meta = ck.meta.layers.get(name).ok_or_else(|| Error::Format {
                    offset: 0,
                    msg: format!("no metadata for layer {name}"),
                })?;
                let bias_name = format!("{name}.bias");
                params.insert(
                    name,
                    LayerParams {
                        weight: ck.tensor(&format!("{name}.weight"))?.clone(),
                        bias: if ck.has(&bias_name) {
                            Some(ck.tensor(&bias_name)?.clone())
                        } else {
                            None
                        },
                        ntk_scaled: meta.ntk_scaled,
                        provenance: meta.provenance,
                    },
                );
            }
        }
    }
    params.check(&def)?;
    Ok((def, params))
}

pub fn save_checkpoint(path: &Path, def: &NetworkDef, params: &ParamSet) -> Result<()> {
    backbone_checkpoint(def, params)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkDef, ParamSet)> {
    backbone_from_checkpoint(&Checkpoint::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::params::build_network;

    fn sample() -> (NetworkDef, ParamSet) {
        let def = NetworkDef::desk_default(1, 8);
        let mut p = build_network(&def, 77).unwrap();
        p.get_mut("conv1").unwrap().provenance = Provenance::Pretrained;
        (def, p)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (def, p) = sample();
        let bytes = backbone_checkpoint(&def, &p).unwrap().to_bytes().unwrap();
        let (d2, p2) = backbone_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(def, d2);
        for (name, lp) in p.iter() {
            let other = p2.get(name).unwrap();
            assert!(lp.weight.bit_eq(&other.weight));
            assert_eq!(lp.provenance, other.provenance);
        }
        assert_eq!(p.checksum(), p2.checksum());
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let (def, p) = sample();
        let bytes = backbone_checkpoint(&def, &p).unwrap().to_bytes().unwrap();
        for cut in [0, 3, 4, 7, 10, 200, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let (def, p) = sample();
        let mut bytes = backbone_checkpoint(&def, &p).unwrap().to_bytes().unwrap();
        bytes[4] = 2;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 4);
                assert!(msg.contains("version"));
            }
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
