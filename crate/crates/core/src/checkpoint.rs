//! Versioned binary checkpoints.
//!
//! All integers little-endian. Strings are a `u32` byte length then UTF-8.
//!
//! | field        | encoding                                        |
//! |--------------|-------------------------------------------------|
//! | magic        | 12 bytes `ROBIN-CKPT\0\0`                       |
//! | version      | `u32`, currently 1                              |
//! | stage        | `u8`                                            |
//! | step         | `u64`                                           |
//! | arch hash    | string                                          |
//! | config hash  | string                                          |
//! | model        | string, JSON of the model config and `k`        |
//! | rng state    | 56 bytes, see [`RngState::to_bytes`]            |
//! | record count | `u32`                                           |
//! | records      | name string, `u32` rank, rank x `u64` extents,  |
//! |              | `u8` dtype (0 = f64), row-major `f64` payload   |
//!
//! Parameters keep their store names. Optimizer moments are stored as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Array;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RobinModel};
use crate::rng::RngState;

pub const MAGIC: &[u8; 12] = b"ROBIN-CKPT\0\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
pub const MOMENT_M: &str = "adam.m/";
pub const MOMENT_V: &str = "adam.v/";

/// What the parameter layout depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelConfig,
    pub k: usize,
    pub video: bool,
}

impl Architecture {
    pub fn of(model: &RobinModel) -> Self {
        Architecture {
            model: model.cfg,
            k: model.k,
            video: model.has_video(),
        }
    }

    /// Hash of the layout without the stage flag, so stage-1 and stage-2
    /// checkpoints of one model agree.
    pub fn hash(&self) -> String {
        let key = serde_json::to_string(&(self.model, self.k)).expect("config serializes");
        short_hash(key.as_bytes())
    }
}

/// First 16 hex digits of SHA-256.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub arch: Architecture,
    pub config_hash: String,
    pub rng: RngState,
    /// `(name, value)` in registration order, moments after parameters.
    pub records: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn arch_hash(&self) -> String {
        self.arch.hash()
    }

    pub fn record(&self, name: &str) -> Option<&Array> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Parameter records, without optimizer moments.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.records
            .iter()
            .filter(|(n, _)| !n.starts_with(MOMENT_M) && !n.starts_with(MOMENT_V))
            .map(|(n, a)| (n.as_str(), a))
    }

    /// Snapshots a model's parameters (no moments).
    pub fn from_model(model: &RobinModel, step: u64, config_hash: &str, rng: RngState) -> Checkpoint {
        let records = model
            .params()
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    Array::new(t.shape().to_vec(), t.to_vec()).expect("tensor shapes are consistent"),
                )
            })
            .collect();
        Checkpoint {
            stage: model.stage(),
            step,
            arch: Architecture::of(model),
            config_hash: config_hash.to_string(),
            rng,
            records,
        }
    }

    /// Fails unless this checkpoint was produced by a model with the given
    /// architecture hash.
    pub fn check_compatible(&self, expected_arch: &str, expected_config: &str) -> Result<()> {
        let found = self.arch_hash();
        if found != expected_arch {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint arch {found} (config {}) vs current arch {expected_arch} (config {expected_config})",
                self.config_hash
            )));
        }
        Ok(())
    }

    /// Rebuilds the model and copies every parameter in.
    pub fn build_model(&self) -> Result<RobinModel> {
        let mut model = RobinModel::new(self.arch.model, self.arch.k, 0)?;
        if self.arch.video {
            model.add_video_projection(&mut crate::Rng::new(0))?;
        }
        self.load_into(&model)?;
        Ok(model)
    }

    /// Copies parameters into `model`; every model parameter must be present
    /// with the same shape.
    pub fn load_into(&self, model: &RobinModel) -> Result<()> {
        for (name, t) in model.params().iter() {
            let a = self
                .record(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if a.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, model expects {:?}",
                    a.shape,
                    t.shape()
                )));
            }
            t.set_data(a.data.clone())?;
        }
        let known = model.params().len();
        let stored = self.params().count();
        if stored != known {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {stored} parameters, model has {known}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.arch_hash());
        put_str(&mut out, &self.config_hash);
        put_str(&mut out, &serde_json::to_string(&self.arch).expect("config serializes"));
        out.extend_from_slice(&self.rng.to_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, a) in &self.records {
            put_str(&mut out, name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &e in &a.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.push(DTYPE_F64);
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(12)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let stage = r.take(1)?[0];
        let step = r.u64()?;
        let arch_hash = r.string()?;
        let config_hash = r.string()?;
        let arch: Architecture = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Checkpoint(format!("bad architecture record: {e}")))?;
        if arch.hash() != arch_hash {
            return Err(Error::Checkpoint(format!(
                "stored architecture hash {arch_hash} does not match its description ({})",
                arch.hash()
            )));
        }
        let rng = RngState::from_bytes(r.take(RngState::ENCODED_LEN)?)
            .ok_or_else(|| Error::Checkpoint("bad rng state".into()))?;
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("record `{name}` has unknown dtype {dtype}")));
            }
            let count: usize = shape.iter().product();
            let payload = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            records.push((name, Array::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last record".into()));
        }
        Ok(Checkpoint {
            stage,
            step,
            arch,
            config_hash,
            rng,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn ckpt() -> Checkpoint {
        let m = RobinModel::new(ModelConfig::tiny(), 4, 1).unwrap();
        Checkpoint::from_model(&m, 17, "cafe", Rng::new(3).state())
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let c = ckpt();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        assert_eq!(&bytes[..12], MAGIC);
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
    }

    #[test]
    fn rebuilt_model_has_identical_parameters() {
        let m = RobinModel::new(ModelConfig::tiny(), 4, 1).unwrap();
        let c = Checkpoint::from_model(&m, 0, "", Rng::new(0).state());
        let rebuilt = c.build_model().unwrap();
        for ((a, ta), (b, tb)) in m.params().iter().zip(rebuilt.params().iter()) {
            assert_eq!(a, b);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
    }

    #[test]
    fn mismatched_architecture_is_reported_with_both_hashes() {
        let c = ckpt();
        let other = Architecture {
            model: ModelConfig { d: 32, ..ModelConfig::tiny() },
            k: 4,
            video: false,
        };
        let msg = c.check_compatible(&other.hash(), "beef").unwrap_err().to_string();
        assert!(msg.contains(&c.arch_hash()) && msg.contains(&other.hash()), "{msg}");
        assert!(msg.contains("cafe") && msg.contains("beef"), "{msg}");
    }

    #[test]
    fn loading_into_a_wider_model_fails() {
        let c = ckpt();
        let wide = RobinModel::new(ModelConfig { d: 32, ..ModelConfig::tiny() }, 4, 1).unwrap();
        assert!(matches!(c.load_into(&wide), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = ckpt().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn stage_does_not_change_arch_hash() {
        let mut m = RobinModel::new(ModelConfig::tiny(), 4, 1).unwrap();
        let h1 = Architecture::of(&m).hash();
        m.add_video_projection(&mut Rng::new(0)).unwrap();
        assert_eq!(Architecture::of(&m).hash(), h1);
    }
}
