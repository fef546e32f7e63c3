//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "POLABCKP"
//! 8       4     format version, u32 LE (currently 1)
//! 12      8     header length H, u64 LE
//! 20      H     header, UTF-8 JSON (see `Header`)
//! 20+H    ...   payload: f64 LE values, in order
//!                 params            (header.param_count)
//!                 adam first moment (header.moment_count)
//!                 adam second moment(header.moment_count)
//!                 each extra section in header order (section.len)
//! ```
//!
//! The header lists the policy spec and group table so a checkpoint can be
//! loaded without its experiment config. Floats in the JSON header are
//! written in shortest round-trip form, so load followed by save is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{ParamGroup, ParamVector, Policy, PolicySpec};
use crate::trainer::optim::OptimizerState;

pub const MAGIC: &[u8; 8] = b"POLABCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Seed and word position of the trainer's ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Serialized as a decimal string; JSON numbers cannot carry u128.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Outer iterations completed (online training); equals `step` offline.
    pub iteration: u64,
    pub objective: String,
    pub policy: PolicySpec,
    pub params: ParamVector,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub config_hash: String,
    /// Named auxiliary vectors (reference params, old policy, baselines).
    pub sections: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    iteration: u64,
    objective: String,
    policy: PolicySpec,
    groups: Vec<ParamGroup>,
    param_count: usize,
    optimizer: OptimizerState,
    moment_count: usize,
    rng: RngState,
    config_hash: String,
    sections: Vec<SectionHeader>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// A section reinterpreted as parameters of this checkpoint's policy.
    pub fn section_params(&self, name: &str) -> Result<Option<ParamVector>> {
        match self.section(name) {
            Some(v) => Ok(Some(ParamVector::from_values(v.to_vec(), self.params.layout().clone())?)),
            None => Ok(None),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            step: self.step,
            iteration: self.iteration,
            objective: self.objective.clone(),
            policy: self.policy.clone(),
            groups: self.params.layout().groups().to_vec(),
            param_count: self.params.len(),
            optimizer: self.optimizer.clone(),
            moment_count: self.optimizer.m.len(),
            rng: self.rng,
            config_hash: self.config_hash.clone(),
            sections: self
                .sections
                .iter()
                .map(|(name, v)| SectionHeader { name: name.clone(), len: v.len() })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload_len =
            self.params.len() + 2 * self.optimizer.m.len() + self.sections.iter().map(|(_, v)| v.len()).sum::<usize>();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(self.params.values());
        put(&self.optimizer.m);
        put(&self.optimizer.v);
        for (_, v) in &self.sections {
            put(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| LabError::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(err(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| err("truncated"))?;
        let header_bytes = body.get(..hlen).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        let mut payload = body[hlen..].chunks_exact(8);
        if !payload.remainder().is_empty() {
            return Err(err("payload is not a whole number of f64 values"));
        }
        let mut take = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| {
                    payload
                        .next()
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .ok_or_else(|| err("truncated payload"))
                })
                .collect()
        };

        let policy = Policy::new(header.policy.clone())?;
        if policy.layout().groups() != header.groups.as_slice() || header.param_count != policy.layout().len() {
            return Err(err("group table does not match the policy spec"));
        }
        let params = policy.params_from(take(header.param_count)?)?;
        let mut optimizer = header.optimizer;
        optimizer.m = take(header.moment_count)?;
        optimizer.v = take(header.moment_count)?;
        let sections = header
            .sections
            .into_iter()
            .map(|s| Ok((s.name, take(s.len)?)))
            .collect::<Result<Vec<_>>>()?;
        if take(1).is_ok() {
            return Err(err("trailing payload"));
        }
        Ok(Checkpoint {
            step: header.step,
            iteration: header.iteration,
            objective: header.objective,
            policy: header.policy,
            params,
            optimizer,
            rng: header.rng,
            config_hash: header.config_hash,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn file_name(step: u64) -> String {
        format!("ckpt_{step:08}.bin")
    }
}
