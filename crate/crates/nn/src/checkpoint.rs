//! Checkpoint file format.
//!
//! ```text
//! "PGC1" | header length (u32 LE) | JSON header | f32 LE payload | CRC-32 of payload (u32 LE)
//! ```
//!
//! The header lists every tensor (name and shape) in payload order:
//! model parameters, then Adam first moments, then Adam second moments.

use std::path::Path;

use patchgrid_core::{TaxonomyMode, Tensor};
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{NnError, Result};
use crate::network::Network;
use crate::scheduler::PlateauScheduler;
use crate::spec::ModelSpec;

pub const MAGIC: &[u8; 4] = b"PGC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub adam: AdamState<f32>,
    pub scheduler: PlateauScheduler,
    pub taxonomy: TaxonomyMode,
    pub seed: u64,
    /// Free-form run metadata (resolved configuration, epoch, notes).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    taxonomy: TaxonomyMode,
    seed: u64,
    adam: AdamHeader,
    scheduler: PlateauScheduler,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.network.params();
        let names = self.network.param_names();
        let mut tensors: Vec<(String, &Tensor<f32>)> = names.iter().cloned().zip(params).collect();
        tensors.extend(names.iter().map(|n| format!("adam.m.{n}")).zip(&self.adam.first_moment));
        tensors.extend(names.iter().map(|n| format!("adam.v.{n}")).zip(&self.adam.second_moment));
        if tensors.len() != 3 * names.len() {
            return Err(NnError::Shape("optimizer moments do not match the model".into()));
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.network.spec().clone(),
            taxonomy: self.taxonomy,
            seed: self.seed,
            adam: AdamHeader { config: self.adam.config, step: self.adam.step },
            scheduler: self.scheduler.clone(),
            meta: self.meta.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| NnError::Invalid(e.to_string()))?;
        let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 4).sum());
        for (_, t) in &tensors {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| NnError::Corrupt(msg.to_string());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header runs past end of file"))?;
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[8..header_end]).map_err(|e| NnError::Corrupt(format!("header: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("header has no format version"))? as u32;
        if version != FORMAT_VERSION {
            return Err(NnError::Version { found: version, expected: FORMAT_VERSION });
        }
        let header: Header = serde_json::from_value(value).map_err(|e| NnError::Corrupt(format!("header: {e}")))?;
        let counts: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let payload_len = counts.iter().sum::<usize>() * 4;
        if bytes.len() != header_end + payload_len + 4 {
            return Err(NnError::Corrupt(format!(
                "expected {} bytes, file has {}",
                header_end + payload_len + 4,
                bytes.len()
            )));
        }
        let payload = &bytes[header_end..header_end + payload_len];
        let stored = u32::from_le_bytes(bytes[header_end + payload_len..].try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != stored {
            return Err(corrupt("payload checksum mismatch"));
        }

        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n = entry.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            tensors.push(Tensor::new(entry.shape.clone(), data).map_err(|e| NnError::Corrupt(e.to_string()))?);
        }
        if tensors.len() % 3 != 0 {
            return Err(corrupt("tensor table is not params + two moments"));
        }
        let per = tensors.len() / 3;
        let second: Vec<_> = tensors.split_off(2 * per);
        let first: Vec<_> = tensors.split_off(per);
        let network = Network::from_params(&header.spec, tensors)?;
        for (m, p) in first.iter().chain(&second).zip(network.params().into_iter().cycle()) {
            if m.shape() != p.shape() {
                return Err(corrupt("optimizer moment shape does not match its parameter"));
            }
        }
        Ok(Self {
            network,
            adam: AdamState {
                config: header.adam.config,
                step: header.adam.step,
                first_moment: first,
                second_moment: second,
            },
            scheduler: header.scheduler,
            taxonomy: header.taxonomy,
            seed: header.seed,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
