//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte tag `AUTOCLCK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header, then every
//! array listed in the header as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Group, ModelSpec, Parameters};
use crate::training::{EpochRecord, Method};

const TAG: &[u8; 8] = b"AUTOCLCK";
pub const FORMAT_VERSION: u32 = 1;

/// Trained parameters plus everything needed to interpret and reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Parameters,
    pub method: Method,
    /// The training configuration the run was started with.
    pub config: serde_json::Value,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Slot {
    Theta,
    Xi,
    Head,
    State,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    slot: Slot,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    method: Method,
    config: serde_json::Value,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let slots = [
            (Slot::Theta, self.params.group(Group::Theta)),
            (Slot::Xi, self.params.group(Group::Xi)),
            (Slot::Head, self.params.group(Group::Head)),
            (Slot::State, &self.params.state),
        ];
        let mut arrays = Vec::new();
        let mut payload = Vec::new();
        for (slot, set) in slots {
            for (name, value) in set.iter() {
                payload.extend(value.iter().flat_map(|&v| (v as f32).to_le_bytes()));
                arrays.push(ArrayEntry {
                    slot,
                    name: name.clone(),
                    shape: value.shape().to_vec(),
                });
            }
        }
        let header = serde_json::to_vec(&Header {
            spec: self.spec.clone(),
            method: self.method,
            config: self.config.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            arrays,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(TAG);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Integrity(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != TAG {
            return Err(corrupt("missing format tag"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        header.spec.validate()?;

        let mut params = Parameters::default();
        let mut offset = header_end;
        for entry in header.arrays {
            let count: usize = entry.shape.iter().product();
            let end = offset + 4 * count;
            if end > bytes.len() {
                return Err(corrupt(&format!("array {} is truncated", entry.name)));
            }
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            offset = end;
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| corrupt(&e.to_string()))?;
            let set = match entry.slot {
                Slot::Theta => &mut params.theta,
                Slot::Xi => &mut params.xi,
                Slot::Head => &mut params.head,
                Slot::State => &mut params.state,
            };
            set.insert(entry.name, array);
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes after the last array"));
        }
        Ok(Self {
            spec: header.spec,
            params,
            method: header.method,
            config: header.config,
            history: header.history,
            best_epoch: header.best_epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The checkpoint's arrays rounded through `f32`, as they are after a
    /// save/load round trip.
    pub fn rounded(&self) -> Self {
        let mut out = self.clone();
        for set in [
            &mut out.params.theta,
            &mut out.params.xi,
            &mut out.params.head,
            &mut out.params.state,
        ] {
            for (_, v) in set.iter_mut() {
                v.mapv_inplace(|x| x as f32 as f64);
            }
        }
        out
    }
}
