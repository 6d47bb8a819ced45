//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (profile, seed, epoch, element type, tensor directory), then the raw
//! little-endian parameter blob. Loading reproduces parameters bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{GanPair, Network, Role};
use super::profile::ModelProfile;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CYBLCKPT";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    role: Role,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    profile: ModelProfile,
    seed: u64,
    epoch: usize,
    metadata: BTreeMap<String, String>,
    networks: Vec<NetworkEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub profile: ModelProfile,
    pub seed: u64,
    pub epoch: usize,
    pub metadata: BTreeMap<String, String>,
    pub networks: Vec<(String, Network<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_gan(gan: &GanPair<T>, seed: u64, epoch: usize) -> Self {
        Self {
            profile: gan.profile().clone(),
            seed,
            epoch,
            metadata: BTreeMap::new(),
            networks: gan
                .networks()
                .into_iter()
                .map(|(n, net)| (n.to_string(), net.clone()))
                .collect(),
        }
    }

    pub fn from_classifier(classifier: &Network<T>, seed: u64, epoch: usize) -> Self {
        Self {
            profile: classifier.profile().clone(),
            seed,
            epoch,
            metadata: BTreeMap::new(),
            networks: vec![("classifier".into(), classifier.clone())],
        }
    }

    pub fn with_metadata(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn network(&self, name: &str) -> Option<&Network<T>> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, net)| net)
    }

    fn take(&mut self, name: &str) -> Result<Network<T>> {
        let idx = self
            .networks
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` network")))?;
        Ok(self.networks.remove(idx).1)
    }

    pub fn into_gan(mut self) -> Result<GanPair<T>> {
        Ok(GanPair {
            g_ab: self.take("g_ab")?,
            g_ba: self.take("g_ba")?,
            d_a: self.take("d_a")?,
            d_b: self.take("d_b")?,
        })
    }

    pub fn into_classifier(mut self) -> Result<Network<T>> {
        self.take("classifier")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut networks = Vec::new();
        for (name, net) in &self.networks {
            let mut tensors = Vec::new();
            for (spec, t) in net.param_specs().iter().zip(net.params()) {
                let bytes = T::to_le_bytes_vec(t.data());
                tensors.push(TensorEntry {
                    name: spec.name.clone(),
                    shape: t.shape().to_vec(),
                    offset: blob.len(),
                    bytes: bytes.len(),
                });
                blob.extend(bytes);
            }
            networks.push(NetworkEntry {
                name: name.clone(),
                role: net.role(),
                tensors,
            });
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: T::DTYPE.into(),
            profile: self.profile.clone(),
            seed: self.seed,
            epoch: self.epoch,
            metadata: self.metadata.clone(),
            networks,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {version} (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint stores {} parameters, requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let blob = &body[hlen..];
        let mut networks = Vec::new();
        for entry in header.networks {
            let mut net = Network::zeros(entry.role, &header.profile)?;
            let mut params = Vec::new();
            for te in entry.tensors {
                let end = te.offset.checked_add(te.bytes).ok_or_else(|| bad("tensor extent overflow"))?;
                if end > blob.len() {
                    return Err(Error::Format(format!("tensor `{}` runs past end of file", te.name)));
                }
                let data = T::from_le_bytes_slice(&blob[te.offset..end])
                    .ok_or_else(|| bad("tensor byte length not a multiple of element size"))?;
                if data.len() != te.shape.iter().product::<usize>() {
                    return Err(Error::Format(format!("tensor `{}` length/shape mismatch", te.name)));
                }
                params.push(Tensor::new(te.shape, data));
            }
            net.set_params(params)?;
            networks.push((entry.name, net));
        }
        Ok(Self {
            profile: header.profile,
            seed: header.seed,
            epoch: header.epoch,
            metadata: header.metadata,
            networks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
