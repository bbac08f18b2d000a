//! `CVNW` weight archives.
//!
//! Layout: 4-byte magic `CVNW`, `u32` LE version, `u64` LE header length,
//! the JSON header, then the payload of little-endian `f32` blobs. The header
//! addresses each blob by byte offset into the payload, which begins at
//! `16 + header_len`. The model spec is stored next to the archive as a JSON
//! sidecar with the same stem.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_alexnet, ModelSpec, Network};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CVNW";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: u32,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Non-parameter state (BN running statistics), stored inline in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub buffers: Vec<BufferEntry>,
}

/// A decoded archive: tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn from_network(net: &Network) -> Self {
        Self {
            tensors: net
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            buffers: net.named_buffers(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn payload_len(&self) -> usize {
        self.tensors.iter().map(|(_, t)| 4 * t.len()).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if name.is_empty() {
                return Err(Error::invalid("unnamed parameter tensor"));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: DTYPE_F32,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let header = ArchiveHeader {
            tensors: entries,
            buffers: self
                .buffers
                .iter()
                .map(|(name, t)| BufferEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_archive(bytes)?;
        let mut seen = HashSet::new();
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Header(format!("duplicate tensor `{}`", e.name)));
            }
            if e.dtype != DTYPE_F32 {
                return Err(Error::Header(format!(
                    "tensor `{}`: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.offset != expected_offset {
                return Err(Error::Header(format!(
                    "tensor `{}`: offset {} where {} was expected",
                    e.name, e.offset, expected_offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Truncated(format!(
                    "tensor `{}` needs payload bytes {start}..{end}, payload has {}",
                    e.name,
                    payload.len()
                )));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::from_vec(&e.shape, data)
                .map_err(|err| Error::Header(format!("tensor `{}`: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::Header(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset as usize
            )));
        }
        let mut buffers = Vec::with_capacity(header.buffers.len());
        for b in header.buffers {
            let t = Tensor::from_vec(&b.shape, b.values)
                .map_err(|err| Error::Header(format!("buffer `{}`: {err}", b.name)))?;
            buffers.push((b.name, t));
        }
        Ok(Self { tensors, buffers })
    }
}

/// Parses the preamble and header only; the payload is returned unparsed.
pub fn split_archive(bytes: &[u8]) -> Result<(ArchiveHeader, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, no magic", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated(format!(
            "{} bytes, preamble incomplete",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes exceeds file")))?;
    let header: ArchiveHeader = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
        .map_err(|e| Error::Header(e.to_string()))?;
    Ok((header, &bytes[payload_start..]))
}

pub fn read_header(path: &Path) -> Result<ArchiveHeader> {
    let bytes = fs::read(path)?;
    Ok(split_archive(&bytes)?.0)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    Archive::decode(&fs::read(path)?)
}

/// Writes the archive for `net` plus its spec sidecar.
pub fn save_weights(net: &Network, path: &Path) -> Result<()> {
    let bytes = Archive::from_network(net).encode()?;
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), net.spec().to_json()?)?;
    Ok(())
}

/// Loaded tensors for `expected`, in its canonical order.
#[derive(Debug, Clone)]
pub struct LoadedWeights {
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
}

/// Matches every parameter slot of `expected` against the archive. Extra
/// archive tensors are an error unless `lenient` is set.
pub fn load_weights(path: &Path, expected: &ModelSpec, lenient: bool) -> Result<LoadedWeights> {
    match_archive(read_archive(path)?, expected, lenient)
}

pub fn match_archive(
    archive: Archive,
    expected: &ModelSpec,
    lenient: bool,
) -> Result<LoadedWeights> {
    let slots = expected.param_slots()?;
    if !lenient {
        if let Some((name, _)) = archive
            .tensors
            .iter()
            .find(|(n, _)| !slots.iter().any(|s| &s.name == n))
        {
            return Err(Error::ExtraTensor(name.clone()));
        }
    }
    let mut tensors = archive.tensors;
    let mut params = Vec::with_capacity(slots.len());
    for slot in &slots {
        let idx = tensors
            .iter()
            .position(|(n, _)| n == &slot.name)
            .ok_or_else(|| Error::MissingTensor(slot.name.clone()))?;
        let (name, t) = tensors.swap_remove(idx);
        if t.shape() != slot.shape.as_slice() {
            return Err(Error::TensorShape {
                name,
                expected: slot.shape.clone(),
                found: t.shape().to_vec(),
            });
        }
        params.push((name, t));
    }
    Ok(LoadedWeights {
        params,
        buffers: archive.buffers,
    })
}

/// Loads an archive into an existing network; on error `net` is unchanged.
pub fn load_into(net: &mut Network, path: &Path, lenient: bool) -> Result<()> {
    let w = load_weights(path, net.spec(), lenient)?;
    net.assign(w.params, w.buffers)
}

/// Rebuilds a network from an archive and its spec sidecar.
pub fn load_network(path: &Path) -> Result<Network> {
    let spec_json = fs::read_to_string(sidecar_path(path))?;
    let spec = ModelSpec::from_json(&spec_json)?;
    let mut net = Network::new(spec, &mut SeededRng::new(0))?;
    load_into(&mut net, path, false)?;
    Ok(net)
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub expected_shape: Vec<usize>,
    pub found_shape: Option<Vec<usize>>,
    pub shape_ok: bool,
    pub min: Option<f32>,
    pub max: Option<f32>,
    pub mean: Option<f64>,
    pub degenerate: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainedReport {
    pub tensors: Vec<TensorCheck>,
    pub extra: Vec<String>,
}

impl PretrainedReport {
    pub fn all_pass(&self) -> bool {
        self.extra.is_empty() && self.tensors.iter().all(|t| t.pass)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !t.pass)
            .map(|t| t.name.as_str())
            .collect()
    }
}

/// Compares an archive against the canonical 1000-way AlexNet table. Weight
/// tensors that are constant, and any tensor with non-finite values, are
/// flagged as degenerate.
pub fn verify_pretrained_alexnet(archive: &Archive) -> PretrainedReport {
    let slots = build_alexnet()
        .param_slots()
        .expect("canonical AlexNet spec is valid");
    let tensors = slots
        .iter()
        .map(|slot| {
            let found = archive.get(&slot.name);
            let shape_ok = found.is_some_and(|t| t.shape() == slot.shape.as_slice());
            let stats = found.map(|t| {
                let (lo, hi) = t
                    .data()
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
                let constant_weight = t.rank() > 1 && lo == hi;
                (lo, hi, mean, constant_weight || !t.all_finite())
            });
            let degenerate = stats.is_some_and(|s| s.3);
            TensorCheck {
                name: slot.name.clone(),
                expected_shape: slot.shape.clone(),
                found_shape: found.map(|t| t.shape().to_vec()),
                shape_ok,
                min: stats.map(|s| s.0),
                max: stats.map(|s| s.1),
                mean: stats.map(|s| s.2),
                degenerate,
                pass: shape_ok && !degenerate,
            }
        })
        .collect();
    let extra = archive
        .tensors
        .iter()
        .filter(|(n, _)| !slots.iter().any(|s| &s.name == n))
        .map(|(n, _)| n.clone())
        .collect();
    PretrainedReport { tensors, extra }
}

pub fn verify_pretrained_alexnet_file(path: &Path) -> Result<PretrainedReport> {
    Ok(verify_pretrained_alexnet(&read_archive(path)?))
}
