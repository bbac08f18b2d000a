//! Preprocessed tensors on disk: raw little-endian `f32` data in `<stem>.f32`
//! next to a `<stem>.json` descriptor `{"dtype": "f32le", "shape": [...]}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CACHE_EXTENSION: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub dtype: String,
    pub shape: Vec<usize>,
}

pub fn descriptor_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("json")
}

pub fn is_cached_tensor(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == CACHE_EXTENSION)
}

pub fn write_tensor(data_path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(data_path, bytes)?;
    let desc = TensorDescriptor {
        dtype: "f32le".into(),
        shape: tensor.shape().to_vec(),
    };
    fs::write(descriptor_path(data_path), serde_json::to_vec(&desc)?)?;
    Ok(())
}

pub fn read_descriptor(data_path: &Path) -> Result<TensorDescriptor> {
    let desc: TensorDescriptor = serde_json::from_slice(&fs::read(descriptor_path(data_path))?)?;
    if desc.dtype != "f32le" {
        return Err(Error::Data(format!(
            "{}: unsupported cached dtype {}",
            data_path.display(),
            desc.dtype
        )));
    }
    Ok(desc)
}

pub fn read_tensor(data_path: &Path) -> Result<Tensor> {
    let desc = read_descriptor(data_path)?;
    let bytes = fs::read(data_path)?;
    let n: usize = desc.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Data(format!(
            "{}: {} bytes on disk, descriptor {:?} needs {}",
            data_path.display(),
            bytes.len(),
            desc.shape,
            4 * n
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(&desc.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        let t = Tensor::from_vec(&[2, 1, 3], vec![0.0, 0.25, 1.0, -0.0, 0.5, 0.125]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        assert_eq!(fs::read(&p).unwrap().len(), 24);
        fs::write(&p, [0u8; 5]).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Data(_))));
    }
}
