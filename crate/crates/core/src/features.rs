//! Feature file I/O: header of two little-endian u32s (frames, dims)
//! followed by frames×dims little-endian f32 values, widened to f64 on load.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    if features.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "feature files hold [T x D] matrices, got {:?}",
            features.shape
        )));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(features.rows() as u32).to_le_bytes())?;
    f.write_all(&(features.cols() as u32).to_le_bytes())?;
    for &v in &features.data {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 8];
    f.read_exact(&mut header)?;
    let t = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; t * d * 4];
    f.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, d], data)
}

/// Resolves manifest feature references to tensors.
pub trait FeatureStore {
    fn load(&self, reference: &str) -> Result<Tensor>;
}

/// On-disk store: references are paths relative to a base directory.
pub struct DirStore {
    pub base: PathBuf,
}

impl FeatureStore for DirStore {
    fn load(&self, reference: &str) -> Result<Tensor> {
        read_features(&self.base.join(reference))
    }
}

/// In-memory store for tests and toy runs.
impl FeatureStore for HashMap<String, Tensor> {
    fn load(&self, reference: &str) -> Result<Tensor> {
        self.get(reference)
            .cloned()
            .ok_or_else(|| Error::Manifest(format!("dangling feature reference {reference}")))
    }
}
