//! SHA-256 fingerprints for datasets, checkpoints and configs.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, VatError};

pub fn of_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn of_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| VatError::io(format!("reading {}", path.display()), e))?;
    Ok(of_bytes(&bytes))
}

/// Fingerprint of a serializable value via its canonical JSON form.
pub fn of_json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(of_bytes(serde_json::to_string(value)?.as_bytes()))
}

/// Fingerprint of tensor contents (shape and little-endian `f32` values),
/// independent of whether they are tracked variables.
pub fn of_tensors(tensors: &[&candle_core::Tensor]) -> Result<String> {
    let mut h = Sha256::new();
    for t in tensors {
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let v: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Re-hashes `path` and compares against `expected`.
pub fn verify_file(path: &Path, expected: &str) -> Result<()> {
    let found = of_file(path)?;
    if found != expected {
        return Err(VatError::FingerprintMismatch {
            path: path.display().to_string(),
            expected: expected.to_string(),
            found,
        });
    }
    Ok(())
}
