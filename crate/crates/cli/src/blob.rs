//! Raw arrays on disk: one line of JSON describing the payload, a newline,
//! then little-endian values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};

pub fn write<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    bytes.extend_from_slice(payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(path, e))
}

/// Header and payload bytes; a malformed header is an integrity error.
pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::Integrity(format!("{}: missing header line", path.display())))?;
    let header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| CliError::Integrity(format!("{}: bad header: {e}", path.display())))?;
    Ok((header, bytes[nl + 1..].to_vec()))
}

pub fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn f64_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

pub fn f32_values(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(CliError::Integrity(format!("{} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn f64_values(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(CliError::Integrity(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
