//! Headerless little-endian raster buffers and their JSON sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{BuddError, Result};

/// `foo.i32` -> `foo.i32.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn read_exact_len(path: &Path, expected: usize, what: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| BuddError::io(path, e))?;
    if bytes.len() != expected {
        return Err(BuddError::ShapeMismatch {
            what: format!("{what} {}", path.display()),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| BuddError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| BuddError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| BuddError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| BuddError::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| BuddError::json(path, e))?;
    write_bytes(path, text.as_bytes())
}

pub fn f32_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn i32_to_le(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_i32(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn u16_to_le(values: &[u16]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_u16(bytes: &[u8]) -> Vec<u16> {
    bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_bits_survive_encoding() {
        let values = [0.0f32, -0.0, 1.5, f32::NAN, f32::MIN_POSITIVE, -3.25e7];
        let back = le_to_f32(&f32_to_le(&values));
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn little_endian_layout() {
        assert_eq!(i32_to_le(&[-1, 1]), vec![255, 255, 255, 255, 1, 0, 0, 0]);
        assert_eq!(u16_to_le(&[0x0102]), vec![2, 1]);
        assert_eq!(f32_to_le(&[1.0]), vec![0, 0, 0x80, 0x3f]);
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar_path(Path::new("a/b.i32")), PathBuf::from("a/b.i32.json"));
    }
}
