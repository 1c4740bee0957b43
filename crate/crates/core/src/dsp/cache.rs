//! Binary feature cache: `KWSF`, `T` and `F` as little-endian `u32`, then
//! `T·F` little-endian `f32` values in row-major order.

use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"KWSF";

pub fn encode_feature_cache(features: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * features.values().len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(features.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(features.coeffs() as u32).to_le_bytes());
    for &v in features.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_feature_cache(bytes: &[u8], path: &Path) -> Result<FeatureMap> {
    if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::format(path, "missing feature cache header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (frames, coeffs) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != frames * coeffs * 4 {
        return Err(Error::format(path, format!("header says {frames}×{coeffs} but body holds {} bytes", body.len())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    FeatureMap::new(values, frames, coeffs).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_feature_cache(path: &Path, features: &FeatureMap) -> Result<()> {
    std::fs::write(path, encode_feature_cache(features)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes, path)
}
