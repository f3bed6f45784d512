//! `I2SL` latent files: a style code and its noise maps.
//!
//! ```text
//! magic[4] version L style_dim  f64[L*style_dim]
//! map_count { side f64[side*side] } * map_count  crc32
//! ```
//!
//! Integers are little-endian `u32`. Values are stored as `f64` so a saved
//! embedding reproduces its image exactly.

use std::path::Path;

use crate::container::{Reader, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::synthesis::{NoiseBank, NoiseMap, StyleCode};

pub const LATENT_MAGIC: [u8; 4] = *b"I2SL";

pub fn encode(w: &StyleCode, n: &NoiseBank) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * w.values().len());
    out.extend_from_slice(&LATENT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.layers() as u32).to_le_bytes());
    out.extend_from_slice(&(w.dim() as u32).to_le_bytes());
    for v in w.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(n.len() as u32).to_le_bytes());
    for map in n.maps() {
        out.extend_from_slice(&(map.side as u32).to_le_bytes());
        for v in &map.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<(StyleCode, NoiseBank)> {
    if bytes.len() < 24 {
        return Err(Error::Corrupt(format!("latent file too short ({} bytes)", bytes.len())));
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader::new(payload);
    if r.take(4, "magic")? != LATENT_MAGIC {
        return Err(Error::Corrupt("not a latent file (bad magic)".into()));
    }
    if crc32fast::hash(payload) != u32::from_le_bytes(crc_bytes.try_into().unwrap()) {
        return Err(Error::Corrupt("latent file checksum mismatch".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported latent file version {version}")));
    }
    let layers = r.u32("layer count")? as usize;
    let dim = r.u32("style dimension")? as usize;
    let count = layers
        .checked_mul(dim)
        .ok_or_else(|| Error::Corrupt("style code too large".into()))?;
    let mut values = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        values.push(r.f64("style code")?);
    }
    let w = StyleCode::new(layers, dim, values)?;
    let maps = r.u32("noise map count")? as usize;
    let mut out = Vec::with_capacity(maps.min(64));
    for i in 0..maps {
        let side = r.u32("noise map side")? as usize;
        let what = format!("noise map {}", i + 1);
        let mut data = Vec::with_capacity((side * side).min(1 << 22));
        for _ in 0..side * side {
            data.push(r.f64(&what)?);
        }
        out.push(NoiseMap { side, data });
    }
    if !r.is_empty() {
        return Err(Error::Corrupt("trailing bytes in latent file".into()));
    }
    Ok((w, NoiseBank::new(out)?))
}

pub fn save(path: &Path, w: &StyleCode, n: &NoiseBank) -> Result<()> {
    std::fs::write(path, encode(w, n))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(StyleCode, NoiseBank)> {
    decode(&std::fs::read(path)?)
}
