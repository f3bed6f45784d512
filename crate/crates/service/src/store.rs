//! Content-addressed asset storage. An asset's address is the hex SHA-256
//! of its bytes; objects are immutable once written.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use embedit_core::latent_file;
use embedit_core::recipe::AssetKind;
use embedit_core::{ImageBuffer, Mask};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum StoreError {
    NotFound,
    /// Bytes do not decode as the requested kind.
    Invalid(String),
    /// Stored bytes no longer hash to their address.
    Integrity(String),
    Io(io::Error),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Io(e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetInfo {
    pub address: String,
    pub kind: String,
    pub size: u64,
}

pub fn address_of(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_address(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub fn parse_kind(s: &str) -> Option<AssetKind> {
    [AssetKind::Image, AssetKind::Mask, AssetKind::Latent]
        .into_iter()
        .find(|k| k.name() == s)
}

fn check_kind(bytes: &[u8], kind: AssetKind) -> Result<(), String> {
    match kind {
        AssetKind::Image => ImageBuffer::decode_png(bytes).map(drop),
        AssetKind::Mask => Mask::decode_png(bytes).map(drop),
        AssetKind::Latent => latent_file::decode(bytes).map(drop),
    }
    .map_err(|e| e.to_string())
}

/// Latent magic, then single-channel PNG, then any PNG.
pub fn detect_kind(bytes: &[u8]) -> Result<AssetKind, String> {
    if bytes.starts_with(&latent_file::LATENT_MAGIC) {
        return check_kind(bytes, AssetKind::Latent).map(|_| AssetKind::Latent);
    }
    if Mask::decode_png(bytes).is_ok() {
        return Ok(AssetKind::Mask);
    }
    check_kind(bytes, AssetKind::Image).map(|_| AssetKind::Image)
}

pub struct AssetStore {
    dir: PathBuf,
    write: Mutex<()>,
}

impl AssetStore {
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            write: Mutex::new(()),
        })
    }

    fn data_path(&self, address: &str) -> PathBuf {
        self.dir.join(address)
    }

    fn kind_path(&self, address: &str) -> PathBuf {
        self.dir.join(format!("{address}.kind"))
    }

    /// Stores `bytes`, detecting the kind when none is given.
    pub fn put(&self, bytes: &[u8], kind: Option<AssetKind>) -> Result<AssetInfo, StoreError> {
        let kind = match kind {
            Some(k) => check_kind(bytes, k).map(|_| k),
            None => detect_kind(bytes),
        }
        .map_err(StoreError::Invalid)?;
        let address = address_of(bytes);
        let _guard = self.write.lock().expect("store lock");
        let path = self.data_path(&address);
        if !path.exists() {
            let tmp = self.dir.join(format!(".{address}.tmp"));
            fs::write(&tmp, bytes)?;
            fs::write(self.kind_path(&address), kind.name())?;
            fs::rename(&tmp, &path)?;
        }
        self.info(&address)
    }

    pub fn info(&self, address: &str) -> Result<AssetInfo, StoreError> {
        if !is_address(address) {
            return Err(StoreError::NotFound);
        }
        let meta = match fs::metadata(self.data_path(address)) {
            Ok(m) => m,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound),
            Err(e) => return Err(e.into()),
        };
        Ok(AssetInfo {
            address: address.to_string(),
            kind: fs::read_to_string(self.kind_path(address))?.trim().to_string(),
            size: meta.len(),
        })
    }

    /// Reads an asset and verifies it against its address.
    pub fn get(&self, address: &str) -> Result<Vec<u8>, StoreError> {
        if !is_address(address) {
            return Err(StoreError::NotFound);
        }
        let bytes = match fs::read(self.data_path(address)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound),
            Err(e) => return Err(e.into()),
        };
        let actual = address_of(&bytes);
        if actual != address {
            return Err(StoreError::Integrity(format!("asset {address} hashes to {actual}")));
        }
        Ok(bytes)
    }

    pub fn list(&self, kind: Option<AssetKind>) -> Result<Vec<AssetInfo>, StoreError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if !is_address(&name) {
                continue;
            }
            let info = self.info(&name)?;
            if kind.is_none_or(|k| k.name() == info.kind) {
                out.push(info);
            }
        }
        out.sort_by(|a, b| a.address.cmp(&b.address));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png(side: usize) -> Vec<u8> {
        ImageBuffer::from_fn(side, side, |y, x, c| ((y + 2 * x + c) % 7) as f64 / 7.0).encode_png()
    }

    #[test]
    fn put_get_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let store = AssetStore::open(dir.path()).unwrap();
        let bytes = png(4);
        let a = store.put(&bytes, None).unwrap();
        let b = store.put(&bytes, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kind, "image");
        assert_eq!(store.get(&a.address).unwrap(), bytes);
    }

    #[test]
    fn kinds_are_detected_and_listed() {
        let dir = tempfile::tempdir().unwrap();
        let store = AssetStore::open(dir.path()).unwrap();
        store.put(&png(4), None).unwrap();
        let m = store.put(&Mask::left_half(4).encode_png(), None).unwrap();
        assert_eq!(m.kind, "mask");
        assert_eq!(store.list(Some(AssetKind::Mask)).unwrap(), vec![m]);
        assert_eq!(store.list(None).unwrap().len(), 2);
        assert!(matches!(store.put(b"nonsense", None), Err(StoreError::Invalid(_))));
        assert!(matches!(store.put(&png(4), Some(AssetKind::Latent)), Err(StoreError::Invalid(_))));
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = AssetStore::open(dir.path()).unwrap();
        let info = store.put(&png(4), None).unwrap();
        let path = dir.path().join(&info.address);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(store.get(&info.address), Err(StoreError::Integrity(_))));
    }

    #[test]
    fn malformed_addresses_are_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = AssetStore::open(dir.path()).unwrap();
        for addr in ["", "../etc/passwd", &"A".repeat(64), &"0".repeat(64)] {
            assert!(matches!(store.get(addr), Err(StoreError::NotFound)), "{addr}");
        }
    }
}
