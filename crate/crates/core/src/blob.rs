//! Shared on-disk container: a JSON header followed by a little-endian f32
//! payload. Used by chunk files, climatologies and forecast archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4   magic  "RWB1"
//! bytes 4..8   u32    container version (currently 1)
//! bytes 8..12  u32    header length in bytes
//! ...          UTF-8  JSON header
//! next 8       u64    payload length in f32 elements
//! ...          f32    payload, little-endian
//! ```

use serde::{de::DeserializeOwned, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

pub const BLOB_MAGIC: [u8; 4] = *b"RWB1";
pub const BLOB_VERSION: u32 = 1;

pub fn write_blob<H: Serialize>(path: &Path, header: &H, payload: &[f32]) -> Result<()> {
    let header_json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&BLOB_MAGIC)?;
    w.write_all(&BLOB_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_blob<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f32>)> {
    let corrupt = |reason: &str| CoreError::CorruptFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != BLOB_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != BLOB_VERSION {
        return Err(CoreError::UnsupportedVersion {
            got: version,
            supported: BLOB_VERSION,
        });
    }
    r.read_exact(&mut u32buf)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| corrupt("truncated header"))?;
    let header: H = serde_json::from_slice(&header_bytes)?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| corrupt("truncated payload"))?;
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rwb");
        let header = serde_json::json!({"kind": "test", "dims": [2, 3]});
        let payload = vec![1.0f32, -2.5, 3e-7, f32::MIN_POSITIVE, 1e30, 0.0];
        write_blob(&path, &header, &payload).unwrap();
        let (h, p): (serde_json::Value, Vec<f32>) = read_blob(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(p.len(), payload.len());
        for (a, b) in p.iter().zip(&payload) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rwb");
        std::fs::write(&path, b"NOPEnope").unwrap();
        let err = read_blob::<serde_json::Value>(&path);
        assert!(matches!(err, Err(CoreError::CorruptFile { .. })));
    }
}
