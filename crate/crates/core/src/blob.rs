//! Framed binary files: `u64 LE header length | JSON header | raw LE data`.
//!
//! The header records a SHA-256 of the data section so truncation and bit
//! rot surface as [`Error::CorruptBlob`] instead of garbage tensors.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Upper bound on header size; anything larger is treated as corruption.
const MAX_HEADER: u64 = 64 << 20;

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Header wrapper adding the data checksum and length.
#[derive(Serialize, serde::Deserialize)]
struct Envelope<H> {
    data_len: u64,
    data_sha256: String,
    #[serde(flatten)]
    header: H,
}

pub(crate) fn write_framed<H: Serialize>(path: &Path, header: &H, data: &[u8]) -> Result<()> {
    let env = Envelope {
        data_len: data.len() as u64,
        data_sha256: sha256_hex(data),
        header,
    };
    let json = serde_json::to_vec(&env)?;
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(data);
    atomic_write(path, &out)
}

/// Reads a framed file. The header is returned raw so callers can check a
/// format version before deserializing the rest.
pub(crate) fn read_framed(path: &Path) -> Result<(serde_json::Value, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptBlob {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(corrupt(format!("file is {} bytes, shorter than the frame prefix", bytes.len())));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if hlen > MAX_HEADER || 8 + hlen > bytes.len() as u64 {
        return Err(corrupt(format!("header length {hlen} exceeds file size {}", bytes.len())));
    }
    let hend = 8 + hlen as usize;
    let mut header: serde_json::Value =
        serde_json::from_slice(&bytes[8..hend]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let data = bytes[hend..].to_vec();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| corrupt("header is not a JSON object".into()))?;
    let data_len = obj.remove("data_len").and_then(|v| v.as_u64());
    let sha = obj.remove("data_sha256");
    if data_len != Some(data.len() as u64) {
        return Err(corrupt(format!("data section is {} bytes, header says {:?}", data.len(), data_len)));
    }
    if sha.as_ref().and_then(|v| v.as_str()) != Some(sha256_hex(&data).as_str()) {
        return Err(corrupt("data checksum mismatch".into()));
    }
    Ok((header, data))
}

pub(crate) fn parse_header<H: DeserializeOwned>(path: &Path, header: serde_json::Value) -> Result<H> {
    serde_json::from_value(header).map_err(|e| Error::CorruptBlob {
        path: path.to_path_buf(),
        reason: format!("malformed header: {e}"),
    })
}

pub(crate) fn header_version(path: &Path, header: &serde_json::Value) -> Result<u32> {
    header
        .get("format_version")
        .and_then(|v| v.as_u64())
        .map(|v| v as u32)
        .ok_or_else(|| Error::CorruptBlob {
            path: path.to_path_buf(),
            reason: "header lacks format_version".into(),
        })
}

pub(crate) fn f32_to_bytes(values: &[f32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn f32_from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn i32_to_bytes(values: &[i32], out: &mut Vec<u8>) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn i32_from_bytes(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let header = serde_json::json!({"format_version": 1, "name": "t"});
        write_framed(&p, &header, &[1, 2, 3, 4]).unwrap();
        let (h, d) = read_framed(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(d, vec![1, 2, 3, 4]);

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_framed(&p), Err(Error::CorruptBlob { .. })));
        fs::write(&p, &bytes[..5]).unwrap();
        assert!(matches!(read_framed(&p), Err(Error::CorruptBlob { .. })));
    }

    #[test]
    fn flipped_data_bit_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_framed(&p, &serde_json::json!({"format_version": 1}), &[9; 16]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_framed(&p), Err(Error::CorruptBlob { .. })));
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.json");
        atomic_write(&p, b"{}").unwrap();
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
