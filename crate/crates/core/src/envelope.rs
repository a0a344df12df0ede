//! Shared binary container for trajectory and distilled-dataset files.
//!
//! Layout: 4 magic bytes naming the content kind, a little-endian `u16`
//! format version, a `u32`-length-prefixed UTF-8 JSON metadata document,
//! raw little-endian `f32` payload values, and a SHA-256 trailer over all
//! preceding bytes. Readers verify the checksum before surfacing any data,
//! so truncated or corrupted files never partially load.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;
/// Teacher trajectory content kind.
pub const KIND_TRAJECTORY: [u8; 4] = *b"DFTJ";
/// Distilled dataset content kind.
pub const KIND_DISTILLED: [u8; 4] = *b"DFDC";

#[derive(Debug, Clone)]
pub struct Envelope {
    pub kind: [u8; 4],
    pub version: u16,
    pub metadata: String,
    pub payload: Vec<f32>,
}

/// Serializes an envelope to bytes.
pub fn encode(kind: [u8; 4], metadata: &str, payload: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(4 + 2 + 4 + metadata.len() + payload.len() * 4 + 32);
    bytes.extend_from_slice(&kind);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    bytes.extend_from_slice(metadata.as_bytes());
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    bytes.extend_from_slice(&digest);
    bytes
}

/// Writes an envelope atomically: the file appears complete or not at all.
pub fn write_file(path: &Path, kind: [u8; 4], metadata: &str, payload: &[f32]) -> Result<()> {
    let bytes = encode(kind, metadata, payload);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)
            .map_err(|e| Error::io(format!("creating {tmp:?}"), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(format!("writing {tmp:?}"), e))?;
        f.sync_all()
            .map_err(|e| Error::io(format!("syncing {tmp:?}"), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming into {path:?}"), e))
}

/// Parses bytes, verifying magic, version, length, and checksum.
pub fn decode(bytes: &[u8], path_label: &str, expect_kind: Option<[u8; 4]>) -> Result<Envelope> {
    let fail = |detail: &str| Error::format(path_label, detail);
    if bytes.len() < 4 + 2 + 4 + 32 {
        return Err(fail("file shorter than any valid envelope"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let mut hasher = Sha256::new();
    hasher.update(body);
    if hasher.finalize().as_slice() != trailer {
        return Err(fail("checksum mismatch"));
    }
    let kind: [u8; 4] = body[0..4].try_into().expect("length checked");
    if let Some(expect) = expect_kind {
        if kind != expect {
            return Err(fail(&format!(
                "content kind {:?} does not match expected {:?}",
                String::from_utf8_lossy(&kind),
                String::from_utf8_lossy(&expect)
            )));
        }
    }
    let version = u16::from_le_bytes(body[4..6].try_into().expect("length checked"));
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported format version {version}")));
    }
    let meta_len = u32::from_le_bytes(body[6..10].try_into().expect("length checked")) as usize;
    let meta_end = 10 + meta_len;
    if body.len() < meta_end {
        return Err(fail("metadata length exceeds file size"));
    }
    let metadata = std::str::from_utf8(&body[10..meta_end])
        .map_err(|_| fail("metadata is not valid UTF-8"))?
        .to_string();
    let payload_bytes = &body[meta_end..];
    if payload_bytes.len() % 4 != 0 {
        return Err(fail("payload is not a whole number of f32 values"));
    }
    let payload = payload_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunked by 4")))
        .collect();
    Ok(Envelope {
        kind,
        version,
        metadata,
        payload,
    })
}

pub fn read_file(path: &Path, expect_kind: Option<[u8; 4]>) -> Result<Envelope> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {path:?}"), e))?;
    decode(&bytes, &path.display().to_string(), expect_kind)
}
