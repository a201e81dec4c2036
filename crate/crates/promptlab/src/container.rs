//! Shared on-disk container for model, prompt-store, connector, and
//! classifier checkpoints.
//!
//! Layout: 8-byte magic, little-endian u32 header length, a JSON header
//! (kind, metadata, array directory, payload digest), then the payload of
//! concatenated 64-bit little-endian float arrays. Corruption is reported
//! with the byte offset where parsing failed.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"PLABBIN1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt container at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("container holds a {found} artifact, expected {expected}")]
    WrongKind { expected: String, found: String },
    #[error("payload digest mismatch: header {header}, computed {computed}")]
    DigestMismatch { header: String, computed: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    digest: String,
}

#[derive(Debug)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(ArrayEntry, Vec<f64>)>,
    /// Hex digest of the payload bytes, as stored in the header.
    pub digest: String,
}

fn payload_digest(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}

/// Serializes named arrays plus a metadata value into a container file.
pub fn write_container(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    arrays: &[(String, Vec<usize>, &[f64])],
) -> Result<String, ContainerError> {
    let mut payload = Vec::new();
    let mut dir = Vec::new();
    let mut offset = 0usize;
    for (name, shape, data) in arrays {
        dir.push(ArrayEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len(),
        });
        for v in *data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += data.len();
    }
    let digest = payload_digest(&payload);
    let header = Header {
        kind: kind.to_string(),
        version: 1,
        meta,
        arrays: dir,
        digest: digest.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);

    let io_err = |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut f = fs::File::create(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(&out).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(digest)
}

/// Reads and validates a container, checking magic, header, array bounds,
/// and the payload digest.
pub fn read_container(path: &Path, expected_kind: &str) -> Result<Container, ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 12 {
        return Err(ContainerError::Corrupt {
            offset: bytes.len(),
            reason: "file shorter than fixed preamble".into(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(ContainerError::Corrupt {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(ContainerError::Corrupt {
            offset: 12,
            reason: format!("header claims {header_len} bytes, file too short"),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| ContainerError::Corrupt {
            offset: 12,
            reason: format!("header json: {e}"),
        })?;
    if header.kind != expected_kind {
        return Err(ContainerError::WrongKind {
            expected: expected_kind.to_string(),
            found: header.kind,
        });
    }
    let payload = &bytes[header_end..];
    let computed = payload_digest(payload);
    if computed != header.digest {
        return Err(ContainerError::DigestMismatch {
            header: header.digest,
            computed,
        });
    }
    let mut arrays = Vec::new();
    for entry in header.arrays {
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        if end > payload.len() {
            return Err(ContainerError::Corrupt {
                offset: header_end + start,
                reason: format!("array {} overruns payload", entry.name),
            });
        }
        let expect: usize = entry.shape.iter().product();
        if expect != entry.len {
            return Err(ContainerError::Corrupt {
                offset: header_end + start,
                reason: format!("array {} shape/len disagree", entry.name),
            });
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((entry, data));
    }
    Ok(Container {
        kind: expected_kind.to_string(),
        meta: header.meta,
        arrays,
        digest: header.digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let a = vec![1.0f64, -2.5, 3.25];
        let b = vec![0.125f64; 4];
        write_container(
            &path,
            "model",
            serde_json::json!({"d": 4}),
            &[
                ("a".into(), vec![3], a.as_slice()),
                ("b".into(), vec![2, 2], b.as_slice()),
            ],
        )
        .unwrap();
        let c = read_container(&path, "model").unwrap();
        assert_eq!(c.arrays[0].1, a);
        assert_eq!(c.arrays[1].1, b);
        assert_eq!(c.meta["d"], 4);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_container(&path, "model", serde_json::json!({}), &[]).unwrap();
        let err = read_container(&path, "connector").unwrap_err();
        assert!(matches!(err, ContainerError::WrongKind { .. }));
    }

    #[test]
    fn corruption_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let a = vec![1.0f64; 8];
        write_container(
            &path,
            "model",
            serde_json::json!({}),
            &[("a".into(), vec![8], a.as_slice())],
        )
        .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_container(&path, "model").unwrap_err();
        assert!(matches!(err, ContainerError::DigestMismatch { .. }), "{err}");

        bytes[3] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_container(&path, "model").unwrap_err();
        assert!(matches!(err, ContainerError::Corrupt { offset: 0, .. }), "{err}");
    }
}
