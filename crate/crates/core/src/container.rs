//! TDW1 binary container: the on-disk format for model weights and for
//! single-tensor image files.
//!
//! Layout, all multi-byte integers little-endian:
//!
//! ```text
//! 8 bytes   magic "TDWEIGHT"
//! u32       metadata length in bytes
//! bytes     UTF-8 JSON metadata document:
//!           { "format": "TDW1", "version": 1, "kind": "...",
//!             "config": { ... }?, "tensors": [ { "name", "shape" }, ... ] }
//! bytes     concatenated f64 little-endian payloads, manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TDWEIGHT";
pub const FORMAT: &str = "TDW1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format: String,
    version: u32,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Parsed contents of a TDW1 file.
#[derive(Debug)]
pub struct Container {
    pub kind: String,
    pub config: Option<serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    /// Remove and return the tensor named `name`, or a format error naming it.
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        match self.tensors.iter().position(|(n, _)| n == name) {
            Some(i) => Ok(self.tensors.remove(i).1),
            None => Err(Error::Format(format!("missing tensor '{name}'"))),
        }
    }
}

/// Write bytes to `path` atomically: write a sibling temp file, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{stem}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize a container to bytes.
pub fn encode(
    kind: &str,
    config: Option<&serde_json::Value>,
    tensors: &[(&str, &Tensor)],
) -> Result<Vec<u8>> {
    let meta = Metadata {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        config: config.cloned(),
        tensors: tensors
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: (*name).to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("metadata encode: {e}")))?;
    let payload_len: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(12 + meta_bytes.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_file(
    path: &Path,
    kind: &str,
    config: Option<&serde_json::Value>,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    atomic_write(path, &encode(kind, config, tensors)?)
}

/// Parse a container from bytes, validating magic, version and every
/// manifest entry against the payload.
pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(
            "file truncated: {} bytes is smaller than any valid header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..8],
            MAGIC
        )));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let meta_end = 12usize
        .checked_add(meta_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("file truncated inside metadata".into()))?;
    let meta: Metadata = serde_json::from_slice(&bytes[12..meta_end])
        .map_err(|e| Error::Format(format!("metadata parse: {e}")))?;
    if meta.format != FORMAT {
        return Err(Error::Format(format!(
            "format field is '{}', expected '{FORMAT}'",
            meta.format
        )));
    }
    if meta.version != VERSION {
        return Err(Error::Format(format!(
            "version mismatch: file is v{}, reader supports v{VERSION}",
            meta.version
        )));
    }
    let mut offset = meta_end;
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for entry in &meta.tensors {
        let count: usize = entry.shape.iter().product();
        let nbytes = count * 8;
        if offset + nbytes > bytes.len() {
            return Err(Error::Format(format!(
                "file truncated in payload of tensor '{}': manifest shape {:?} needs {nbytes} bytes",
                entry.name, entry.shape
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes[offset..offset + nbytes].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset += nbytes;
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| {
            Error::Format(format!("tensor '{}' manifest invalid: {e}", entry.name))
        })?;
        tensors.push((entry.name.clone(), tensor));
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor payload",
            bytes.len() - offset
        )));
    }
    Ok(Container {
        kind: meta.kind,
        config: meta.config,
        tensors,
    })
}

pub fn read_file(path: &Path) -> Result<Container> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_tensors() -> Vec<(String, Tensor)> {
        vec![
            ("a".to_string(), Tensor::from_rows(&[vec![1.0, -2.5], vec![3.25, 0.0]])),
            ("b".to_string(), Tensor::new(vec![3], vec![9.0, 8.0, 7.0]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tensors = sample_tensors();
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = encode("tensor", None, &refs).unwrap();
        let parsed = decode(&bytes).unwrap();
        assert_eq!(parsed.kind, "tensor");
        for ((n0, t0), (n1, t1)) in tensors.iter().zip(&parsed.tensors) {
            assert_eq!(n0, n1);
            assert_eq!(t0, t1);
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let tensors = sample_tensors();
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = encode("tensor", None, &refs).unwrap();
        for cut in [0, 5, 11, bytes.len() - 9, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Format(_)) => {}
                other => panic!("cut at {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let tensors = sample_tensors();
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut bytes = encode("tensor", None, &refs).unwrap();
        let mut mangled = bytes.clone();
        mangled[0] = b'X';
        assert!(matches!(decode(&mangled), Err(Error::Format(m)) if m.contains("magic")));

        // Bump the version field inside the JSON metadata.
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta = String::from_utf8(bytes[12..12 + meta_len].to_vec()).unwrap();
        let bumped = meta.replace("\"version\":1", "\"version\":2");
        assert_ne!(meta, bumped);
        bytes.splice(12..12 + meta_len, bumped.into_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("version")));
    }

    #[test]
    fn manifest_payload_disagreement_names_the_tensor() {
        let tensors = sample_tensors();
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = encode("tensor", None, &refs).unwrap();
        // Claim a larger shape for tensor "b" than the payload provides.
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta = String::from_utf8(bytes[12..12 + meta_len].to_vec()).unwrap();
        let bumped = meta.replace("\"name\":\"b\",\"shape\":[3]", "\"name\":\"b\",\"shape\":[4]");
        assert_ne!(meta, bumped);
        let mut mangled = bytes.clone();
        mangled.splice(12..12 + meta_len, bumped.clone().into_bytes());
        mangled[8..12].copy_from_slice(&(bumped.len() as u32).to_le_bytes());
        match decode(&mangled) {
            Err(Error::Format(m)) => assert!(m.contains("'b'"), "{m}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
