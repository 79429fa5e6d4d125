//! Checkpoint container.
//!
//! Layout: one line of UTF-8 JSON (the manifest) terminated by `\n`, then the
//! raw little-endian `f64` payloads of every tensor, one contiguous block per
//! tensor in manifest order. Offsets in the manifest are byte offsets from
//! the start of the payload section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT: &str = "stmn-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<Entry>,
    /// Free-form metadata (config, vocabularies, optimizer counters).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = 8 * t.len() as u64;
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            tensors: entries,
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Invalid("checkpoint has no manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Invalid(format!("checkpoint manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let payload = &bytes[split + 1..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
            if e.bytes != 8 * n as u64 || end > payload.len() {
                return Err(Error::Invalid(format!("checkpoint entry `{}` is truncated", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Checkpoint {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = Checkpoint {
            tensors: vec![
                ("a".into(), Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b".into(), Tensor::scalar(std::f64::consts::PI)),
            ],
            meta: serde_json::json!({"epoch": 3}),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
    }

    #[test]
    fn manifest_offsets_are_contiguous() {
        let ck = Checkpoint {
            tensors: vec![
                ("a".into(), Tensor::zeros(&[3])),
                ("b".into(), Tensor::zeros(&[2, 2])),
            ],
            meta: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let m: Manifest = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(m.tensors[0].offset, 0);
        assert_eq!(m.tensors[1].offset, 24);
        assert_eq!(bytes.len() - nl - 1, 56);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let ck = Checkpoint {
            tensors: vec![("a".into(), Tensor::zeros(&[4]))],
            meta: serde_json::Value::Null,
        };
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
