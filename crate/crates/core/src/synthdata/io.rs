//! Binary envelope shared by embedding files and model checkpoints.
//!
//! A file is one JSON header line terminated by `\n`, followed by raw
//! little-endian `f32` values. Embedding payloads are sample-major, then
//! token-major (class token first), then coordinate.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, TokenSet};
use crate::numkernel::Tensor;

pub const MAGIC: &str = "ORTHODISTILL1";
pub const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    magic: String,
    #[serde(rename = "D")]
    dim: usize,
    n_patch: usize,
    n_samples: usize,
    n_classes: usize,
    dtype: String,
    #[serde(default)]
    labels: Vec<usize>,
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8]), DataError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DataError::MalformedHeader("missing header line terminator".into()))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

fn check_envelope(magic: &str, dtype: &str) -> Result<(), DataError> {
    if magic != MAGIC {
        return Err(DataError::MalformedHeader(format!("bad magic {magic:?}")));
    }
    if dtype != DTYPE {
        return Err(DataError::MalformedHeader(format!("unsupported dtype {dtype:?}")));
    }
    Ok(())
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_f32(payload: &[u8]) -> impl Iterator<Item = f64> + '_ {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
}

/// Serializes labeled token sets; values are stored as `f32`.
pub fn encode_embeddings(sets: &[(TokenSet, usize)]) -> Result<Vec<u8>, DataError> {
    let (dim, n_patch) = sets.first().map_or((0, 0), |(t, _)| (t.dim(), t.n_patch()));
    for (i, (t, _)) in sets.iter().enumerate() {
        if t.dim() != dim || t.n_patch() != n_patch {
            return Err(DataError::Inconsistent(format!(
                "sample {i} has dim {} with {} patches, expected dim {dim} with {n_patch}",
                t.dim(),
                t.n_patch()
            )));
        }
    }
    let header = EmbeddingHeader {
        magic: MAGIC.into(),
        dim,
        n_patch,
        n_samples: sets.len(),
        n_classes: sets.iter().map(|(_, l)| l + 1).max().unwrap_or(0),
        dtype: DTYPE.into(),
        labels: sets.iter().map(|(_, l)| *l).collect(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| DataError::MalformedHeader(e.to_string()))?;
    out.push(b'\n');
    for (t, _) in sets {
        for tok in t.tokens() {
            push_f32(&mut out, tok);
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<(TokenSet, usize)>, DataError> {
    let (head, payload) = split_header(bytes)?;
    let header: EmbeddingHeader =
        serde_json::from_slice(head).map_err(|e| DataError::MalformedHeader(e.to_string()))?;
    check_envelope(&header.magic, &header.dtype)?;
    if header.labels.len() != header.n_samples {
        return Err(DataError::Inconsistent(format!(
            "header lists {} labels for {} samples",
            header.labels.len(),
            header.n_samples
        )));
    }
    if let Some(bad) = header.labels.iter().find(|&&l| l >= header.n_classes) {
        return Err(DataError::Inconsistent(format!(
            "label {bad} out of range for n_classes = {}",
            header.n_classes
        )));
    }
    if header.n_samples > 0 && header.dim == 0 {
        return Err(DataError::Inconsistent("D = 0 with a non-empty sample list".into()));
    }
    let per_sample = (header.n_patch + 1) * header.dim;
    let expected = header.n_samples * per_sample * 4;
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected_bytes: expected,
            got_bytes: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DataError::Inconsistent(format!(
            "payload holds {} bytes beyond the {} declared by the header",
            payload.len() - expected,
            expected
        )));
    }
    let values: Vec<f64> = read_f32(payload).collect();
    header
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let flat = &values[i * per_sample..(i + 1) * per_sample];
            Ok((TokenSet::from_flat(flat, header.dim)?, label))
        })
        .collect()
}

pub fn save_embeddings(path: impl AsRef<Path>, sets: &[(TokenSet, usize)]) -> Result<(), DataError> {
    fs::write(path, encode_embeddings(sets)?)?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<(TokenSet, usize)>, DataError> {
    decode_embeddings(&fs::read(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    kind: String,
    model: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

/// Named tensors plus free-form metadata, stored in the same envelope as
/// embedding files with `"kind": "checkpoint"`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(model: &str) -> Self {
        Self {
            model: model.to_string(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, DataError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DataError::Inconsistent(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            magic: MAGIC.into(),
            kind: "checkpoint".into(),
            model: self.model.clone(),
            dtype: DTYPE.into(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("checkpoint header serializes");
        out.push(b'\n');
        for (_, t) in &self.tensors {
            push_f32(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let (head, payload) = split_header(bytes)?;
        let header: CheckpointHeader =
            serde_json::from_slice(head).map_err(|e| DataError::MalformedHeader(e.to_string()))?;
        check_envelope(&header.magic, &header.dtype)?;
        if header.kind != "checkpoint" {
            return Err(DataError::MalformedHeader(format!("kind {:?} is not a checkpoint", header.kind)));
        }
        let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
        if payload.len() < expected {
            return Err(DataError::Truncated {
                expected_bytes: expected,
                got_bytes: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(DataError::Inconsistent(format!(
                "checkpoint payload has {} trailing bytes",
                payload.len() - expected
            )));
        }
        let mut values = read_f32(payload);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            model: header.model,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: f64, label: usize) -> (TokenSet, usize) {
        (TokenSet::new(vec![v, -v, 0.5], vec![vec![1.0, 2.0, v]]).unwrap(), label)
    }

    #[test]
    fn empty_list_is_valid() {
        let bytes = encode_embeddings(&[]).unwrap();
        assert!(decode_embeddings(&bytes).unwrap().is_empty());
    }

    #[test]
    fn header_fields() {
        let bytes = encode_embeddings(&[sample(1.0, 0), sample(2.0, 2)]).unwrap();
        let (head, payload) = split_header(&bytes).unwrap();
        let v: serde_json::Value = serde_json::from_slice(head).unwrap();
        assert_eq!(v["magic"], "ORTHODISTILL1");
        assert_eq!(v["D"], 3);
        assert_eq!(v["n_patch"], 1);
        assert_eq!(v["n_samples"], 2);
        assert_eq!(v["n_classes"], 3);
        assert_eq!(v["dtype"], "f32le");
        assert_eq!(payload.len(), 2 * 2 * 3 * 4);
        assert_eq!(&payload[..4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_embeddings(&[sample(1.0, 0), sample(2.0, 1)]).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_embeddings(&bytes), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn header_claims_more_samples_than_payload() {
        let header = r#"{"magic":"ORTHODISTILL1","D":2,"n_patch":0,"n_samples":3,"n_classes":1,"dtype":"f32le","labels":[0,0,0]}"#;
        let mut bytes = header.as_bytes().to_vec();
        bytes.push(b'\n');
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(decode_embeddings(&bytes), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn malformed_and_inconsistent_are_distinct() {
        assert!(matches!(decode_embeddings(b"not json\n"), Err(DataError::MalformedHeader(_))));
        assert!(matches!(decode_embeddings(b"{}"), Err(DataError::MalformedHeader(_))));
        let wrong_magic = br#"{"magic":"X","D":1,"n_patch":0,"n_samples":0,"n_classes":0,"dtype":"f32le"}
"#;
        assert!(matches!(decode_embeddings(wrong_magic), Err(DataError::MalformedHeader(_))));
        let bad_label = br#"{"magic":"ORTHODISTILL1","D":1,"n_patch":0,"n_samples":1,"n_classes":1,"dtype":"f32le","labels":[4]}
"#;
        let mut b = bad_label.to_vec();
        b.extend_from_slice(&[0u8; 4]);
        assert!(matches!(decode_embeddings(&b), Err(DataError::Inconsistent(_))));
        let mixed = [sample(1.0, 0), (TokenSet::new(vec![1.0], vec![]).unwrap(), 0)];
        assert!(matches!(encode_embeddings(&mixed), Err(DataError::Inconsistent(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut ck = Checkpoint::new("head");
        ck.meta.insert("norm_mode".into(), "layernorm".into());
        ck.push("w", Tensor::new(vec![2, 2], vec![1.0, 0.5, -0.25, 2.0]).unwrap());
        ck.push("b", Tensor::vector(vec![0.0, 3.0]));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(DataError::Truncated { .. })));
        assert!(matches!(
            decode_embeddings(&ck.to_bytes()),
            Err(DataError::MalformedHeader(_))
        ));
    }
}
