//! Binary model checkpoints.
//!
//! Layout: the 8 magic bytes `ISOLAB01`, a little-endian `u64` header
//! length, a JSON header, then every tensor of the model as little-endian
//! `f64` values in header order.

use std::fs;
use std::path::Path;

use isolab_core::model::{EncoderConfig, ModelParams};
use isolab_core::numcore::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ISOLAB01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: need {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// Architecture and tokenizer, so evaluation encodes exactly as training did.
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub tensors: Vec<TensorEntry>,
    /// Free-form training hyperparameters, echoed for provenance.
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

pub fn to_bytes(params: &ModelParams, hyperparameters: serde_json::Value) -> Vec<u8> {
    let named = params.named_tensors();
    let header = Header {
        format_version: FORMAT_VERSION,
        encoder: params.encoder.config.clone(),
        num_classes: params.head.num_classes(),
        tensors: named
            .iter()
            .map(|(name, _, m)| TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
            })
            .collect(),
        hyperparameters,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = named.iter().map(|(_, _, m)| m.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, m) in &named {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, Header), CheckpointError> {
    let truncated = |expected: u64| CheckpointError::Truncated {
        expected,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 8 {
        return Err(if MAGIC.starts_with(bytes) {
            truncated(16)
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body_start = 16u64
        .checked_add(header_len)
        .ok_or_else(|| CheckpointError::Corrupt("header length overflows".into()))?;
    if (bytes.len() as u64) < body_start {
        return Err(truncated(body_start));
    }
    let header: Header = serde_json::from_slice(&bytes[16..body_start as usize])
        .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(header.format_version));
    }
    header
        .encoder
        .validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if header.num_classes == 0 {
        return Err(CheckpointError::Corrupt("zero classes".into()));
    }

    let mut params = ModelParams::init(&header.encoder, header.num_classes, &mut Rng::new(0))
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let declared: u64 = header
        .tensors
        .iter()
        .map(|t| (t.shape[0] as u64) * (t.shape[1] as u64) * 8)
        .sum();
    let payload = bytes.len() as u64 - body_start;
    let expected_names: Vec<(String, [usize; 2])> = params
        .named_tensors()
        .into_iter()
        .map(|(n, _, m)| (n, [m.rows(), m.cols()]))
        .collect();
    let got: Vec<(String, [usize; 2])> = header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape))
        .collect();
    if got != expected_names {
        return Err(CheckpointError::Corrupt(
            "tensor list does not match the declared architecture".into(),
        ));
    }
    if payload < declared {
        return Err(truncated(body_start + declared));
    }
    if payload > declared {
        return Err(CheckpointError::Corrupt(format!(
            "payload has {payload} bytes but the header declares {declared}"
        )));
    }
    let mut offset = body_start as usize;
    for (_, m) in params.tensors_mut() {
        for v in m.as_mut_slice() {
            *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8 bytes"));
            offset += 8;
        }
    }
    let all_finite = params.named_tensors().iter().all(|(_, _, m)| m.is_finite());
    if !all_finite {
        return Err(CheckpointError::Corrupt("non-finite parameter".into()));
    }
    if let Some(bn) = &params.encoder.batchnorm {
        if bn.running_var.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(CheckpointError::Corrupt(
                "running variance must be > 0".into(),
            ));
        }
    }
    Ok((params, header))
}

pub fn save(path: &Path, params: &ModelParams, hyperparameters: serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(params, hyperparameters)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|source| Error::Checkpoint {
        path: path.into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use isolab_core::model::Tokenizer;

    fn params(batchnorm: bool) -> ModelParams {
        let cfg = EncoderConfig {
            tokenizer: Tokenizer {
                vocab_size: 20,
                lowercase: true,
            },
            d_emb: 3,
            d_hidden: 5,
            d_out: 2,
            dropout: 0.1,
            batchnorm,
            output_activation: Default::default(),
        };
        ModelParams::init(&cfg, 4, &mut Rng::new(9)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for bn in [false, true] {
            let p = params(bn);
            let bytes = to_bytes(&p, serde_json::json!({"lr": 0.001}));
            let (q, header) = from_bytes(&bytes).unwrap();
            assert_eq!(p, q);
            assert_eq!(header.num_classes, 4);
            assert_eq!(header.hyperparameters["lr"], 0.001);
        }
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = to_bytes(&params(false), serde_json::Value::Null);
        assert!(matches!(
            from_bytes(b"NOTACKPT........"),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            from_bytes(&bytes[..12]),
            Err(CheckpointError::Truncated { .. })
        ));

        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(matches!(
            from_bytes(&longer),
            Err(CheckpointError::Corrupt(_))
        ));

        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        let bumped = header.replace("\"format_version\":1", "\"format_version\":7");
        let reshaped = header.replace("\"shape\":[20,3]", "\"shape\":[21,3]");
        for (text, want_version) in [(bumped, true), (reshaped, false)] {
            let mut b = MAGIC.to_vec();
            b.extend_from_slice(&(text.len() as u64).to_le_bytes());
            b.extend_from_slice(text.as_bytes());
            b.extend_from_slice(&bytes[16 + header_len..]);
            let err = from_bytes(&b).unwrap_err();
            if want_version {
                assert!(matches!(err, CheckpointError::UnsupportedVersion(7)));
            } else {
                assert!(matches!(err, CheckpointError::Corrupt(_)));
            }
        }
    }
}
