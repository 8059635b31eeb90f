//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        4 bytes  "TXAT"
//! version      u32      FORMAT_VERSION
//! config       u32 x 7  vocab_size, d_model, n_heads, n_layers, d_ff, max_len, n_classes
//!              u64      seed
//! labels       u32      count, then per label: u32 byte length + UTF-8 (index order)
//! vocabulary   u32      count, then per token: u32 byte length + UTF-8 (id order)
//! parameters   u64      count, then that many f64 values
//! ```
//!
//! Parameters are the tensors of [`ModelConfig::layout`] concatenated in
//! order, each row-major: token embedding, position embedding, then per layer
//! query/key/value/output weight and bias, feed-forward in weight and bias,
//! feed-forward out weight and bias, attention-norm gain and shift,
//! feed-forward-norm gain and shift; finally head weight and head bias.

use std::path::Path;

use thiserror::Error;

use crate::model::{Classifier, ModelConfig, ModelError, ModelParams};
use crate::text::{Label, Vocabulary};

pub const MAGIC: &[u8; 4] = b"TXAT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("corrupt checkpoint at byte offset {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
    #[error("label mapping {0:?} differs from explicit/implicit/none")]
    LabelMapping(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn to_bytes(model: &Classifier, vocab: &Vocabulary) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + model.params.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_heads,
        c.n_layers,
        c.d_ff,
        c.max_len,
        c.n_classes,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());

    let write_strings = |out: &mut Vec<u8>, items: &mut dyn Iterator<Item = &str>, count: usize| {
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for s in items {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    };
    write_strings(
        &mut out,
        &mut Label::ALL.iter().map(|l| l.as_str()),
        Label::ALL.len(),
    );
    write_strings(
        &mut out,
        &mut vocab.tokens().iter().map(String::as_str),
        vocab.len(),
    );

    let flat = model.params.flatten();
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let remaining = self.bytes.len() - self.offset;
        if n > remaining {
            return Err(CheckpointError::Truncated {
                offset: self.offset,
                needed: n - remaining,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let at = self.offset;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| CheckpointError::Corrupt {
            offset: at + e.utf8_error().valid_up_to(),
            detail: "invalid UTF-8".into(),
        })
    }

    fn strings(&mut self) -> Result<Vec<String>, CheckpointError> {
        let n = self.u32()? as usize;
        // Each entry needs at least its 4-byte length prefix.
        let remaining = self.bytes.len() - self.offset;
        if n > remaining / 4 {
            return Err(CheckpointError::Truncated {
                offset: self.offset,
                needed: n * 4 - remaining,
            });
        }
        (0..n).map(|_| self.string()).collect()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Classifier, Vocabulary), CheckpointError> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }

    let config_at = r.offset;
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        n_layers: dims[3],
        d_ff: dims[4],
        max_len: dims[5],
        n_classes: dims[6],
        seed: r.u64()?,
    };
    config.validate().map_err(|e| CheckpointError::Corrupt {
        offset: config_at,
        detail: e.to_string(),
    })?;

    let labels = r.strings()?;
    if labels.len() != Label::ALL.len()
        || labels.iter().zip(Label::ALL).any(|(s, l)| s != l.as_str())
    {
        return Err(CheckpointError::LabelMapping(labels));
    }

    let vocab_at = r.offset;
    let tokens = r.strings()?;
    if tokens.len() != config.vocab_size {
        return Err(CheckpointError::Corrupt {
            offset: vocab_at,
            detail: format!(
                "vocabulary has {} tokens but the config says {}",
                tokens.len(),
                config.vocab_size
            ),
        });
    }
    let vocab = Vocabulary::from_id_order(tokens).ok_or_else(|| CheckpointError::Corrupt {
        offset: vocab_at,
        detail: "vocabulary is missing reserved entries or has duplicates".into(),
    })?;

    let count_at = r.offset;
    let count = r.u64()? as usize;
    if count != config.parameter_count() {
        return Err(CheckpointError::Corrupt {
            offset: count_at,
            detail: format!(
                "{count} parameters stored, config implies {}",
                config.parameter_count()
            ),
        });
    }
    let payload_at = r.offset;
    let raw = r.take(count.checked_mul(8).ok_or(CheckpointError::Corrupt {
        offset: count_at,
        detail: "parameter count overflows".into(),
    })?)?;
    let flat: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(CheckpointError::Corrupt {
            offset: payload_at + 8 * i,
            detail: "non-finite parameter".into(),
        });
    }
    if r.offset != bytes.len() {
        return Err(CheckpointError::Corrupt {
            offset: r.offset,
            detail: format!("{} trailing bytes", bytes.len() - r.offset),
        });
    }

    let params = ModelParams::from_flat(&config, &flat)?;
    Ok((Classifier { config, params }, vocab))
}

pub fn save_checkpoint(
    model: &Classifier,
    vocab: &Vocabulary,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(model, vocab))?;
    Ok(())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(Classifier, Vocabulary), CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::text::build_vocab_from_docs;

    fn sample() -> (Classifier, Vocabulary) {
        let vocab = build_vocab_from_docs([["you", "are", "kind"], ["so", "are", "they"]], 1);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_len: 6,
            n_classes: 3,
            seed: 5,
        };
        (init_model(&cfg).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (model, vocab) = sample();
        let bytes = to_bytes(&model, &vocab);
        let (m2, v2) = from_bytes(&bytes).unwrap();
        assert_eq!(m2.config, model.config);
        assert_eq!(v2, vocab);
        let a: Vec<u64> = model.params.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = m2.params.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(to_bytes(&m2, &v2), bytes);
    }

    #[test]
    fn bumped_version_is_rejected() {
        let (model, vocab) = sample();
        let mut bytes = to_bytes(&model, &vocab);
        bytes[4] += 1;
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::Version {
                found: 2,
                supported: 1
            })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let (model, vocab) = sample();
        let bytes = to_bytes(&model, &vocab);
        match from_bytes(&bytes[..bytes.len() - 1]) {
            Err(CheckpointError::Truncated { offset, needed }) => {
                assert_eq!(needed, 1);
                assert_eq!(offset, bytes.len() - 8 * model.params.parameter_count());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let (model, vocab) = sample();
        let mut bytes = to_bytes(&model, &vocab);
        assert!(matches!(
            from_bytes(b"NOPE"),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(from_bytes(b"TX"), Err(CheckpointError::BadMagic)));
        bytes.push(0);
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::Corrupt { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let (model, vocab) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &vocab, &path).unwrap();
        let (m2, v2) = load_checkpoint(&path).unwrap();
        assert_eq!(m2, model);
        assert_eq!(v2, vocab);
    }
}
