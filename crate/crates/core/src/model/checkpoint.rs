//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "SVLB"  magic
//! u32     format version
//! u32 ×7  n_layers, n_heads, d_model, d_head, d_ff, vocab_size, max_seq
//! u8      attention kind (0 = softmax, 1 = relaxed linear)
//! str     training metadata as JSON (u32 length + UTF-8)
//! u32     tensor count
//! per tensor, in `Model::tensors` order:
//!   u32 ndim, u32 × ndim dims, f64 × numel
//! u64     FNV-1a of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttentionKind, Model, ModelConfig};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps: usize,
    /// FNV-1a of the canonical training-config text.
    pub train_config_hash: u64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(model: Model, meta: TrainingMeta) -> Self {
        Self { model, meta }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn payload(&self) -> Result<Writer> {
        let c = &self.model.config;
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        for v in [
            c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_ff, c.vocab_size, c.max_seq,
        ] {
            w.u32(v as u32);
        }
        w.u8(match c.attention_kind {
            AttentionKind::Softmax => 0,
            AttentionKind::RelaxedLinear => 1,
        });
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        w.string(&meta);
        let tensors = self.model.tensors();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f64s(t.data());
        }
        Ok(w)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.payload()?.finish())
    }

    /// Content hash: the FNV-1a trailer the file would carry.
    pub fn hash(&self) -> u64 {
        self.payload().map(|w| w.payload_hash()).unwrap_or(0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, _) = Reader::open(bytes, CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let attention_kind = match r.u8()? {
            0 => AttentionKind::Softmax,
            1 => AttentionKind::RelaxedLinear,
            k => return Err(Error::Format(format!("unknown attention kind {k}"))),
        };
        let config = ModelConfig {
            n_layers: dims[0],
            n_heads: dims[1],
            d_model: dims[2],
            d_head: dims[3],
            d_ff: dims[4],
            vocab_size: dims[5],
            max_seq: dims[6],
            attention_kind,
        };
        config.validate()?;
        let meta: TrainingMeta =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Format(e.to_string()))?;

        // Shapes come from a freshly initialized model; the file must match them.
        let mut model = Model::init(config, 0)?;
        let count = r.u32()? as usize;
        let slots = model.tensors_mut();
        if count != slots.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, file has {count}",
                slots.len()
            )));
        }
        for slot in slots {
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            if shape != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {shape:?} does not match expected {:?}",
                    slot.shape()
                )));
            }
            let data = r.f64s(slot.numel())?;
            *slot = Tensor::new(shape, data)?;
        }
        r.finish()?;
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_ff: 16,
            vocab_size: 10,
            max_seq: 12,
            attention_kind: AttentionKind::Softmax,
        };
        Checkpoint::new(
            Model::init(config, 7).unwrap(),
            TrainingMeta {
                seed: 7,
                steps: 0,
                train_config_hash: 42,
                final_loss: Some(0.1 + 0.2),
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SVLB");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (a, b) in ck.model.tensors().iter().zip(back.model.tensors()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.hash(), ck.hash());
    }

    #[test]
    fn corruption_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 20]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..6]).is_err());
    }
}
