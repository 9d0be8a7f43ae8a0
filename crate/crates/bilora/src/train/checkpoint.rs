//! Binary checkpoint format. Layout, all integers little-endian:
//!
//! ```text
//! "BLRA"  magic, 4 bytes
//! u32     format version (currently 1)
//! u32     tensor count
//! per tensor, sorted by name:
//!   u16        name byte length, then the UTF-8 name
//!   u8         rank
//!   u64 * rank extents
//!   f64 * n    row-major values
//! u32     metadata byte length, then a UTF-8 JSON blob with the model
//!         config, the train config, and the stage tag
//! ```
//!
//! Values are stored as raw 64-bit float bits, so a round trip is
//! bit-exact, non-finite payloads included.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{CaptionModel, ModelConfig};
use crate::scalar::Scalar;
use crate::train::{Stage, TrainConfig};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"BLRA";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild the model besides the tensor values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stage: Stage,
}

/// A trained model frozen to named tensors plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Scalar> {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<F>)>,
    pub meta: CheckpointMeta,
}

impl<F: Scalar> Checkpoint<F> {
    /// Capture every parameter of `model`, adapters included.
    pub fn from_model(model: &CaptionModel<F>, train: &TrainConfig) -> Self {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, t)| (name, (t.shape().to_vec(), t.to_vec())))
            .collect();
        Checkpoint {
            tensors,
            meta: CheckpointMeta {
                model: model.config().clone(),
                train: train.clone(),
                stage: train.stage,
            },
        }
    }

    /// Rebuild the model this checkpoint was taken from: construct from
    /// the stored config, re-inject adapters for fine-tune checkpoints,
    /// then overwrite every parameter. The checkpoint must cover the
    /// model's parameter set exactly.
    pub fn build_model(&self) -> Result<CaptionModel<F>> {
        let mut model = CaptionModel::new(self.meta.model.clone())?;
        if self.meta.stage == Stage::Finetune {
            model.inject(&self.meta.train.lora)?;
        }
        let params = model.named_params();
        for name in params.keys() {
            if !self.tensors.contains_key(name) {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {name} is missing from the checkpoint"
                )));
            }
        }
        for (name, (shape, values)) in &self.tensors {
            let Some(target) = params.get(name) else {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint tensor {name} has no place in the model"
                )));
            };
            if target.shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {name} is {shape:?} in the checkpoint but {:?} in the model",
                    target.shape()
                )));
            }
            target.set_data(values.clone())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::contract("checkpoint", "too many tensors for the format"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, (shape, values)) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::contract("checkpoint", format!("name {name:?} too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(shape.len())
                .map_err(|_| Error::contract("checkpoint", format!("rank of {name} too high")))?;
            out.push(rank);
            for &extent in shape {
                out.extend_from_slice(&(extent as u64).to_le_bytes());
            }
            let numel: usize = shape.iter().product();
            if numel != values.len() {
                return Err(Error::contract(
                    "checkpoint",
                    format!("tensor {name}: {} values for shape {shape:?}", values.len()),
                ));
            }
            for v in values {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        let meta_len = u32::try_from(meta.len())
            .map_err(|_| Error::contract("checkpoint", "metadata too large"))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CheckpointMismatch("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let extent = usize::try_from(r.u64()?).map_err(|_| {
                    Error::CheckpointMismatch(format!("tensor {name} extent overflows"))
                })?;
                numel = numel.checked_mul(extent).ok_or_else(|| {
                    Error::CheckpointMismatch(format!("tensor {name} size overflows"))
                })?;
                shape.push(extent);
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(F::c(f64::from_le_bytes(
                    r.take(8)?.try_into().expect("take(8) yields 8 bytes"),
                )));
            }
            if tensors.insert(name.clone(), (shape, values)).is_some() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {name} appears twice"
                )));
            }
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        if r.at != bytes.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} trailing bytes after the metadata",
                bytes.len() - r.at
            )));
        }
        Ok(Checkpoint { tensors, meta })
    }
}

/// Bounds-checked cursor; running past the end is the truncation error.
struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_meta() -> CheckpointMeta {
        CheckpointMeta {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stage: Stage::Pretrain,
        }
    }

    fn hand_checkpoint() -> Checkpoint<f64> {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.w".to_string(),
            (
                vec![2, 2],
                vec![1.5, -0.0, f64::from_bits(0x7ff8_dead_beef_cafe), 3.25],
            ),
        );
        tensors.insert("b".to_string(), (vec![3], vec![0.1, 0.2, 0.3]));
        Checkpoint {
            tensors,
            meta: small_meta(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = hand_checkpoint();
        let back = Checkpoint::<f64>::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.tensors.len(), ckpt.tensors.len());
        for (name, (shape, values)) in &ckpt.tensors {
            let (rshape, rvalues) = &back.tensors[name];
            assert_eq!(rshape, shape);
            for (a, b) in values.iter().zip(rvalues) {
                assert_eq!(
                    a.to_bits(),
                    b.to_bits(),
                    "{name} changed bit patterns (NaN payloads must survive)"
                );
            }
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = hand_checkpoint().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::BadMagic)
        ));
    }

    #[test]
    fn future_versions_are_refused_by_number() {
        let mut bytes = hand_checkpoint().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(7))
        ));
    }

    #[test]
    fn every_truncation_point_reports_truncated() {
        let bytes = hand_checkpoint().to_bytes().unwrap();
        for cut in [2, 6, 9, 13, 40, bytes.len() - 1] {
            assert!(
                matches!(
                    Checkpoint::<f64>::from_bytes(&bytes[..cut]),
                    Err(Error::Truncated)
                ),
                "cut at {cut} bytes should read as truncated"
            );
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = hand_checkpoint().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn model_round_trip_restores_every_parameter() {
        let cfg = ModelConfig {
            image_size: 16,
            d_model: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            query_tokens: 2,
            seed: 3,
            ..ModelConfig::default()
        };
        let model = CaptionModel::<f64>::new(cfg).unwrap();
        let train = TrainConfig::default();
        let ckpt = Checkpoint::from_model(&model, &train);
        let bytes = ckpt.to_bytes().unwrap();
        let rebuilt = Checkpoint::<f64>::from_bytes(&bytes).unwrap().build_model().unwrap();
        let originals = model.named_params();
        for (name, t) in rebuilt.named_params() {
            assert_eq!(
                t.to_vec(),
                originals[&name].to_vec(),
                "{name} changed across the round trip"
            );
        }
    }

    #[test]
    fn finetune_checkpoints_rebuild_their_adapters() {
        let cfg = ModelConfig {
            image_size: 16,
            d_model: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            query_tokens: 2,
            ..ModelConfig::default()
        };
        let mut model = CaptionModel::<f64>::new(cfg).unwrap();
        let train = TrainConfig {
            stage: Stage::Finetune,
            ..TrainConfig::default()
        };
        model.inject(&train.lora).unwrap();
        let ckpt = Checkpoint::from_model(&model, &train);
        let rebuilt = ckpt.build_model().unwrap();
        assert_eq!(rebuilt.adapter_count(), model.adapter_count());
        assert_eq!(
            rebuilt.trainable_params().len(),
            model.trainable_params().len(),
            "the requires-grad census must survive the round trip"
        );
    }

    #[test]
    fn parameter_cover_must_be_exact() {
        let cfg = ModelConfig {
            image_size: 16,
            d_model: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            query_tokens: 2,
            ..ModelConfig::default()
        };
        let model = CaptionModel::<f64>::new(cfg).unwrap();
        let train = TrainConfig::default();
        let mut missing = Checkpoint::from_model(&model, &train);
        missing.tensors.remove("patch.w").unwrap();
        assert!(matches!(
            missing.build_model(),
            Err(Error::CheckpointMismatch(_))
        ));
        let mut extra = Checkpoint::from_model(&model, &train);
        extra
            .tensors
            .insert("stowaway".to_string(), (vec![1], vec![0.0]));
        assert!(matches!(
            extra.build_model(),
            Err(Error::CheckpointMismatch(_))
        ));
        let mut bent = Checkpoint::from_model(&model, &train);
        bent.tensors.get_mut("patch.b").unwrap().0 = vec![17];
        assert!(matches!(
            bent.build_model(),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
