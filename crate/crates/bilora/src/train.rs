//! Two-stage training. The pretraining stage teaches a fresh model an
//! auxiliary captioning task (name the dominant texture attribute and the
//! overall brightness) with every weight trainable. The fine-tuning stage
//! freezes that base, injects low-rank adapters into the decoder, and
//! retargets the caption to the one-word real/fake verdict.
//!
//! Both stages share one loop: seeded shuffle, mini-batches of per-sample
//! graphs with the loss scaled by 1/batch, Adam updates, per-epoch
//! validation, and best-validation model selection.

pub mod adam;
pub mod checkpoint;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};

use crate::data::synth::stream_rng;
use crate::data::{DatasetManifest, ImageBuf, Record, Split, REAL_FAMILY};
use crate::lora::LoraConfig;
use crate::model::{caption_to_label, CaptionModel, Mode, Vocab};
use crate::scalar::Scalar;
use crate::tensor::Graph;
use crate::{Error, Result};

/// Conservative learning-rate preset typical for adapter fine-tuning of
/// large models; the default is desk-scale and learns much faster on this
/// small architecture.
pub const PRESET_LEARNING_RATE: f64 = 5e-5;

/// Mean pixel value below which an image is captioned "dark".
pub const DARK_BELOW: f64 = 0.45;
/// Mean pixel value above which an image is captioned "bright".
pub const BRIGHT_ABOVE: f64 = 0.55;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

fn d_learning_rate() -> f64 {
    1e-3
}
fn d_epochs() -> usize {
    20
}
fn d_batch_size() -> usize {
    32
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub stage: Stage,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    /// Adapter shape for the fine-tuning stage; ignored while pretraining.
    #[serde(default)]
    pub lora: LoraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults fill every field")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("epochs", self.epochs), ("batch_size", self.batch_size)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        self.lora.validate()
    }
}

// ── Caption targets ─────────────────────────────────────────────────────

/// The brightness word for a mean pixel value.
pub fn brightness_word(mean: f64) -> &'static str {
    if mean < DARK_BELOW {
        "dark"
    } else if mean > BRIGHT_ABOVE {
        "bright"
    } else {
        "mid"
    }
}

/// Target token sequence, EOS included, for one record. Pretraining
/// captions name the texture attribute (the family word, "plain" for the
/// real pool) and the brightness band; fine-tuning captions are the bare
/// verdict word.
pub fn caption_target(
    stage: Stage,
    vocab: &Vocab,
    record: &Record,
    image_mean: f64,
) -> Result<Vec<usize>> {
    let mut words: Vec<&str> = Vec::new();
    match stage {
        Stage::Pretrain => {
            let attribute = if record.family == REAL_FAMILY {
                "plain"
            } else {
                record.family.as_str()
            };
            words.push(attribute);
            words.push(brightness_word(image_mean));
        }
        Stage::Finetune => {
            words.push(if record.label == 1 { "fake" } else { "real" });
        }
    }
    let mut tokens = Vec::with_capacity(words.len() + 1);
    for word in words {
        tokens.push(vocab.lookup(word).ok_or_else(|| {
            Error::Config(format!(
                "caption word {word:?} is not in the model vocabulary; \
                 extend the vocab or rename the family"
            ))
        })?);
    }
    tokens.push(vocab.eos());
    Ok(tokens)
}

// ── The training loop ───────────────────────────────────────────────────

struct Sample<F: Scalar> {
    img: ImageBuf<F>,
    targets: Vec<usize>,
    label: u8,
}

fn load_samples<F: Scalar>(
    manifest: &DatasetManifest,
    records: &[&Record],
    stage: Stage,
    vocab: &Vocab,
) -> Result<Vec<Sample<F>>> {
    use rayon::prelude::*;
    crate::thread_pool().install(|| {
        records
            .par_iter()
            .map(|record| {
                let img = ImageBuf::<F>::load_png(&manifest.image_path(record))?;
                let targets = caption_target(stage, vocab, record, img.mean().as_f64())?;
                Ok(Sample {
                    img,
                    targets,
                    label: record.label,
                })
            })
            .collect()
    })
}

/// Forward/backward over one mini-batch of per-sample graphs, each loss
/// scaled by 1/batch so gradients accumulate to the batch mean. Returns
/// the mean loss.
fn step_batch<F: Scalar>(
    model: &CaptionModel<F>,
    samples: &[Sample<F>],
    chunk: &[usize],
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let inv = 1.0 / chunk.len() as f64;
    let mut total = 0.0;
    for &i in chunk {
        let sample = &samples[i];
        let mut g = Graph::new();
        let loss = model.caption_loss(
            &mut g,
            &sample.img,
            &sample.targets,
            &mut Mode::Train {
                rng: &mut *dropout_rng,
            },
        )?;
        total += loss.item()?.as_f64();
        let scaled = g.scale(&loss, F::c(inv))?;
        g.backward(&scaled)?;
    }
    Ok(total * inv)
}

/// Fraction of validation samples the model gets exactly right: caption
/// equality for pretraining, verdict-label equality for fine-tuning.
/// `None` when there is nothing to validate on.
fn validation_accuracy<F: Scalar>(
    model: &CaptionModel<F>,
    samples: &[Sample<F>],
    stage: Stage,
    vocab: &Vocab,
) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let max_len = model.config().max_caption_len;
    let mut correct = 0usize;
    for sample in samples {
        let caption = model.generate_caption(&sample.img, max_len)?;
        let hit = match stage {
            Stage::Pretrain => {
                let want = &sample.targets[..sample.targets.len() - 1];
                caption.tokens == want
            }
            Stage::Finetune => caption_to_label(vocab, &caption) == Some(sample.label),
        };
        correct += usize::from(hit);
    }
    Ok(Some(correct as f64 / samples.len() as f64))
}

fn snapshot<F: Scalar>(params: &[(String, crate::tensor::Tensor<F>)]) -> Vec<Vec<F>> {
    params.iter().map(|(_, t)| t.to_vec()).collect()
}

fn restore<F: Scalar>(
    params: &[(String, crate::tensor::Tensor<F>)],
    state: &[Vec<F>],
) -> Result<()> {
    for ((_, t), values) in params.iter().zip(state) {
        t.set_data(values.clone())?;
    }
    Ok(())
}

/// Run one training stage over the manifest's train split and return the
/// checkpoint with the best validation accuracy (the final state when the
/// manifest has no validation records). Training stops early once
/// validation is perfect. The model is left holding the returned weights.
pub fn train<F: Scalar>(
    model: &mut CaptionModel<F>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<Checkpoint<F>> {
    cfg.validate()?;
    if cfg.stage == Stage::Finetune && model.adapter_count() == 0 {
        return Err(Error::contract(
            "train",
            "the fine-tuning stage requires injected adapters",
        ));
    }
    let train_records = manifest.split_records(Split::Train);
    if train_records.is_empty() {
        return Err(Error::contract("train", "the train split is empty"));
    }
    let vocab = model.vocab().clone();
    let train_set: Vec<Sample<F>> = load_samples(manifest, &train_records, cfg.stage, &vocab)?;
    let val_set: Vec<Sample<F>> =
        load_samples(manifest, &manifest.split_records(Split::Val), cfg.stage, &vocab)?;

    let trainable = model.trainable_params();
    if trainable.is_empty() {
        return Err(Error::contract("train", "no trainable parameters"));
    }
    let mut optimizer = AdamState::new(cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut dropout_rng = stream_rng(cfg.seed, &format!("train/{}/dropout", cfg.stage));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_state: Option<Vec<Vec<F>>> = None;

    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = stream_rng(cfg.seed, &format!("train/{}/shuffle/{epoch}", cfg.stage));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mean_loss = step_batch(model, &train_set, chunk, &mut dropout_rng)?;
            if !mean_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {epoch}, batch {batch}"
                )));
            }
            optimizer.step(&trainable, cfg.learning_rate)?;
            loss_sum += mean_loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        match validation_accuracy(model, &val_set, cfg.stage, &vocab)? {
            Some(accuracy) => {
                log::info!(
                    "{} epoch {epoch}/{}: train loss {train_loss:.6}, val accuracy {accuracy:.4}",
                    cfg.stage,
                    cfg.epochs
                );
                if accuracy > best_accuracy {
                    best_accuracy = accuracy;
                    best_state = Some(snapshot(&trainable));
                }
                if accuracy >= 1.0 {
                    log::info!("validation perfect at epoch {epoch}; stopping early");
                    break;
                }
            }
            None => {
                log::info!(
                    "{} epoch {epoch}/{}: train loss {train_loss:.6} (no validation split)",
                    cfg.stage,
                    cfg.epochs
                );
                best_state = Some(snapshot(&trainable));
            }
        }
    }
    if let Some(state) = &best_state {
        restore(&trainable, state)?;
    }
    Ok(Checkpoint::from_model(model, cfg))
}
