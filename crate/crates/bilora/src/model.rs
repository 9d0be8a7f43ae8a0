//! Small vision-language captioner: patch encoder, learned-query bridge,
//! and an autoregressive text decoder that reads the bridge output as a
//! visual prefix.
//!
//! The decoder's attention projections carry optional low-rank adapters,
//! looked up per layer and projection kind, so a frozen base model can be
//! fine-tuned through the adapters alone. Everything runs on the recording
//! graph; inference simply never calls backward.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::synth::stream_rng;
use crate::data::ImageBuf;
use crate::lora::{dropout_mask, LoraAdapter, LoraConfig, ProjKind};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

/// Additive pre-softmax penalty for masked attention positions.
const MASKED_SCORE: f64 = -1e9;

// ── Vocabulary ──────────────────────────────────────────────────────────

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// The default 16-word vocabulary: control tokens, the two verdict words,
/// and attribute words used only by the base pretraining captions.
pub fn default_vocab_words() -> Vec<String> {
    [
        PAD, BOS, EOS, "real", "fake", "plain", "fam_a", "fam_b", "fam_c", "fam_d", "fam_e",
        "transfer_a", "transfer_b", "dark", "mid", "bright",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

/// Token list with fast word/index lookups. Must contain the three control
/// tokens plus "real" and "fake".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::Config(format!("vocabulary word {i} is empty")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        let vocab = Vocab { words, index };
        for required in [PAD, BOS, EOS, "real", "fake"] {
            if vocab.lookup(required).is_none() {
                return Err(Error::Config(format!(
                    "vocabulary must contain {required:?}"
                )));
            }
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> &str {
        &self.words[index]
    }

    pub fn pad(&self) -> usize {
        self.lookup(PAD).expect("validated at construction")
    }

    pub fn bos(&self) -> usize {
        self.lookup(BOS).expect("validated at construction")
    }

    pub fn eos(&self) -> usize {
        self.lookup(EOS).expect("validated at construction")
    }
}

// ── Configuration ───────────────────────────────────────────────────────

fn d_image_size() -> usize {
    32
}
fn d_channels() -> usize {
    3
}
fn d_patch() -> usize {
    8
}
fn d_model() -> usize {
    64
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_query_tokens() -> usize {
    4
}
fn d_max_caption_len() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_layers")]
    pub encoder_layers: usize,
    #[serde(default = "d_layers")]
    pub decoder_layers: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_query_tokens")]
    pub query_tokens: usize,
    #[serde(default = "default_vocab_words")]
    pub vocab: Vec<String>,
    #[serde(default = "d_max_caption_len")]
    pub max_caption_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults fill every field")
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("query_tokens", self.query_tokens),
            ("max_caption_len", self.max_caption_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Vocab::new(self.vocab.clone())?;
        Ok(())
    }

    /// Patch count along one edge squared: the encoder token count.
    pub fn image_tokens(&self) -> usize {
        let per_edge = self.image_size / self.patch;
        per_edge * per_edge
    }
}

// ── Captions and labels ─────────────────────────────────────────────────

/// Generated or target caption: vocabulary indices without BOS/EOS plus
/// the rendered text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub text: String,
}

impl Caption {
    pub fn from_tokens(vocab: &Vocab, tokens: Vec<usize>, max_len: usize) -> Result<Self> {
        if tokens.len() > max_len {
            return Err(Error::contract(
                "caption",
                format!("{} tokens exceed the limit {max_len}", tokens.len()),
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::contract(
                "caption",
                format!("token index {bad} outside vocabulary of {}", vocab.len()),
            ));
        }
        let text = tokens
            .iter()
            .map(|&t| vocab.word(t))
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Caption { tokens, text })
    }

    pub fn from_words(vocab: &Vocab, words: &[&str], max_len: usize) -> Result<Self> {
        let tokens = words
            .iter()
            .map(|w| {
                vocab
                    .lookup(w)
                    .ok_or_else(|| Error::Config(format!("word {w:?} not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(vocab, tokens, max_len)
    }
}

/// First caption word decides the verdict: "real" maps to label 0, "fake"
/// to 1, and anything else (including an empty caption) abstains, which
/// evaluation scores as incorrect.
pub fn caption_to_label(vocab: &Vocab, caption: &Caption) -> Option<u8> {
    let first = *caption.tokens.first()?;
    match vocab.word(first) {
        "real" => Some(0),
        "fake" => Some(1),
        _ => None,
    }
}

/// Whether the forward pass may draw adapter dropout masks.
pub enum Mode<'r> {
    Eval,
    Train { rng: &'r mut ChaCha8Rng },
}

// ── Parameter containers ────────────────────────────────────────────────

struct LnParams<F: Scalar> {
    gamma: Tensor<F>,
    beta: Tensor<F>,
}

struct AttnParams<F: Scalar> {
    wq: Tensor<F>,
    bq: Tensor<F>,
    wk: Tensor<F>,
    bk: Tensor<F>,
    wv: Tensor<F>,
    bv: Tensor<F>,
    wo: Tensor<F>,
    bo: Tensor<F>,
}

struct MlpParams<F: Scalar> {
    w1: Tensor<F>,
    b1: Tensor<F>,
    w2: Tensor<F>,
    b2: Tensor<F>,
}

/// Pre-norm transformer block: attention then MLP, each behind a residual.
struct Block<F: Scalar> {
    ln1: LnParams<F>,
    attn: AttnParams<F>,
    ln2: LnParams<F>,
    mlp: MlpParams<F>,
}

/// Learned queries that cross-attend to the image tokens.
struct BridgeParams<F: Scalar> {
    queries: Tensor<F>,
    ln_q: LnParams<F>,
    ln_kv: LnParams<F>,
    attn: AttnParams<F>,
    ln2: LnParams<F>,
    mlp: MlpParams<F>,
}

/// Fan-in-scaled Gaussian init, std `1/sqrt(last extent)`. Weight matrices
/// are stored `[out, in]` and applied as `x . w^T`, and embedding tables are
/// `[rows, width]`, so the last extent is the summed-over width in both
/// cases; unit-variance inputs stay unit-variance through every projection.
/// A fixed small std starves narrow models: each matmul would shrink the
/// visual signal several-fold and pretraining stalls at the unconditional
/// caption distribution.
fn gauss<F: Scalar>(seed: u64, name: &str, shape: &[usize]) -> Tensor<F> {
    let mut rng = stream_rng(seed, name);
    let fan_in = *shape.last().expect("gauss needs a non-empty shape") as f64;
    let normal = Normal::new(0.0, fan_in.sqrt().recip()).expect("finite std");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| F::c(normal.sample(&mut rng))).collect();
    Tensor::param(shape, data).expect("shape matches data by construction")
}

fn zeros_param<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::param(shape, vec![F::zero(); shape.iter().product()]).expect("consistent shape")
}

fn ones_param<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::param(shape, vec![F::one(); shape.iter().product()]).expect("consistent shape")
}

impl<F: Scalar> LnParams<F> {
    fn init(d: usize) -> Self {
        LnParams {
            gamma: ones_param(&[d]),
            beta: zeros_param(&[d]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
}

impl<F: Scalar> AttnParams<F> {
    fn init(seed: u64, prefix: &str, d: usize) -> Self {
        let w = |name: &str| gauss(seed, &format!("{prefix}.{name}"), &[d, d]);
        AttnParams {
            wq: w("wq"),
            bq: zeros_param(&[d]),
            wk: w("wk"),
            bk: zeros_param(&[d]),
            wv: w("wv"),
            bv: zeros_param(&[d]),
            wo: w("wo"),
            bo: zeros_param(&[d]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<F>)) {
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }
}

impl<F: Scalar> MlpParams<F> {
    fn init(seed: u64, prefix: &str, d: usize, hidden: usize) -> Self {
        MlpParams {
            w1: gauss(seed, &format!("{prefix}.w1"), &[hidden, d]),
            b1: zeros_param(&[hidden]),
            w2: gauss(seed, &format!("{prefix}.w2"), &[d, hidden]),
            b2: zeros_param(&[d]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }
}

impl<F: Scalar> Block<F> {
    fn init(seed: u64, prefix: &str, d: usize, hidden: usize) -> Self {
        Block {
            ln1: LnParams::init(d),
            attn: AttnParams::init(seed, &format!("{prefix}.attn"), d),
            ln2: LnParams::init(d),
            mlp: MlpParams::init(seed, &format!("{prefix}.mlp"), d, hidden),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor<F>)) {
        self.ln1.visit(&format!("{prefix}.ln1"), &mut *f);
        self.attn.visit(&format!("{prefix}.attn"), &mut *f);
        self.ln2.visit(&format!("{prefix}.ln2"), &mut *f);
        self.mlp.visit(&format!("{prefix}.mlp"), &mut *f);
    }
}

impl<F: Scalar> BridgeParams<F> {
    fn init(seed: u64, d: usize, hidden: usize, queries: usize) -> Self {
        BridgeParams {
            queries: gauss(seed, "bridge.queries", &[queries, d]),
            ln_q: LnParams::init(d),
            ln_kv: LnParams::init(d),
            attn: AttnParams::init(seed, "bridge.attn", d),
            ln2: LnParams::init(d),
            mlp: MlpParams::init(seed, "bridge.mlp", d, hidden),
        }
    }

    fn visit(&self, f: &mut impl FnMut(String, &Tensor<F>)) {
        f("bridge.queries".into(), &self.queries);
        self.ln_q.visit("bridge.ln_q", &mut *f);
        self.ln_kv.visit("bridge.ln_kv", &mut *f);
        self.attn.visit("bridge.attn", &mut *f);
        self.ln2.visit("bridge.ln2", &mut *f);
        self.mlp.visit("bridge.mlp", &mut *f);
    }
}

// ── The model ───────────────────────────────────────────────────────────

pub struct CaptionModel<F: Scalar> {
    cfg: ModelConfig,
    vocab: Vocab,
    patch_w: Tensor<F>,
    patch_b: Tensor<F>,
    patch_pos: Tensor<F>,
    encoder: Vec<Block<F>>,
    bridge: BridgeParams<F>,
    tok_embed: Tensor<F>,
    text_pos: Tensor<F>,
    decoder: Vec<Block<F>>,
    ln_f: LnParams<F>,
    vocab_w: Tensor<F>,
    vocab_b: Tensor<F>,
    /// Constant per-head column selectors, `[head_dim x d_model]` each.
    head_sel: Vec<Tensor<F>>,
    adapters: BTreeMap<(usize, ProjKind), LoraAdapter<F>>,
}

fn head_selectors<F: Scalar>(heads: usize, d: usize) -> Vec<Tensor<F>> {
    let hd = d / heads;
    (0..heads)
        .map(|h| {
            let mut data = vec![F::zero(); hd * d];
            for i in 0..hd {
                data[i * d + h * hd + i] = F::one();
            }
            Tensor::from_vec(&[hd, d], data).expect("consistent shape")
        })
        .collect()
}

impl<F: Scalar> CaptionModel<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::new(cfg.vocab.clone())?;
        let d = cfg.d_model;
        let hidden = 2 * d;
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        let seed = cfg.seed;
        let encoder = (0..cfg.encoder_layers)
            .map(|i| Block::init(seed, &format!("encoder.{i}"), d, hidden))
            .collect();
        let decoder = (0..cfg.decoder_layers)
            .map(|i| Block::init(seed, &format!("decoder.{i}"), d, hidden))
            .collect();
        Ok(CaptionModel {
            vocab,
            patch_w: gauss(seed, "patch.w", &[d, patch_dim]),
            patch_b: zeros_param(&[d]),
            patch_pos: gauss(seed, "patch.pos", &[cfg.image_tokens(), d]),
            encoder,
            bridge: BridgeParams::init(seed, d, hidden, cfg.query_tokens),
            tok_embed: gauss(seed, "text.embed", &[vocab_len(&cfg), d]),
            text_pos: gauss(seed, "text.pos", &[cfg.max_caption_len + 1, d]),
            decoder,
            ln_f: LnParams::init(d),
            vocab_w: gauss(seed, "vocab.w", &[vocab_len(&cfg), d]),
            vocab_b: zeros_param(&[vocab_len(&cfg)]),
            head_sel: head_selectors(cfg.heads, d),
            adapters: BTreeMap::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Every parameter, adapters included, keyed by a stable dotted name.
    pub fn named_params(&self) -> BTreeMap<String, Tensor<F>> {
        let mut map = BTreeMap::new();
        {
            let mut put = |name: String, t: &Tensor<F>| {
                map.insert(name, t.clone());
            };
            put("patch.w".into(), &self.patch_w);
            put("patch.b".into(), &self.patch_b);
            put("patch.pos".into(), &self.patch_pos);
            for (i, b) in self.encoder.iter().enumerate() {
                b.visit(&format!("encoder.{i}"), &mut put);
            }
            self.bridge.visit(&mut put);
            put("text.embed".into(), &self.tok_embed);
            put("text.pos".into(), &self.text_pos);
            for (i, b) in self.decoder.iter().enumerate() {
                b.visit(&format!("decoder.{i}"), &mut put);
            }
            self.ln_f.visit("final_ln", &mut put);
            put("vocab.w".into(), &self.vocab_w);
            put("vocab.b".into(), &self.vocab_b);
            for ((layer, kind), adapter) in &self.adapters {
                let [a, b] = adapter.params();
                put(format!("decoder.{layer}.attn.{}.lora_a", kind.name()), a);
                put(format!("decoder.{layer}.attn.{}.lora_b", kind.name()), b);
            }
        }
        map
    }

    /// Parameters the optimizer may update, in name order.
    pub fn trainable_params(&self) -> Vec<(String, Tensor<F>)> {
        self.named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    /// Freeze the base and attach one fresh adapter per decoder layer per
    /// targeted projection. Afterwards exactly the adapter matrices require
    /// gradients, and (B being zero) the model's behavior is unchanged.
    pub fn inject(&mut self, lora: &LoraConfig) -> Result<()> {
        lora.validate()?;
        for t in self.named_params().values() {
            t.set_requires_grad(false);
        }
        self.adapters.clear();
        let mut kinds: Vec<ProjKind> = lora.targets.clone();
        kinds.sort_unstable();
        kinds.dedup();
        let d = self.cfg.d_model;
        for layer in 0..self.cfg.decoder_layers {
            for &kind in &kinds {
                let name = format!("decoder.{layer}.attn.{}.lora", kind.name());
                let mut seed_rng = stream_rng(self.cfg.seed, &name);
                let adapter = LoraAdapter::init(
                    d,
                    d,
                    lora.r,
                    lora.alpha,
                    lora.dropout,
                    rand::Rng::gen(&mut seed_rng),
                )?;
                self.adapters.insert((layer, kind), adapter);
            }
        }
        Ok(())
    }

    /// Adapter for one decoder layer and projection, when injected.
    pub fn adapter(&self, layer: usize, kind: ProjKind) -> Option<&LoraAdapter<F>> {
        self.adapters.get(&(layer, kind))
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.len()
    }

    /// Fresh storage clone, safe to move to another worker.
    pub fn deep_copy(&self) -> Self {
        let copy_block = |b: &Block<F>| Block {
            ln1: LnParams {
                gamma: b.ln1.gamma.deep_copy(),
                beta: b.ln1.beta.deep_copy(),
            },
            attn: AttnParams {
                wq: b.attn.wq.deep_copy(),
                bq: b.attn.bq.deep_copy(),
                wk: b.attn.wk.deep_copy(),
                bk: b.attn.bk.deep_copy(),
                wv: b.attn.wv.deep_copy(),
                bv: b.attn.bv.deep_copy(),
                wo: b.attn.wo.deep_copy(),
                bo: b.attn.bo.deep_copy(),
            },
            ln2: LnParams {
                gamma: b.ln2.gamma.deep_copy(),
                beta: b.ln2.beta.deep_copy(),
            },
            mlp: MlpParams {
                w1: b.mlp.w1.deep_copy(),
                b1: b.mlp.b1.deep_copy(),
                w2: b.mlp.w2.deep_copy(),
                b2: b.mlp.b2.deep_copy(),
            },
        };
        CaptionModel {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            patch_w: self.patch_w.deep_copy(),
            patch_b: self.patch_b.deep_copy(),
            patch_pos: self.patch_pos.deep_copy(),
            encoder: self.encoder.iter().map(copy_block).collect(),
            bridge: BridgeParams {
                queries: self.bridge.queries.deep_copy(),
                ln_q: LnParams {
                    gamma: self.bridge.ln_q.gamma.deep_copy(),
                    beta: self.bridge.ln_q.beta.deep_copy(),
                },
                ln_kv: LnParams {
                    gamma: self.bridge.ln_kv.gamma.deep_copy(),
                    beta: self.bridge.ln_kv.beta.deep_copy(),
                },
                attn: {
                    let a = &self.bridge.attn;
                    AttnParams {
                        wq: a.wq.deep_copy(),
                        bq: a.bq.deep_copy(),
                        wk: a.wk.deep_copy(),
                        bk: a.bk.deep_copy(),
                        wv: a.wv.deep_copy(),
                        bv: a.bv.deep_copy(),
                        wo: a.wo.deep_copy(),
                        bo: a.bo.deep_copy(),
                    }
                },
                ln2: LnParams {
                    gamma: self.bridge.ln2.gamma.deep_copy(),
                    beta: self.bridge.ln2.beta.deep_copy(),
                },
                mlp: MlpParams {
                    w1: self.bridge.mlp.w1.deep_copy(),
                    b1: self.bridge.mlp.b1.deep_copy(),
                    w2: self.bridge.mlp.w2.deep_copy(),
                    b2: self.bridge.mlp.b2.deep_copy(),
                },
            },
            tok_embed: self.tok_embed.deep_copy(),
            text_pos: self.text_pos.deep_copy(),
            decoder: self.decoder.iter().map(copy_block).collect(),
            ln_f: LnParams {
                gamma: self.ln_f.gamma.deep_copy(),
                beta: self.ln_f.beta.deep_copy(),
            },
            vocab_w: self.vocab_w.deep_copy(),
            vocab_b: self.vocab_b.deep_copy(),
            head_sel: head_selectors(self.cfg.heads, self.cfg.d_model),
            adapters: self
                .adapters
                .iter()
                .map(|(k, v)| (*k, v.deep_copy()))
                .collect(),
        }
    }

    // ── Forward passes ──────────────────────────────────────────────

    /// Linear patch embeddings before positional addition: `[image_tokens
    /// x d_model]`.
    pub fn patch_embeddings(&self, g: &mut Graph<F>, img: &ImageBuf<F>) -> Result<Tensor<F>> {
        let cfg = &self.cfg;
        if img.width() != cfg.image_size
            || img.height() != cfg.image_size
            || img.channels() != cfg.channels
        {
            return Err(Error::contract(
                "encode_image",
                format!(
                    "expected {0}x{0}x{1}, got {2}x{3}x{4}",
                    cfg.image_size,
                    cfg.channels,
                    img.width(),
                    img.height(),
                    img.channels()
                ),
            ));
        }
        let per_edge = cfg.image_size / cfg.patch;
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        let mut data = Vec::with_capacity(cfg.image_tokens() * patch_dim);
        for py in 0..per_edge {
            for px in 0..per_edge {
                for y in 0..cfg.patch {
                    for x in 0..cfg.patch {
                        for c in 0..cfg.channels {
                            data.push(img.get(px * cfg.patch + x, py * cfg.patch + y, c));
                        }
                    }
                }
            }
        }
        let patches = Tensor::from_vec(&[cfg.image_tokens(), patch_dim], data)?;
        let projected = g.matmul_nt(&patches, &self.patch_w)?;
        g.add(&projected, &self.patch_b)
    }

    /// Image to `[image_tokens x d_model]` through the patch embedding,
    /// positional table, and encoder blocks.
    pub fn encode_image(&self, g: &mut Graph<F>, img: &ImageBuf<F>) -> Result<Tensor<F>> {
        let embedded = self.patch_embeddings(g, img)?;
        let mut x = g.add(&embedded, &self.patch_pos)?;
        for block in &self.encoder {
            x = self.block_forward(g, block, &x, None, None, &mut Mode::Eval)?;
        }
        Ok(x)
    }

    /// Cross-attend the learned queries to the image tokens: always
    /// exactly `query_tokens` output vectors.
    pub fn bridge(&self, g: &mut Graph<F>, image_tokens: &Tensor<F>) -> Result<Tensor<F>> {
        let b = &self.bridge;
        let qn = g.layer_norm(&b.queries, &b.ln_q.gamma, &b.ln_q.beta)?;
        let kvn = g.layer_norm(image_tokens, &b.ln_kv.gamma, &b.ln_kv.beta)?;
        let attended = self.attn_forward(g, &b.attn, &qn, &kvn, None, None, &mut Mode::Eval)?;
        let x = g.add(&b.queries, &attended)?;
        let n2 = g.layer_norm(&x, &b.ln2.gamma, &b.ln2.beta)?;
        let m = self.mlp_forward(g, &b.mlp, &n2)?;
        g.add(&x, &m)
    }

    /// Run the decoder over `[prefix rows ; embedded tokens]` and return
    /// logits for every position, `[prefix + len(tokens) x vocab]`.
    pub fn decode(
        &self,
        g: &mut Graph<F>,
        prefix: &Tensor<F>,
        tokens: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Tensor<F>> {
        if tokens.is_empty() {
            return Err(Error::contract("decode", "token context must be non-empty"));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        if tokens.len() > self.text_pos.shape()[0] {
            return Err(Error::contract(
                "decode",
                format!(
                    "context of {} exceeds the {}-position table",
                    tokens.len(),
                    self.text_pos.shape()[0]
                ),
            ));
        }
        let tok = g.embed(&self.tok_embed, tokens)?;
        let pos = g.embed(&self.text_pos, &positions)?;
        let text = g.add(&tok, &pos)?;
        let mut x = g.concat(&[prefix.clone(), text], 0)?;
        let span = x.shape()[0];
        let mask = self.causal_mask(span);
        for (layer, block) in self.decoder.iter().enumerate() {
            x = self.block_forward(g, block, &x, Some(&mask), Some(layer), mode)?;
        }
        let xf = g.layer_norm(&x, &self.ln_f.gamma, &self.ln_f.beta)?;
        let logits = g.matmul_nt(&xf, &self.vocab_w)?;
        g.add(&logits, &self.vocab_b)
    }

    /// Position `i` may attend to positions `0..=i`.
    fn causal_mask(&self, span: usize) -> Tensor<F> {
        let mut data = vec![F::zero(); span * span];
        for i in 0..span {
            for j in i + 1..span {
                data[i * span + j] = F::c(MASKED_SCORE);
            }
        }
        Tensor::from_vec(&[span, span], data).expect("consistent shape")
    }

    fn project(
        &self,
        g: &mut Graph<F>,
        x: &Tensor<F>,
        w: &Tensor<F>,
        b: &Tensor<F>,
        layer: Option<usize>,
        kind: ProjKind,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor<F>> {
        let adapter = layer.and_then(|l| self.adapters.get(&(l, kind)));
        let y = match adapter {
            None => g.matmul_nt(x, w)?,
            Some(a) => {
                let drop = match mode {
                    Mode::Train { rng } if a.dropout() > 0.0 => {
                        Some(dropout_mask(x.shape(), a.dropout(), &mut **rng)?)
                    }
                    _ => None,
                };
                a.forward_tokens(g, w, x, drop.as_ref())?
            }
        };
        g.add(&y, b)
    }

    fn attn_forward(
        &self,
        g: &mut Graph<F>,
        p: &AttnParams<F>,
        q_src: &Tensor<F>,
        kv_src: &Tensor<F>,
        mask: Option<&Tensor<F>>,
        layer: Option<usize>,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor<F>> {
        let q = self.project(g, q_src, &p.wq, &p.bq, layer, ProjKind::Query, mode)?;
        let k = self.project(g, kv_src, &p.wk, &p.bk, layer, ProjKind::Key, mode)?;
        let v = self.project(g, kv_src, &p.wv, &p.bv, layer, ProjKind::Value, mode)?;
        let hd = self.cfg.d_model / self.cfg.heads;
        let inv_sqrt = F::c(1.0 / (hd as f64).sqrt());
        let mut contexts = Vec::with_capacity(self.cfg.heads);
        for sel in &self.head_sel {
            let qh = g.matmul_nt(&q, sel)?;
            let kh = g.matmul_nt(&k, sel)?;
            let vh = g.matmul_nt(&v, sel)?;
            let mut scores = g.matmul_nt(&qh, &kh)?;
            scores = g.scale(&scores, inv_sqrt)?;
            if let Some(m) = mask {
                scores = g.add(&scores, m)?;
            }
            let attn = g.softmax(&scores, 1)?;
            contexts.push(g.matmul(&attn, &vh)?);
        }
        let ctx = g.concat(&contexts, 1)?;
        self.project(g, &ctx, &p.wo, &p.bo, layer, ProjKind::Output, mode)
    }

    fn mlp_forward(&self, g: &mut Graph<F>, p: &MlpParams<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let h = g.matmul_nt(x, &p.w1)?;
        let h = g.add(&h, &p.b1)?;
        let h = g.gelu(&h)?;
        let y = g.matmul_nt(&h, &p.w2)?;
        g.add(&y, &p.b2)
    }

    fn block_forward(
        &self,
        g: &mut Graph<F>,
        block: &Block<F>,
        x: &Tensor<F>,
        mask: Option<&Tensor<F>>,
        layer: Option<usize>,
        mode: &mut Mode<'_>,
    ) -> Result<Tensor<F>> {
        let n1 = g.layer_norm(x, &block.ln1.gamma, &block.ln1.beta)?;
        let a = self.attn_forward(g, &block.attn, &n1, &n1, mask, layer, mode)?;
        let x1 = g.add(x, &a)?;
        let n2 = g.layer_norm(&x1, &block.ln2.gamma, &block.ln2.beta)?;
        let m = self.mlp_forward(g, &block.mlp, &n2)?;
        g.add(&x1, &m)
    }

    /// Token cross-entropy for one image/caption pair. `targets_with_eos`
    /// is the caption's tokens followed by EOS; prefix rows are excluded
    /// from the mean via the loss mask.
    pub fn caption_loss(
        &self,
        g: &mut Graph<F>,
        img: &ImageBuf<F>,
        targets_with_eos: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Tensor<F>> {
        if targets_with_eos.is_empty() {
            return Err(Error::contract("caption_loss", "target sequence is empty"));
        }
        if targets_with_eos.len() > self.cfg.max_caption_len + 1 {
            return Err(Error::contract(
                "caption_loss",
                format!(
                    "{} targets exceed max caption length {} plus EOS",
                    targets_with_eos.len(),
                    self.cfg.max_caption_len
                ),
            ));
        }
        let image_tokens = self.encode_image(g, img)?;
        let prefix = self.bridge(g, &image_tokens)?;
        // Input = BOS plus the caption body; row t predicts target t.
        let mut input = Vec::with_capacity(targets_with_eos.len());
        input.push(self.vocab.bos());
        input.extend_from_slice(&targets_with_eos[..targets_with_eos.len() - 1]);
        let logits = self.decode(g, &prefix, &input, mode)?;
        let p = self.cfg.query_tokens;
        let pad = self.vocab.pad();
        let mut targets = vec![pad; p];
        targets.extend_from_slice(targets_with_eos);
        let mut mask = vec![false; p];
        mask.extend(std::iter::repeat(true).take(targets_with_eos.len()));
        g.cross_entropy(&logits, &targets, &mask)
    }

    /// Greedy caption for one image, at most `max_len` words.
    pub fn generate_caption(&self, img: &ImageBuf<F>, max_len: usize) -> Result<Caption> {
        if max_len < 1 {
            return Err(Error::contract("generate_caption", "max_len must be at least 1"));
        }
        if max_len > self.cfg.max_caption_len {
            return Err(Error::contract(
                "generate_caption",
                format!(
                    "max_len {max_len} exceeds configured cap {}",
                    self.cfg.max_caption_len
                ),
            ));
        }
        // The visual prefix does not depend on the token context: compute
        // it once and reuse it as a constant across decode steps.
        let prefix = {
            let mut g = Graph::new();
            let image_tokens = self.encode_image(&mut g, img)?;
            let p = self.bridge(&mut g, &image_tokens)?;
            Tensor::from_vec(p.shape(), p.to_vec())?
        };
        let rows = self.cfg.query_tokens;
        let vocab_n = self.vocab.len();
        let tokens = greedy_decode(
            |context| {
                let mut g = Graph::new();
                let logits = self.decode(&mut g, &prefix, context, &mut Mode::Eval)?;
                let data = logits.data();
                let last = rows + context.len() - 1;
                Ok(data[last * vocab_n..(last + 1) * vocab_n].to_vec())
            },
            self.vocab.bos(),
            self.vocab.eos(),
            max_len,
        )?;
        Caption::from_tokens(&self.vocab, tokens, self.cfg.max_caption_len)
    }
}

fn vocab_len(cfg: &ModelConfig) -> usize {
    cfg.vocab.len()
}

// ── Decoding and losses ─────────────────────────────────────────────────

/// Greedy decoding loop over a step function that maps the token context
/// (starting with BOS) to next-token logits. Ties break toward the lowest
/// token index; generation stops at EOS or after `max_len` tokens.
pub fn greedy_decode<F: Scalar>(
    mut step_logits: impl FnMut(&[usize]) -> Result<Vec<F>>,
    bos: usize,
    eos: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len < 1 {
        return Err(Error::contract("greedy_decode", "max_len must be at least 1"));
    }
    let mut context = vec![bos];
    let mut caption = Vec::new();
    loop {
        let logits = step_logits(&context)?;
        let mut best = 0usize;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        if best == eos {
            break;
        }
        caption.push(best);
        context.push(best);
        if caption.len() == max_len {
            break;
        }
    }
    Ok(caption)
}

/// Mean token-level cross-entropy of `logits [steps x vocab]` against
/// `targets`; positions holding `pad` are excluded from the mean.
pub fn seq_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: &Tensor<F>,
    targets: &[usize],
    pad: usize,
) -> Result<Tensor<F>> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::contract(
            "seq_loss",
            format!(
                "logits {:?} do not match {} target steps",
                logits.shape(),
                targets.len()
            ),
        ));
    }
    let mask: Vec<bool> = targets.iter().map(|&t| t != pad).collect();
    g.cross_entropy(logits, targets, &mask)
}
