//! Deterministic synthetic corpus.
//!
//! Real images are smooth procedural textures: a few low-frequency
//! sinusoids on luminance, a per-channel tint and a dash of box-filtered
//! noise. Each fake family starts from the *same* texture process (its own
//! seed stream) and adds one low-amplitude artifact on top: an oriented
//! sinusoid ("periodic") or a checkerboard. The artifact is the family
//! fingerprint; it is zero-mean by construction, so trivial statistics like
//! the pixel mean carry almost no label signal, and generation verifies
//! that before writing a manifest.
//!
//! Every image is a pure function of `(seed, family, split, index)`, so the
//! same configuration always reproduces the same PNG bytes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetManifest, ImageBuf, Record, Split, REAL_FAMILY};
use crate::{Error, Result};

/// An independent RNG stream named by `(seed, tag)`. Streams with different
/// tags are unrelated, so adding images or families never shifts another
/// stream's draws.
pub fn stream_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

// ── Family specs ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ArtifactKind {
    /// Oriented sinusoid: `sin(2 pi f (x cos t + y sin t) / size + phase)`,
    /// phase drawn per image.
    Periodic { frequency: f64, orientation: f64 },
    /// `cell`-pixel checkerboard of +-1, offset drawn per image.
    Checkerboard { cell: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    pub kind: ArtifactKind,
    /// Peak artifact strength in pixel units (images live in `[0, 1]`).
    pub amplitude: f64,
}

/// The default amplitude: strong enough to learn from 8-bit files, weak
/// enough that blur and JPEG measurably hurt it.
pub const DEFAULT_AMPLITUDE: f64 = 0.06;

/// Five periodic training families with distinct frequency/orientation
/// pairs, plus two checkerboard families reserved for transfer testing
/// (generated like the rest, but never fine-tuned on).
pub fn default_families() -> Vec<FamilySpec> {
    let periodic = [
        ("fam_a", 4.0, 0.0),
        ("fam_b", 5.0, 0.6283),
        ("fam_c", 6.0, 1.2566),
        ("fam_d", 7.0, 1.8850),
        ("fam_e", 8.0, 2.5133),
    ];
    let mut families: Vec<FamilySpec> = periodic
        .into_iter()
        .map(|(name, frequency, orientation)| FamilySpec {
            name: name.into(),
            kind: ArtifactKind::Periodic {
                frequency,
                orientation,
            },
            amplitude: DEFAULT_AMPLITUDE,
        })
        .collect();
    for (name, cell) in [("transfer_a", 3), ("transfer_b", 6)] {
        families.push(FamilySpec {
            name: name.into(),
            kind: ArtifactKind::Checkerboard { cell },
            amplitude: DEFAULT_AMPLITUDE,
        });
    }
    families
}

/// Family names in [`default_families`] that exist only for transfer
/// evaluation; the fine-tuning stage refuses them as targets by convention
/// of the shipped protocol, not by mechanism.
pub const TRANSFER_FAMILIES: [&str; 2] = ["transfer_a", "transfer_b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 400,
            val: 10,
            test: 100,
        }
    }
}

impl SplitCounts {
    pub fn of(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

fn default_image_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Images per split *per family*; the shared real pool gets the same
    /// counts, so each family's evaluation subset is balanced.
    #[serde(default)]
    pub counts: SplitCounts,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_families")]
    pub families: Vec<FamilySpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: default_image_size(),
            counts: SplitCounts::default(),
            seed: 0,
            families: default_families(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.image_size;
        if n < 8 || n % 2 != 0 {
            return Err(Error::Config(format!(
                "image size must be even and at least 8, got {n}"
            )));
        }
        if self.counts.train == 0 || self.counts.test == 0 {
            return Err(Error::Config("train and test counts must be positive".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Config("at least one fake family is required".into()));
        }
        let mut names: Vec<&str> = self.families.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.families.len() {
            return Err(Error::Config("duplicate family name".into()));
        }
        for f in &self.families {
            if f.name == REAL_FAMILY {
                return Err(Error::Config(format!(
                    "family name {REAL_FAMILY:?} is reserved for the authentic pool"
                )));
            }
            if f.name.is_empty() || !f.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::Config(format!(
                    "family name {:?} must be non-empty [A-Za-z0-9_]",
                    f.name
                )));
            }
            if !(f.amplitude > 0.0) || f.amplitude > 0.5 {
                return Err(Error::Config(format!(
                    "family {:?}: amplitude must lie in (0, 0.5], got {}",
                    f.name, f.amplitude
                )));
            }
            match f.kind {
                ArtifactKind::Periodic { frequency, .. } => {
                    if !(frequency > 0.0) || frequency > n as f64 / 2.0 {
                        return Err(Error::Config(format!(
                            "family {:?}: frequency must lie in (0, {}], got {frequency}",
                            f.name,
                            n / 2
                        )));
                    }
                }
                ArtifactKind::Checkerboard { cell } => {
                    if cell == 0 || cell > n / 2 {
                        return Err(Error::Config(format!(
                            "family {:?}: cell must lie in 1..={}, got {cell}",
                            f.name,
                            n / 2
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

// ── Texture synthesis ───────────────────────────────────────────────────

/// Smooth authentic-style texture: the shared base both classes build on.
fn real_texture(rng: &mut ChaCha8Rng, size: usize) -> ImageBuf<f64> {
    // Low-frequency luminance field.
    let mut waves = [(0.0f64, 0.0f64, 0.0f64, 0.0f64); 3];
    for w in &mut waves {
        *w = (
            rng.gen_range(0.5..2.5),                    // cycles per image
            rng.gen_range(0.0..std::f64::consts::PI),   // orientation
            rng.gen_range(0.0..std::f64::consts::TAU),  // phase
            rng.gen_range(0.05..0.15),                  // amplitude
        );
    }
    let tints: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
    let noise_amp = rng.gen_range(0.0..0.03);
    let mut noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
    noise = box_filter(&noise, size);
    noise = box_filter(&noise, size);

    let mut img = ImageBuf::new(size, size, 3);
    let inv = std::f64::consts::TAU / size as f64;
    for y in 0..size {
        for x in 0..size {
            let mut lum = 0.5;
            for &(f, theta, phase, amp) in &waves {
                let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                lum += amp * (f * u * inv + phase).sin();
            }
            lum += noise_amp * noise[y * size + x];
            for (c, &tint) in tints.iter().enumerate() {
                img.set(x, y, c, lum + tint);
            }
        }
    }
    img.clamp_unit();
    img
}

/// One 3x3 box-mean pass with clamped edges; two passes approximate a
/// small Gaussian well enough for texture noise.
fn box_filter(src: &[f64], size: usize) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, size as isize - 1) as usize;
        let yc = y.clamp(0, size as isize - 1) as usize;
        src[yc * size + xc]
    };
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    acc += at(x + dx, y + dy);
                }
            }
            dst[y as usize * size + x as usize] = acc / 9.0;
        }
    }
    dst
}

/// Frequency (cycles per image) of the grid component shared by every
/// family's pattern; chosen above the default periodic band (4..8) so it
/// collides with no family's distinctive component.
const COMMON_GRID_FREQ: f64 = 10.0;

/// Weight of the shared grid relative to the distinctive component. Kept
/// well below 1: a dominant shared cue lets base pretraining explain every
/// fake without telling families apart, and attribute learning stalls in
/// that shortcut valley.
const COMMON_GRID_WEIGHT: f64 = 1.0 / 3.0;

/// The family fingerprint before amplitude scaling: the distinctive
/// component (by `kind`, in `[-1, 1]`) plus a weak axis-aligned grid
/// common to every family. The pattern is a pure function of the family
/// parameters, fixed across every image of the family: fingerprints in
/// the wild (deconvolution checkerboards, upsampling grids) are locked to
/// the pixel grid, and the grid they share across generator families is
/// what makes cross-family transfer detection possible at all.
pub fn artifact_pattern(kind: &ArtifactKind, size: usize) -> Vec<f64> {
    let mut p = vec![0.0; size * size];
    match *kind {
        ArtifactKind::Periodic {
            frequency,
            orientation,
        } => {
            let inv = std::f64::consts::TAU / size as f64;
            let (ct, st) = (orientation.cos(), orientation.sin());
            for y in 0..size {
                for x in 0..size {
                    let u = x as f64 * ct + y as f64 * st;
                    p[y * size + x] = (frequency * u * inv).sin();
                }
            }
        }
        ArtifactKind::Checkerboard { cell } => {
            for y in 0..size {
                for x in 0..size {
                    let parity = (x / cell + y / cell) % 2;
                    p[y * size + x] = if parity == 0 { 1.0 } else { -1.0 };
                }
            }
        }
    }
    let inv = std::f64::consts::TAU / size as f64;
    for y in 0..size {
        for x in 0..size {
            let grid =
                ((COMMON_GRID_FREQ * x as f64 * inv).sin() + (COMMON_GRID_FREQ * y as f64 * inv).sin()) / 2.0;
            p[y * size + x] += COMMON_GRID_WEIGHT * grid;
        }
    }
    p
}

/// Render one image of `family` (None = the real pool).
fn render(seed: u64, family: Option<&FamilySpec>, f_name: &str, split: Split, index: usize, size: usize) -> ImageBuf<f64> {
    let mut rng = stream_rng(seed, &format!("{f_name}/{split}/{index}"));
    let mut img = real_texture(&mut rng, size);
    if let Some(spec) = family {
        let pattern = artifact_pattern(&spec.kind, size);
        for y in 0..size {
            for x in 0..size {
                let bump = spec.amplitude * pattern[y * size + x];
                for c in 0..3 {
                    let v = img.get(x, y, c);
                    img.set(x, y, c, v + bump);
                }
            }
        }
        img.clamp_unit();
    }
    img
}

// ── Dataset generation ──────────────────────────────────────────────────

/// Generate the corpus under `out_dir` and write `manifest.jsonl` there.
///
/// Two sanity checks gate success: family fingerprints must be mutually
/// distinct (mean absolute difference of scaled patterns above 0.01), and
/// the best single-threshold classifier over PNG pixel means must stay at
/// or below 60% balanced accuracy, so the label cannot be read off trivial
/// statistics. (Balanced, because the corpus has several fake families per
/// shared real pool; raw accuracy would reward the class prior, not
/// brightness separation.)
pub fn gen_dataset(out_dir: &Path, cfg: &GenConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    check_family_distinctness(cfg)?;

    // Real pool first, then families in config order: evaluation subsets
    // share the identical real records by construction.
    let mut jobs: Vec<(Option<usize>, String, Split, usize)> = Vec::new();
    for split in Split::ALL {
        for index in 0..cfg.counts.of(split) {
            jobs.push((None, REAL_FAMILY.into(), split, index));
        }
    }
    for (fi, spec) in cfg.families.iter().enumerate() {
        for split in Split::ALL {
            for index in 0..cfg.counts.of(split) {
                jobs.push((Some(fi), spec.name.clone(), split, index));
            }
        }
    }

    for (_, name, split, _) in &jobs {
        fs::create_dir_all(out_dir.join("images").join(name).join(split.to_string()))?;
    }

    let outcomes: Vec<(Record, f64)> = crate::thread_pool().install(|| {
        jobs.par_iter()
            .map(|(fi, name, split, index)| -> Result<(Record, f64)> {
                let spec = fi.map(|i| &cfg.families[i]);
                let img = render(cfg.seed, spec, name, *split, *index, cfg.image_size);
                let rel = format!("images/{name}/{split}/{index:04}.png");
                img.save_png(&out_dir.join(&rel))?;
                // The separability check must see what lands on disk, so
                // measure the mean after 8-bit quantization.
                let quantized: f64 = img
                    .to_rgb8()?
                    .iter()
                    .map(|&b| b as f64 / 255.0)
                    .sum::<f64>()
                    / (cfg.image_size * cfg.image_size * 3) as f64;
                let record = Record {
                    path: rel,
                    label: u8::from(spec.is_some()),
                    family: name.clone(),
                    split: *split,
                };
                Ok((record, quantized))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    // Enforced only with at least 100 images per class: the best-threshold
    // balanced accuracy equals 0.5 plus half the two-sample KS statistic,
    // whose sampling noise alone breaches 0.60 for smaller corpora.
    let fakes = outcomes.iter().filter(|(r, _)| r.label == 1).count();
    if fakes.min(outcomes.len() - fakes) >= 100 {
        let acc = best_threshold_accuracy(&outcomes);
        if acc > 0.60 {
            return Err(Error::Dataset(format!(
                "pixel-mean threshold classifier reaches {:.1}% balanced accuracy; \
                 artifacts are leaking into trivial statistics",
                acc * 100.0
            )));
        }
    }

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records: outcomes.into_iter().map(|(r, _)| r).collect(),
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn check_family_distinctness(cfg: &GenConfig) -> Result<()> {
    let canonical: Vec<Vec<f64>> = cfg
        .families
        .iter()
        .map(|f| {
            let p = artifact_pattern(&f.kind, cfg.image_size);
            p.into_iter().map(|v| v * f.amplitude).collect()
        })
        .collect();
    for i in 0..canonical.len() {
        for j in i + 1..canonical.len() {
            let mad: f64 = canonical[i]
                .iter()
                .zip(&canonical[j])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / canonical[i].len() as f64;
            if mad <= 0.01 {
                return Err(Error::Dataset(format!(
                    "families {:?} and {:?} have nearly identical fingerprints \
                     (mean abs difference {mad:.4})",
                    cfg.families[i].name, cfg.families[j].name
                )));
            }
        }
    }
    Ok(())
}

/// Balanced accuracy (mean of per-class rates) of the best single threshold
/// over per-image means, trying both polarities. Brute force over all cut
/// points; a degenerate cut scores exactly 0.5.
fn best_threshold_accuracy(outcomes: &[(Record, f64)]) -> f64 {
    let mut pairs: Vec<(f64, bool)> = outcomes
        .iter()
        .map(|(r, mean)| (*mean, r.label == 1))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = pairs.len();
    let fakes: usize = pairs.iter().filter(|(_, fake)| *fake).count();
    let reals = total - fakes;
    if fakes == 0 || reals == 0 {
        return 0.5;
    }
    // Sweep the cut left to right; `fakes_below` tracks label counts under it.
    let mut best = 0.5f64;
    let mut fakes_below = 0usize;
    for cut in 0..=total {
        let reals_below = cut - fakes_below;
        // Polarity A: below => real. Polarity B: below => fake.
        let a = reals_below as f64 / reals as f64 + (fakes - fakes_below) as f64 / fakes as f64;
        let b = fakes_below as f64 / fakes as f64 + (reals - reals_below) as f64 / reals as f64;
        best = best.max(a / 2.0).max(b / 2.0);
        if cut < total {
            fakes_below += usize::from(pairs[cut].1);
        }
    }
    best
}
