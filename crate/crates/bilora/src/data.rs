//! The data side of the pipeline: image buffers, the deterministic
//! synthetic corpus and the JSONL dataset manifest.

pub mod image;
pub mod manifest;
pub mod synth;

pub use image::ImageBuf;
pub use manifest::{load_manifest, DatasetManifest, Record, Split};
pub use synth::{gen_dataset, ArtifactKind, FamilySpec, GenConfig, SplitCounts};

/// Family name reserved for the authentic-texture pool.
pub const REAL_FAMILY: &str = "real";
