//! JSONL dataset manifest: one record per image, paths relative to the
//! manifest file.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::REAL_FAMILY;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    /// Image path relative to the manifest file.
    pub path: String,
    /// 0 = real, 1 = fake. Redundant with `family` and checked against it.
    pub label: u8,
    pub family: String,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    /// Write as JSONL next to the images; `path` names the manifest file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    /// Absolute path of one record's image.
    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Fake family names present, sorted.
    pub fn families(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .records
            .iter()
            .filter(|r| r.family != REAL_FAMILY)
            .map(|r| r.family.as_str())
            .collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Records of one split, manifest order.
    pub fn split_records(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// The per-family evaluation subset: this family's fakes plus the
    /// shared real pool, both from the requested split, manifest order.
    /// Every family's subset sees the same real records.
    pub fn family_subset(&self, split: Split, family: &str) -> Vec<&Record> {
        self.records
            .iter()
            .filter(|r| r.split == split && (r.family == family || r.family == REAL_FAMILY))
            .collect()
    }

    /// A manifest restricted to one fake family plus the shared real pool
    /// across every split: the training view for a per-family adapter run.
    pub fn family_view(&self, family: &str) -> Result<DatasetManifest> {
        if family == REAL_FAMILY {
            return Err(Error::Config(
                "a family view needs a fake family, not the real pool".into(),
            ));
        }
        if !self.records.iter().any(|r| r.family == family) {
            return Err(Error::Config(format!(
                "family {family:?} does not appear in the manifest"
            )));
        }
        Ok(DatasetManifest {
            root: self.root.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.family == family || r.family == REAL_FAMILY)
                .cloned()
                .collect(),
        })
    }

    /// A manifest with the named fake families removed from every split:
    /// the pretraining view when some families are reserved for transfer
    /// evaluation and must never influence the base weights.
    pub fn exclude_families(&self, names: &[impl AsRef<str>]) -> Result<DatasetManifest> {
        let mut drop = BTreeSet::new();
        for name in names {
            let name = name.as_ref();
            if name == REAL_FAMILY {
                return Err(Error::Config(
                    "the shared real pool cannot be excluded".into(),
                ));
            }
            if !self.records.iter().any(|r| r.family == name) {
                return Err(Error::Config(format!(
                    "family {name:?} does not appear in the manifest"
                )));
            }
            drop.insert(name.to_string());
        }
        Ok(DatasetManifest {
            root: self.root.clone(),
            records: self
                .records
                .iter()
                .filter(|r| !drop.contains(&r.family))
                .cloned()
                .collect(),
        })
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (index, r) in self.records.iter().enumerate() {
            let fail = |reason: String| Error::Manifest { index, reason };
            if r.label > 1 {
                return Err(fail(format!("label must be 0 or 1, got {}", r.label)));
            }
            let is_real = r.family == REAL_FAMILY;
            if is_real != (r.label == 0) {
                return Err(fail(format!(
                    "label {} contradicts family {:?}",
                    r.label, r.family
                )));
            }
            if r.path.is_empty() {
                return Err(fail("empty image path".into()));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(fail(format!("duplicate image path {:?}", r.path)));
            }
            let img = self.root.join(&r.path);
            if !img.is_file() {
                return Err(fail(format!("image file {} is missing", img.display())));
            }
        }
        Ok(())
    }
}

/// Read and validate a JSONL manifest. An empty file is a valid empty
/// dataset; evaluation refuses it later, loading does not.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            index,
            reason: format!("bad JSON: {e}"),
        })?;
        records.push(record);
    }
    let manifest = DatasetManifest { root, records };
    manifest.validate()?;
    Ok(manifest)
}
