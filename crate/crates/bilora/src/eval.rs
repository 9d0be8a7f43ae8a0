//! Evaluation harness: confusion counts with the fake class as positive,
//! accuracy and F1, per-subset evaluation under an optional degradation,
//! and the train-family x test-family cross matrix with CSV and Markdown
//! emission.
//!
//! A caption that is neither "real" nor "fake" is an abstention and counts
//! as a wrong prediction on whichever class the truth is, so accuracy
//! stays comparable across models that answer off-protocol.

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ImageBuf, Record, Split};
use crate::degrade::DegradeSpec;
use crate::model::caption_to_label;
use crate::scalar::Scalar;
use crate::train::Checkpoint;
use crate::{Error, Result};

// ── Confusion counts and metrics ────────────────────────────────────────

/// Binary confusion counts; "fake" (label 1) is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.false_negative + self.true_negative
    }

    /// Record one prediction. An abstention (`None`) is wrong by
    /// definition: a missed fake or a flagged real, depending on truth.
    pub fn record(&mut self, truth: u8, predicted: Option<u8>) {
        let correct = predicted == Some(truth);
        match (truth, correct) {
            (1, true) => self.true_positive += 1,
            (1, false) => self.false_negative += 1,
            (0, true) => self.true_negative += 1,
            (0, false) => self.false_positive += 1,
            _ => {}
        }
    }
}

/// Build counts from (truth, prediction) pairs.
pub fn confusion_from_predictions(pairs: &[(u8, Option<u8>)]) -> ConfusionCounts {
    let mut counts = ConfusionCounts::default();
    for &(truth, predicted) in pairs {
        counts.record(truth, predicted);
    }
    counts
}

/// Fraction of correct predictions.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok((c.true_positive + c.true_negative) as f64 / c.total() as f64)
}

/// F1 value plus a flag for the fully degenerate case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Outcome {
    pub value: f64,
    /// True when tp, fp and fn are all zero: the subset held no positives
    /// and the model flagged nothing, so the score carries no signal.
    pub degenerate: bool,
}

/// Harmonic mean of precision and recall for the positive (fake) class.
/// Zero recall or zero precision gives 0; the no-positives-anywhere case
/// gives 0 with the degenerate flag set.
pub fn f1(c: &ConfusionCounts) -> Result<F1Outcome> {
    if c.total() == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let (tp, fp, fal_n) = (c.true_positive, c.false_positive, c.false_negative);
    if tp == 0 && fp == 0 && fal_n == 0 {
        return Ok(F1Outcome {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fal_n as f64);
    Ok(F1Outcome {
        value,
        degenerate: false,
    })
}

// ── Subset evaluation ───────────────────────────────────────────────────

/// Per-image predictions for one family's test subset (that family's
/// fakes plus the shared real pool), in manifest order. Each image is
/// degraded, captioned greedily, and mapped to a label or an abstention.
pub fn predict_subset<F: Scalar>(
    ckpt: &Checkpoint<F>,
    manifest: &DatasetManifest,
    test_family: &str,
    degrade: &DegradeSpec,
) -> Result<Vec<(Record, Option<u8>)>> {
    use rayon::prelude::*;
    // One serial build validates the checkpoint before workers clone it.
    let model = ckpt.build_model()?;
    let max_len = model.config().max_caption_len;
    if !manifest.records.iter().any(|r| r.family == test_family) {
        return Err(Error::Config(format!(
            "test family {test_family:?} does not appear in the manifest"
        )));
    }
    let records = manifest.family_subset(Split::Test, test_family);
    let predictions: Vec<(Record, Option<u8>)> = crate::thread_pool().install(|| {
        records
            .par_iter()
            .map_init(
                || ckpt.build_model().expect("checkpoint validated above"),
                |model, record| {
                    let img = ImageBuf::<F>::load_png(&manifest.image_path(record))?;
                    let degraded = degrade.apply(&img)?;
                    let caption = model.generate_caption(&degraded, max_len)?;
                    Ok(((*record).clone(), caption_to_label(model.vocab(), &caption)))
                },
            )
            .collect::<Result<_>>()
    })?;
    Ok(predictions)
}

/// Metrics for one family's test subset under one degradation.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetEval {
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub f1: f64,
    pub f1_degenerate: bool,
    pub n: usize,
}

pub fn eval_subset<F: Scalar>(
    ckpt: &Checkpoint<F>,
    manifest: &DatasetManifest,
    test_family: &str,
    degrade: &DegradeSpec,
) -> Result<SubsetEval> {
    let predictions = predict_subset(ckpt, manifest, test_family, degrade)?;
    let pairs: Vec<(u8, Option<u8>)> = predictions
        .iter()
        .map(|(record, predicted)| (record.label, *predicted))
        .collect();
    let confusion = confusion_from_predictions(&pairs);
    let f1_outcome = f1(&confusion)?;
    Ok(SubsetEval {
        confusion,
        accuracy: accuracy(&confusion)?,
        f1: f1_outcome.value,
        f1_degenerate: f1_outcome.degenerate,
        n: confusion.total(),
    })
}

// ── The cross matrix ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub train_family: String,
    pub test_family: String,
    pub degrade: String,
    pub n: usize,
    pub acc: f64,
    pub f1: f64,
    pub f1_degenerate: bool,
}

/// Mean metrics of one adapter under one degradation, across its row of
/// test families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub train_family: String,
    pub degrade: String,
    pub mean_acc: f64,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Train family to checkpoint description (a path when the run came
    /// from the command line).
    pub checkpoints: BTreeMap<String, String>,
    /// Train family to that run's training seed.
    pub seeds: BTreeMap<String, u64>,
    pub generated_unix_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub averages: Vec<AverageRow>,
    pub metadata: ReportMeta,
}

impl EvalReport {
    /// Assemble a report, deriving the per-(train, degrade) averages.
    pub fn new(rows: Vec<EvalRow>, metadata: ReportMeta) -> Self {
        let mut groups: BTreeMap<(String, String), Vec<&EvalRow>> = BTreeMap::new();
        let mut order: Vec<(String, String)> = Vec::new();
        for row in &rows {
            let key = (row.train_family.clone(), row.degrade.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(row);
        }
        let averages = order
            .into_iter()
            .map(|key| {
                let members = &groups[&key];
                let n = members.len() as f64;
                AverageRow {
                    train_family: key.0,
                    degrade: key.1,
                    mean_acc: members.iter().map(|r| r.acc).sum::<f64>() / n,
                    mean_f1: members.iter().map(|r| r.f1).sum::<f64>() / n,
                }
            })
            .collect();
        EvalReport {
            rows,
            averages,
            metadata,
        }
    }

    /// One row's metrics, when present.
    pub fn cell(&self, train_family: &str, test_family: &str, degrade: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| {
            r.train_family == train_family && r.test_family == test_family && r.degrade == degrade
        })
    }

    /// CSV with accuracy and F1 as percentages to two decimals. Emission
    /// is byte-deterministic for a given report.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_family,test_family,degrade,n,acc,f1\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.2},{:.2}\n",
                row.train_family,
                row.test_family,
                row.degrade,
                row.n,
                row.acc * 100.0,
                row.f1 * 100.0
            ));
        }
        out
    }

    /// Markdown: one accuracy/F1 grid per degradation, train families as
    /// rows, test families as columns, plus the row average.
    pub fn to_markdown(&self) -> String {
        let mut degrades: Vec<&str> = Vec::new();
        for row in &self.rows {
            if !degrades.contains(&row.degrade.as_str()) {
                degrades.push(&row.degrade);
            }
        }
        let mut tests: Vec<&str> = Vec::new();
        for row in &self.rows {
            if !tests.contains(&row.test_family.as_str()) {
                tests.push(&row.test_family);
            }
        }
        let mut trains: Vec<&str> = Vec::new();
        for row in &self.rows {
            if !trains.contains(&row.train_family.as_str()) {
                trains.push(&row.train_family);
            }
        }
        let mut out = String::new();
        for degrade in &degrades {
            out.push_str(&format!("## Degradation: {degrade}\n\n"));
            out.push_str("| train \\ test |");
            for t in &tests {
                out.push_str(&format!(" {t} |"));
            }
            out.push_str(" average |\n|---|");
            out.push_str(&"---|".repeat(tests.len() + 1));
            out.push('\n');
            for train in &trains {
                out.push_str(&format!("| {train} |"));
                for t in &tests {
                    match self.cell(train, t, degrade) {
                        Some(row) => out.push_str(&format!(
                            " {:.2} / {:.2} |",
                            row.acc * 100.0,
                            row.f1 * 100.0
                        )),
                        None => out.push_str(" - |"),
                    }
                }
                let avg = self
                    .averages
                    .iter()
                    .find(|a| a.train_family == *train && a.degrade == *degrade);
                match avg {
                    Some(a) => out.push_str(&format!(
                        " {:.2} / {:.2} |\n",
                        a.mean_acc * 100.0,
                        a.mean_f1 * 100.0
                    )),
                    None => out.push_str(" - |\n"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluate every checkpoint against every test family under every listed
/// degradation. Row order: degradations in the given order, then train
/// families in map order, then test families sorted.
pub fn cross_matrix<F: Scalar>(
    ckpts: &BTreeMap<String, Checkpoint<F>>,
    manifest: &DatasetManifest,
    degrades: &[DegradeSpec],
) -> Result<EvalReport> {
    if ckpts.is_empty() {
        return Err(Error::Config("the cross matrix needs at least one checkpoint".into()));
    }
    if degrades.is_empty() {
        return Err(Error::Config("the cross matrix needs at least one degradation".into()));
    }
    let tests = manifest.families();
    if tests.is_empty() {
        return Err(Error::Config("the manifest holds no fake families to test on".into()));
    }
    let mut rows = Vec::with_capacity(degrades.len() * ckpts.len() * tests.len());
    for degrade in degrades {
        for (train_family, ckpt) in ckpts {
            for test_family in &tests {
                let result =
                    eval_subset(ckpt, manifest, test_family, degrade).map_err(|e| {
                        Error::Config(format!(
                            "evaluation failed at cell (train={train_family}, \
                             test={test_family}, degrade={}): {e}",
                            degrade.label()
                        ))
                    })?;
                rows.push(EvalRow {
                    train_family: train_family.clone(),
                    test_family: test_family.clone(),
                    degrade: degrade.label(),
                    n: result.n,
                    acc: result.accuracy,
                    f1: result.f1,
                    f1_degenerate: result.f1_degenerate,
                });
            }
        }
    }
    let mut metadata = ReportMeta {
        generated_unix_secs: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        ..ReportMeta::default()
    };
    for (family, ckpt) in ckpts {
        metadata
            .checkpoints
            .insert(family.clone(), "(in-memory)".to_string());
        metadata.seeds.insert(family.clone(), ckpt.meta.train.seed);
    }
    Ok(EvalReport::new(rows, metadata))
}
