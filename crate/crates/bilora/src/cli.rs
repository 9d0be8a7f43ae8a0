//! The `bilora` command line: data generation, the two training stages,
//! single-subset evaluation, the cross-family matrix and report rendering.
//!
//! Options come from an optional JSON config file plus command-line flags;
//! flags win, and unknown config keys are rejected. The exit status encodes
//! the outcome class:
//!
//! * 0: success.
//! * 1: usage error. Malformed flags, unreadable or invalid config files,
//!   option values that fail validation (unknown degrade label, family not
//!   in the manifest, malformed `fam=path` pair).
//! * 2: runtime error. Broken input files (manifest, checkpoint, report),
//!   I/O failures, training aborts.
//!
//! Diagnostics go to standard error; machine output goes to files or
//! standard output. No subcommand rewrites its inputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::data::synth::{gen_dataset, GenConfig};
use crate::data::{load_manifest, DatasetManifest};
use crate::degrade::DegradeSpec;
use crate::eval::{cross_matrix, eval_subset, EvalReport};
use crate::lora::ProjKind;
use crate::model::{CaptionModel, ModelConfig};
use crate::train::{load_checkpoint, save_checkpoint, train, Checkpoint, Stage, TrainConfig};
use crate::Elem;

// ── Outcome classes ─────────────────────────────────────────────────────

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CliResult = Result<(), Failure>;

// ── Argument grammar ────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "bilora",
    version,
    about = "Synthetic-image detection by captioning: data, training, evaluation"
)]
struct Cli {
    /// Seed override; takes precedence over any config file value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and its manifest.
    GenData(GenDataArgs),
    /// Train the full base model on auxiliary attribute captions.
    Pretrain(PretrainArgs),
    /// Train low-rank adapters on one family, base frozen.
    Finetune(FinetuneArgs),
    /// Score one checkpoint on one family's test subset.
    Eval(EvalArgs),
    /// Evaluate every checkpoint against every family and emit CSV.
    Matrix(MatrixArgs),
    /// Render a stored JSON evaluation report as Markdown.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// JSON file deserializing into the generation config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square image side in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    /// Images per family in the train split.
    #[arg(long)]
    train: Option<usize>,
    /// Images per family in the validation split.
    #[arg(long)]
    val: Option<usize>,
    /// Images per family in the test split.
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Args)]
struct TrainOverrides {
    /// Number of passes over the train split.
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    /// Samples per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Path to manifest.jsonl.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// JSON file deserializing into the training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fake families to hold out of pretraining (comma separated), e.g.
    /// the transfer families that must never influence the base weights.
    #[arg(long = "exclude-family", value_delimiter = ',')]
    exclude_family: Vec<String>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Path to manifest.jsonl.
    #[arg(long)]
    manifest: PathBuf,
    /// Pretraining checkpoint to start from.
    #[arg(long)]
    base: PathBuf,
    /// Fake family to fine-tune on (its fakes plus the shared reals).
    #[arg(long)]
    family: String,
    /// Where to write the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// JSON file deserializing into the training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Comma-separated adapter targets (query,key,value,output).
    #[arg(long, value_delimiter = ',')]
    lora_targets: Option<Vec<String>>,
    /// Adapter rank.
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Adapter scale numerator (effective scale is alpha/rank).
    #[arg(long)]
    lora_alpha: Option<f64>,
    /// Dropout on adapter inputs during training.
    #[arg(long)]
    lora_dropout: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    ckpt: PathBuf,
    /// Path to manifest.jsonl.
    #[arg(long)]
    manifest: PathBuf,
    /// Test family (its fakes plus the shared reals).
    #[arg(long)]
    family: String,
    /// Degradation label: none, lr112, jpeg65 or blur3.
    #[arg(long, default_value = "none")]
    degrade: String,
    /// Override the degradation's numeric parameter.
    #[arg(long)]
    degrade_param: Option<f64>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Checkpoints as fam=path pairs, comma-separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    ckpts: Vec<String>,
    /// Path to manifest.jsonl.
    #[arg(long)]
    manifest: PathBuf,
    /// Degradation labels, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "none")]
    degrade: Vec<String>,
    /// Also write the CSV here (it always goes to standard output).
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Write the full report as JSON here.
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Write the Markdown rendering here.
    #[arg(long)]
    out_md: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Stored JSON report to render.
    #[arg(long = "in")]
    input: PathBuf,
    /// Write Markdown here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

// ── Entry point ─────────────────────────────────────────────────────────

/// Parse `argv` and run one subcommand, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a, cli.seed),
        Cmd::Pretrain(a) => pretrain(a, cli.seed),
        Cmd::Finetune(a) => finetune(a, cli.seed),
        Cmd::Eval(a) => eval(a),
        Cmd::Matrix(a) => matrix(a),
        Cmd::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn parse_degrades(labels: &[String], param: Option<f64>) -> Result<Vec<DegradeSpec>, Failure> {
    labels
        .iter()
        .map(|label| {
            let spec = DegradeSpec::from_label(label).map_err(usage)?;
            match param {
                Some(p) => spec.with_param(p).map_err(usage),
                None => Ok(spec),
            }
        })
        .collect()
}

fn require_family(manifest: &DatasetManifest, family: &str) -> Result<(), Failure> {
    if manifest.records.iter().any(|r| r.family == family) {
        Ok(())
    } else {
        Err(usage(format!(
            "family {family:?} does not appear in the manifest (available: {})",
            manifest.families().join(", ")
        )))
    }
}

// ── Subcommands ─────────────────────────────────────────────────────────

fn gen_data(a: &GenDataArgs, seed: Option<u64>) -> CliResult {
    let mut cfg: GenConfig = read_config(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = a.image_size {
        cfg.image_size = v;
    }
    if let Some(v) = a.train {
        cfg.counts.train = v;
    }
    if let Some(v) = a.val {
        cfg.counts.val = v;
    }
    if let Some(v) = a.test {
        cfg.counts.test = v;
    }
    cfg.validate().map_err(usage)?;
    let manifest = gen_dataset(&a.out, &cfg).map_err(runtime)?;
    log::info!(
        "generated {} records under {}",
        manifest.records.len(),
        a.out.display()
    );
    println!("{}", a.out.join("manifest.jsonl").display());
    Ok(())
}

fn pretrain(a: &PretrainArgs, seed: Option<u64>) -> CliResult {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    cfg.stage = Stage::Pretrain;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    a.overrides.apply(&mut cfg);
    cfg.validate().map_err(usage)?;
    let mut manifest = load_manifest(&a.manifest).map_err(runtime)?;
    if !a.exclude_family.is_empty() {
        manifest = manifest.exclude_families(&a.exclude_family).map_err(usage)?;
    }
    // One seed drives both weight init and the training schedule.
    let model_cfg = ModelConfig {
        seed: cfg.seed,
        ..ModelConfig::default()
    };
    let mut model = CaptionModel::<Elem>::new(model_cfg).map_err(runtime)?;
    let ckpt = train(&mut model, &manifest, &cfg).map_err(runtime)?;
    save_checkpoint(&ckpt, &a.out).map_err(runtime)?;
    log::info!("saved pretraining checkpoint to {}", a.out.display());
    Ok(())
}

fn finetune(a: &FinetuneArgs, seed: Option<u64>) -> CliResult {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    cfg.stage = Stage::Finetune;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    a.overrides.apply(&mut cfg);
    if let Some(words) = &a.lora_targets {
        let targets: Result<Vec<ProjKind>, _> =
            words.iter().map(|w| ProjKind::from_str(w)).collect();
        cfg.lora.targets = targets.map_err(usage)?;
    }
    if let Some(v) = a.lora_rank {
        cfg.lora.r = v;
    }
    if let Some(v) = a.lora_alpha {
        cfg.lora.alpha = v;
    }
    if let Some(v) = a.lora_dropout {
        cfg.lora.dropout = v;
    }
    cfg.validate().map_err(usage)?;
    let manifest = load_manifest(&a.manifest).map_err(runtime)?;
    require_family(&manifest, &a.family)?;
    let view = manifest.family_view(&a.family).map_err(usage)?;
    let base: Checkpoint<Elem> = load_checkpoint(&a.base).map_err(runtime)?;
    if base.meta.stage == Stage::Finetune {
        return Err(usage(
            "--base must be a pretraining checkpoint, not a fine-tuned one".to_string(),
        ));
    }
    let mut model = base.build_model().map_err(runtime)?;
    model.inject(&cfg.lora).map_err(runtime)?;
    let ckpt = train(&mut model, &view, &cfg).map_err(runtime)?;
    save_checkpoint(&ckpt, &a.out).map_err(runtime)?;
    log::info!(
        "saved {} adapter checkpoint to {}",
        a.family,
        a.out.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult {
    let degrade = parse_degrades(std::slice::from_ref(&a.degrade), a.degrade_param)?
        .pop()
        .expect("one label in, one spec out");
    let manifest = load_manifest(&a.manifest).map_err(runtime)?;
    require_family(&manifest, &a.family)?;
    let ckpt: Checkpoint<Elem> = load_checkpoint(&a.ckpt).map_err(runtime)?;
    let result = eval_subset(&ckpt, &manifest, &a.family, &degrade).map_err(runtime)?;
    let line = serde_json::json!({
        "test_family": a.family,
        "degrade": degrade.label(),
        "n": result.n,
        "acc": result.accuracy,
        "f1": result.f1,
        "f1_degenerate": result.f1_degenerate,
        "confusion": result.confusion,
    });
    println!("{line}");
    Ok(())
}

fn matrix(a: &MatrixArgs) -> CliResult {
    let degrades = parse_degrades(&a.degrade, None)?;
    let mut paths: BTreeMap<String, PathBuf> = BTreeMap::new();
    for pair in &a.ckpts {
        let (family, path) = pair.split_once('=').ok_or_else(|| {
            usage(format!(
                "--ckpts entries look like fam_a=path/to.blra, got {pair:?}"
            ))
        })?;
        if family.is_empty() || path.is_empty() {
            return Err(usage(format!(
                "--ckpts entries look like fam_a=path/to.blra, got {pair:?}"
            )));
        }
        paths.insert(family.to_string(), PathBuf::from(path));
    }
    let manifest = load_manifest(&a.manifest).map_err(runtime)?;
    let mut ckpts: BTreeMap<String, Checkpoint<Elem>> = BTreeMap::new();
    for (family, path) in &paths {
        ckpts.insert(family.clone(), load_checkpoint(path).map_err(runtime)?);
    }
    let mut report = cross_matrix(&ckpts, &manifest, &degrades).map_err(runtime)?;
    for (family, path) in &paths {
        report
            .metadata
            .checkpoints
            .insert(family.clone(), path.display().to_string());
    }
    print!("{}", report.to_csv());
    if let Some(p) = &a.out_csv {
        fs::write(p, report.to_csv()).map_err(runtime)?;
    }
    if let Some(p) = &a.out_json {
        let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
        fs::write(p, json).map_err(runtime)?;
    }
    if let Some(p) = &a.out_md {
        fs::write(p, report.to_markdown()).map_err(runtime)?;
    }
    Ok(())
}

fn report(a: &ReportArgs) -> CliResult {
    let text = fs::read_to_string(&a.input).map_err(runtime)?;
    let report: EvalReport = serde_json::from_str(&text).map_err(runtime)?;
    let md = report.to_markdown();
    match &a.out {
        Some(p) => fs::write(p, md).map_err(runtime)?,
        None => print!("{md}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("bilora").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run_args(&["frobnicate"]), 1);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run_args(&["gen-data", "--out", "x", "--bogus"]), 1);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run_args(&["--help"]), 0);
        assert_eq!(run_args(&["matrix", "--help"]), 0);
    }

    #[test]
    fn finetune_without_base_is_a_usage_error() {
        assert_eq!(
            run_args(&[
                "finetune",
                "--manifest",
                "m.jsonl",
                "--family",
                "fam_a",
                "--out",
                "c.blra"
            ]),
            1
        );
    }

    #[test]
    fn bad_degrade_label_fails_before_touching_files() {
        // The checkpoint and manifest paths do not exist; a usage error
        // proves option validation ran first.
        assert_eq!(
            run_args(&[
                "eval",
                "--ckpt",
                "missing.blra",
                "--manifest",
                "missing.jsonl",
                "--family",
                "fam_a",
                "--degrade",
                "sepia"
            ]),
            1
        );
    }

    #[test]
    fn malformed_ckpt_pair_is_a_usage_error() {
        assert_eq!(
            run_args(&[
                "matrix",
                "--ckpts",
                "fam_a.blra",
                "--manifest",
                "missing.jsonl"
            ]),
            1
        );
    }

    #[test]
    fn missing_report_file_is_a_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("absent.json");
        assert_eq!(run_args(&["report", "--in", path.to_str().unwrap()]), 2);
    }

    #[test]
    fn config_file_with_unknown_keys_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("gen.json");
        std::fs::write(&cfg, r#"{"image_size": 16, "sharpness": 3}"#).unwrap();
        assert_eq!(
            run_args(&[
                "gen-data",
                "--out",
                dir.path().join("data").to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap()
            ]),
            1
        );
    }

    #[test]
    fn gen_data_writes_a_loadable_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let code = run_args(&[
            "gen-data",
            "--out",
            out.to_str().unwrap(),
            "--image-size",
            "16",
            "--train",
            "1",
            "--val",
            "1",
            "--test",
            "1",
            "--seed",
            "9",
        ]);
        assert_eq!(code, 0);
        let manifest = load_manifest(&out.join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.records.len(), 24, "8 sources x 3 splits x 1 image");
    }

    #[test]
    fn pretrain_rejects_an_unknown_excluded_family() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        assert_eq!(
            run_args(&[
                "gen-data",
                "--out",
                out.to_str().unwrap(),
                "--image-size",
                "16",
                "--train",
                "1",
                "--val",
                "1",
                "--test",
                "1",
            ]),
            0
        );
        let manifest = out.join("manifest.jsonl");
        let ckpt = dir.path().join("base.ckpt");
        let code = run_args(&[
            "pretrain",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--exclude-family",
            "fam_a,no_such_family",
        ]);
        assert_eq!(code, 1, "excluding an absent family is a usage error");
    }

    #[test]
    fn cli_overrides_beat_config_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("gen.json");
        std::fs::write(
            &cfg,
            r#"{"image_size": 32, "counts": {"train": 5, "val": 5, "test": 5}}"#,
        )
        .unwrap();
        let out = dir.path().join("data");
        let code = run_args(&[
            "gen-data",
            "--out",
            out.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--image-size",
            "16",
            "--train",
            "1",
            "--val",
            "1",
            "--test",
            "1",
        ]);
        assert_eq!(code, 0);
        let manifest = load_manifest(&out.join("manifest.jsonl")).unwrap();
        assert_eq!(
            manifest.records.len(),
            24,
            "the command line forces 1/1/1 counts over the file's 5/5/5"
        );
    }
}
