//! The release gate: every shipped guarantee checked end to end, one line
//! of output per criterion (visible with `--nocapture`, or on failure).
//!
//! The desk-scale protocol run (corpus generation, base pretraining with
//! the transfer families held out, one adapter fine-tune per trained
//! family, cross-family evaluation matrix) is expensive, so it happens
//! once and its artifacts feed the frozen-base, quality, robustness and
//! metric-recount checks. The determinism check then repeats the whole
//! protocol from the same seed and compares the emitted CSV byte by byte.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use bilora::data::synth::{gen_dataset, GenConfig, TRANSFER_FAMILIES};
use bilora::data::DatasetManifest;
use bilora::degrade::DegradeSpec;
use bilora::eval::{accuracy, cross_matrix, f1, predict_subset, ConfusionCounts, EvalReport};
use bilora::lora::{count_params, LoraConfig, ProjKind};
use bilora::model::{Mode, ModelConfig};
use bilora::tensor::graph::sum_all;
use bilora::tensor::grad_check;
use bilora::train::{train, Checkpoint, Stage, TrainConfig};
use bilora::{CaptionModel, Graph, Image, LoraAdapter, Tensor};

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

#[test]
fn acceptance_criteria() {
    criterion_1_parameter_budget();
    criterion_2_injection_identity();
    criterion_3_merge_equivalence();
    criterion_4_gradient_correctness();
    let run = run_protocol();
    criterion_5_frozen_base(&run);
    criterion_6_protocol_quality(&run);
    criterion_7_degradation_ordering(&run);
    criterion_8_metric_oracles(&run);
    criterion_9_determinism(&run);
}

// ── 1: parameter budget ─────────────────────────────────────────────────

/// The published full-scale configuration: 32 adapted decoder layers of
/// width 2560, adapters on two projections at rank 16, against a frozen
/// backbone of 3,744,679,936 weights.
fn criterion_1_parameter_budget() {
    let budget = count_params(32, 2560, 2, 16, 3_744_679_936);
    assert_eq!(
        budget.trainable, 5_242_880,
        "trainable adapter count for the full-scale configuration"
    );
    assert_eq!(budget.frozen, 3_744_679_936, "frozen total must pass through untouched");
    let pct = format!("{:.2}", budget.fraction * 100.0);
    assert_eq!(pct, "0.14", "trainable fraction must round to 0.14%");
    println!("PASS 1: parameter budget 5,242,880 trainable, {pct}% of the full stack");
}

// ── 2: injection identity ───────────────────────────────────────────────

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(32, 32, 3);
    for y in 0..32 {
        for x in 0..32 {
            for c in 0..3 {
                img.set(x, y, c, rng.gen::<f64>());
            }
        }
    }
    img
}

/// Full next-token distribution over the visual prefix plus BOS.
fn bos_logits(model: &CaptionModel, img: &Image) -> Vec<f64> {
    let mut g = Graph::new();
    let tokens = model.encode_image(&mut g, img).expect("image encodes");
    let prefix = model.bridge(&mut g, &tokens).expect("bridge runs");
    model
        .decode(&mut g, &prefix, &[model.vocab().bos()], &mut Mode::Eval)
        .expect("decode runs")
        .to_vec()
}

/// Freshly injected adapters start with a zero up-projection, so the host
/// model must be bit-for-bit unchanged: same captions, same logits.
fn criterion_2_injection_identity() {
    let cfg = ModelConfig {
        seed: 11,
        ..ModelConfig::default()
    };
    let base = CaptionModel::new(cfg.clone()).expect("base model");
    let mut injected = CaptionModel::new(cfg).expect("identically seeded twin");
    injected.inject(&protocol_lora()).expect("fresh adapters on every projection");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let img = random_image(&mut rng);
        let a = base.generate_caption(&img, 4).expect("base caption");
        let b = injected.generate_caption(&img, 4).expect("injected caption");
        assert_eq!(a, b, "caption diverged on random image {i}");
        let la = bos_logits(&base, &img);
        let lb = bos_logits(&injected, &img);
        let identical =
            la.len() == lb.len() && la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(identical, "logits diverged bit-for-bit on random image {i}");
    }
    println!("PASS 2: injection left captions and logits bit-identical on 100 random images");
}

// ── 3: merge equivalence ────────────────────────────────────────────────

/// Folding `(alpha/r) * B A` into the weight must agree with the live
/// two-matmul path. The merged route is recomputed here as a plain
/// matrix-vector loop so the comparison does not go through the graph.
fn criterion_3_merge_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let d_in = rng.gen_range(1..=24);
        let d_out = rng.gen_range(1..=24);
        let r = rng.gen_range(1..=d_in.min(d_out));
        let alpha = rng.gen_range(0.5..64.0);
        let adapter = LoraAdapter::init(d_in, d_out, r, alpha, 0.0, rng.gen()).expect("adapter");
        let b_random: Vec<f64> = (0..d_out * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        adapter.b.set_data(b_random).expect("B filled in place");
        let w_data: Vec<f64> = (0..d_out * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Tensor::from_vec(&[d_out, d_in], w_data).expect("weight");
        let x_data: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[d_in], x_data).expect("activation");

        let mut g = Graph::new();
        let unmerged = adapter
            .forward(&mut g, &w, &x, false, &mut rng)
            .expect("unmerged forward");
        let merged_w = adapter.merge(&w).expect("merge");
        let (wm, xv, un) = (merged_w.to_vec(), x.to_vec(), unmerged.to_vec());
        for o in 0..d_out {
            let mut dot = 0.0;
            for i in 0..d_in {
                dot += wm[o * d_in + i] * xv[i];
            }
            worst = worst.max((dot - un[o]).abs());
        }
    }
    assert!(worst < 1e-10, "merged and unmerged paths disagree by {worst:e}");
    println!("PASS 3: merge equivalence over 1000 draws, worst gap {worst:.2e} < 1e-10");
}

// ── 4: gradient correctness ─────────────────────────────────────────────

fn const_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

fn param_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = const_tensor(rng, shape);
    t.set_requires_grad(true);
    t
}

fn check_linear(rng: &mut ChaCha8Rng) -> f64 {
    let t = rng.gen_range(1..=4);
    let d_in = rng.gen_range(1..=6);
    let d_out = rng.gen_range(1..=6);
    let x = param_tensor(rng, &[t, d_in]);
    let w = param_tensor(rng, &[d_out, d_in]);
    let b = param_tensor(rng, &[d_out]);
    let params = [x.clone(), w.clone(), b.clone()];
    grad_check(
        &mut |g: &mut Graph| {
            let y = g.matmul_nt(&x, &w)?;
            let y = g.add(&y, &b)?;
            let sq = g.mul(&y, &y)?;
            sum_all(g, &sq)
        },
        &params,
        FD_STEP,
    )
    .expect("linear projection evaluates")
}

fn check_layer_norm(rng: &mut ChaCha8Rng) -> f64 {
    let t = rng.gen_range(1..=4);
    let d = rng.gen_range(2..=6);
    let x = param_tensor(rng, &[t, d]);
    let gamma = param_tensor(rng, &[d]);
    let beta = param_tensor(rng, &[d]);
    let params = [x.clone(), gamma.clone(), beta.clone()];
    grad_check(
        &mut |g: &mut Graph| {
            let y = g.layer_norm(&x, &gamma, &beta)?;
            let sq = g.mul(&y, &y)?;
            sum_all(g, &sq)
        },
        &params,
        FD_STEP,
    )
    .expect("layer norm evaluates")
}

fn check_mlp(rng: &mut ChaCha8Rng) -> f64 {
    let t = rng.gen_range(1..=4);
    let d_in = rng.gen_range(2..=6);
    let hidden = rng.gen_range(2..=8);
    let d_out = rng.gen_range(2..=6);
    let x = param_tensor(rng, &[t, d_in]);
    let w1 = param_tensor(rng, &[hidden, d_in]);
    let b1 = param_tensor(rng, &[hidden]);
    let w2 = param_tensor(rng, &[d_out, hidden]);
    let b2 = param_tensor(rng, &[d_out]);
    let params = [x.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone()];
    grad_check(
        &mut |g: &mut Graph| {
            let h = g.matmul_nt(&x, &w1)?;
            let h = g.add(&h, &b1)?;
            let h = g.gelu(&h)?;
            let y = g.matmul_nt(&h, &w2)?;
            let y = g.add(&y, &b2)?;
            let sq = g.mul(&y, &y)?;
            sum_all(g, &sq)
        },
        &params,
        FD_STEP,
    )
    .expect("gelu mlp evaluates")
}

fn check_attention(rng: &mut ChaCha8Rng) -> f64 {
    let heads = [1usize, 2, 4][rng.gen_range(0..3)];
    let hd = rng.gen_range(1..=3);
    let d = heads * hd;
    let t = rng.gen_range(2..=4);
    let x = param_tensor(rng, &[t, d]);
    let wq = param_tensor(rng, &[d, d]);
    let bq = param_tensor(rng, &[d]);
    let wk = param_tensor(rng, &[d, d]);
    let bk = param_tensor(rng, &[d]);
    let wv = param_tensor(rng, &[d, d]);
    let bv = param_tensor(rng, &[d]);
    let wo = param_tensor(rng, &[d, d]);
    let bo = param_tensor(rng, &[d]);
    // Constant per-head column selectors and the causal mask, mirroring
    // how the decoder assembles its attention.
    let selectors: Vec<Tensor> = (0..heads)
        .map(|h| {
            let mut data = vec![0.0; hd * d];
            for i in 0..hd {
                data[i * d + h * hd + i] = 1.0;
            }
            Tensor::from_vec(&[hd, d], data).expect("selector shape")
        })
        .collect();
    let mut mask_data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            mask_data[i * t + j] = -1e9;
        }
    }
    let mask = Tensor::from_vec(&[t, t], mask_data).expect("mask shape");
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let params = [
        x.clone(),
        wq.clone(),
        bq.clone(),
        wk.clone(),
        bk.clone(),
        wv.clone(),
        bv.clone(),
        wo.clone(),
        bo.clone(),
    ];
    grad_check(
        &mut |g: &mut Graph| {
            let q = g.matmul_nt(&x, &wq)?;
            let q = g.add(&q, &bq)?;
            let k = g.matmul_nt(&x, &wk)?;
            let k = g.add(&k, &bk)?;
            let v = g.matmul_nt(&x, &wv)?;
            let v = g.add(&v, &bv)?;
            let mut contexts = Vec::with_capacity(selectors.len());
            for sel in &selectors {
                let qh = g.matmul_nt(&q, sel)?;
                let kh = g.matmul_nt(&k, sel)?;
                let vh = g.matmul_nt(&v, sel)?;
                let mut scores = g.matmul_nt(&qh, &kh)?;
                scores = g.scale(&scores, inv_sqrt)?;
                scores = g.add(&scores, &mask)?;
                let attn = g.softmax(&scores, 1)?;
                contexts.push(g.matmul(&attn, &vh)?);
            }
            let ctx = g.concat(&contexts, 1)?;
            let y = g.matmul_nt(&ctx, &wo)?;
            let y = g.add(&y, &bo)?;
            let sq = g.mul(&y, &y)?;
            sum_all(g, &sq)
        },
        &params,
        FD_STEP,
    )
    .expect("multi-head attention evaluates")
}

fn check_embedding(rng: &mut ChaCha8Rng) -> f64 {
    let rows = rng.gen_range(3..=8);
    let d = rng.gen_range(2..=6);
    let steps = rng.gen_range(1..=5);
    let table = param_tensor(rng, &[rows, d]);
    let pos = param_tensor(rng, &[steps, d]);
    let indices: Vec<usize> = (0..steps).map(|_| rng.gen_range(0..rows)).collect();
    let positions: Vec<usize> = (0..steps).collect();
    let params = [table.clone(), pos.clone()];
    grad_check(
        &mut |g: &mut Graph| {
            let tok = g.embed(&table, &indices)?;
            let pv = g.embed(&pos, &positions)?;
            let s = g.add(&tok, &pv)?;
            let sq = g.mul(&s, &s)?;
            sum_all(g, &sq)
        },
        &params,
        FD_STEP,
    )
    .expect("embedding lookup evaluates")
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let steps = rng.gen_range(1..=5);
    let vocab = rng.gen_range(2..=9);
    let logits = param_tensor(rng, &[steps, vocab]);
    let targets: Vec<usize> = (0..steps).map(|_| rng.gen_range(0..vocab)).collect();
    let mut mask: Vec<bool> = (0..steps).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    let params = [logits.clone()];
    grad_check(
        &mut |g: &mut Graph| g.cross_entropy(&logits, &targets, &mask),
        &params,
        FD_STEP,
    )
    .expect("cross entropy evaluates")
}

fn check_lora_path(rng: &mut ChaCha8Rng, with_mask: bool) -> f64 {
    let d_in = rng.gen_range(1..=6);
    let d_out = rng.gen_range(1..=6);
    let r = rng.gen_range(1..=d_in.min(d_out));
    let t = rng.gen_range(1..=4);
    let alpha = rng.gen_range(0.5..32.0);
    let adapter = LoraAdapter::init(d_in, d_out, r, alpha, 0.0, rng.gen()).expect("adapter");
    // A nonzero up-projection makes the down-projection gradient live.
    let b_random: Vec<f64> = (0..d_out * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
    adapter.b.set_data(b_random).expect("B filled in place");
    let w = const_tensor(rng, &[d_out, d_in]);
    let x = param_tensor(rng, &[t, d_in]);
    // A fixed inverted-dropout mask keeps the loss deterministic while
    // still exercising the masked adapter input.
    let mask = with_mask.then(|| {
        let p = 0.3;
        let keep = 1.0 / (1.0 - p);
        let data: Vec<f64> = (0..t * d_in)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        Tensor::from_vec(&[t, d_in], data).expect("mask shape")
    });
    let params = [x.clone(), adapter.a.clone(), adapter.b.clone()];
    grad_check(
        &mut |g: &mut Graph| {
            let y = adapter.forward_tokens(g, &w, &x, mask.as_ref())?;
            let sq = g.mul(&y, &y)?;
            sum_all(g, &sq)
        },
        &params,
        FD_STEP,
    )
    .expect("adapted projection evaluates")
}

/// Central differences against the analytic backward pass for every layer
/// type the model is built from, ten random configurations each, within a
/// one-minute budget.
fn criterion_4_gradient_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let checks: Vec<(&str, Box<dyn FnMut(&mut ChaCha8Rng) -> f64>)> = vec![
        ("linear projection", Box::new(check_linear)),
        ("layer norm", Box::new(check_layer_norm)),
        ("gelu mlp", Box::new(check_mlp)),
        ("multi-head attention", Box::new(check_attention)),
        ("embedding lookup", Box::new(check_embedding)),
        ("softmax cross-entropy", Box::new(check_cross_entropy)),
        ("adapted projection", Box::new(|r: &mut ChaCha8Rng| check_lora_path(r, false))),
        (
            "adapted projection under dropout mask",
            Box::new(|r: &mut ChaCha8Rng| check_lora_path(r, true)),
        ),
    ];
    let mut worst_overall = 0.0_f64;
    for (name, mut check) in checks {
        for config in 0..10 {
            let worst = check(&mut rng);
            assert!(
                worst < GRAD_TOL,
                "{name} config {config}: relative gradient error {worst:e} exceeds {GRAD_TOL:e}"
            );
            worst_overall = worst_overall.max(worst);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient checks took {secs:.1}s, budget is one minute");
    println!(
        "PASS 4: gradients match finite differences, worst {worst_overall:.2e} in {secs:.1}s"
    );
}

// ── The shared protocol run ─────────────────────────────────────────────

struct ProtocolRun {
    /// Keeps the generated corpus alive for the lifetime of the run.
    _dir: tempfile::TempDir,
    manifest: DatasetManifest,
    base_ckpt: Checkpoint<f64>,
    checkpoints: BTreeMap<String, Checkpoint<f64>>,
    report: EvalReport,
    csv: String,
    secs: f64,
}

/// The detection protocol adapts all four attention projections: value and
/// output adapters rewrite what the decoder pushes into the residual
/// stream, which re-aiming the frozen vocabulary head at the verdict words
/// requires; query/key steering alone cannot do that.
fn protocol_lora() -> LoraConfig {
    LoraConfig {
        targets: vec![
            ProjKind::Query,
            ProjKind::Key,
            ProjKind::Value,
            ProjKind::Output,
        ],
        ..LoraConfig::default()
    }
}

/// One full desk-scale run: generate the corpus (five trained families,
/// two transfer families, 400/10/100 per family), pretrain the base with
/// the transfer families held out, fine-tune one adapter set per trained
/// family, and evaluate the full cross matrix under none/jpeg65/blur3.
fn run_protocol() -> ProtocolRun {
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("corpus directory");
    let manifest = gen_dataset(dir.path(), &GenConfig::default()).expect("corpus generates");

    let pretrain_view = manifest
        .exclude_families(&TRANSFER_FAMILIES)
        .expect("transfer families held out of pretraining");
    let mut base = CaptionModel::new(ModelConfig::default()).expect("base model");
    let base_ckpt =
        train(&mut base, &pretrain_view, &TrainConfig::default()).expect("pretraining succeeds");

    let mut checkpoints = BTreeMap::new();
    for family in pretrain_view.families() {
        let mut model = base_ckpt.build_model().expect("base rebuilds");
        let ft_cfg = TrainConfig {
            stage: Stage::Finetune,
            lora: protocol_lora(),
            ..TrainConfig::default()
        };
        model.inject(&ft_cfg.lora).expect("adapters inject");
        let view = manifest.family_view(&family).expect("family view");
        let ckpt = train(&mut model, &view, &ft_cfg).expect("fine-tuning succeeds");
        checkpoints.insert(family, ckpt);
    }

    let degrades: Vec<DegradeSpec> = ["none", "jpeg65", "blur3"]
        .iter()
        .map(|label| DegradeSpec::from_label(label).expect("canonical label"))
        .collect();
    let report = cross_matrix(&checkpoints, &manifest, &degrades).expect("cross matrix");
    let csv = report.to_csv();
    ProtocolRun {
        _dir: dir,
        manifest,
        base_ckpt,
        checkpoints,
        report,
        csv,
        secs: started.elapsed().as_secs_f64(),
    }
}

/// Highest clean own-family accuracy; ties break toward the first family
/// in name order, so the choice is deterministic.
fn best_diagonal_family(run: &ProtocolRun) -> String {
    let mut best: Option<(String, f64)> = None;
    for family in run.checkpoints.keys() {
        let acc = run
            .report
            .cell(family, family, "none")
            .expect("diagonal cell present")
            .acc;
        if best.as_ref().map_or(true, |(_, b)| acc > *b) {
            best = Some((family.clone(), acc));
        }
    }
    best.expect("at least one trained family").0
}

// ── 5: frozen-base invariance ───────────────────────────────────────────

/// SHA-256 over every non-adapter tensor in a checkpoint, in name order.
fn ckpt_base_hash(ckpt: &Checkpoint<f64>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, (shape, data)) in &ckpt.tensors {
        if name.contains("lora_") {
            continue;
        }
        h.update(name.as_bytes());
        for &extent in shape {
            h.update((extent as u64).to_le_bytes());
        }
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// After each full fine-tune, the base tensors hash identically to the
/// pretrained checkpoint and the trainable census equals the closed-form
/// adapter budget.
fn criterion_5_frozen_base(run: &ProtocolRun) {
    let base = ckpt_base_hash(&run.base_ckpt);
    let mut census = 0;
    for (family, ckpt) in &run.checkpoints {
        assert_eq!(
            ckpt_base_hash(ckpt),
            base,
            "fine-tuning {family} moved base tensors"
        );
        let model = ckpt.build_model().expect("fine-tuned model rebuilds");
        census = model
            .trainable_params()
            .iter()
            .map(|(_, t)| t.numel() as u64)
            .sum();
        let cfg = model.config();
        let lora = &ckpt.meta.train.lora;
        let budget = count_params(cfg.decoder_layers, cfg.d_model, lora.targets.len(), lora.r, 0);
        assert_eq!(
            census, budget.trainable,
            "trainable census for {family} drifts from the closed-form budget"
        );
    }
    println!(
        "PASS 5: base hash unchanged across {} fine-tunes, census {census} == budget",
        run.checkpoints.len()
    );
}

// ── 6: desk-scale protocol quality ──────────────────────────────────────

fn criterion_6_protocol_quality(run: &ProtocolRun) {
    let trained: Vec<String> = run.checkpoints.keys().cloned().collect();
    assert_eq!(trained.len(), 5, "five trained families");

    // (a) Every adapter detects its own family nearly perfectly.
    let mut diag_sum = 0.0;
    for family in &trained {
        let cell = run
            .report
            .cell(family, family, "none")
            .expect("diagonal cell present");
        assert!(
            cell.acc >= 0.95,
            "diagonal accuracy for {family} is {:.4}, below 0.95",
            cell.acc
        );
        diag_sum += cell.acc;
    }
    let diag_mean = diag_sum / trained.len() as f64;

    // (b) Matched training dominates mismatched training.
    let off: Vec<f64> = run
        .report
        .rows
        .iter()
        .filter(|r| r.degrade == "none" && r.train_family != r.test_family)
        .map(|r| r.acc)
        .collect();
    let off_mean = off.iter().sum::<f64>() / off.len() as f64;
    assert!(
        diag_mean > off_mean,
        "diagonal mean {diag_mean:.4} does not dominate off-diagonal mean {off_mean:.4}"
    );

    // (c) Detection generalizes to generators never seen in training.
    let mut above = 0;
    for family in &trained {
        let mean: f64 = TRANSFER_FAMILIES
            .iter()
            .map(|t| run.report.cell(family, t, "none").expect("transfer cell").acc)
            .sum::<f64>()
            / TRANSFER_FAMILIES.len() as f64;
        if mean > 0.5 {
            above += 1;
        }
    }
    assert!(
        above >= 3,
        "only {above} of 5 adapters beat 0.5 mean accuracy on the held-out transfer families"
    );

    // Wall clock: the whole protocol fits a desk machine.
    assert!(
        run.secs < 600.0,
        "protocol run took {:.0}s, budget is 10 minutes",
        run.secs
    );

    // The fine-tuned detector answers in verdict words: across the entire
    // test split, at least 99% of captions start with "real" or "fake".
    let best = best_diagonal_family(run);
    let ckpt = &run.checkpoints[&best];
    let (mut answered, mut total) = (0usize, 0usize);
    for family in run.manifest.families() {
        let predictions = predict_subset(ckpt, &run.manifest, &family, &DegradeSpec::None)
            .expect("verdict sweep");
        for (_, predicted) in predictions {
            total += 1;
            answered += usize::from(predicted.is_some());
        }
    }
    let rate = answered as f64 / total as f64;
    assert!(
        rate >= 0.99,
        "verdict words cover only {:.2}% of test captions",
        rate * 100.0
    );

    println!(
        "PASS 6: diagonal mean {diag_mean:.4} > off-diagonal {off_mean:.4}, \
         {above}/5 transfer wins, {:.0}s < 600s, verdict coverage {:.1}%",
        run.secs,
        rate * 100.0
    );
}

// ── 7: degradation ordering ─────────────────────────────────────────────

/// The best own-family detector must not improve under degradation, and
/// must stay at or above coin-flip accuracy on degraded inputs.
fn criterion_7_degradation_ordering(run: &ProtocolRun) {
    let best = best_diagonal_family(run);
    let own = |degrade: &str| {
        run.report
            .cell(&best, &best, degrade)
            .expect("own-family cell present")
            .acc
    };
    let clean = own("none");
    let jpeg = own("jpeg65");
    let blur = own("blur3");
    assert!(
        clean >= jpeg,
        "{best}: clean accuracy {clean:.4} below jpeg65 accuracy {jpeg:.4}"
    );
    assert!(
        clean >= blur,
        "{best}: clean accuracy {clean:.4} below blur3 accuracy {blur:.4}"
    );
    assert!(
        jpeg >= 0.5 && blur >= 0.5,
        "{best}: degraded accuracy fell below 0.5 (jpeg65 {jpeg:.4}, blur3 {blur:.4})"
    );
    println!("PASS 7: {best} none {clean:.3} >= jpeg65 {jpeg:.3}, >= blur3 {blur:.3}, floors hold");
}

// ── 8: metric oracles ───────────────────────────────────────────────────

/// The fixed worked example, then a from-scratch integer recount of every
/// matrix cell. The recount rebuilds predictions and counts with plain
/// loops, so it shares no code with the metric implementations; integer
/// counts below 2^53 make the float comparisons exact.
fn criterion_8_metric_oracles(run: &ProtocolRun) {
    let example = ConfusionCounts {
        true_positive: 9,
        false_positive: 1,
        false_negative: 2,
        true_negative: 8,
    };
    let acc = accuracy(&example).expect("non-empty counts");
    assert!(acc == 0.85, "worked-example accuracy {acc} is not 0.85");
    let f1_outcome = f1(&example).expect("non-empty counts");
    assert!(!f1_outcome.degenerate, "worked example has positives");
    assert!(
        f1_outcome.value == 18.0 / 21.0,
        "worked-example f1 {} is not 18/21",
        f1_outcome.value
    );
    assert!(
        (f1_outcome.value - 0.8571).abs() < 5e-5,
        "worked-example f1 {} is not approximately 0.8571",
        f1_outcome.value
    );

    for row in &run.report.rows {
        let ckpt = &run.checkpoints[&row.train_family];
        let degrade = DegradeSpec::from_label(&row.degrade).expect("known label");
        let predictions = predict_subset(ckpt, &run.manifest, &row.test_family, &degrade)
            .expect("re-prediction for recount");
        let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
        for (record, predicted) in &predictions {
            let correct = *predicted == Some(record.label);
            if record.label == 1 {
                if correct {
                    tp += 1;
                } else {
                    fneg += 1;
                }
            } else if correct {
                tn += 1;
            } else {
                fp += 1;
            }
        }
        let at = format!(
            "cell (train={}, test={}, degrade={})",
            row.train_family, row.test_family, row.degrade
        );
        assert_eq!(tp + fp + fneg + tn, row.n, "population recount differs at {at}");
        let acc2 = (tp + tn) as f64 / predictions.len() as f64;
        let f1_2 = if tp + fp + fneg == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fneg as f64)
        };
        assert!(
            acc2.to_bits() == row.acc.to_bits(),
            "accuracy recount {acc2} differs from reported {} at {at}",
            row.acc
        );
        assert!(
            f1_2.to_bits() == row.f1.to_bits(),
            "f1 recount {f1_2} differs from reported {} at {at}",
            row.f1
        );
    }
    println!(
        "PASS 8: worked example 0.85 / 0.8571 exact, {} cells recounted exactly",
        run.report.rows.len()
    );
}

// ── 9: determinism ──────────────────────────────────────────────────────

/// Repeating the whole protocol from the same seed reproduces the CSV
/// byte for byte: corpus, training and evaluation are all deterministic.
fn criterion_9_determinism(first: &ProtocolRun) {
    let second = run_protocol();
    if first.csv != second.csv {
        let i = first
            .csv
            .bytes()
            .zip(second.csv.bytes())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| first.csv.len().min(second.csv.len()));
        let lo = i.saturating_sub(40);
        panic!(
            "CSV reruns diverge at byte {i}: {:?} vs {:?}",
            &first.csv[lo..(i + 40).min(first.csv.len())],
            &second.csv[lo..(i + 40).min(second.csv.len())]
        );
    }
    println!(
        "PASS 9: repeated protocol run reproduced all {} CSV bytes",
        first.csv.len()
    );
}
