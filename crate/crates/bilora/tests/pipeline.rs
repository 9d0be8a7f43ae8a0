//! End-to-end pipeline oracles on a miniature corpus: the tiny-set overfit
//! run, checkpoint round-trip stability of evaluation metrics, and the
//! frozen-base guarantees of adapter fine-tuning.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use bilora::data::synth::{gen_dataset, GenConfig, SplitCounts};
use bilora::data::{DatasetManifest, ImageBuf, Split};
use bilora::degrade::DegradeSpec;
use bilora::eval::eval_subset;
use bilora::lora::{count_params, ProjKind};
use bilora::model::{caption_to_label, ModelConfig};
use bilora::train::{load_checkpoint, save_checkpoint, train, Checkpoint, Stage, TrainConfig};
use bilora::CaptionModel;

/// Corpus with 4 train / 0 val / 1 test images per source; the fam_a view
/// then holds 8 training samples (4 fake + 4 shared real), and the empty
/// validation split makes training run its full epoch budget instead of
/// exiting early on a perfect val score.
fn tiny_corpus(dir: &std::path::Path) -> DatasetManifest {
    gen_dataset(
        dir,
        &GenConfig {
            counts: SplitCounts {
                train: 4,
                val: 0,
                test: 1,
            },
            seed: 7,
            ..GenConfig::default()
        },
    )
    .expect("tiny corpus generates cleanly")
}

/// Fine-tune adapters over a frozen random-init base on the fam_a view.
/// Returns the fine-tune checkpoint, the view it trained on, and the
/// SHA-256 of the base tensors before fine-tuning started. Random patch
/// and attention projections already separate individual images, which is
/// all a memorization run requires of the frozen base.
fn overfit_run(
    manifest: &DatasetManifest,
) -> (Checkpoint<f64>, DatasetManifest, [u8; 32], TrainConfig) {
    let mut model = CaptionModel::new(ModelConfig {
        seed: 7,
        ..ModelConfig::default()
    })
    .expect("default-shaped model");

    let mut ft_cfg = TrainConfig {
        stage: Stage::Finetune,
        epochs: 50,
        seed: 7,
        ..TrainConfig::default()
    };
    // The shipped detection protocol adapts all four projections: pure
    // attention steering cannot re-aim the frozen vocabulary head at the
    // verdict words, while value/output adapters rewrite what the decoder
    // writes into the residual stream.
    ft_cfg.lora.targets = vec![
        ProjKind::Query,
        ProjKind::Key,
        ProjKind::Value,
        ProjKind::Output,
    ];
    model.inject(&ft_cfg.lora).expect("adapter injection");
    let base_hash = base_tensor_hash(&model.named_params());
    let view = manifest.family_view("fam_a").expect("fam_a exists");
    let ckpt = train(&mut model, &view, &ft_cfg).expect("fine-tuning succeeds");
    (ckpt, view, base_hash, ft_cfg)
}

/// SHA-256 over every non-adapter tensor, in name order.
fn base_tensor_hash(params: &BTreeMap<String, bilora::Tensor>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in params {
        if name.contains("lora_") {
            continue;
        }
        h.update(name.as_bytes());
        for v in t.to_vec() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

#[test]
fn eight_sample_finetune_overfits_and_freezes_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_corpus(dir.path());
    let (ckpt, view, hash_before, ft_cfg) = overfit_run(&manifest);

    // The fine-tuned model reproduces every training verdict: 8 samples,
    // 50 epochs, 100% training accuracy.
    let model = ckpt.build_model().unwrap();
    let train_records = view.split_records(Split::Train);
    assert_eq!(train_records.len(), 8, "fam_a view holds 4 fake + 4 real");
    let mut correct = 0;
    for rec in &train_records {
        let img = ImageBuf::load_png(&view.image_path(rec)).unwrap();
        let caption = model.generate_caption(&img, 4).unwrap();
        if caption_to_label(model.vocab(), &caption) == Some(rec.label) {
            correct += 1;
        }
    }
    assert_eq!(
        correct,
        train_records.len(),
        "tiny-set overfit must reach full training accuracy"
    );

    // Fine-tuning moved adapters only: the base hash is bit-identical.
    let hash_after = base_tensor_hash(&model.named_params());
    assert_eq!(hash_before, hash_after, "base tensors changed during fine-tune");

    // The trainable census equals the closed-form adapter budget.
    let trainable: usize = model
        .trainable_params()
        .iter()
        .map(|(_, t)| t.shape().iter().product::<usize>())
        .sum();
    let cfg = model.config();
    let budget = count_params(
        cfg.decoder_layers,
        cfg.d_model,
        ft_cfg.lora.targets.len(),
        ft_cfg.lora.r,
        0,
    );
    assert_eq!(
        trainable as u64, budget.trainable,
        "trainable census must match the adapter budget formula"
    );
}

#[test]
fn checkpoint_round_trip_preserves_eval_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_corpus(dir.path());
    let (ckpt, _, _, _) = overfit_run(&manifest);

    let none = DegradeSpec::from_label("none").unwrap();
    let before = eval_subset(&ckpt, &manifest, "fam_a", &none).unwrap();

    let path = dir.path().join("tuned.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let reloaded: Checkpoint<f64> = load_checkpoint(&path).unwrap();
    let after = eval_subset(&reloaded, &manifest, "fam_a", &none).unwrap();

    assert_eq!(before.confusion, after.confusion, "confusion counts drifted");
    assert_eq!(before.accuracy.to_bits(), after.accuracy.to_bits());
    assert_eq!(before.f1.to_bits(), after.f1.to_bits());
}
