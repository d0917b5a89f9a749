//! Training loop, gradient flow and checkpoint persistence.

use memir_core::evaluation::{gen_synthetic, run_session, SyntheticConfig, SyntheticDataset};
use memir_core::memory::Fusion;
use memir_core::recall::{KeyMode, RecallConfig, RecallMode, ValueMode};
use memir_core::training::{
    batch_loss, dataset_loss, load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig,
};
use memir_core::{Error, Model, ModelConfig};

fn data(seed: u64) -> SyntheticDataset {
    gen_synthetic(
        seed,
        &SyntheticConfig {
            images: 80,
            ..Default::default()
        },
    )
    .unwrap()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        batch_size: 16,
        ..TrainConfig::desk()
    }
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let ds = data(0);
    let a = train(&quick(2, 7), &ds.corpus, &ds.dialogues).unwrap();
    let b = train(&quick(2, 7), &ds.corpus, &ds.dialogues).unwrap();
    let ca = Checkpoint::new(a.model, Some(a.meta)).to_bytes();
    let cb = Checkpoint::new(b.model, Some(b.meta)).to_bytes();
    assert_eq!(ca, cb);
    let c = train(&quick(2, 8), &ds.corpus, &ds.dialogues).unwrap();
    assert_ne!(ca, Checkpoint::new(c.model, Some(c.meta)).to_bytes());
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let ds = data(0);
    let out = train(&quick(0, 3), &ds.corpus, &ds.dialogues).unwrap();
    let init = Model::new(ModelConfig::desk(), 3).unwrap();
    assert_eq!(out.model.params, init.params);
    assert!(out.meta.loss_curve.is_empty());
    let l = dataset_loss(&init, &ds.corpus, &ds.dialogues, 16, None).unwrap();
    assert_eq!(out.meta.initial_loss, l);
}

#[test]
fn loss_falls_for_most_seeds() {
    let ds = data(1);
    let mut falling = 0;
    for seed in 0..5 {
        let out = train(&quick(3, seed), &ds.corpus, &ds.dialogues).unwrap();
        let m = &out.meta;
        assert_eq!(m.skipped_steps, 0);
        assert!(m.loss_curve[0] < m.initial_loss, "seed {seed}: {m:?}");
        let after = dataset_loss(&out.model, &ds.corpus, &ds.dialogues, 16, None).unwrap();
        if after < m.initial_loss && m.loss_curve.windows(2).all(|w| w[1] < w[0]) {
            falling += 1;
        }
    }
    assert!(falling >= 4, "{falling} of 5 seeds decreased");
}

fn configs() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig::desk();
    let recall = |r: RecallConfig| ModelConfig {
        recall: r,
        ..base.clone()
    };
    vec![
        ("full", base.clone()),
        ("pdsm_only", base.clone().pdsm_only()),
        (
            "no_refine",
            ModelConfig {
                refine: false,
                ..base.clone()
            },
        ),
        (
            "holistic",
            recall(RecallConfig {
                mode: RecallMode::Holistic,
                ..Default::default()
            }),
        ),
        (
            "value_as_key",
            recall(RecallConfig {
                key_mode: KeyMode::ValueAsKey,
                ..Default::default()
            }),
        ),
        (
            "recall_keys",
            recall(RecallConfig {
                value_mode: ValueMode::Key,
                ..Default::default()
            }),
        ),
        (
            "include_round0",
            recall(RecallConfig {
                include_round0: true,
                n: 3,
                ..Default::default()
            }),
        ),
        ("simagg", ModelConfig { fusion: Fusion::SimAgg, ..base.clone() }),
        ("iws", ModelConfig { fusion: Fusion::Iws { lambda: 0.5 }, ..base.clone() }),
        ("icf", ModelConfig { fusion: Fusion::Icf, ..base.clone() }),
    ]
}

const INERT: &[&str] = &["recall.augment_attn.w_q", "recall.augment_attn.w_k"];

#[test]
fn every_parameter_receives_gradient_in_every_configuration() {
    let ds = data(2);
    let batch: Vec<_> = ds.dialogues.iter().take(8).collect();
    for (name, cfg) in configs() {
        let model = Model::new(cfg, 0).unwrap();
        for truncate in [false, true] {
            let out = batch_loss(&model, &model.params, &ds.corpus, &batch, None, truncate, true).unwrap();
            let grads = out.grads.unwrap();
            assert_eq!(out.per_round.len(), 5);
            for (id, p) in model.params.iter() {
                // Attention over one recalled row has constant weights, so its
                // query and key projections cannot affect the output.
                if INERT.contains(&p.name.as_str()) {
                    continue;
                }
                // Keys are only read in later rounds, after truncation has
                // turned them into constants.
                if truncate && p.name.starts_with("recall.key_") {
                    assert!(grads.get(id).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
                    continue;
                }
                let g = grads.get(id).unwrap_or_else(|| panic!("{name} truncate={truncate}: {} has no gradient", p.name));
                assert!(g.is_finite());
                assert!(g.data().iter().any(|&x| x != 0.0), "{name} truncate={truncate}: {} gradient is zero", p.name);
            }
        }
    }
}

#[test]
fn checkpoint_round_trips_and_rejects_damage() {
    let ds = data(3);
    let out = train(&quick(1, 5), &ds.corpus, &ds.dialogues).unwrap();
    let ckpt = Checkpoint::new(out.model.clone(), Some(out.meta.clone()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model.params, out.model.params);
    assert_eq!(back.model.config, out.model.config);
    assert_eq!(back.meta.as_ref(), Some(&out.meta));
    assert_eq!(back.id(), ckpt.id());

    // Reloaded and in-memory models rank identically.
    for d in ds.dialogues.iter().take(5) {
        let a = run_session(&out.model, &ds.corpus, d, None).unwrap();
        let b = run_session(&back.model, &ds.corpus, d, None).unwrap();
        assert_eq!(a, b);
    }

    let bytes = ckpt.to_bytes();
    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
    assert!(load_checkpoint(dir.path().join("absent")).is_err());
}

#[test]
fn training_rejects_bad_data() {
    let ds = data(4);
    assert!(matches!(train(&quick(1, 0), &ds.corpus, &[]), Err(Error::Data(_))));
    let mut dl = ds.dialogues.clone();
    dl[3].target_id = "nowhere".into();
    assert!(matches!(train(&quick(1, 0), &ds.corpus, &dl), Err(Error::Data(_))));
    let bad = TrainConfig {
        batch_size: 0,
        ..quick(1, 0)
    };
    assert!(matches!(train(&bad, &ds.corpus, &ds.dialogues), Err(Error::Config(_))));
}
