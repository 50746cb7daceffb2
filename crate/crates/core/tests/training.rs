use deeppipe_core::gp::KernelParams;
use deeppipe_core::metadata::{generate_synthetic, MetaDataset, SyntheticSpec};
use deeppipe_core::network::{ArchitectureSpec, EmbeddingNetwork, TrainableSelector};
use deeppipe_core::space::SearchSpace;
use deeppipe_core::train::{meta_train, TrainConfig, TrainState, TrainingData};

fn setup() -> (MetaDataset, TrainingData) {
    let space = SearchSpace::load(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/spaces/synthetic.json"
    ))
    .unwrap();
    let (meta, _) = generate_synthetic(&space, &SyntheticSpec::new(10, 60), 3).unwrap();
    let stats = meta.fit_preprocess().unwrap();
    let data = TrainingData::from_meta(&meta, &stats).unwrap();
    (meta, data)
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 20,
        learning_rate: 1e-3,
        patience: 1000.min(epochs),
        val_interval: 10,
        val_batch_size: None,
        seed: 4,
    }
}

fn fresh(meta: &MetaDataset) -> (EmbeddingNetwork, KernelParams) {
    let net = EmbeddingNetwork::build(meta.space(), &ArchitectureSpec::new(2, 1), 1).unwrap();
    (net, KernelParams::default())
}

#[test]
fn same_seed_same_result() {
    let (meta, data) = setup();
    let run = || {
        let (mut net, mut k) = fresh(&meta);
        let out = meta_train(&mut net, &mut k, &data, &config(30), None, &mut |_| Ok(())).unwrap();
        (net.params().to_vec(), k, out.best_val)
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (meta, data) = setup();
    let cfg = config(40);

    let (mut full_net, mut full_k) = fresh(&meta);
    let mut states: Vec<TrainState> = Vec::new();
    let full = meta_train(&mut full_net, &mut full_k, &data, &cfg, None, &mut |s| {
        states.push(s.clone());
        Ok(())
    })
    .unwrap();

    let mid = states.iter().find(|s| s.epoch == 20).expect("state at epoch 20").clone();
    // Round-trip through JSON as the CLI does.
    let mid: TrainState = serde_json::from_str(&serde_json::to_string(&mid).unwrap()).unwrap();
    let (mut net, mut k) = fresh(&meta);
    let resumed = meta_train(&mut net, &mut k, &data, &cfg, Some(mid), &mut |_| Ok(())).unwrap();

    assert_eq!(net.params(), full_net.params());
    assert_eq!(k, full_k);
    assert_eq!(resumed.best_epoch, full.best_epoch);
    assert_eq!(resumed.best_val, full.best_val);
    let strip = |rows: &[deeppipe_core::train::LogRow]| {
        rows.iter()
            .map(|r| (r.epoch, r.mean_train_nll, r.mean_val_nll))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&resumed.log), strip(&full.log));
}

#[test]
fn frozen_groups_untouched_by_meta_training() {
    let (meta, data) = setup();
    let (mut net, mut k) = fresh(&meta);
    net.set_trainable(&TrainableSelector::Aggregation).unwrap();
    let before = net.clone();
    meta_train(&mut net, &mut k, &data, &config(20), None, &mut |_| Ok(())).unwrap();
    for g in before.groups() {
        let r = g.range();
        if g.trainable {
            assert_ne!(net.params()[r.clone()], before.params()[r]);
        } else {
            assert_eq!(net.params()[r.clone()], before.params()[r]);
        }
    }
}

#[test]
fn training_lowers_validation_loss() {
    let (meta, data) = setup();
    let (mut net, mut k) = fresh(&meta);
    let out = meta_train(&mut net, &mut k, &data, &config(100), None, &mut |_| Ok(())).unwrap();
    let first = out.log[0].mean_val_nll.unwrap();
    assert!(out.best_val < first, "best {} vs initial {first}", out.best_val);
}

#[test]
fn bad_config_rejected_before_training() {
    let (meta, data) = setup();
    let (mut net, mut k) = fresh(&meta);
    let before = net.params().to_vec();
    let cfg = TrainConfig {
        learning_rate: -1.0,
        ..config(10)
    };
    assert!(meta_train(&mut net, &mut k, &data, &cfg, None, &mut |_| Ok(())).is_err());
    assert_eq!(net.params(), &before[..]);
}
