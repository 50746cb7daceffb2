use deeppipe_core::gp::KernelParams;
use deeppipe_core::network::{
    ArchitectureSpec, EmbeddingNetwork, GroupId, Input, TrainableSelector,
};
use deeppipe_core::space::{
    ActiveMask, AlgorithmSpec, HyperparameterSpec, PreprocessStats, SearchSpace, Stage,
};
use deeppipe_core::train::{fine_tune, FineTuneConfig, FineTuneMode};
use deeppipe_core::seeded_rng;
use proptest::prelude::*;

fn one_stage_two_algos() -> SearchSpace {
    SearchSpace::new(vec![Stage {
        name: "m".into(),
        algorithms: vec![
            AlgorithmSpec::new("a", vec![HyperparameterSpec::continuous("p", 0.0, 1.0)]),
            AlgorithmSpec::new("b", vec![HyperparameterSpec::continuous("q", 0.0, 1.0)]),
        ],
    }])
    .unwrap()
}

fn synthetic_space() -> SearchSpace {
    SearchSpace::load(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/spaces/synthetic.json"))
        .unwrap()
}

fn sample_rows(space: &SearchSpace, n: usize, seed: u64) -> Vec<(Vec<f64>, ActiveMask)> {
    let stats = PreprocessStats::from_space_bounds(space);
    let mut rng = seeded_rng(seed, 0);
    (0..n)
        .map(|_| {
            let c = space.sample(&mut rng);
            let (f, m) = space.flatten(&c).unwrap();
            (stats.apply(&f, &m).unwrap().values, m)
        })
        .collect()
}

// One stage, two one-slot algorithms, F = 2, one encoder layer and one
// aggregation layer: 2 * (1 * 2) encoder weights plus 2 * 2 aggregation
// weights.
#[test]
fn hand_counted_weights() {
    let arch = ArchitectureSpec {
        aggregation_layers: 1,
        embedding_dim: 3,
        ..ArchitectureSpec::new(2, 1)
    };
    let net = EmbeddingNetwork::build(&one_stage_two_algos(), &arch, 0).unwrap();
    let c = net.parameter_count();
    assert_eq!(c.weights, 8);
    assert_eq!(c.biases, 2 + 2 + 2 + 3);
    assert_eq!(c.head_weights, 2 * 3);
    assert_eq!(c.total(), net.params().len());
}

#[test]
fn identity_weights_pass_features_through() {
    let space = one_stage_two_algos();
    let arch = ArchitectureSpec {
        aggregation_layers: 1,
        embedding_dim: 2,
        ..ArchitectureSpec::new(2, 0)
    };
    let mut net = EmbeddingNetwork::build(&space, &arch, 3).unwrap();
    let layers = net.group(GroupId::Aggregation).unwrap().layers.clone();
    let p = net.params_mut();
    p.iter_mut().for_each(|v| *v = 0.0);
    for l in &layers {
        assert_eq!((l.inputs, l.outputs), (2, 2));
        let w = l.weight_range();
        p[w.start] = 1.0;
        p[w.start + 3] = 1.0;
    }
    let x = [0.25, 0.0];
    assert_eq!(net.forward(&x, &ActiveMask::new(vec![0])).unwrap(), vec![0.25, 0.0]);
    let x = [0.0, 0.75];
    assert_eq!(net.forward(&x, &ActiveMask::new(vec![1])).unwrap(), vec![0.0, 0.75]);
}

#[test]
fn batch_matches_row_by_row() {
    let space = synthetic_space();
    for le in 0..3 {
        let net = EmbeddingNetwork::build(&space, &ArchitectureSpec::new(4, le), 11).unwrap();
        let rows = sample_rows(&space, 40, le as u64);
        let inputs: Vec<Input> = rows
            .iter()
            .map(|(f, m)| Input { features: f, mask: m })
            .collect();
        let batch = net.forward_batch(&inputs).unwrap();
        let all = net.embed_all(&inputs).unwrap();
        for (k, (f, m)) in rows.iter().enumerate() {
            let single = net.forward(f, m).unwrap();
            assert_eq!(single, batch.embeddings[k]);
            assert_eq!(single, all[k]);
        }
    }
}

#[test]
fn inactive_encoders_do_not_affect_embedding() {
    let space = synthetic_space();
    let net = EmbeddingNetwork::build(&space, &ArchitectureSpec::new(4, 2), 5).unwrap();
    let rows = sample_rows(&space, 30, 9);
    for (f, m) in &rows {
        let base = net.forward(f, m).unwrap();
        let mut other = net.clone();
        for s in 0..space.n_stages() {
            for a in 0..space.n_algorithms(s) {
                let g = net.encoder_group_of(s, a).unwrap();
                if Some(g) == net.encoder_group_of(s, m.active[s]) {
                    continue;
                }
                let r = net.group(g).unwrap().range();
                other.params_mut()[r].iter_mut().for_each(|v| *v += 7.5);
            }
        }
        assert_eq!(other.forward(f, m).unwrap(), base);
    }
}

#[test]
fn network_fine_tune_leaves_frozen_groups_bit_equal() {
    let space = synthetic_space();
    let mut net = EmbeddingNetwork::build(&space, &ArchitectureSpec::new(4, 1), 2).unwrap();
    net.set_trainable(&TrainableSelector::Encoder { stage: 1, algorithm: 1 })
        .unwrap();
    let before = net.clone();
    let rows = sample_rows(&space, 25, 4);
    let inputs: Vec<Input> = rows
        .iter()
        .map(|(f, m)| Input { features: f, mask: m })
        .collect();
    let y: Vec<f64> = (0..rows.len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let mut kernel = KernelParams::default();
    let cfg = FineTuneConfig {
        steps: 20,
        learning_rate: 1e-2,
        mode: FineTuneMode::Network,
    };
    fine_tune(&mut net, &mut kernel, &inputs, &y, &cfg).unwrap();
    let target = net.encoder_group_of(1, 1).unwrap();
    let mut moved = false;
    for g in before.groups() {
        let r = g.range();
        if g.id == target {
            moved |= net.params()[r.clone()] != before.params()[r];
        } else {
            assert_eq!(net.params()[r.clone()], before.params()[r], "{:?} changed", g.id);
        }
    }
    assert!(moved, "trainable encoder did not move");
}

#[test]
fn added_encoder_keeps_old_embeddings() {
    let full = synthetic_space();
    let stage = full.n_stages() - 1;
    let last = full.n_algorithms(stage) - 1;
    let spec = full.stages()[stage].algorithms[last].clone();
    let reduced = full.without_algorithm(stage, &spec.name).unwrap();
    let net = EmbeddingNetwork::build(&reduced, &ArchitectureSpec::new(4, 1), 8).unwrap();
    let grown = net.add_algorithm_encoder(stage, spec, 99).unwrap();
    assert_eq!(grown.space().fingerprint(), full.fingerprint());
    let reduced_stats = PreprocessStats::from_space_bounds(&reduced);
    let full_stats = PreprocessStats::from_space_bounds(&full);
    let mut rng = seeded_rng(1, 0);
    for _ in 0..30 {
        let c = reduced.sample(&mut rng);
        let (f, m) = reduced.flatten(&c).unwrap();
        let old = net.forward(&reduced_stats.apply(&f, &m).unwrap().values, &m).unwrap();
        let (ff, fm) = full.flatten(&c).unwrap();
        let new = grown
            .forward(&full_stats.apply(&ff, &fm).unwrap().values, &fm)
            .unwrap();
        assert_eq!(old, new);
    }
    let trainable: Vec<GroupId> = grown.groups().filter(|g| g.trainable).map(|g| g.id).collect();
    assert_eq!(trainable, vec![grown.encoder_group_of(stage, last).unwrap()]);
}

#[test]
fn checkpoint_round_trip() {
    let space = synthetic_space();
    let arch = ArchitectureSpec {
        append_one_hot: true,
        ..ArchitectureSpec::new(6, 1)
    };
    let mut net = EmbeddingNetwork::build(&space, &arch, 21).unwrap();
    net.set_trainable(&TrainableSelector::Aggregation).unwrap();
    let kernel = KernelParams::from_values(0.7, 1.3, 0.01).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    net.to_checkpoint(&kernel).save(&path).unwrap();
    let ck = deeppipe_core::network::Checkpoint::load(&path).unwrap();
    let (back, k2) = EmbeddingNetwork::from_checkpoint(&space, &ck).unwrap();
    assert_eq!(back.params(), net.params());
    assert_eq!(back.trainable_mask(), net.trainable_mask());
    assert_eq!(k2, kernel);
    let other = synthetic_space().without_algorithm(0, "Passthrough").unwrap();
    assert!(EmbeddingNetwork::from_checkpoint(&other, &ck).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embeddings_deterministic_in_seed(seed in 0u64..1000, le in 0usize..3, f in 1usize..5) {
        let space = synthetic_space();
        let a = EmbeddingNetwork::build(&space, &ArchitectureSpec::new(f, le), seed).unwrap();
        let b = EmbeddingNetwork::build(&space, &ArchitectureSpec::new(f, le), seed).unwrap();
        prop_assert_eq!(a.params(), b.params());
        for (x, m) in sample_rows(&space, 5, seed) {
            let z = a.forward(&x, &m).unwrap();
            prop_assert_eq!(z.len(), 20);
            prop_assert!(z.iter().all(|v| v.is_finite()));
        }
    }
}
