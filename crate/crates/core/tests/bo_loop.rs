use std::collections::HashSet;

use deeppipe_core::bo::{
    bo_run, meta_initial_design, rank_and_regret, BoConfig, CandidatePool, Surrogate,
};
use deeppipe_core::gp::KernelParams;
use deeppipe_core::metadata::{MetaDataset, Split};
use deeppipe_core::network::{ArchitectureSpec, EmbeddingNetwork};
use deeppipe_core::train::{FineTuneConfig, FineTuneMode};

fn fixture() -> MetaDataset {
    MetaDataset::load_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/meta")).unwrap()
}

fn run(meta: &MetaDataset, s: &Surrogate, task: usize, cfg: &BoConfig) -> deeppipe_core::bo::BoHistory {
    let stats = meta.fit_preprocess().unwrap();
    let pool = CandidatePool::from_meta(meta, &stats).unwrap();
    let init = meta_initial_design(meta, 3).unwrap();
    let oracle = |i: usize| {
        let p = meta.pipelines().index_of()[&pool.ids[i]];
        meta.accuracy(task, p).map(|a| (a, meta.cost(task, p)))
    };
    bo_run(s, &pool, &oracle, &init, cfg).unwrap()
}

#[test]
fn every_mode_observes_distinct_pipelines() {
    let meta = fixture();
    let net = EmbeddingNetwork::build(meta.space(), &ArchitectureSpec::new(2, 1), 0).unwrap();
    let cfg = BoConfig {
        iterations: 12,
        fine_tune: FineTuneConfig {
            steps: 10,
            ..FineTuneConfig::default()
        },
        ..BoConfig::default()
    };
    let task = meta.split_indices(Split::Test)[0];
    let init = meta_initial_design(&meta, 3).unwrap();
    for s in [
        Surrogate::deeppipe(&net, KernelParams::default()),
        Surrogate::raw_gp(),
        Surrogate::random(),
    ] {
        let h = run(&meta, &s, task, &cfg);
        let ids: Vec<u64> = h.observations.iter().map(|o| o.pipeline_id).collect();
        assert_eq!(ids.len(), 15, "{:?}", s.mode);
        assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
        let task_id = &meta.tasks()[task];
        let available: Vec<u64> = init
            .iter()
            .copied()
            .filter(|&id| meta.oracle(task_id, id).unwrap().is_some())
            .collect();
        assert_eq!(&ids[..available.len()], &available[..]);
        assert!(h.incumbent.windows(2).all(|w| w[1] >= w[0]));
        assert!(h.best().unwrap() <= meta.y_max(task).unwrap());
        assert_eq!(run(&meta, &s, task, &cfg).observations, h.observations);
    }
}

#[test]
fn exhausting_the_pool_finds_the_optimum() {
    let meta = fixture();
    let task = meta.split_indices(Split::Test)[1];
    let cfg = BoConfig {
        iterations: 200,
        ..BoConfig::default()
    };
    let h = run(&meta, &Surrogate::random(), task, &cfg);
    assert_eq!(h.best(), meta.y_max(task));
    assert_eq!(h.observations.len() + h.skipped.len(), meta.n_pipelines());
}

#[test]
fn network_fine_tune_changes_the_trajectory_not_the_start() {
    let meta = fixture();
    let net = EmbeddingNetwork::build(meta.space(), &ArchitectureSpec::new(2, 1), 0).unwrap();
    let task = meta.split_indices(Split::Test)[0];
    let base = BoConfig {
        iterations: 10,
        ..BoConfig::default()
    };
    let net_cfg = BoConfig {
        fine_tune: FineTuneConfig {
            mode: FineTuneMode::Network,
            ..FineTuneConfig::default()
        },
        ..base.clone()
    };
    let s = Surrogate::deeppipe(&net, KernelParams::default());
    let a = run(&meta, &s, task, &base);
    let b = run(&meta, &s, task, &net_cfg);
    assert_eq!(a.observations[..3], b.observations[..3]);
}

#[test]
fn regret_of_perfect_method_is_zero() {
    let methods = vec!["a".to_string(), "b".to_string()];
    let traces = vec![vec![vec![0.5, 0.9, 0.9]], vec![vec![0.5, 0.6, 0.7]]];
    let t = rank_and_regret(&methods, &traces, &[0.9]).unwrap();
    assert_eq!(t.mean_regret[0], vec![0.4, 0.0, 0.0]);
    assert!((t.mean_regret[1][2] - 0.2).abs() < 1e-12);
    assert_eq!(t.mean_rank[0], vec![1.5, 1.0, 1.0]);
    assert_eq!(t.mean_rank[1], vec![1.5, 2.0, 2.0]);
}
