use deeppipe_core::seeded_rng;
use deeppipe_core::space::{
    HyperparameterKind, HyperparameterValue, PipelineTable, PreprocessStats, SearchSpace,
};
use proptest::prelude::*;

fn spaces() -> Vec<SearchSpace> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    ["spaces/synthetic.json", "spaces/tensor_oboe.json", "spaces/pmf.json", "spaces/zap.json", "meta/space.json"]
        .iter()
        .map(|f| SearchSpace::load(format!("{dir}/{f}")).unwrap())
        .collect()
}

fn close(a: &HyperparameterValue, b: &HyperparameterValue) -> bool {
    match (a, b) {
        (HyperparameterValue::Real(x), HyperparameterValue::Real(y)) => {
            (x - y).abs() <= 1e-12 * x.abs().max(1.0)
        }
        _ => a == b,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_unflatten_round_trip(which in 0usize..5, seed in any::<u64>()) {
        let space = &spaces()[which];
        let mut rng = seeded_rng(seed, 0);
        let c = space.sample(&mut rng);
        space.validate(&c).unwrap();
        let (f, m) = space.flatten(&c).unwrap();
        prop_assert_eq!(f.len(), space.flat_width());
        prop_assert_eq!(&m.active, &c.algorithms);
        let back = space.unflatten(&f, &m).unwrap();
        prop_assert_eq!(&back.algorithms, &c.algorithms);
        for (va, vb) in back.values.iter().zip(&c.values) {
            prop_assert_eq!(va.len(), vb.len());
            for (a, b) in va.iter().zip(vb) {
                prop_assert!(close(a, b), "{:?} vs {:?}", a, b);
            }
        }
    }

    #[test]
    fn scaled_features_in_unit_interval(which in 0usize..5, seed in any::<u64>()) {
        let space = &spaces()[which];
        let mut rng = seeded_rng(seed, 1);
        let rows: Vec<_> = (0..20).map(|_| space.flatten(&space.sample(&mut rng)).unwrap()).collect();
        let (feats, masks): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let stats = PreprocessStats::fit(space, &feats, &masks).unwrap();
        for (f, m) in feats.iter().zip(&masks) {
            let s = stats.apply(f, m).unwrap();
            prop_assert!(s.values.iter().all(|v| (0.0..=1.0).contains(v)));
            // Blocks of inactive algorithms stay zero.
            for st in 0..space.n_stages() {
                for a in 0..space.n_algorithms(st) {
                    if a != m.active[st] {
                        let r = space.stage_layout(st).algorithms[a].range();
                        prop_assert!(s.values[r].iter().all(|v| *v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn table_csv_round_trip(which in 0usize..5, seed in any::<u64>()) {
        let space = &spaces()[which];
        let mut rng = seeded_rng(seed, 2);
        let mut table = PipelineTable { ids: vec![], rows: vec![], masks: vec![] };
        for i in 0..10u64 {
            let (f, m) = space.flatten(&space.sample(&mut rng)).unwrap();
            table.ids.push(i * 3 + 1);
            table.rows.push(f);
            table.masks.push(m);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        table.write_csv(space, &path).unwrap();
        let back = PipelineTable::read_csv(space, &path).unwrap();
        prop_assert_eq!(back, table);
    }
}

#[test]
fn json_round_trip_and_fingerprint_stable() {
    for space in spaces() {
        let back = SearchSpace::from_json(&space.to_json()).unwrap();
        assert_eq!(back.fingerprint(), space.fingerprint());
        assert_eq!(back.feature_names(), space.feature_names());
    }
}

#[test]
fn integer_values_stay_integer() {
    let space = &spaces()[4];
    let mut rng = seeded_rng(0, 0);
    for _ in 0..50 {
        let c = space.sample(&mut rng);
        for (s, (a, vals)) in c.algorithms.iter().zip(&c.values).enumerate() {
            let algo = &space.stages()[s].algorithms[*a];
            for (hp, v) in algo.hyperparameters.iter().zip(vals) {
                match (&hp.kind, v) {
                    (HyperparameterKind::Integer { low, high }, HyperparameterValue::Int(x)) => {
                        assert!(low <= x && x <= high)
                    }
                    (HyperparameterKind::Integer { .. }, other) => panic!("{other:?}"),
                    _ => {}
                }
            }
        }
    }
}
