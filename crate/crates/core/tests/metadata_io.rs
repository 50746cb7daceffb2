use std::fs;
use std::path::{Path, PathBuf};

use deeppipe_core::metadata::{generate_synthetic, MetaDataset, Split, SyntheticSpec};
use deeppipe_core::space::{PreprocessStats, SearchSpace};
use deeppipe_core::Error;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/meta")
}

fn copy_fixture(to: &Path) {
    for f in MetaDataset::files(fixture()) {
        fs::copy(&f, to.join(f.file_name().unwrap())).unwrap();
    }
}

#[test]
fn fixture_loads_in_accuracy_orientation() {
    let meta = MetaDataset::load_dir(fixture()).unwrap();
    assert_eq!(meta.tasks().len(), 10);
    // Pipeline 17 has no finite entry anywhere.
    assert_eq!(meta.dropped_pipelines(), 1);
    assert_eq!(meta.n_pipelines(), 39);
    assert!(!meta.pipelines().ids.contains(&17));
    assert!(meta.has_cost());
    // task00,1 stores error 0.18.
    let a = meta.oracle("task00", 1).unwrap().unwrap();
    assert!((a - 0.82).abs() < 1e-12);
    // (pid * 7 + t) % 11 == 0 cells are absent: pid 11, task00.
    assert_eq!(meta.oracle("task00", 11).unwrap(), None);
    assert_eq!(meta.splits().get(Split::Train).len(), 6);
    assert_eq!(meta.split_indices(Split::Test).len(), 2);
    let t = meta.task_index("task03").unwrap();
    let best = meta.observed(t).iter().map(|o| o.1).fold(f64::MIN, f64::max);
    assert_eq!(meta.y_max(t), Some(best));
}

#[test]
fn save_load_round_trip() {
    let meta = MetaDataset::load_dir(fixture()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    meta.save_dir(dir.path()).unwrap();
    let back = MetaDataset::load_dir(dir.path()).unwrap();
    assert_eq!(back.tasks(), meta.tasks());
    assert_eq!(back.pipelines(), meta.pipelines());
    for t in 0..meta.tasks().len() {
        let (a, b) = (meta.task_row(t), back.task_row(t));
        for (x, y) in a.iter().zip(b) {
            assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
        }
        for p in 0..meta.n_pipelines() {
            assert_eq!(meta.cost(t, p), back.cost(t, p));
        }
    }
    // A second save is byte-identical.
    let dir2 = tempfile::tempdir().unwrap();
    back.save_dir(dir2.path()).unwrap();
    for f in MetaDataset::files(dir.path()) {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(&f).unwrap(), fs::read(dir2.path().join(name)).unwrap());
    }
}

#[test]
fn synthetic_round_trip() {
    let space = SearchSpace::load(fixture().join("space.json")).unwrap();
    let spec = SyntheticSpec {
        missing_fraction: 0.2,
        with_cost: true,
        ..SyntheticSpec::new(8, 30)
    };
    let (meta, _) = generate_synthetic(&space, &spec, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    meta.save_dir(dir.path()).unwrap();
    let back = MetaDataset::load_dir(dir.path()).unwrap();
    assert_eq!(back.pipelines(), meta.pipelines());
    assert_eq!(back.splits(), meta.splits());
    let stats = meta.fit_preprocess().unwrap();
    assert_eq!(back.fit_preprocess().unwrap(), stats);
    for row in meta.scaled_features(&stats).unwrap() {
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn preprocess_stats_round_trip() {
    let meta = MetaDataset::load_dir(fixture()).unwrap();
    let stats = meta.fit_preprocess().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.json");
    stats.save(&path).unwrap();
    assert_eq!(PreprocessStats::load(&path).unwrap(), stats);
}

#[test]
fn malformed_pipeline_row_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("pipelines.csv");
    let text = fs::read_to_string(&path).unwrap();
    let broken: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 4 {
                l.replacen(",0,", ",zero,", 1)
            } else {
                l.to_string()
            }
        })
        .collect();
    fs::write(&path, broken.join("\n") + "\n").unwrap();
    match MetaDataset::load_dir(dir.path()) {
        Err(Error::Csv { line, message, .. }) => {
            assert_eq!(line, 5);
            assert!(message.contains("zero"), "{message}");
        }
        other => panic!("expected a CSV error, got {other:?}"),
    }
}

#[test]
fn unknown_pipeline_in_evaluations_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("evaluations.csv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("task00,999,0.5,1.0\n");
    fs::write(&path, text).unwrap();
    let err = MetaDataset::load_dir(dir.path()).unwrap_err();
    assert!(err.to_string().contains("999"), "{err}");
}

#[test]
fn orientation_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("meta.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"error\"", "\"accuracy\"");
    fs::write(&path, text).unwrap();
    assert!(matches!(
        MetaDataset::load_dir(dir.path()),
        Err(Error::Csv { line: 1, .. })
    ));
}

#[test]
fn space_edit_invalidates_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    copy_fixture(dir.path());
    let path = dir.path().join("space.json");
    let text = fs::read_to_string(&path).unwrap().replace("1000.0", "100.0");
    fs::write(&path, text).unwrap();
    assert!(matches!(
        MetaDataset::load_dir(dir.path()),
        Err(Error::Validation(_))
    ));
}
