use std::path::PathBuf;

use orthofair::data::{load_csv, majority_baseline, DatasetSchema, SplitTag};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(name: &str) -> orthofair::data::Dataset {
    let schema = DatasetSchema::load(&root().join(format!("data/schemas/{name}.toml"))).unwrap();
    load_csv(&root().join(format!("data/{name}/{name}.csv")), &schema).unwrap()
}

#[test]
fn german_has_one_thousand_rows() {
    let ds = load("german");
    ds.validate().unwrap();
    assert_eq!(ds.report.rows_read, 1000);
    assert_eq!(ds.rows(), 1000);
    assert_eq!(ds.indices(SplitTag::Train).len(), 800);
    assert!(!ds.feature_names.iter().any(|f| f.starts_with("status_sex")));
    let test = ds.part(SplitTag::Test);
    let maj = majority_baseline(&test.s).unwrap();
    assert!((0.65..0.73).contains(&maj), "{maj}");
}

#[test]
fn adult_has_45222_rows_and_a_67_percent_majority() {
    let ds = load("adult");
    ds.validate().unwrap();
    assert_eq!(ds.rows(), 45_222);
    assert_eq!(ds.report.dropped_missing, 48_842 - 45_222);
    let test = ds.part(SplitTag::Test);
    let maj = majority_baseline(&test.s).unwrap();
    assert!((maj - 0.67).abs() < 0.01, "{maj}");

    // standardization statistics come from the training rows
    let train = ds.indices(SplitTag::Train);
    let age = ds.feature_names.iter().position(|f| f == "age").unwrap();
    let mean: f64 = train.iter().map(|&i| ds.x.get(i, age)).sum::<f64>() / train.len() as f64;
    assert!(mean.abs() < 1e-9);
}

#[test]
fn loading_twice_is_identical() {
    let (a, b) = (load("german"), load("german"));
    assert_eq!(a.x, b.x);
    assert_eq!(a.provenance, b.provenance);
}
