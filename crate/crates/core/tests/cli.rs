use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn orthofair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthofair"))
        .args(args)
        .current_dir(root())
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = orthofair(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = orthofair(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_synthetic(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.toml");
    let text = format!(
        r#"
[data.synthetic]
rows = 400
rho = 0.5
dim = 6
seed = 1

[model]
trunk_hidden = [16]
sensitive_hidden = [8]

[train]
epochs = 3
step_size = 1
gamma_od = 0.9

[probe]
hidden = [8]
epochs = 3

[ablation]
seeds = [0]
{extra}
"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn preprocess_german_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.ofds");
    let b = tmp.path().join("b.ofds");
    for out in [&a, &b] {
        ok(&["preprocess", "--csv", "data/german/german.csv", "--schema", "data/schemas/german.toml", "--out", s(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let cached = orthofair::data::Dataset::read_cache(&a).unwrap();
    assert_eq!(cached.rows(), 1000);
    assert!(tmp.path().join("a.ofds.manifest.json").is_file());
}

#[test]
fn preprocess_names_a_missing_target_column() {
    let tmp = tempfile::tempdir().unwrap();
    let schema = fs::read_to_string(root().join("data/schemas/german.toml"))
        .unwrap()
        .replacen("column = \"credit\"", "column = \"no_such_column\"", 1);
    let path = tmp.path().join("schema.toml");
    fs::write(&path, schema).unwrap();
    let out = tmp.path().join("x.ofds");
    let err = fails_with(&["preprocess", "--csv", "data/german/german.csv", "--schema", s(&path), "--out", s(&out)], 3);
    assert!(err.contains("no_such_column"), "{err}");
}

#[test]
fn shipped_german_config_trains_and_variant_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["train", "--config", "german-full", "--variant", "baseline", "--out-dir", s(tmp.path())]);
    let history = fs::read_to_string(tmp.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 201);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["model"]["variant"], "baseline");
    assert_eq!(manifest["created_unix"], 1_700_000_000);
    let hash = manifest["outputs"]["history.csv"].as_str().unwrap();
    assert_eq!(hash, orthofair::data::content_hash(history.as_bytes()));
}

#[test]
fn invalid_gamma_is_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_synthetic(tmp.path(), "").to_string_lossy().into_owned();
    let text = fs::read_to_string(&cfg).unwrap().replace("gamma_od = 0.9", "gamma_od = 0.0");
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("run");
    let err = fails_with(&["train", "--config", &cfg, "--out-dir", s(&out)], 2);
    assert!(err.contains("gamma_od"), "{err}");
    assert!(!out.exists());
}

#[test]
fn exit_codes_separate_config_data_and_numeric_failures() {
    let tmp = tempfile::tempdir().unwrap();
    fails_with(&["train", "--config", "no-such-preset"], 2);

    let cache = tmp.path().join("bad.toml");
    let garbage = tmp.path().join("garbage.ofds");
    fs::write(&garbage, b"not a cache").unwrap();
    fs::write(&cache, format!("[data]\ncache = {:?}\n", garbage)).unwrap();
    fails_with(&["train", "--config", s(&cache), "--out-dir", s(&tmp.path().join("a"))], 3);

    let cfg = small_synthetic(tmp.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("epochs = 3\nstep_size", "epochs = 3\nlr = 1e200\nstep_size");
    fs::write(&cfg, text).unwrap();
    fails_with(&["train", "--config", s(&cfg), "--out-dir", s(&tmp.path().join("b"))], 4);
}

#[test]
fn training_twice_gives_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_synthetic(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["train", "--config", s(&cfg), "--seed", "5", "--out-dir", s(out)]);
    }
    assert_eq!(dir_contents(&a), dir_contents(&b));
}

#[test]
fn ablate_writes_all_six_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_synthetic(tmp.path(), "");
    let out = tmp.path().join("ablate");
    ok(&["ablate", "--config", s(&cfg), "--out-dir", s(&out), "--parallel", "2"]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7, "{summary}");
    for v in orthofair::model::AblationVariant::ALL {
        assert!(summary.lines().any(|l| l.starts_with(&format!("{v},"))), "{v}");
    }
    let cells = fs::read_to_string(out.join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 7);
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn one_cell_sweep_matches_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_synthetic(
        tmp.path(),
        "[sweep]\nseeds = [2]\nlambda_od = [0.1]\nlambda_e = [1.0]\ngamma_od = [0.9]\ngamma_e = [1.0]\n",
    );
    let (ev, sw) = (tmp.path().join("ev"), tmp.path().join("sw"));
    ok(&["evaluate", "--config", s(&cfg), "--seed", "2", "--out-dir", s(&ev)]);
    ok(&["sweep", "--config", s(&cfg), "--out-dir", s(&sw)]);

    let result: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("result.json")).unwrap()).unwrap();
    let sweep = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let row: Vec<&str> = sweep.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], "2");
    assert_eq!(row[5].parse::<f64>().unwrap(), result["target_accuracy"].as_f64().unwrap());
    assert_eq!(row[6].parse::<f64>().unwrap(), result["sensitive_accuracy"].as_f64().unwrap());
}

#[test]
fn evaluate_from_checkpoint_matches_training_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_synthetic(tmp.path(), "");
    let (tr, a, b) = (tmp.path().join("tr"), tmp.path().join("a"), tmp.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--seed", "4", "--out-dir", s(&tr)]);
    let ckpt = tr.join("checkpoint.json");
    ok(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out-dir", s(&a)]);
    ok(&["evaluate", "--config", s(&cfg), "--seed", "4", "--out-dir", s(&b)]);
    assert_eq!(fs::read(a.join("result.csv")).unwrap(), fs::read(b.join("result.csv")).unwrap());
}

#[test]
fn exporting_z_s_of_the_baseline_is_a_variant_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_synthetic(tmp.path(), "");
    let err = fails_with(
        &["export-embeddings", "--config", s(&cfg), "--variant", "baseline", "--embedding", "zs-mean", "--out-dir", s(&tmp.path().join("e"))],
        2,
    );
    assert!(err.contains("baseline"), "{err}");

    let out = tmp.path().join("full");
    ok(&["export-embeddings", "--config", s(&cfg), "--embedding", "zs-mean", "--out-dir", s(&out)]);
    let csv = fs::read_to_string(out.join("embeddings.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("z0,z1,y,s,split"));
    assert_eq!(csv.lines().count(), 401);
}
