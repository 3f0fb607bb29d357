use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msca_cli::spec::validate_against_schema;
use msca_cli::{ExperimentSpec, SCHEMA};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_msca"));
    c.env("MSCA_NUM_THREADS", "1");
    c
}

fn specs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

/// One epoch of a 2-block model on 4×16×16 clips.
fn small_spec(out: &Path) -> Value {
    let text = std::fs::read_to_string(specs_dir().join("ablation-small.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["name"] = json!("small");
    v["model"]["depth"] = json!(2);
    v["model"]["block_kinds"] = json!(["msca-kv", "msca-kv"]);
    v["train"]["epochs"] = json!(2);
    v["output_dir"] = json!(out);
    v
}

fn write_spec(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("spec.json");
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_run_directory_and_never_overwrites() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let spec = write_spec(tmp.path(), &small_spec(&out));
    let spec = spec.to_str().unwrap();
    let first = run(&["train", "--spec", spec, "--quiet"]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let dir = out.join("small");
    for f in [
        "spec.json",
        "train_log.csv",
        "summary.json",
        "checkpoint/manifest.json",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let second = run(&["train", "--spec", spec, "--quiet"]);
    assert_eq!(second.status.code(), Some(0));
    let again = out.join("small-1");
    assert!(again.is_dir());
    assert_eq!(
        std::fs::read(dir.join("summary.json")).unwrap(),
        std::fs::read(again.join("summary.json")).unwrap()
    );

    let eval = run(&["eval", "--run", dir.to_str().unwrap(), "--views", "2x2"]);
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    assert!(dir.join("eval-2x2-seed0.json").is_file());
}

#[test]
fn overrides_land_in_the_spec_copy() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), &small_spec(&tmp.path().join("ignored")));
    let out = tmp.path().join("elsewhere");
    let o = run(&[
        "train",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "--views",
        "1x2",
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let copy = ExperimentSpec::load(&out.join("small/spec.json")).unwrap();
    assert_eq!(
        (copy.model.seed, copy.train.seed, copy.eval.views.seed),
        (9, 9, 9)
    );
    assert_eq!((copy.eval.views.clips, copy.eval.views.crops), (1, 2));
    assert!(!tmp.path().join("ignored").exists());
}

fn expect_invalid(v: &Value, field: &str) {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), v);
    let o = run(&["train", "--spec", spec.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(
        stderr(&o).contains(&format!("`{field}`")),
        "{field}: {}",
        stderr(&o)
    );
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn invalid_specs_exit_2_naming_the_field() {
    let base = small_spec(Path::new("out"));
    let mut missing = base.clone();
    missing["train"].as_object_mut().unwrap().remove("epochs");
    expect_invalid(&missing, "train.epochs");

    let mut unknown = base.clone();
    unknown["model"]["dropout"] = json!(0.1);
    expect_invalid(&unknown, "model.dropout");

    let mut wrong_type = base.clone();
    wrong_type["train"]["base_lr"] = json!("fast");
    expect_invalid(&wrong_type, "train.base_lr");

    let mut bad_variant = base.clone();
    bad_variant["model"]["block_kinds"] = json!(["msca-kv", "msca-zz"]);
    expect_invalid(&bad_variant, "model.block_kinds.1");

    let mut mismatch = base.clone();
    mismatch["task"]["frames"] = json!(3);
    expect_invalid(&mismatch, "task.frames");

    let mut too_many = base;
    too_many["model"]["shift"] = json!({"back": 5, "fwd": 5});
    expect_invalid(&too_many, "model");
}

#[test]
fn unreadable_spec_and_bad_views_exit_2() {
    let o = run(&["train", "--spec", "/nonexistent/spec.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--spec", "x.json", "--views", "3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--spec", "x.json", "--views", "2x4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_finite_loss_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let mut v = small_spec(&out);
    v["train"]["base_lr"] = json!(1e250);
    let spec = write_spec(tmp.path(), &v);
    let o = run(&["train", "--spec", spec.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss"));
    assert!(out.join("small/spec.json").is_file());
    assert!(!out.join("small/summary.json").exists());
}

#[test]
fn ablate_variant_grid_has_fifteen_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = small_spec(&tmp.path().join("runs"));
    v["train"]["epochs"] = json!(1);
    let spec = write_spec(tmp.path(), &v);
    let o = run(&[
        "ablate",
        "--spec",
        spec.to_str().unwrap(),
        "--sweep",
        "variant",
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("not reproducible"));
    let csv = std::fs::read_to_string(tmp.path().join("runs/small-variant/table.csv")).unwrap();
    let labels: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(labels.len(), 15);
    assert_eq!(labels[0], "msa");
    assert!(labels.contains(&"msca-pqkv"));
    assert!(tmp
        .path()
        .join("runs/small-variant/cells/msca-kv/summary.json")
        .is_file());
}

#[test]
fn ablate_marks_failed_cells_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = small_spec(&tmp.path().join("runs"));
    v["train"]["epochs"] = json!(1);
    // 2 heads: only shifts up to 1 + 1 fit
    v["model"]["heads"] = json!(2);
    let spec = write_spec(tmp.path(), &v);
    let o = run(&[
        "ablate",
        "--spec",
        spec.to_str().unwrap(),
        "--sweep",
        "shift-amount",
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let csv =
        std::fs::read_to_string(tmp.path().join("runs/small-shift_amount/table.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row.contains("invalid spec"), k >= 2, "{row}");
    }
}

#[test]
fn selftest_passes_and_catches_wrapped_boundary() {
    let o = run(&["selftest"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 7);

    let o = run(&["selftest", "--boundary", "wrap"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(
        err.contains("msca_qkv_equivalence") || err.contains("temporal_receptive_field"),
        "{err}"
    );
}

#[test]
fn flops_json_shows_parity() {
    let o = run(&["flops", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let map = v.as_object().unwrap();
    assert_eq!(map.len(), 16);
    let totals: Vec<&Value> = map.values().map(|r| &r["total"]).collect();
    assert!(totals.iter().all(|t| *t == totals[0]));
}

#[test]
fn published_schema_matches_the_types() {
    let o = run(&["schema"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), SCHEMA);
    // every bundled spec is schema-valid and parses
    for entry in std::fs::read_dir(specs_dir()).unwrap() {
        let path = entry.unwrap().path();
        ExperimentSpec::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    // a fully populated spec, serialized back, still validates: the schema
    // knows every field the types write
    let spec = ExperimentSpec::load(&specs_dir().join("toy-msca-kv-texture.json")).unwrap();
    let full: Value = serde_json::from_str(&spec.to_json()).unwrap();
    validate_against_schema(&full).unwrap();
}
