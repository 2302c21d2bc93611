use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geoscore::dirichlet::parse_score_csv;
use geoscore::transforms::{TransformSet, CATALOG_NAMES};

const TINY: &str = r#"
seeds = [0, 1]
n_inliers = 300
n_outliers = 50
train = 150
validation = 100
side = 15
catalogs = ["shifts9", "flipshift18"]
architecture = "linear_softmax"
max_epochs = 3
selection_catalog = "shifts9"
pair_architecture = "linear_softmax"
pair_max_epochs = 2
"#;

fn geoscore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoscore"))
        .args(args)
        .env_remove("GEOSCORE_JOBS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let o = geoscore(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

fn scores(root: &Path, catalog: &str, seed: u64) -> Vec<u8> {
    fs::read(root.join(format!("runs/{catalog}/seed-{seed}/score/scores.csv"))).unwrap()
}

#[test]
fn deterministic_pipeline_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let c = cfg.to_str().unwrap();
    run_ok(&[
        "pipeline",
        "--config",
        c,
        "--out",
        a.to_str().unwrap(),
        "--deterministic",
        "--jobs",
        "1",
    ]);
    run_ok(&[
        "pipeline",
        "--config",
        c,
        "--out",
        b.to_str().unwrap(),
        "--deterministic",
        "--jobs",
        "3",
    ]);
    for cat in ["shifts9", "flipshift18"] {
        for seed in [0, 1] {
            let bytes = scores(&a, cat, seed);
            assert!(bytes == scores(&b, cat, seed), "{cat} seed {seed} differs");
            let rows = parse_score_csv(std::str::from_utf8(&bytes).unwrap()).unwrap();
            assert_eq!(rows.len(), 100);
        }
    }
    let manifest = "runs/shifts9/seed-1/score/manifest.json";
    // identical apart from the echoed output root
    let echoed = |root: &Path| {
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join(manifest)).unwrap()).unwrap();
        m["config"]["out_dir"] = serde_json::Value::Null;
        m
    };
    assert_eq!(echoed(&a), echoed(&b));

    // the manifest alone is enough to regenerate the run
    let c2 = tmp.path().join("c");
    run_ok(&[
        "pipeline",
        "--config",
        a.join(manifest).to_str().unwrap(),
        "--out",
        c2.to_str().unwrap(),
        "--deterministic",
    ]);
    assert!(scores(&a, "shifts9", 1) == scores(&c2, "shifts9", 1));
}

#[test]
fn unchanged_stages_are_skipped_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let args = [
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    run_ok(&args);
    let model = out.join("runs/shifts9/seed-0/train/model.gscm");
    let before = fs::metadata(&model).unwrap().modified().unwrap();
    let again = run_ok(&args);
    let log = stderr(&again);
    assert!(log.contains("train shifts9 seed 0: up to date"), "{log}");
    assert!(!log.contains("done in"), "{log}");
    assert_eq!(fs::metadata(&model).unwrap().modified().unwrap(), before);

    let mut forced = args.to_vec();
    forced.push("--force");
    let log = stderr(&run_ok(&forced));
    assert!(log.contains("train shifts9 seed 0: done in"), "{log}");

    // a changed setting invalidates the stages that depend on it
    let cfg = config(tmp.path(), &TINY.replace("max_epochs = 3", "max_epochs = 2"));
    let log = stderr(&run_ok(&[
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(log.contains("synth seed 0: up to date"), "{log}");
    assert!(log.contains("train shifts9 seed 0: done in"), "{log}");
}

#[test]
fn pipeline_emits_aggregate_table_with_welch_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let o = run_ok(&[
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("| shifts9 | 2 |"), "{table}");
    assert!(table.contains("| flipshift18 | 2 |"), "{table}");
    assert!(
        table.contains("Welch's t-test p-value (shifts9) v/s (flipshift18)"),
        "{table}"
    );
    let csv = fs::read_to_string(out.join("aggregate/aggregate.csv")).unwrap();
    assert!(
        csv.starts_with("catalog,runs,auroc_mean,auroc_sd,accuracy_mean,accuracy_sd\nshifts9,2,"),
        "{csv}"
    );
    let welch = fs::read_to_string(out.join("aggregate/welch.csv")).unwrap();
    assert_eq!(welch.lines().count(), 3);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("runs/shifts9/seed-0/eval/metrics.json")).unwrap()).unwrap();
    assert!(metrics["auroc"].as_f64().is_some_and(|a| (0.0..=1.0).contains(&a)));
    assert_eq!(metrics["seed"], 0);
    assert!(out.join("report/report.md").is_file());
}

#[test]
fn select_writes_matrix_report_and_pruned_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &TINY.replace("seeds = [0, 1]", "seeds = [3]"));
    let out = tmp.path().join("o");
    let c = cfg.to_str().unwrap();
    run_ok(&["synth", "--config", c, "--out", out.to_str().unwrap()]);
    run_ok(&["select", "--config", c, "--out", out.to_str().unwrap()]);
    let dir = out.join("selection/shifts9/seed-3");
    let matrix = fs::read_to_string(dir.join("matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 10);
    // quoted names, which contain commas themselves
    assert_eq!(matrix.lines().next().unwrap().matches('"').count(), 18);
    let pruned = TransformSet::from_file(dir.join("shifts9-selected.txt")).unwrap();
    assert!(!pruned.is_empty() && pruned.len() <= 9);
    assert!(fs::read_to_string(dir.join("report.txt"))
        .unwrap()
        .starts_with("catalog: shifts9 (9 transformations)"));
    run_ok(&["report", "--config", c, "--out", out.to_str().unwrap()]);
    let report = fs::read_to_string(out.join("report/report.md")).unwrap();
    assert!(report.contains("## Transformation selection (shifts9)"), "{report}");
}

#[test]
fn unknown_catalog_names_the_valid_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "catalogs = [\"geo100\"]");
    let o = geoscore(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let msg = stderr(&o);
    for name in CATALOG_NAMES {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn unknown_config_keys_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "max_epoch = 3");
    let o = geoscore(&["synth", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("max_epoch"), "{}", stderr(&o));
}

#[test]
fn failing_stage_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TINY);
    let o = geoscore(&[
        "score",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let msg = stderr(&o);
    assert!(msg.contains("stage score failed for catalog shifts9 seed 0"), "{msg}");
    assert!(msg.contains("model.gscm is missing"), "{msg}");
}

#[test]
fn jobs_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_geoscore"))
        .args([
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .env("GEOSCORE_JOBS", "0")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--jobs must be at least 1"), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_geoscore"))
        .args([
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .env("GEOSCORE_JOBS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn external_data_dir_replaces_synthesis() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = config(tmp.path(), &TINY.replace("seeds = [0, 1]", "seeds = [9]"));
    let first = tmp.path().join("first");
    run_ok(&[
        "synth",
        "--config",
        gen.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
    ]);
    let data = first.join("data/seed-9");
    let text = format!(
        "seeds = [0]\ndata_dir = {:?}\ncatalogs = [\"shifts9\"]\narchitecture = \"linear_softmax\"\nmax_epochs = 2\n",
        data.to_str().unwrap()
    );
    let cfg = config(tmp.path(), &text);
    let out = tmp.path().join("second");
    let o = run_ok(&[
        "pipeline",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stderr(&o).contains("data_dir is set"));
    assert!(!out.join("data").exists());
    assert!(out.join("runs/shifts9/seed-0/score/scores.csv").is_file());
}
