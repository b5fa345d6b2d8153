use std::path::Path;
use std::process::{Command, Output};

fn mixedq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixedq"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MIXEDQ_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn searchspace_examples() {
    let d = tempfile::tempdir().unwrap();
    let o = mixedq(&["searchspace", "12", "12", "25"], d.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o),
        "search space: 1844362878529525198848\nevaluations: 135\n"
    );
    let o = mixedq(&["searchspace", "0", "0", "0"], d.path());
    assert_eq!(stdout(&o), "search space: 1\nevaluations: 0\n");
    let o = mixedq(&["searchspace", "--", "-1", "0", "0"], d.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn kernels_examples() {
    let d = tempfile::tempdir().unwrap();
    let o = mixedq(&["kernels", "isqrt", "--grid", "0", "1048575"], d.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(
        stdout(&o).contains("exact for all inputs"),
        "{}",
        stdout(&o)
    );

    let o = mixedq(
        &["kernels", "shift_exp", "--grid", "-8", "0", "100000"],
        d.path(),
    );
    let line = stdout(&o);
    let pct: f64 = line
        .lines()
        .find_map(|l| l.strip_prefix("max rel error: "))
        .and_then(|v| v.trim_end_matches('%').parse().ok())
        .unwrap();
    assert!(pct <= 3.5, "{line}");

    let o = mixedq(&["kernels", "gelu_fqvit", "--grid", "0", "1"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("valid names"));

    let o = mixedq(
        &["kernels", "softmax_ivit", "--input", "missing.mxqt"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_select_eval_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 5\n[model]\ndepth = 1\nembed_dim = 16\nheads = 2\n[data]\nsource = \"synthetic\"\ndistribution = \"uniform\"\nbatches = 2\nbatch_size = 4\n",
    )
    .unwrap();
    let o = mixedq(&["analyze", "--config", "run.toml", "--out", "a"], d.path());
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [
        "sensitivity.csv",
        "sensitivity.json",
        "assignment.json",
        "histogram.json",
        "series_sqnr_diff.csv",
        "series_post_selection.csv",
        "report.json",
    ] {
        assert!(d.path().join("a").join(f).exists(), "{f}");
    }

    // Histogram totals equal the layer counts.
    let h: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("a/histogram.json")).unwrap())
            .unwrap();
    let total = |k: &str| {
        h[k].as_object()
            .unwrap()
            .values()
            .map(|v| v.as_u64().unwrap())
            .sum::<u64>()
    };
    assert_eq!(
        (total("softmax"), total("gelu"), total("layernorm")),
        (1, 1, 3)
    );

    // The embedded config reproduces the report.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("a/report.json")).unwrap())
            .unwrap();
    std::fs::write(
        d.path().join("embedded.toml"),
        report["provenance"]["config"].as_str().unwrap(),
    )
    .unwrap();
    let o = mixedq(
        &["analyze", "--config", "embedded.toml", "--out", "b"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(d.path().join("a/report.json")).unwrap(),
        std::fs::read(d.path().join("b/report.json")).unwrap()
    );

    let o = mixedq(
        &[
            "select",
            "--table",
            "a/sensitivity.csv",
            "--rule",
            "sqnr-diff",
            "--out",
            "s",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(d.path().join("a/assignment.json")).unwrap(),
        std::fs::read(d.path().join("s/assignment.json")).unwrap()
    );
    let o = mixedq(
        &[
            "select",
            "--table",
            "a/sensitivity.csv",
            "--rule",
            "sqnr-output",
            "--out",
            "t",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0));

    let o = mixedq(
        &[
            "eval",
            "--config",
            "run.toml",
            "--assignment",
            "a/assignment.json",
            "--out",
            "e",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(
        text.lines().filter(|l| l.contains("ibert ")).count(),
        5,
        "{text}"
    );
    assert!(d.path().join("e/eval.json").exists());

    // A map for a deeper model is stale for this config.
    let o = mixedq(
        &["eval", "--assignment", "a/assignment.json", "--out", "e2"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        mixedq(&["analyze", "--bits", "7"], d.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        mixedq(&["analyze", "--rule", "max"], d.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(mixedq(&["frobnicate"], d.path()).status.code(), Some(1));
    assert_eq!(mixedq(&["--help"], d.path()).status.code(), Some(0));
    std::fs::write(d.path().join("bad.toml"), "bits = \"eight\"").unwrap();
    assert_eq!(
        mixedq(&["analyze", "--config", "bad.toml"], d.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        mixedq(&["analyze", "--config", "none.toml"], d.path())
            .status
            .code(),
        Some(2)
    );
    let o = Command::new(env!("CARGO_BIN_EXE_mixedq"))
        .args(["searchspace", "1", "1", "1"])
        .env("MIXEDQ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_writes_csv_and_table() {
    let d = tempfile::tempdir().unwrap();
    let o = mixedq(
        &[
            "bench", "--reps", "3", "--size", "8x16", "--size", "4x4", "--out", "b",
        ],
        d.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(d.path().join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
    assert!(d.path().join("b/bench.txt").exists());
    assert!(stdout(&o).contains("GELU I-BERT"));
}

#[test]
fn example_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let cfg = mixedq::cli::RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!((cfg.seed, cfg.bits), (42, 8));
}
