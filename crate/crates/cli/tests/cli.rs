use std::path::Path;
use std::process::{Command, Output};

fn ventrisk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ventrisk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 10] = [
    "--set",
    "synth.n_patients=300",
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=500",
    "--set",
    "train.shard_windows=200",
    "--seed",
    "5",
];

#[test]
fn gradcheck_passes() {
    let o = ventrisk(&["gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with("pass ")));
}

#[test]
fn full_workflow_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = ventrisk(&[&["synth", "--out", path(&data)], &SMALL[..]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "patients.csv",
        "events.csv",
        "schema.json",
        "cohort_summary.json",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }

    let o = ventrisk(&[
        "ingest",
        "--data",
        path(&data),
        "--out",
        path(&dir.path().join("ingest")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ingested = std::fs::read_to_string(dir.path().join("ingest/cohort_summary.json")).unwrap();
    let synthesized = std::fs::read_to_string(data.join("cohort_summary.json")).unwrap();
    assert_eq!(ingested, synthesized);

    let train = |out: &Path, variant: &str, threads: &str| {
        let o = ventrisk(
            &[
                &[
                    "train",
                    "--data",
                    path(&data),
                    "--variant",
                    variant,
                    "--out",
                    path(out),
                ][..],
                &["--threads", threads],
                &SMALL[..],
            ]
            .concat(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let (a, b, f) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("f"),
    );
    train(&a, "ffnn_mha", "1");
    train(&b, "ffnn_mha", "3");
    train(&f, "ffnn", "2");
    for file in ["train_log.csv", "checkpoint.json"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file} depends on the thread count"
        );
    }
    let log = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("epoch,train_rmse,val_auc,wall_seconds")
    );
    assert_eq!(log.lines().count(), 3);

    let ck = a.join("checkpoint.json");
    let evaluate = |out: &Path| {
        let o = ventrisk(&[
            "evaluate",
            "--data",
            path(&data),
            "--checkpoint",
            path(&ck),
            "--out",
            path(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    evaluate(&dir.path().join("e1"));
    evaluate(&dir.path().join("e2"));
    for file in ["report.json", "roc_points.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("e1").join(file)).unwrap(),
            std::fs::read(dir.path().join("e2").join(file)).unwrap(),
        );
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("e1/report.json")).unwrap()).unwrap();
    let auc = report["policy_auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let op = &report["operating_point"];
    assert!(op["sensitivity"].as_f64().unwrap() >= 0.8);

    let cmp = dir.path().join("cmp");
    let o = ventrisk(&[
        "compare",
        "--data",
        path(&data),
        "--checkpoint",
        path(&ck),
        "--against",
        path(&ck),
        "--out",
        path(&cmp),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cmp.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(c["delong"]["p_value"].as_f64(), Some(1.0));
    assert_eq!(c["delong"]["z"].as_f64(), Some(0.0));

    let o = ventrisk(&[
        "compare",
        "--data",
        path(&data),
        "--checkpoint",
        path(&ck),
        "--against",
        path(&f.join("checkpoint.json")),
        "--out",
        path(&cmp),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cmp.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(c["model_b"], "ffnn");
    let p = c["delong"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let ex = dir.path().join("explain");
    let o = ventrisk(&[
        "explain",
        "--data",
        path(&data),
        "--checkpoint",
        path(&ck),
        "--out",
        path(&ex),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let heat = std::fs::read_to_string(ex.join("heatmap.csv")).unwrap();
    assert_eq!(
        heat.lines().next(),
        Some("variable,hour_before_onset,fraction")
    );
    assert_eq!(heat.lines().count(), 1 + 15 * 12);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let o = ventrisk(&["synth", "--set", "train.epoch=3"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = ventrisk(&["ingest", "--data", path(&dir.path().join("nope"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = ventrisk(&[
        "ingest",
        "--data",
        path(dir.path()),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[io]"));

    let o = ventrisk(&[
        "evaluate",
        "--data",
        path(dir.path()),
        "--checkpoint",
        path(&dir.path().join("missing.json")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn schema_mismatch_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = ventrisk(&[
        "synth",
        "--out",
        path(&data),
        "--set",
        "synth.n_patients=20",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut schema: serde_json::Value =
        serde_json::from_slice(&std::fs::read(data.join("schema.json")).unwrap()).unwrap();
    schema["comorbidity_columns"].as_array_mut().unwrap().pop();
    let other = dir.path().join("other_schema.json");
    std::fs::write(&other, serde_json::to_vec(&schema).unwrap()).unwrap();

    let schema_arg = format!("schema={}", serde_json::Value::String(path(&other).into()));
    let o = ventrisk(&["ingest", "--data", path(&data), "--set", &schema_arg]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[schema]"));
}
