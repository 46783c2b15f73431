use std::path::Path;
use std::process::Command;

fn sickfuse(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sickfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = sickfuse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 2 participants x 1 simulation x 330 s: ten windows per session.
fn toy_cache(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    let cache = root.join("cache");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--seed",
        "4",
        "--participants",
        "2",
        "--simulations",
        "BeachCity",
        "--duration_s",
        "330",
    ]);
    ok(&["preprocess", "--data", s(&data), "--out", s(&cache)]);
    cache
}

const TOY_MODEL: &[&str] = &[
    "--td_filters",
    "4",
    "--lstm_hidden",
    "4",
    "--branch_dense",
    "8",
    "--fusion_dense",
    "8",
    "--epochs",
    "5",
    "--batch_size",
    "8",
];

#[test]
fn default_profile_yields_1755_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cache = tmp.path().join("cache");
    ok(&["synth", "--out", s(&data)]);
    ok(&["preprocess", "--data", s(&data), "--out", s(&cache)]);
    assert_eq!(rows(&cache.join("windows.csv")).len(), 1755);
    let dropped = rows(&cache.join("dropped.csv"));
    assert_eq!(dropped.len(), 135);
    assert!(dropped.iter().all(|r| r.ends_with(",out_of_range")));
}

#[test]
fn cv_writes_fold_rows_and_mean_and_replays_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = toy_cache(tmp.path());
    assert_eq!(rows(&cache.join("windows.csv")).len(), 20);
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let mut args = vec!["cv", "--cache", s(&cache), "--out", s(&out), "--folds", "2"];
        args.extend_from_slice(TOY_MODEL);
        ok(&args);
        out
    };
    let a = run("cv_a");
    let report = rows(&a.join("report.csv"));
    assert_eq!(report.len(), 3);
    assert!(report[2].starts_with("mean,"));
    let b = run("cv_b");
    let read = |d: &Path| std::fs::read(d.join("report.csv")).unwrap();
    assert_eq!(read(&a), read(&b));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "cv");
    assert_eq!(
        manifest["artifacts"]["report.csv"].as_str().unwrap().len(),
        64
    );
    let before = read(&a);
    std::fs::remove_file(a.join("report.csv")).unwrap();
    ok(&["replay", s(&a.join("manifest.json"))]);
    assert_eq!(read(&a), before);
}

#[test]
fn train_then_predict_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = toy_cache(tmp.path());
    let model = tmp.path().join("model");
    let mut args = vec!["train", "--cache", s(&cache), "--out", s(&model)];
    args.extend_from_slice(TOY_MODEL);
    ok(&args);
    let preds = tmp.path().join("pred.csv");
    ok(&[
        "predict",
        "--checkpoint",
        s(&model.join("model.sfm")),
        "--cache",
        s(&cache),
        "--session",
        "p01/BeachCity",
        "--out",
        s(&preds),
    ]);
    let lines = rows(&preds);
    assert_eq!(lines.len(), 10);
    for l in lines {
        let class = l.split(',').nth(6).unwrap();
        assert!(["None", "Low", "Medium", "High"].contains(&class), "{l}");
    }
}

#[test]
fn stats_and_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = toy_cache(tmp.path());
    let out = tmp.path().join("stats");
    ok(&["stats", "--cache", s(&cache), "--out", s(&out)]);
    let text = std::fs::read_to_string(out.join("stats_BeachCity.csv")).unwrap();
    assert!(text.starts_with("feature,mean_nonsick,sd_nonsick,mean_sick,sd_sick,t,df,p"));
    let maps = tmp.path().join("maps");
    ok(&[
        "heatmap",
        "--cache",
        s(&cache),
        "--participant",
        "p01",
        "--simulation",
        "BeachCity",
        "--size",
        "32",
        "--out",
        s(&maps),
    ]);
    for name in ["sick.pgm", "nonsick.pgm"] {
        let bytes = std::fs::read(maps.join(name)).unwrap();
        assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32);
    }
}

#[test]
fn failures_exit_with_category_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sickfuse(&["synth", "--out", s(tmp.path()), "--no_such_key", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");

    let bad = tmp.path().join("bad").join("p01").join("BeachCity");
    std::fs::create_dir_all(&bad).unwrap();
    std::fs::write(bad.join("eye.csv"), "wrong header\n").unwrap();
    std::fs::write(bad.join("head.csv"), "t,qx,qy,qz,qw\n").unwrap();
    std::fs::write(bad.join("fms.csv"), "t,score\n").unwrap();
    let out = sickfuse(&[
        "preprocess",
        "--data",
        s(&tmp.path().join("bad")),
        "--out",
        s(&tmp.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn inputs_are_left_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = toy_cache(tmp.path());
    let before = std::fs::read(cache.join("windows.csv")).unwrap();
    ok(&[
        "stats",
        "--cache",
        s(&cache),
        "--out",
        s(&tmp.path().join("st")),
    ]);
    assert_eq!(std::fs::read(cache.join("windows.csv")).unwrap(), before);
}
