use std::path::Path;
use std::process::{Command, Output};

fn foss(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foss"))
        .args(args)
        .current_dir(dir)
        .env("FOSS_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = foss(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json_line(s: &str) -> serde_json::Value {
    let line = s.lines().last().expect("a JSON line");
    serde_json::from_str(line).expect("valid JSON")
}

fn small_run(dir: &Path) {
    std::fs::write(
        dir.join("run.json"),
        r#"{"epochs": 2, "batch_size": 4, "model": {"d_model": 8, "k": 3, "mlp_hidden": 8}}"#,
    )
    .unwrap();
    ok(dir, &["gen-data", "--out", "d.jsonl", "--per-motif", "3", "--seed", "4"]);
}

fn first_id(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("d.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    v["id"].as_str().unwrap().to_string()
}

#[test]
fn gen_data_is_deterministic_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.json"), r#"{"seed": 1, "counts": {"straight": 2, "turn": 2, "lane_change": 2, "u_turn": 2}}"#).unwrap();
    let s = json_line(&ok(d, &["gen-data", "--config", "spec.json", "--seed", "9", "--out", "a.jsonl"]));
    assert_eq!(s["seed"], 9);
    assert_eq!(s["records"], 8);
    ok(d, &["gen-data", "--config", "spec.json", "--seed", "9", "--out", "b.jsonl"]);
    assert_eq!(std::fs::read(d.join("a.jsonl")).unwrap(), std::fs::read(d.join("b.jsonl")).unwrap());
    let long = json_line(&ok(d, &["gen-data", "--preset", "argo2-like", "--per-motif", "1", "--out", "c.jsonl"]));
    assert_eq!((long["t_obs"].as_u64(), long["t_fut"].as_u64()), (Some(50), Some(60)));
}

#[test]
fn train_eval_predict_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    let t = json_line(&ok(d, &["train", "--config", "run.json", "--data", "d.jsonl", "--out", "m.ckpt", "--seed", "3"]));
    assert_eq!(t["epochs"], 2);
    assert_eq!(t["monitor"], "val_minade");
    let log = std::fs::read_to_string(d.join("m.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,l_time,l_freq,l_total,val_minade,lr");
    assert_eq!(log.lines().count(), 3);

    let e = ok(d, &["eval", "--checkpoint", "m.ckpt", "--data", "d.jsonl", "--k", "2", "--out", "r.csv"]);
    let report = json_line(&e);
    assert_eq!(report["K"], 2);
    assert!(report["minade_k"].as_f64().unwrap() >= 0.0);
    assert_eq!(std::fs::read_to_string(d.join("r.csv")).unwrap().lines().count(), 2);

    let id = first_id(d);
    let csv = ok(d, &["predict", "--checkpoint", "m.ckpt", "--data", "d.jsonl", "--id", &id]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,k,x,y,p_k"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3 * 30);
    let total: f64 = rows.iter().filter(|r| r[0] == 0.0).map(|r| r[4]).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn training_twice_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    for run in ["a", "b"] {
        std::fs::create_dir(d.join(run)).unwrap();
        ok(d, &["train", "--config", "run.json", "--data", "d.jsonl", "--out", &format!("{run}/m.ckpt")]);
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/m.ckpt.log.csv"), read("b/m.ckpt.log.csv"));
    let (a, b) = (read("a/m.ckpt"), read("b/m.ckpt"));
    let differing: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
    assert_eq!(a.len(), b.len());
    assert!(differing.iter().all(|&i| a[i] == b'a' && b[i] == b'b'), "{differing:?}");
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    ok(d, &["train", "--config", "run.json", "--data", "d.jsonl", "--out", "m.ckpt", "--epochs", "1"]);
    let mut bytes = std::fs::read(d.join("m.ckpt")).unwrap();
    bytes[0] = b'X';
    std::fs::write(d.join("bad.ckpt"), &bytes).unwrap();
    let out = foss(d, &["eval", "--checkpoint", "bad.ckpt", "--data", "d.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    std::fs::write(d.join("short.ckpt"), &std::fs::read(d.join("m.ckpt")).unwrap()[..40]).unwrap();
    let out = foss(d, &["eval", "--checkpoint", "short.ckpt", "--data", "d.jsonl"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
}

#[test]
fn bad_config_and_missing_data_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"epoch": 3}"#).unwrap();
    let out = foss(d, &["train", "--config", "bad.json", "--data", "x.jsonl"]);
    assert!(!out.status.success());
    let out = foss(d, &["train"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no dataset"));
}

#[test]
fn inspect_spectrum_helix_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_run(d);
    let id = first_id(d);
    let csv = ok(d, &["inspect-spectrum", "--data", "d.jsonl", "--id", &id, "--helix"]);
    let rows: Vec<Vec<f64>> = csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows[0][1], 0.0);
    assert!(rows.windows(2).all(|w| w[0][2] <= w[1][2]));
    let mut freqs: Vec<usize> = rows.iter().map(|r| r[1] as usize).collect();
    freqs.sort_unstable();
    assert_eq!(freqs, (0..20).collect::<Vec<_>>());
    let natural = ok(d, &["inspect-spectrum", "--data", "d.jsonl", "--id", &id]);
    assert!(natural.lines().skip(1).enumerate().all(|(i, l)| l.split(',').nth(1) == Some(&i.to_string())));
}

#[test]
fn gradcheck_single_point_passes() {
    let dir = tempfile::tempdir().unwrap();
    let s = json_line(&ok(dir.path(), &["gradcheck", "--points", "1", "--out", "g.csv"]));
    assert_eq!(s["pass"], true);
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, s["checks"].as_u64().unwrap() + 1);
}

#[test]
fn bench_reports_rows_and_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("b.json"), r#"{"lengths": [32, 64], "reps": 1, "d_model": 4}"#).unwrap();
    let s = json_line(&ok(d, &["bench", "--config", "b.json", "--out", "b.csv"]));
    assert_eq!(s["rows"], 10);
    let csv = std::fs::read_to_string(d.join("b.csv")).unwrap();
    let helix: Vec<&str> = csv.lines().filter(|l| l.starts_with("helix_sort")).collect();
    assert_eq!(helix.len(), 2);
    assert!(helix.iter().all(|l| l.ends_with(",0")));
    assert_eq!(s["ratios"].as_array().unwrap().len(), 5);
}

#[test]
fn ablate_tiny_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("a.json"),
        r#"{"n_train": 8, "n_test": 8, "seeds": 1, "k": 2,
            "run": {"epochs": 1, "batch_size": 4, "model": {"d_model": 8, "k": 3, "mlp_hidden": 8}}}"#,
    )
    .unwrap();
    let s = json_line(&ok(d, &["ablate", "--config", "a.json", "--out", "a.csv"]));
    assert_eq!(s["summary"].as_array().unwrap().len(), 5);
    assert!(s["full_is_best"].is_boolean());
    let csv = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}
