use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn apm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apm"))
        .args(args)
        .output()
        .expect("spawn apm")
}

fn ok(args: &[&str]) -> String {
    let out = apm(args);
    assert!(
        out.status.success(),
        "apm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    apm(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("corpus{n}_{seed}"));
    ok(&["synth", "--out", s(&out), "--n", &n.to_string(), "--seed", &seed.to_string()]);
    out
}

const FAST: [&str; 8] = ["--hidden", "32", "--lr", "0.01", "--batch-size", "8", "--eval-every", "20"];

fn train_scratch(data: &Path, out: &Path, iterations: usize, extra: &[&str]) {
    let iters = iterations.to_string();
    let mut args = vec![
        "train", "--stage", "aesthetic", "--from-scratch", "--data", s(data), "--out", s(out),
        "--iterations", &iters,
    ];
    args.extend(FAST);
    args.extend(extra);
    ok(&args);
}

#[test]
fn synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["synth", "--out", s(d), "--n", "12", "--seed", "5"]);
    }
    for f in ["annotations.csv", "manifest.json", "images/img00007.png"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = tmp.path().join("c");
    ok(&["synth", "--out", s(&c), "--n", "12", "--seed", "6"]);
    assert_ne!(
        fs::read(a.join("annotations.csv")).unwrap(),
        fs::read(c.join("annotations.csv")).unwrap()
    );
}

#[test]
fn missing_out_is_a_usage_error() {
    assert_eq!(code(&["synth", "--n", "3"]), 1);
    assert_eq!(code(&["eval", "--data", "nowhere"]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn manifest_records_the_resolved_run() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 6, 1);
    let m = json(&data.join("run_manifest.json"));
    let keys: Vec<&str> = m.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["command", "config", "seed", "tool_version", "timestamps", "inputs", "outputs"] {
        assert!(keys.contains(&k), "missing {k} in {keys:?}");
    }
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 1);
    assert_eq!(m["config"]["n"], 6);
    assert_eq!(m["config"]["min_side"], 32);
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
    let t = &m["timestamps"];
    assert!(t["finished_unix"].as_f64().unwrap() >= t["started_unix"].as_f64().unwrap());
}

#[test]
fn config_file_fills_unset_flags_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"n": 4, "seed": 9, "votes": 50}"#).unwrap();
    let out = tmp.path().join("c");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out), "--seed", "2"]);
    let m = json(&out.join("run_manifest.json"));
    assert_eq!(m["config"]["n"], 4);
    assert_eq!(m["config"]["votes"], 50);
    assert_eq!(m["seed"], 2);
    assert_eq!(fs::read_to_string(out.join("annotations.csv")).unwrap().lines().count(), 4);

    fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert_eq!(code(&["synth", "--config", s(&cfg), "--out", s(&out)]), 1);
}

#[test]
fn aesthetic_stage_needs_an_explicit_starting_point() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 6, 2);
    let out = tmp.path().join("m");
    let base = ["train", "--stage", "aesthetic", "--data", s(&data), "--out", s(&out), "--iterations", "2"];
    assert_eq!(code(&base), 1);
    assert!(!out.join("model.ckpt").exists());

    let mut both = base.to_vec();
    both.extend(["--from-scratch", "--init-from", s(&data)]);
    assert_eq!(code(&both), 1);

    // a checkpoint that never went through distillation is refused as well
    train_scratch(&data, &out, 2, &[]);
    let plain = out.join("model.ckpt");
    let again = tmp.path().join("m2");
    let args = [
        "train", "--stage", "aesthetic", "--data", s(&data), "--out", s(&again), "--iterations", "2",
        "--init-from", s(&plain), "--hidden", "32",
    ];
    assert_eq!(code(&args), 1);

    let distill = ["train", "--stage", "distill", "--data", s(&data), "--out", s(&again)];
    assert_eq!(code(&distill), 1, "distill without --targets");
}

#[test]
fn distill_then_aesthetic() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 12, 3);
    let teacher = tmp.path().join("teacher");
    ok(&[
        "teacher", "--data", s(&data), "--out", s(&teacher), "--iterations", "30", "--hidden", "32",
    ]);
    let t = json(&teacher.join("report.json"));
    assert_eq!(t["classes"], 4);
    let distilled = tmp.path().join("distilled");
    ok(&[
        "train", "--stage", "distill", "--data", s(&data), "--out", s(&distilled), "--targets",
        s(&teacher.join("targets.csv")), "--iterations", "30", "--hidden", "32",
    ]);
    let ckpt = distilled.join("model.ckpt");
    let r = json(&distilled.join("report.json"));
    assert_eq!(r["stage"], "distilled");
    assert!(r["objective"]["final"].as_f64().unwrap() < r["objective"]["initial"].as_f64().unwrap());

    let aesthetic = tmp.path().join("aesthetic");
    ok(&[
        "train", "--stage", "aesthetic", "--data", s(&data), "--out", s(&aesthetic), "--init-from",
        s(&ckpt), "--iterations", "10", "--hidden", "32", "--val-count", "4",
        "--eval-every", "5",
    ]);
    let r = json(&aesthetic.join("report.json"));
    assert_eq!(r["stage"], "aesthetic");
    assert_eq!(r["evals"].as_array().unwrap().len(), 2);

    // network flags must agree with the checkpoint being continued
    let mismatched = tmp.path().join("mismatch");
    let args = [
        "train", "--stage", "aesthetic", "--data", s(&data), "--out", s(&mismatched), "--init-from",
        s(&ckpt), "--iterations", "2", "--hidden", "16",
    ];
    assert_eq!(code(&args), 1);
}

#[test]
fn loss_and_head_variants_train() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 8, 4);
    let out = tmp.path().join("mean");
    train_scratch(&data, &out, 20, &["--loss", "euclidean", "--variant", "mean", "--val-count", "3"]);
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("iter,stage,lr,loss"));
    assert_eq!(loss.lines().count(), 21);

    let eval = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&data), "--out", s(&eval)]);
    let r = json(&eval.join("report.json"));
    assert!(r["cd_loss"].is_null());
    assert_eq!(r["n_images"], 8);

    let dual = tmp.path().join("dual");
    train_scratch(&data, &dual, 20, &["--variant", "dual", "--val-count", "3"]);
    let w = json(&dual.join("report.json"))["fusion_weight"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&w));
}

#[test]
fn eval_on_the_memorized_set_is_exact() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 10, 3);
    let out = tmp.path().join("m");
    ok(&[
        "train", "--stage", "aesthetic", "--from-scratch", "--data", s(&data), "--out", s(&out),
        "--iterations", "1000", "--lr", "0.01", "--batch-size", "10", "--hidden", "64", "--eval-every",
        "1000",
    ]);
    let eval = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&data), "--out", s(&eval)]);
    let r = json(&eval.join("report.json"));
    assert_eq!(r["accuracy"], 1.0);
    assert!(r["cd_loss"].as_f64().unwrap() < 0.1);
    let preds = fs::read_to_string(eval.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 10);
    for line in preds.lines() {
        let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn eval_restricted_to_a_split_subset() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 10, 8);
    let out = tmp.path().join("m");
    train_scratch(&data, &out, 4, &["--val-count", "3", "--test-count", "2"]);
    let eval = tmp.path().join("eval");
    ok(&[
        "eval", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&data), "--out", s(&eval),
        "--split", s(&out.join("split.json")), "--subset", "test",
    ]);
    assert_eq!(json(&eval.join("report.json"))["n_images"], 2);
}

fn metrics_report(pred: &Path, gt: &Path) -> Value {
    serde_json::from_str(&ok(&["metrics", "--pred", s(pred), "--gt", s(gt)])).unwrap()
}

#[test]
fn metrics_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 20, 6);
    let gt = data.join("annotations.csv");
    let r = metrics_report(&gt, &gt);
    assert!(r["cd_loss"].as_f64().unwrap() < 1e-15);
    assert!(r["mse"].as_f64().unwrap() < 1e-15);
    assert!((r["spearman_rho"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(r["accuracy"], 1.0);
}

#[test]
fn metrics_join_by_id_not_by_row() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 15, 7);
    let out = tmp.path().join("m");
    train_scratch(&data, &out, 5, &[]);
    let eval = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&data), "--out", s(&eval)]);
    let pred = eval.join("predictions.csv");
    let gt = data.join("annotations.csv");
    let before = metrics_report(&pred, &gt);

    let text = fs::read_to_string(&pred).unwrap();
    let mut rows: Vec<&str> = text.lines().collect();
    rows.reverse();
    let shuffled = tmp.path().join("shuffled.csv");
    fs::write(&shuffled, rows.join("\n") + "\n").unwrap();
    assert_eq!(metrics_report(&shuffled, &gt), before);

    let short = tmp.path().join("short.csv");
    fs::write(&short, rows[1..].join("\n") + "\n").unwrap();
    let out = apm(&["metrics", "--pred", s(&short), "--gt", s(&gt)]);
    assert_eq!(out.status.code(), Some(2));
    let missing = rows[0].split(',').next().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing));
}

#[test]
fn metrics_on_a_hand_built_pair() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("gt.csv");
    let pred = tmp.path().join("pred.csv");
    fs::write(
        &gt,
        "a,0,0,0,0,10,0,0,0,0,0\nb,0,0,0,0,0,0,3,0,0,0\nc,0,4,4,0,0,0,0,0,0,0\n",
    )
    .unwrap();
    fs::write(&pred, "c 0 0 2 0 0 0 0 0 0 0\na 0 0 0 0 0 1 0 0 0 0\nb 0 0 0 0 0 0 0.5 0 0 0\n").unwrap();
    let report_dir = tmp.path().join("r");
    let r: Value = serde_json::from_str(&ok(&[
        "metrics", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&report_dir),
    ]))
    .unwrap();
    // a is off by one bin, b exact, c collapses half its mass one bin up
    let close = |k: &str, v: f64| assert!((r[k].as_f64().unwrap() - v).abs() < 1e-12, "{k}: {}", r[k]);
    close("cd_loss", 1.25 / 3.0);
    close("mse", 1.25 / 3.0);
    close("spearman_rho", 1.0);
    close("accuracy", 2.0 / 3.0);
    assert_eq!(r["n_images"], 3);
    assert!(r["kl_div"].as_f64().unwrap() > 0.0);
    assert_eq!(json(&report_dir.join("report.json")), r);
    assert!(report_dir.join("run_manifest.json").exists());
}

#[test]
fn adversarial_writes_maps_of_the_image_size() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 8, 9);
    let out = tmp.path().join("m");
    train_scratch(&data, &out, 10, &[]);
    let ckpt = out.join("model.ckpt");
    let image = data.join("images/img00003.png");
    let adv = tmp.path().join("adv");
    ok(&[
        "adversarial", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&adv), "--steps", "5",
        "--direction", "improve",
    ]);
    for f in ["perturbed.png", "heatmap.png", "heatmap.csv", "trace.csv", "summary.json", "run_manifest.json"] {
        assert!(adv.join(f).exists(), "{f}");
    }
    let manifest = json(&data.join("manifest.json"));
    let entry = &manifest["images"][3];
    let (h, w) = (entry["height"].as_u64().unwrap() as usize, entry["width"].as_u64().unwrap() as usize);
    let csv = fs::read_to_string(adv.join("heatmap.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), h);
    for row in &rows {
        let vals: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), w);
        assert!(vals.iter().all(|v| *v >= 0.0));
    }
    let trace = fs::read_to_string(adv.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,loss,mean"));
    assert_eq!(trace.lines().count(), 7);
    let summary = json(&adv.join("summary.json"));
    assert_eq!(summary["iterations"], 5);

    let rejected = tmp.path().join("rejected");
    let args = [
        "adversarial", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&rejected), "--steps", "0",
    ];
    assert_eq!(code(&args), 1);
}

#[test]
fn min_size_matches_the_network() {
    let printed: usize = ok(&["min-size", "--backbone", "tiny", "--spp-n", "3"]).trim().parse().unwrap();
    let cfg = apm_core::model::NetworkConfig {
        backbone: apm_core::model::BackboneConfig::tiny(),
        spp_n: 3,
        ..Default::default()
    };
    assert_eq!(printed, cfg.min_input_side());
    let desk: usize = ok(&["min-size", "--backbone", "desk", "--spp-n", "4"]).trim().parse().unwrap();
    assert!(desk > printed);
}

#[test]
fn rerun_reproduces_outputs_bit_for_bit() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), 10, 10);
    let out = tmp.path().join("m");
    train_scratch(&data, &out, 15, &["--val-count", "3"]);
    let again = tmp.path().join("again");
    ok(&["rerun", "--manifest", s(&out.join("run_manifest.json")), "--out", s(&again)]);
    for f in ["loss.csv", "report.json", "model.ckpt", "split.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    let m = json(&again.join("run_manifest.json"));
    assert_eq!(m["config"]["out"], s(&again));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{}").unwrap();
    assert_eq!(code(&["rerun", "--manifest", s(&bad)]), 1);
}
