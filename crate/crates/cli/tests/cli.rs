mod support;

use std::fs;

use bubblegan_cli::config::RESOLVED_NAME;
use support::*;

#[test]
fn synth_data_writes_corpus_and_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(1));
    let data = make_dataset(tmp.path(), &cfg);
    let lines = fs::read_to_string(&data).unwrap().lines().count();
    assert_eq!(lines, 24);
    let snap = read_json(&tmp.path().join(RESOLVED_NAME));
    assert_eq!(snap["seed"], 3);
    assert_eq!(snap["synth"]["max_rooms"], 6);
}

#[test]
fn usage_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(["train", "--out", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    let out = run(["synth-data".as_ref(), "--config".as_ref(), bad.as_os_str(), "--out".as_ref(), tmp.path().join("d.jsonl").as_os_str()]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    let out = run(["evaluate".as_ref(), "--data".as_ref(), bad.as_os_str(), "--out".as_ref(), tmp.path().join("e").as_os_str()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, &tiny_config(2));
    let data = make_dataset(dir, &cfg);
    let arg = |p: &std::path::Path| p.to_str().unwrap().to_string();

    let pre = dir.join("pre");
    run_ok(["pretrain", "--config", &arg(&cfg), "--data", &arg(&data), "--out", &arg(&pre), "--bucket", "4-6"]);
    assert!(pre.join("encoder/manifest.json").exists());
    assert_eq!(fs::read_to_string(pre.join("pretrain.jsonl")).unwrap().lines().count(), 2);
    let report = read_json(&pre.join("pretrain_report.json"));
    assert!(report["node_accuracy"].as_f64().is_some());

    let train = dir.join("train");
    run_ok([
        "train", "--config", &arg(&cfg), "--data", &arg(&data), "--out", &arg(&train),
        "--bucket", "4-6", "--checkpoint", &arg(&pre.join("encoder")),
    ]);
    let ck = train.join("checkpoints/final");
    assert!(ck.join("manifest.json").exists());
    assert_eq!(fs::read_to_string(train.join("metrics.jsonl")).unwrap().lines().count(), 2);

    // resuming from a GAN checkpoint continues the step count
    let resumed = dir.join("resumed");
    run_ok(["train", "--config", &arg(&cfg), "--data", &arg(&data), "--out", &arg(&resumed), "--checkpoint", &arg(&ck)]);
    let first = fs::read_to_string(resumed.join("metrics.jsonl")).unwrap();
    let step: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(step["step"], 3);

    let diagram = dir.join("diagram.json");
    fs::write(&diagram, r#"{"rooms": [0, 1, 3], "edges": [[0, 1], [1, 2]]}"#).unwrap();
    let gen = dir.join("gen");
    run_ok(["generate", "--config", &arg(&cfg), "--checkpoint", &arg(&ck), "--diagram", &arg(&diagram), "--out", &arg(&gen)]);
    for k in 0..2 {
        assert!(gen.join(format!("sample_{k:03}.png")).exists());
        let rec = read_json(&gen.join(format!("sample_{k:03}.json")));
        assert_eq!(rec["rects"].as_array().unwrap().len(), 3);
    }

    let eval = dir.join("eval");
    run_ok(["evaluate", "--config", &arg(&cfg), "--data", &arg(&data), "--checkpoint", &arg(&ck), "--out", &arg(&eval), "--bucket", "4-6"]);
    let report = read_json(&eval.join("report.json"));
    assert_eq!(report["bucket"], "4-6");
    assert!(report["fid"].as_f64().unwrap() >= 0.0);
    assert!(eval.join("extractor.json").exists());

    // ground truth scored against itself is perfectly compatible
    let gt = dir.join("gt");
    run_ok(["evaluate", "--config", &arg(&cfg), "--data", &arg(&data), "--layouts", &arg(&data), "--out", &arg(&gt), "--overfit"]);
    let report = read_json(&gt.join("report.json"));
    assert_eq!(report["compatibility_mean"], 0.0);
    assert!(report["fid"].as_f64().unwrap() < 1e-6);

    for d in [&pre, &train, &gen, &eval, &gt] {
        assert!(d.join(RESOLVED_NAME).exists(), "{}", d.display());
    }
}

#[test]
fn ablate_single_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, &tiny_config(1));
    let data = make_dataset(dir, &cfg);
    let out = dir.join("abl");
    let p = |p: &std::path::Path| p.to_str().unwrap().to_string();
    run_ok(["ablate", "--config", &p(&cfg), "--data", &p(&data), "--out", &p(&out), "--only", "edge-mask", "--overfit"]);
    let rows = read_json(&out.join("ablation.json"));
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["row"], "b13");
    assert!(out.join("b13-edge-mask/report.json").exists());
    assert!(out.join("b13-edge-mask/pretrain/encoder/manifest.json").exists());

    let bad = run(["ablate", "--config", &p(&cfg), "--data", &p(&data), "--out", &p(&out), "--only", "b8"]);
    assert_eq!(bad.status.code(), Some(2));
}
