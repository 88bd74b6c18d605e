use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protoparts::checkpoint::save_checkpoint;
use protoparts::model::{Model, ModelConfig};
use protoparts::skeleton::{write_ntu_skeleton, JointTopology, SkeletonSequence};
use serde_json::{json, Value};
use tempfile::TempDir;

fn protoparts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoparts"))
        .args(args)
        .env_remove("PROTOPARTS_SEED")
        .env_remove("PROTOPARTS_CONFIG")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn spec(topology: &str, classes: usize, per_class: usize, frames: usize) -> Value {
    let joints = if topology == "nwucla20" {
        json!(["right_wrist", "right_hand"])
    } else {
        json!(["right_wrist", "right_hand", "right_hand_tip"])
    };
    let classes: Vec<Value> = (1..=classes)
        .map(|i| {
            let axis = ["x", "y", "z"][i % 3];
            json!({"label": format!("A{i}"), "components": [{
                "joints": joints,
                "motion": {"kind": "sinusoid", "axis": axis,
                           "amplitude": 0.3, "frequency": 1.0 + (i / 3) as f64},
                "amplitude_jitter": 0.02, "phase_jitter": 0.2
            }]})
        })
        .collect();
    json!({"topology": topology, "frames": frames, "samples_per_class": per_class,
           "noise_std": 0.01, "classes": classes})
}

fn synth(dir: &Path, spec: &Value, seed: u64) -> PathBuf {
    let spec_path = dir.join(format!("spec_{seed}.json"));
    fs::write(&spec_path, spec.to_string()).unwrap();
    let out = dir.join(format!("data_{seed}"));
    let o = protoparts(&["synth", "--spec", p(&spec_path), "--seed", &seed.to_string(), "--out", p(&out)]);
    stdout_json(&o);
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--preset", "toy"];
    let defaults = [
        ("--epochs", "1"),
        ("--episodes-per-epoch", "2"),
        ("--ways", "3"),
        ("--holdout", "2"),
        ("--lr", "0.01"),
    ];
    for (flag, value) in defaults {
        if !extra.contains(&flag) {
            args.extend([flag, value]);
        }
    }
    args.extend_from_slice(extra);
    protoparts(&args)
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_one_file_per_sample_deterministically() {
    let tmp = TempDir::new().unwrap();
    let s = spec("ntu25", 5, 20, 8);
    let a = synth(tmp.path(), &s, 3);
    let files = read_dir_sorted(&a);
    assert_eq!(files.len(), 101, "100 samples plus the manifest");
    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["sample_count"], 100);

    let again = tmp.path().join("again");
    fs::create_dir(&again).unwrap();
    let b = synth(&again, &s, 3);
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
}

#[test]
fn bad_spec_exits_with_user_error() {
    let tmp = TempDir::new().unwrap();
    let mut s = spec("ntu25", 2, 2, 8);
    s["classes"][0]["components"][0]["joints"] = json!(["elbow_of_nobody"]);
    let spec_path = tmp.path().join("bad.json");
    fs::write(&spec_path, s.to_string()).unwrap();
    let o = protoparts(&["synth", "--spec", p(&spec_path), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = protoparts(&["synth", "--spec", p(&tmp.path().join("missing.json")), "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dump_partitions_lists_the_default_scheme() {
    let v = stdout_json(&protoparts(&["dump-partitions", "--topology", "ntu25"]));
    let parts = v["parts"].as_array().unwrap();
    assert_eq!(parts.len(), 10);
    for (tag, n) in [("semantic", 5), ("symmetry", 3), ("mixture", 2)] {
        assert_eq!(parts.iter().filter(|p| p["tag"] == tag).count(), n);
    }
    for part in parts {
        let idx = part["joint_indices"].as_array().unwrap();
        let names = part["joint_names"].as_array().unwrap();
        assert_eq!(idx.len(), names.len());
        assert!(names.iter().all(|n| !n.as_str().unwrap().is_empty()));
    }
    let v = stdout_json(&protoparts(&["dump-partitions", "--topology", "nwucla20"]));
    assert_eq!(v["parts"].as_array().unwrap().len(), 10);
    let o = protoparts(&["dump-partitions", "--topology", "kinect99"]);
    assert_eq!(o.status.code(), Some(2));
}

fn ntu_sample(id: &str, frames: usize, shift: f64) -> SkeletonSequence {
    let v = JointTopology::ntu25().joint_count();
    let coords = (0..3 * frames * v).map(|i| (i as f64 * 0.01 + shift).sin()).collect();
    SkeletonSequence::new(id, None, 3, frames, v, vec![coords]).unwrap()
}

#[test]
fn prepare_data_isolates_corrupt_files() {
    let tmp = TempDir::new().unwrap();
    let raw = tmp.path().join("raw");
    fs::create_dir(&raw).unwrap();
    for (i, id) in ["S001C001P001R001A001", "S001C001P002R001A001", "S001C001P001R001A002"]
        .iter()
        .enumerate()
    {
        let mut buf = Vec::new();
        write_ntu_skeleton(&ntu_sample(id, 12, i as f64), &mut buf).unwrap();
        fs::write(raw.join(format!("{id}.skeleton")), buf).unwrap();
    }
    fs::write(raw.join("S001C001P003R001A002.skeleton"), "12\n1\nnot a body line\n").unwrap();
    let run = |out: &Path| {
        protoparts(&[
            "prepare-data", "--raw", p(&raw), "--kind", "ntu", "--target-frames", "16", "--out", p(out),
        ])
    };
    let out1 = tmp.path().join("out1");
    let v = stdout_json(&run(&out1));
    assert_eq!(v["sample_count"], 3);
    assert_eq!(v["skip_count"], 1);
    let manifest: Value = serde_json::from_slice(&fs::read(out1.join("manifest.json")).unwrap()).unwrap();
    let counts: u64 = manifest["class_counts"]
        .as_object()
        .unwrap()
        .values()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(counts, 3);
    assert_eq!(manifest["class_counts"]["A1"], 2);

    let out2 = tmp.path().join("out2");
    stdout_json(&run(&out2));
    assert_eq!(read_dir_sorted(&out1), read_dir_sorted(&out2));
}

#[test]
fn prepare_data_error_codes() {
    let tmp = TempDir::new().unwrap();
    let o = protoparts(&[
        "prepare-data", "--raw", p(&tmp.path().join("nope")), "--kind", "ntu", "--out", p(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let raw = tmp.path().join("raw");
    fs::create_dir(&raw).unwrap();
    fs::write(raw.join("bad.skeleton"), "garbage").unwrap();
    let o = protoparts(&["prepare-data", "--raw", p(&raw), "--kind", "ntu", "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_smoke_run_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), &spec("ntu25", 6, 4, 8), 1);
    let a = tmp.path().join("run_a");
    let b = tmp.path().join("run_b");
    let summary = stdout_json(&train(&data, &a, &[]));
    assert_eq!(summary["epochs"], 1);
    stdout_json(&train(&data, &b, &[]));

    let log = fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let rec: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(rec["epoch"], 0);
    assert_eq!(rec["lr"], 0.01);
    assert!(rec["wall_ms"].is_null());
    let outputs = |dir: &Path| {
        let mut files = read_dir_sorted(dir);
        files.retain(|(name, _)| name != "config.json");
        files
    };
    assert_eq!(outputs(&a), outputs(&b));

    // the snapshot reloads to the same resolved configuration
    let c = tmp.path().join("run_c");
    let o = protoparts(&["train", "--config", p(&a.join("config.json")), "--out", p(&c)]);
    stdout_json(&o);
    let snap_a: Value = serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    let mut snap_c: Value = serde_json::from_slice(&fs::read(c.join("config.json")).unwrap()).unwrap();
    snap_c["paths"]["out_dir"] = snap_a["paths"]["out_dir"].clone();
    assert_eq!(snap_a, snap_c);
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(c.join("model.ckpt")).unwrap());
}

#[test]
fn holistic_baseline_and_checkpoint_cadence() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), &spec("ntu25", 6, 4, 8), 1);
    let out = tmp.path().join("holistic");
    let o = train(&data, &out, &["--k", "1", "--no-attention", "--epochs", "2", "--checkpoint-every", "1"]);
    stdout_json(&o);
    let snap: Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["model"]["parts"], 1);
    assert_eq!(snap["model"]["fusion"]["strategy"], "no_attention");
    assert!(out.join("checkpoints/epoch_0001.ckpt").exists());
    assert!(out.join("checkpoints/epoch_0002.ckpt").exists());
}

#[test]
fn config_layers_and_validation() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), &spec("ntu25", 6, 4, 8), 1);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, json!({"seed": 5, "train": {"momentum": 0.5}}).to_string()).unwrap();
    let out = tmp.path().join("layered");
    let o = Command::new(env!("CARGO_BIN_EXE_protoparts"))
        .args(["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--preset", "toy"])
        .args(["--episodes-per-epoch", "1", "--ways", "3", "--holdout", "2", "--seed", "9"])
        .env("PROTOPARTS_EPOCHS", "1")
        .env("PROTOPARTS_SEED", "7")
        .output()
        .unwrap();
    stdout_json(&o);
    let snap: Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["seed"], 9, "flag beats environment");
    assert_eq!(snap["train"]["epochs"], 1, "environment beats defaults");
    assert_eq!(snap["train"]["momentum"], 0.5, "file beats defaults");
    assert_eq!(snap["train"]["seed"], 9);

    let bad = train(&data, &tmp.path().join("bad"), &["--epochs", "0", "--ways", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("train: epochs") && err.contains("train: ways"), "{err}");

    fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    let o = protoparts(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_numeric_error() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), &spec("ntu25", 6, 4, 8), 1);
    let o = train(&data, &tmp.path().join("nan"), &["--lr", "1e300"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_reports_are_deterministic_per_protocol() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), &spec("ntu25", 6, 4, 8), 1);
    let run = tmp.path().join("run");
    stdout_json(&train(&data, &run, &[]));
    let ckpt = run.join("model.ckpt");
    let eval = |data: &Path, extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", p(&ckpt), "--data", p(data)];
        args.extend_from_slice(extra);
        protoparts(&args)
    };
    let r1 = eval(&data, &["--protocol", "holdout", "--holdout", "2"]);
    let r2 = eval(&data, &["--protocol", "holdout", "--holdout", "2"]);
    assert_eq!(r1.stdout, r2.stdout);
    let report = stdout_json(&r1);
    assert_eq!(report["per_class"].as_array().unwrap().len(), 2);
    assert_eq!(report["total"], 6);
    assert_eq!(report["exemplar_source"], "smallest_id");

    let r = stdout_json(&eval(&data, &["--protocol", "holdout", "--holdout", "3", "--mode", "episodic", "--episodes", "20"]));
    assert_eq!(r["mode"], "episodic");
    assert_eq!(r["total"], 60);

    let big = synth(tmp.path(), &spec("ntu25", 120, 2, 8), 2);
    let r = stdout_json(&eval(&big, &["--protocol", "ntu120"]));
    let classes: Vec<&str> = r["per_class"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["class"].as_str().unwrap())
        .collect();
    assert_eq!(classes.len(), 20);
    assert_eq!(classes[..3], ["A1", "A7", "A13"]);

    // a checkpoint trained for another topology does not fit NW-UCLA data
    let ucla = synth(tmp.path(), &spec("nwucla20", 10, 3, 8), 3);
    assert_eq!(eval(&ucla, &["--protocol", "nwucla"]).status.code(), Some(2));
    let mut cfg = ModelConfig::toy();
    cfg.topology = "nwucla20".into();
    let ucla_ckpt = tmp.path().join("ucla.ckpt");
    save_checkpoint(&Model::new(cfg, 0).unwrap(), &ucla_ckpt).unwrap();
    let r = stdout_json(&protoparts(&[
        "eval", "--checkpoint", p(&ucla_ckpt), "--data", p(&ucla), "--protocol", "nwucla",
    ]));
    let classes: Vec<&str> = r["per_class"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["class"].as_str().unwrap())
        .collect();
    assert_eq!(classes, ["A2", "A4", "A6", "A8", "A10"]);
}

#[test]
fn eval_rejects_mismatched_config_and_missing_exemplars() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), &spec("ntu25", 6, 4, 8), 1);
    let ckpt = tmp.path().join("m.ckpt");
    save_checkpoint(&Model::new(ModelConfig::toy(), 0).unwrap(), &ckpt).unwrap();
    let cfg = tmp.path().join("defaults.json");
    fs::write(&cfg, "{}").unwrap();
    let o = protoparts(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert_eq!(o.status.code(), Some(2));
    let map = tmp.path().join("ex.txt");
    fs::write(&map, "# only one class\nA5 A5_0001\n").unwrap();
    let o = protoparts(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--holdout", "2", "--exemplars", p(&map),
    ]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&map, "A5 A5_0001\nA6 A6_0003\n").unwrap();
    let r = stdout_json(&protoparts(&[
        "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--holdout", "2", "--exemplars", p(&map),
    ]));
    assert_eq!(r["exemplars"]["A6"], "A6_0003");
    assert_eq!(r["exemplar_source"], "map");
}

#[test]
fn attention_report_lists_top_parts_and_errors() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), &spec("ntu25", 3, 2, 8), 1);
    let mut model = Model::new(ModelConfig::toy(), 0).unwrap();
    let fusion = model.fusion().clone();
    for id in [
        fusion.attention1.weight,
        fusion.attention1.bias,
        fusion.attention2.weight,
        fusion.attention2.bias,
    ] {
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let ckpt = tmp.path().join("zero.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let out = tmp.path().join("report");
    let args = [
        "attention-report", "--checkpoint", p(&ckpt), "--data", p(&data), "--samples",
        "A1_0000,A2_0001,nobody", "--plot", "--out", p(&out),
    ];
    let first = protoparts(&args);
    let v = stdout_json(&first);
    let records = v["records"].as_array().unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(v["errors"].as_array().unwrap().len(), 1);
    for r in records {
        let att = r["attention"].as_array().unwrap();
        assert_eq!(att.len(), 10);
        assert!(att.iter().all(|a| a.as_f64() == Some(0.5)));
        assert_eq!(r["top3"], json!(["torso_head", "left_arm", "right_arm"]));
    }
    assert!(out.join("attention_A1_0000.svg").exists());
    assert_eq!(protoparts(&args).stdout, first.stdout);

    let o = protoparts(&["attention-report", "--checkpoint", p(&ckpt), "--data", p(&data), "--samples", "ghost"]);
    assert_eq!(o.status.code(), Some(3));
}
