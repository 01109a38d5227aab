use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nbv-refine"));
    c.env_remove("NBVREFINE_OUTPUT_ROOT").env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "seed": 11,
        "scenes": { "train": 4, "val": 3 },
        "scene": { "object_count": [1, 3], "surface_density": 10.0, "clutter_points": 20 },
        "model": {
            "hidden_dim": 8, "num_layers": 1, "num_heads": 2, "ff_dim": 8,
            "max_points": 16, "noise_embed_dim": 4, "profile": "custom"
        },
        "train": { "batch_size": 2, "steps": 4, "log_every": 2, "checkpoint_every": 2 },
        "refine": { "steps": 3 }
    });
    let p = dir.join("tiny.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let data = d.join("data");
    assert!(run(bin().arg("--config").arg(&cfg).arg("gen-data").arg("--out").arg(&data)).status.success());
    assert!(data.join("manifest.json").is_file());

    let train = d.join("train");
    assert!(run(bin()
        .arg("--config")
        .arg(&cfg)
        .args(["train", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&train))
    .status
    .success());
    let ckpt = train.join("final.ckpt");
    assert!(ckpt.is_file());
    assert!(train.join("loss.csv").is_file());

    let refined = d.join("refined.json");
    let traces = d.join("traces");
    assert!(run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("refine")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&refined)
        .args(["--solver", "euler", "--sigma-range", "0.3,3", "--mean-size", "1.9,4.5,1.6"])
        .arg("--trace")
        .arg(&traces))
    .status
    .success());
    assert!(refined.is_file());
    assert!(d.join("refined.config.json").is_file());
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("refined.config.json")).unwrap()).unwrap();
    assert_eq!(echo["refine"]["solver"], json!("euler"));
    assert_eq!(echo["refine"]["sigma_range"], json!([0.3, 3.0]));

    for (name, pred) in [("base", data.join("val_detections.json")), ("refined", refined.clone())] {
        assert!(run(bin()
            .arg("--config")
            .arg(&cfg)
            .arg("eval")
            .arg("--pred")
            .arg(&pred)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(d.join(name))
            .args(["--ranges", "0-40,40-80"]))
        .status
        .success());
        for f in ["metrics.json", "metrics.csv", "metrics.md", "config.json"] {
            assert!(d.join(name).join(f).is_file(), "{name}/{f}");
        }
    }

    let out = run(bin()
        .arg("report")
        .arg(d.join("base/metrics.json"))
        .arg(d.join("refined/metrics.json"))
        .arg("--out")
        .arg(d.join("report")));
    assert!(out.status.success());
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.contains("base") && md.contains("refined"));
    assert!(d.join("report/report.md").is_file());
    let deltas = fs::read_to_string(d.join("report/deltas.csv")).unwrap();
    assert!(deltas.starts_with("metric,before,after,improvement"));
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let gen = |force: bool| {
        let mut c = bin();
        c.arg("--config").arg(&cfg).arg("gen-data").arg("--out").arg(&data);
        if force {
            c.arg("--force");
        }
        run(&mut c)
    };
    assert!(gen(false).status.success());
    let again = gen(false);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert!(gen(true).status.success());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    fs::write(&p, r#"{"refine": {"stepz": 3}}"#).unwrap();
    let out = run(bin().arg("--config").arg(&p).arg("gen-data").arg("--out").arg(tmp.path().join("x")));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_arguments_exit_with_one() {
    assert_eq!(run(bin().arg("frobnicate")).status.code(), Some(1));
    assert_eq!(run(bin().args(["refine", "--sigma-range", "1"])).status.code(), Some(1));
    assert_eq!(run(bin().arg("--help")).status.code(), Some(0));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = tiny_config(d);
    let data = d.join("data");
    assert!(run(bin().arg("--config").arg(&cfg).arg("gen-data").arg("--out").arg(&data)).status.success());
    let ckpt = d.join("broken.ckpt");
    fs::write(&ckpt, b"\x10\0\0\0\0\0\0\0{\"version\":").unwrap();
    let out = run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("refine")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(d.join("r.json")));
    assert_eq!(out.status.code(), Some(2));
    let missing = run(bin().arg("eval").arg("--pred").arg(d.join("nope.json")).arg("--data").arg(&data).arg("--out").arg(d.join("e")));
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn output_root_variable_redirects_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let root = tmp.path().join("root");
    let out = run(bin()
        .env("NBVREFINE_OUTPUT_ROOT", &root)
        .arg("--config")
        .arg(&cfg)
        .args(["gen-data", "--out", "ds"]));
    assert!(out.status.success());
    assert!(root.join("ds/manifest.json").is_file());
}
