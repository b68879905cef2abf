mod common;

use std::fs;

use axon_core::voxcore::load_vvol;
use common::{axon, err_json, ok_json, tiny_config, write_config};

#[test]
fn usage_errors_are_json() {
    let e = err_json(axon().arg("frobnicate"));
    assert_eq!(e["error"], "usage");
    let e = err_json(axon().args(["pipeline"]));
    assert_eq!(e["error"], "usage");
    assert!(axon().arg("--help").output().unwrap().status.success());
}

#[test]
fn missing_config_is_reported() {
    let e = err_json(axon().args(["pipeline", "--config", "/nonexistent/axon.toml"]));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("/nonexistent/axon.toml"), "{e}");
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = tiny_config(dir.path()).to_toml().unwrap().replace("[sr]\n", "[sr]\ndepth = 9\n");
    fs::write(&path, text).unwrap();
    let e = err_json(axon().args(["train-sr", "--config"]).arg(&path));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("depth"));
}

#[test]
fn ablation_switches_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&tiny_config(dir.path()), &dir.path().join("c.toml"));
    let e = err_json(axon().args(["ablate", "--switch", "dropout", "--config"]).arg(&cfg));
    assert_eq!(e["error"], "config");
    let msg = e["message"].as_str().unwrap();
    for s in ["clamping", "bi-planar", "drr-mix", "coarse-only", "fine-only"] {
        assert!(msg.contains(s), "{msg}");
    }
    let e = err_json(axon().args(["ablate", "--switch", "clamping", "--switch", "drr-mix", "--config"]).arg(&cfg));
    assert_eq!(e["error"], "config");
    let e = err_json(axon().args(["train-coarse", "--ablation", "wider", "--config"]).arg(&cfg));
    assert_eq!(e["error"], "config");
}

#[test]
fn fine_training_needs_the_prior() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&tiny_config(dir.path()), &dir.path().join("c.toml"));
    ok_json(axon().args(["phantom", "--config"]).arg(&cfg));
    let e = err_json(axon().args(["train-fine", "--config"]).arg(&cfg));
    assert_eq!(e["error"], "missing_checkpoint");
    assert!(e["message"].as_str().unwrap().contains("prior"), "{e}");
}

#[test]
fn axon_seed_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(dir.path());
    let mut volumes = Vec::new();
    for (tag, seed) in [("a", None), ("b", Some("1234")), ("c", Some("99"))] {
        let mut c = base.clone();
        c.paths.dataset = dir.path().join(tag);
        let path = write_config(&c, &dir.path().join(format!("{tag}.toml")));
        let mut cmd = axon();
        cmd.args(["phantom", "--config"]).arg(&path);
        if let Some(s) = seed {
            cmd.env("AXON_SEED", s);
        }
        ok_json(&mut cmd);
        let first = fs::read_dir(&c.paths.dataset)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "vvol"))
            .min()
            .unwrap();
        volumes.push(load_vvol(first).unwrap());
    }
    assert_eq!(base.seed, 1234);
    assert_eq!(volumes[0], volumes[1]);
    assert_ne!(volumes[0], volumes[2]);

    let path = dir.path().join("a.toml");
    let e = err_json(axon().args(["phantom", "--config"]).arg(&path).env("AXON_SEED", "-3"));
    assert_eq!(e["error"], "config");
}

#[test]
fn drr_preprocess_metrics_and_slices() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(&tiny_config(d), &d.join("c.toml"));
    ok_json(axon().args(["phantom", "--config"]).arg(&cfg));
    let vol = fs::read_dir(d.join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "vvol"))
        .min()
        .unwrap();

    let drr = d.join("pa.pgm");
    ok_json(axon().args(["drr", "--pixels", "16", "--volume"]).arg(&vol).arg("--out").arg(&drr));
    assert!(fs::read(&drr).unwrap().starts_with(b"P5"));

    let small = d.join("small.vvol");
    ok_json(axon().args(["preprocess", "--dims", "4,4,4", "--volume"]).arg(&vol).arg("--out").arg(&small));
    assert_eq!(load_vvol(&small).unwrap().dims(), [4; 3]);

    let full = d.join("full.vvol");
    ok_json(axon().args(["preprocess", "--volume"]).arg(&vol).arg("--out").arg(&full));
    let out = axon().args(["metrics", "--window", "-100,900", "--pred"]).arg(&full).arg("--truth").arg(&vol).output().unwrap();
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["summary"], true);
    assert!(lines[0]["mse"].as_f64().unwrap() < 1e-12, "{:?}", lines[0]);
    let report = d.join("m.jsonl");
    let r = ok_json(axon().args(["metrics", "--pred"]).arg(&full).arg("--truth").arg(&full).arg("--out").arg(&report));
    assert_eq!(r["mean"]["mae"], 0.0, "{r}");
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 2);
    let e = err_json(axon().args(["metrics", "--pred"]).arg(&small).arg(&small).arg("--truth").arg(&vol));
    assert_eq!(e["error"], "invalid_argument");

    ok_json(axon().args(["slices", "--prefix", "v", "--volume"]).arg(&vol).arg("--out-dir").arg(d));
    for plane in ["axial", "sagittal", "coronal"] {
        assert!(d.join(format!("v_{plane}.pgm")).exists());
    }
}
