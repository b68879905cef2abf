#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axon_core::pipeline::PipelineConfig;
use serde_json::Value;

pub fn axon() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_axon"));
    c.env_remove("AXON_SEED");
    c
}

/// Smallest config that exercises every stage: 4³ diffusion grid, 8³ output.
pub fn tiny_config(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::toy();
    c.data.n_phantoms = 12;
    c.model.dims = [4; 3];
    c.model.full_dims = [8; 3];
    c.model.r = 4;
    c.coarse.enc_channels = 4;
    c.coarse.unet_base = 4;
    c.coarse.unet_mults = vec![1, 2];
    c.coarse.bridge_t = 10;
    c.coarse.ddim_steps = 2;
    c.fine.unet_base = 4;
    c.fine.unet_mults = vec![1, 2];
    c.fine.ddpm_t = 10;
    c.fine.ddim_steps = 2;
    c.sr.n_rrdb = 1;
    c.sr.base_features = 4;
    for s in [&mut c.train.coarse, &mut c.train.prior, &mut c.train.fine, &mut c.train.sr] {
        s.epochs = 1;
        s.batch = 4;
    }
    c.paths.dataset = dir.join("data");
    c.paths.checkpoints = dir.join("ckpt");
    c.paths.output = dir.join("out");
    c.validate().unwrap();
    c
}

pub fn write_config(cfg: &PipelineConfig, path: &Path) -> PathBuf {
    std::fs::write(path, cfg.to_toml().unwrap()).unwrap();
    path.to_path_buf()
}

/// Runs `axon` and parses its one-line JSON result.
pub fn ok_json(cmd: &mut Command) -> Value {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "axon failed: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(&text).unwrap()
}

/// Runs `axon` expecting failure; returns the parsed error line.
pub fn err_json(cmd: &mut Command) -> Value {
    let out: Output = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(1), "stdout: {}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stderr).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(&text).unwrap()
}
