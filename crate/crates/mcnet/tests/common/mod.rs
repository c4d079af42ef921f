#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn mcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcnet")).args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A model small enough for command-line tests to train in seconds.
pub const TINY: &str = "profile = desk
model.image_size = 32
model.motion_size = 16
model.memory.c = 8
model.memory.h = 4
model.memory.w = 4
train.batch = 2
train.log_every = 0
train.checkpoint_every = 0
";

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Renders a dataset of 32×32 frames and writes a tiny training config.
pub fn tiny_setup(root: &Path, steps: u64, precision: &str) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let out = mcnet(&["synth", "--out", p(&data), "--sequences", "2", "--frames", "3", "--size", "32", "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = root.join("run");
    let cfg = root.join("run.cfg");
    let text = format!(
        "{TINY}train.steps = {steps}\ntrain.precision = {precision}\ndata.manifest = {}\ndata.out_dir = {}\n",
        data.join("manifest.txt").display(),
        run.display()
    );
    std::fs::write(&cfg, text).unwrap();
    (cfg, run)
}
