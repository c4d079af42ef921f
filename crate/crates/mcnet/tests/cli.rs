mod common;

use std::fs;

use common::{code, mcnet, p, stdout, tiny_setup};
use mcnet::checkpoint::{Checkpoint, TensorData};
use mcnet::image_io::Image;
use mcnet_core::Tensor;

#[test]
fn synth_writes_frames_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let r = mcnet(&["synth", "--out", p(&out), "--sequences", "1", "--frames", "2", "--size", "32", "--seed", "3"]);
    assert_eq!(code(&r), 0);
    let frames: Vec<_> = fs::read_dir(out.join("seq_000"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ppm"))
        .collect();
    assert_eq!(frames.len(), 2);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let render = |name: &str| {
        let out = dir.path().join(name);
        let r =
            mcnet(&["synth", "--out", p(&out), "--sequences", "2", "--frames", "3", "--size", "32", "--seed", "11"]);
        assert_eq!(code(&r), 0);
        let mut files = Vec::new();
        for s in 0..2 {
            for f in 0..3 {
                files.push(fs::read(out.join(format!("seq_{s:03}/frame_{f:03}.ppm"))).unwrap());
            }
            files.push(fs::read(out.join(format!("seq_{s:03}/landmarks.csv"))).unwrap());
        }
        files.push(fs::read(out.join("manifest.txt")).unwrap());
        files
    };
    assert_eq!(render("a"), render("b"));
}

#[test]
fn synth_rejects_small_frames() {
    let dir = tempfile::tempdir().unwrap();
    let r = mcnet(&["synth", "--out", p(dir.path()), "--sequences", "1", "--frames", "2", "--size", "16"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mcnet(&["no-such-command"])), 1);
    assert_eq!(code(&mcnet(&["synth"])), 1);
    assert_eq!(code(&mcnet(&["gradcheck", "--op", "no_such_op"])), 1);
    assert_eq!(code(&mcnet(&["--help"])), 0);
}

#[test]
fn gradcheck_single_op() {
    let r = mcnet(&["gradcheck", "--op", "softmax"]);
    assert_eq!(code(&r), 0);
    let text = stdout(&r);
    assert!(text.contains("pass softmax"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("pass")).count(), 1);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "profile = desk\nmodel.wings = 2\n").unwrap();
    let r = mcnet(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("model.wings"));
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run) = tiny_setup(dir.path(), 0, "f32");
    assert_eq!(code(&mcnet(&["train", "--config", p(&cfg)])), 0);
    let mut names: Vec<String> =
        fs::read_dir(&run).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["latest.mcnc", "metrics.csv", "step_000000.mcnc"]);
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    let ck = Checkpoint::load(&run.join("latest.mcnc")).unwrap();
    assert_eq!(ck.scalar("train.step").unwrap(), 0.0);
}

#[test]
fn resumed_run_continues_step_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run) = tiny_setup(dir.path(), 2, "f32");
    assert_eq!(code(&mcnet(&["train", "--config", p(&cfg)])), 0);
    let resume = format!("train.resume={}", run.join("latest.mcnc").display());
    let r = mcnet(&["train", "--config", p(&cfg), "--set", "train.steps=4", "--set", &resume]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2", "3"]);
    assert!(run.join("step_000004.mcnc").exists());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run) = tiny_setup(dir.path(), 2, "f64");
    let whole = dir.path().join("whole");
    let set_out = format!("data.out_dir={}", whole.display());
    assert_eq!(code(&mcnet(&["train", "--config", p(&cfg), "--set", "train.steps=4", "--set", &set_out])), 0);
    assert_eq!(code(&mcnet(&["train", "--config", p(&cfg)])), 0);
    let resume = format!("train.resume={}", run.join("latest.mcnc").display());
    assert_eq!(code(&mcnet(&["train", "--config", p(&cfg), "--set", "train.steps=4", "--set", &resume])), 0);
    assert_eq!(fs::read(whole.join("metrics.csv")).unwrap(), fs::read(run.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(whole.join("latest.mcnc")).unwrap(), fs::read(run.join("latest.mcnc")).unwrap());
}

/// A trained tiny checkpoint plus its dataset directory.
fn trained(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (cfg, run) = tiny_setup(dir, 1, "f32");
    assert_eq!(code(&mcnet(&["train", "--config", p(&cfg)])), 0);
    (run.join("latest.mcnc"), dir.join("data"))
}

#[test]
fn animate_writes_one_frame_per_driving_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = trained(dir.path());
    let drive = dir.path().join("drive.txt");
    fs::write(&drive, format!("{}\n", data.join("seq_000/frame_001.ppm").display())).unwrap();
    let out = dir.path().join("anim");
    let src = data.join("seq_000/frame_000.ppm");
    let r =
        mcnet(&["animate", "--ckpt", p(&ck), "--source", p(&src), "--driving-manifest", p(&drive), "--out", p(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 1);
    let img = Image::load(&out.join("frame_0000.ppm")).unwrap();
    assert_eq!((img.width, img.height, img.channels), (32, 32, 3));
}

#[test]
fn animate_rejects_mismatched_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = trained(dir.path());
    let big = dir.path().join("big.ppm");
    Image::filled(64, 64, 3, 0.5).save(&big).unwrap();
    let drive = dir.path().join("drive.txt");
    fs::write(&drive, format!("{}\n", data.join("seq_000/frame_001.ppm").display())).unwrap();
    let r = mcnet(&[
        "animate",
        "--ckpt",
        p(&ck),
        "--source",
        p(&big),
        "--driving-manifest",
        p(&drive),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("64x64"));
}

#[test]
fn inspect_memory_tiles_each_channel() {
    let dir = tempfile::tempdir().unwrap();
    let (ck_path, data) = trained(dir.path());
    // make channel 0 constant
    let ck = Checkpoint::load(&ck_path).unwrap();
    let mut edited = Checkpoint::new();
    for (name, t) in ck.iter() {
        let t = match (name, t) {
            ("memory.bank", TensorData::F32(m)) => {
                let mut m: Tensor<f32> = m.clone();
                let plane = m.shape()[1] * m.shape()[2];
                m.data_mut()[..plane].fill(0.25);
                TensorData::F32(m)
            }
            _ => t.clone(),
        };
        edited.insert(name, t).unwrap();
    }
    let flat = dir.path().join("flat.mcnc");
    edited.save(&flat).unwrap();

    let out = dir.path().join("mem");
    assert_eq!(code(&mcnet(&["inspect-memory", "--ckpt", p(&flat), "--out", p(&out)])), 0);
    let tiles = (0..8).filter(|c| out.join(format!("channel_{c:03}.pgm")).exists()).count();
    assert_eq!(tiles, 8);
    assert!(!out.join("channel_008.pgm").exists());
    let gray = Image::load(&out.join("channel_000.pgm")).unwrap();
    assert!(gray.data.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));

    let cond = dir.path().join("cond");
    let src = data.join("seq_000/frame_000.ppm");
    assert_eq!(code(&mcnet(&["inspect-memory", "--ckpt", p(&flat), "--out", p(&cond), "--source", p(&src)])), 0);
    for level in 1..=3 {
        assert!(cond.join(format!("level{level}/grid.pgm")).exists());
    }
}

#[test]
fn eval_modes_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = trained(dir.path());
    let manifest = data.join("manifest.txt");
    let same = mcnet(&["eval", "--ckpt", p(&ck), "--manifest", p(&manifest), "--mode", "same"]);
    assert_eq!(code(&same), 0);
    let text = stdout(&same);
    assert!(text.starts_with("sequence,frame,l1,psnr,ssim\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 2);

    let cross = mcnet(&["eval", "--ckpt", p(&ck), "--manifest", p(&manifest), "--mode", "cross"]);
    assert_eq!(code(&cross), 0);
    let header = stdout(&cross).lines().next().unwrap().to_string();
    assert!(!header.contains("psnr"), "{header}");

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "\n").unwrap();
    assert_eq!(code(&mcnet(&["eval", "--ckpt", p(&ck), "--manifest", p(&empty)])), 2);
}
