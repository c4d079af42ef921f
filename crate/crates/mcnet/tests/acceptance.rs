//! End-to-end acceptance run. Prints one `criterion N: PASS|FAIL` line per
//! criterion and exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mcnet::checkpoint::{model_from_checkpoint, state_from_checkpoint, state_to_checkpoint, Checkpoint};
use mcnet::config::RunConfig;
use mcnet::dataset::Dataset;
use mcnet::eval::{eval_same, mean_metrics};
use mcnet::manifest::Manifest;
use mcnet::synth::write_dataset;
use mcnet::trainer::{train, TrainReport, METRICS_FILE};
use mcnet_core::autodiff::kernels::identity_grid;
use mcnet_core::gradcheck;
use mcnet_core::memory::{attend, modulate_demodulate, split_channels};
use mcnet_core::motion::warp_feature;
use mcnet_core::objectives::{
    consistency_loss, keypoint_distance_exact, metrics, perceptual_loss, total_loss, ConsistencyLevels,
    IdentityExtractor, LossParts, LossWeights, RandomConvExtractor, TransformBatch, PYRAMID_LEVELS,
};
use mcnet_core::optim::Adam;
use mcnet_core::train::{forward_losses, LossSettings};
use mcnet_core::{AnimateOptions, MCNetModel, ModelConfig, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAIN_STEPS: u64 = 1500;
const LEARNING_RATE: f64 = 1e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut weakest = (String::new(), 0.0f64);
    let mut failures = Vec::new();
    let mut few_probes = Vec::new();
    let ops = gradcheck::registry();
    for op in &ops {
        let report = match gradcheck::check_op(op, 0) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{} errored: {e}", op.name)),
        };
        if report.probes.len() < 3 {
            few_probes.push(report.name.clone());
        }
        if !report.passed() || report.max_rel_err() >= 1e-4 {
            failures.push(report.name.clone());
        }
        if report.max_rel_err() > weakest.1 {
            weakest = (report.name.to_string(), report.max_rel_err());
        }
    }
    let in_process = start.elapsed();
    let cli_start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_mcnet")).arg("gradcheck").output().map(|o| o.status.code());
    let cli = cli_start.elapsed();
    let pass = failures.is_empty()
        && few_probes.is_empty()
        && status.as_ref().is_ok_and(|c| *c == Some(0))
        && cli < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} ops, worst rel err {:.1e} ({}), failed {:?}, <3 probes {:?}, cli exit {:?} in {:.1}s (in-process {:.1}s)",
            ops.len(),
            weakest.1,
            weakest.0,
            failures,
            few_probes,
            status.ok().flatten(),
            cli.as_secs_f64(),
            in_process.as_secs_f64()
        ),
    )
}

fn demod_row_sums(w: &Tensor<f64>, s: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let (wv, sv) = (tape.constant(w.clone()), tape.constant(s.clone()));
    let out = modulate_demodulate(&mut tape, wv, sv, eps).unwrap();
    let v = tape.value(out);
    let (b, co) = (v.shape()[0], v.shape()[1]);
    let per = v.numel() / (b * co);
    v.data().chunks(per).map(|row| row.iter().map(|x| x * x).sum()).collect()
}

fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, scaled: bool) -> Tensor<f64> {
    let (b, c, nq) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let nk = k.shape()[2];
    let scale = if scaled { 1.0 / (c as f64).sqrt() } else { 1.0 };
    let mut out = Tensor::zeros(&[b, c, nq]);
    for bi in 0..b {
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| (0..c).map(|ch| q.at(&[bi, ch, i]) * k.at(&[bi, ch, j])).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                let val: f64 = (0..nk).map(|j| e[j] / z * v.at(&[bi, ch, j])).sum();
                let at = out.offset(&[bi, ch, i]);
                out.data_mut()[at] = val;
            }
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut notes = Vec::new();
    let mut pass = true;

    let w = random(&[6, 4, 3, 3], -1.0, 1.0, &mut rng);
    let s = random(&[2, 4], 0.1, 2.0, &mut rng);
    let sums = demod_row_sums(&w, &s, 1e-8);
    let in_range = sums.iter().all(|&x| x > 0.0 && x <= 1.0);
    let gap_tiny = sums.iter().map(|x| (1.0 - x).abs()).fold(0.0, f64::max);
    let big = demod_row_sums(&w, &s, 1.0).iter().map(|x| 1.0 - x).fold(f64::INFINITY, f64::min);
    let mid = demod_row_sums(&w, &s, 1e-3).iter().map(|x| 1.0 - x).fold(0.0, f64::max);
    let demod_ok = in_range && gap_tiny < 1e-6 && mid < big;
    pass &= demod_ok;
    notes.push(format!("demod sums in (0,1] {in_range}, |1-sum| {gap_tiny:.1e} at eps 1e-8"));

    let mut scaled_gap = 0.0f64;
    for c in [0.1, 0.5, 3.0, 250.0] {
        let build = |style: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (wv, sv) = (tape.constant(w.clone()), tape.constant(style.clone()));
            let o = modulate_demodulate(&mut tape, wv, sv, 1e-8).unwrap();
            tape.value(o).clone()
        };
        let a = build(&s);
        let b = build(&s.map(|x| x * c));
        let rel = a.max_abs_diff(&b) / a.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        scaled_gap = scaled_gap.max(rel);
    }
    pass &= scaled_gap < 1e-6;
    notes.push(format!("rescaling rel diff {scaled_gap:.1e}"));

    let mut row_err = 0.0f64;
    let mut oracle_err = 0.0f64;
    for (b, c, nq, nk, scaled) in [(1, 1, 1, 1, true), (2, 3, 5, 4, true), (2, 4, 3, 7, false), (1, 8, 16, 9, true)] {
        let q = random(&[b, c, nq], -2.0, 2.0, &mut rng);
        let k = random(&[b, c, nk], -2.0, 2.0, &mut rng);
        let v = random(&[b, c, nk], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let (out, attn) = attend(&mut tape, qv, kv, vv, scaled).unwrap();
        for row in tape.value(attn).data().chunks(nk) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        oracle_err = oracle_err.max(tape.value(out).max_abs_diff(&naive_attention(&q, &k, &v, scaled)));
    }
    pass &= row_err < 1e-6 && oracle_err < 1e-9;
    notes.push(format!("attention row err {row_err:.1e}, oracle err {oracle_err:.1e}"));

    let mut split_exact = true;
    for c in [2, 6, 16] {
        let x = random(&[2, c, 3, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (a, b) = split_channels(&mut tape, xv).unwrap();
        let back = tape.concat(&[a, b], 1).unwrap();
        split_exact &= tape.value(back) == &x && tape.shape(a)[1] == c / 2;
    }
    pass &= split_exact;
    notes.push(format!("split/concat exact {split_exact}"));

    let mut warp_err = 0.0f64;
    for (h, fh) in [(8, 8), (16, 8), (4, 16)] {
        let x = random(&[2, 3, h, h], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let flow = tape.constant(Tensor::stack(&[identity_grid::<f64>(fh, fh), identity_grid(fh, fh)]).unwrap());
        let flow = tape.reshape(flow, &[2, fh, fh, 2]).unwrap();
        let y = warp_feature(&mut tape, xv, flow).unwrap();
        warp_err = warp_err.max(tape.value(y).max_abs_diff(&x));
    }
    let cfg = ModelConfig {
        image_size: 32,
        motion_size: 16,
        memory_channels: 8,
        memory_height: 4,
        memory_width: 4,
        occlusion: false,
        ..ModelConfig::desk()
    };
    let (model, store) = MCNetModel::init::<f64>(&cfg, 3).unwrap();
    let img = random(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let s = tape.constant(img);
    let a = model.animate(&mut tape, &store, s, s, AnimateOptions::default()).unwrap();
    for (e, w) in a.encoded.iter().zip(&a.warped) {
        warp_err = warp_err.max(tape.value(*e).max_abs_diff(tape.value(*w)));
    }
    pass &= warp_err < 1e-5;
    notes.push(format!("identity warp err {warp_err:.1e}"));
    outcome(pass, notes.join(", "))
}

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        motion_size: 16,
        memory_channels: 8,
        memory_height: 4,
        memory_width: 4,
        ..ModelConfig::desk()
    }
}

fn criterion_3() -> Outcome {
    let cfg = small_config();
    let (model, store) = MCNetModel::init::<f64>(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let s = tape.constant(random(&[2, 3, 32, 32], 0.0, 1.0, &mut rng));
    let d = tape.constant(random(&[2, 3, 32, 32], 0.0, 1.0, &mut rng));
    let a = model.animate(&mut tape, &store, s, d, AnimateOptions::default()).unwrap();
    let hw = (cfg.memory_height, cfg.memory_width);
    let loss = consistency_loss(&mut tape, &a.levels, hw, ConsistencyLevels::All).unwrap();
    let grads = tape.backward(loss).unwrap().params(&tape, &store);
    let mut leaked = Vec::new();
    let mut checked = 0;
    for (id, name, _) in store.iter() {
        if name.starts_with("encoder") || name.starts_with("kp.") {
            checked += 1;
            if grads.max_abs(id) != 0.0 {
                leaked.push(name.to_string());
            }
        }
    }
    let bank = grads.max_abs(model.memory.id);
    outcome(
        leaked.is_empty() && checked > 0 && bank > 0.0,
        format!("{checked} encoder/detector tensors, nonzero {leaked:?}, memory.bank max |grad| {bank:.3e}"),
    )
}

fn criterion_4() -> Outcome {
    let cfg = small_config();
    let (model, mut store) = MCNetModel::init::<f64>(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let source = random(&[2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let driving = random(&[2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let conditioned = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let (s, d) = (tape.constant(source.clone()), tape.constant(driving.clone()));
        let a = model.animate(&mut tape, store, s, d, AnimateOptions::default()).unwrap();
        a.levels.iter().map(|l| tape.value(l.conditioned).clone()).collect::<Vec<_>>()
    };
    let before = conditioned(&store);
    let snapshot = store.clone();
    let transforms = TransformBatch::random(4, &mut rng);
    let extractor = RandomConvExtractor::default();
    let graph =
        forward_losses(&model, &store, &extractor, &source, &driving, &transforms, &LossSettings::default()).unwrap();
    let grads = graph.param_grads(&store).unwrap();
    let mut adam = Adam::new(&store, Default::default());
    adam.step(&mut store, &grads).unwrap();
    for (id, name, t) in snapshot.iter() {
        if id != model.memory.id {
            store.set(name, t.clone()).unwrap();
        }
    }
    let bank_moved = store.get(model.memory.id).max_abs_diff(snapshot.get(model.memory.id));
    let after = conditioned(&store);
    let changes: Vec<f64> = before.iter().zip(&after).map(|(a, b)| a.max_abs_diff(b)).collect();
    let listed: Vec<String> = changes.iter().map(|c| format!("{c:.2e}")).collect();
    outcome(
        bank_moved > 0.0 && changes.iter().all(|&c| c > 0.0),
        format!("memory.bank moved {bank_moved:.2e}; conditioned memory change per level [{}]", listed.join(", ")),
    )
}

struct Trained {
    report: TrainReport,
    elapsed: Duration,
    checkpoint: Checkpoint,
    held: Dataset,
    cfg: RunConfig,
}

fn train_desk(root: &Path) -> Result<Trained, String> {
    write_dataset(&root.join("train"), 20, 30, 64, 1).map_err(|e| e.to_string())?;
    write_dataset(&root.join("held"), 4, 30, 64, 2).map_err(|e| e.to_string())?;
    let load = |p: &str| Dataset::load(&Manifest::load(&root.join(p).join("manifest.txt"))?);
    let data = load("train").map_err(|e| e.to_string())?;
    let held = load("held").map_err(|e| e.to_string())?;
    let text = format!(
        "profile = desk\ntrain.steps = {TRAIN_STEPS}\ntrain.lr = {LEARNING_RATE}\ntrain.batch = 8\n\
         train.precision = f32\ntrain.log_every = 250\ntrain.checkpoint_every = 0\n"
    );
    let cfg = RunConfig::parse(&text, &[]).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut log = |line: &str| eprintln!("  {line}  [{:.0}s]", start.elapsed().as_secs_f64());
    let report = train(&cfg, &data, &root.join("run"), &mut log).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let checkpoint = Checkpoint::load(&report.checkpoint).map_err(|e| e.to_string())?;
    Ok(Trained { report, elapsed, checkpoint, held, cfg })
}

fn criterion_5(t: &Trained) -> Outcome {
    let (model, store) = model_from_checkpoint::<f32>(&t.checkpoint).unwrap();
    let m = mean_metrics(&eval_same(&model, &store, &t.held, AnimateOptions::default()).unwrap());
    let first = t.report.records.first().unwrap().stats.loss_total;
    let last = t.report.records.last().unwrap().stats.loss_total;

    let frames: Vec<(usize, usize)> = (0..4).flat_map(|s| [(s, 0), (s, 15)]).collect();
    let x: Tensor<f32> = t.held.batch(&frames).unwrap();
    let (untrained, fresh) = MCNetModel::init::<f32>(&t.cfg.model, t.cfg.train.seed).unwrap();
    let l1_before = metrics(&untrained.generate(&fresh, &x, &x, AnimateOptions::default()).unwrap(), &x).unwrap().l1;
    let l1_after = metrics(&model.generate(&store, &x, &x, AnimateOptions::default()).unwrap(), &x).unwrap().l1;

    let pass = m.psnr >= 25.0
        && m.ssim >= 0.80
        && last <= 0.5 * first
        && l1_after <= 0.5 * l1_before
        && t.report.final_step <= 5000
        && t.elapsed < Duration::from_secs(30 * 60);
    outcome(
        pass,
        format!(
            "{} steps in {:.0}s, held-out psnr {:.2} ssim {:.4} l1 {:.4}, loss {first:.3} -> {last:.3}, self-reconstruction l1 {l1_before:.4} -> {l1_after:.4}",
            t.report.final_step,
            t.elapsed.as_secs_f64(),
            m.psnr,
            m.ssim,
            m.l1
        ),
    )
}

fn criterion_6(t: &Trained) -> Outcome {
    let (model, store) = model_from_checkpoint::<f32>(&t.checkpoint).unwrap();
    let full = mean_metrics(&eval_same(&model, &store, &t.held, AnimateOptions { ablate_memory: false }).unwrap());
    let ablated = mean_metrics(&eval_same(&model, &store, &t.held, AnimateOptions { ablate_memory: true }).unwrap());
    outcome(
        ablated.ssim < full.ssim && ablated.l1 > full.l1,
        format!("ssim {:.4} -> {:.4}, l1 {:.4} -> {:.4} without memory", full.ssim, ablated.ssim, full.l1, ablated.l1),
    )
}

fn pool2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w / 4);
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            let at = |dy: usize, dx: usize| x[(2 * y + dy) * w + 2 * xx + dx];
            out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
        }
    }
    out
}

fn criterion_7() -> Outcome {
    let two = |d: f64| Tensor::new(&[1, 2, 2], vec![0.0, 0.0, d * 0.6, d * 0.4]).unwrap();
    let far = keypoint_distance_exact(&two(0.5), 0.2);
    let near = keypoint_distance_exact(&two(0.1), 0.2);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, c, h, w) = (2, 3, 32, 24);
    let g = random(&[b, c, h, w], 0.0, 1.0, &mut rng);
    let t = random(&[b, c, h, w], 0.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let (gv, tv) = (tape.constant(g.clone()), tape.constant(t.clone()));
    let p = perceptual_loss(&mut tape, gv, tv, &IdentityExtractor).unwrap();
    let got = tape.value(p).item();
    let mut planes_g: Vec<Vec<f64>> = g.data().chunks(h * w).map(|p| p.to_vec()).collect();
    let mut planes_t: Vec<Vec<f64>> = t.data().chunks(h * w).map(|p| p.to_vec()).collect();
    let (mut hh, mut ww) = (h, w);
    let mut oracle = 0.0;
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            planes_g = planes_g.iter().map(|p| pool2(p, hh, ww)).collect();
            planes_t = planes_t.iter().map(|p| pool2(p, hh, ww)).collect();
            hh /= 2;
            ww /= 2;
        }
        let mut sum = 0.0;
        for (a, b) in planes_g.iter().zip(&planes_t) {
            sum += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
        oracle += sum / (b * c * hh * ww) as f64;
    }
    let perceptual_err = (got - oracle).abs();

    let parts = [0.37, 1.25, 0.8, 0.05];
    let mut tape = Tape::<f64>::new();
    let v: Vec<_> = parts.iter().map(|&p| tape.constant(Tensor::scalar(p))).collect();
    let lp = LossParts { perceptual: v[0], equivariance: v[1], distance: v[2], consistency: v[3] };
    let lw = LossWeights { perceptual: 10.0, equivariance: 10.0, distance: 10.0, consistency: 10.0 };
    let total = total_loss(&mut tape, &lp, &lw).unwrap();
    let total = tape.value(total).item();
    let expected = 10.0 * parts.iter().sum::<f64>();
    let total_err = (total - expected).abs();

    outcome(
        far == 0.0 && near == 4.0 && perceptual_err < 1e-6 && total_err < 1e-9,
        format!(
            "distance {far} at 0.5 and {near} at 0.1, perceptual {got:.6} vs oracle {oracle:.6} (err {perceptual_err:.1e}), total {total} vs {expected}"
        ),
    )
}

fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let n = 11.min(h).min(w);
    let n = if n % 2 == 0 { n - 1 } else { n };
    let r = (n as f64 - 1.0) / 2.0;
    let mut kernel = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - r, x as f64 - r);
            kernel[y * n + x] = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let z: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= z);
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - n {
        for x0 in 0..=w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let k = kernel[y * n + x];
                    let (p, q) = (a[(y0 + y) * w + x0 + x], b[(y0 + y) * w + x0 + x]);
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
    let same = metrics(&x, &x).unwrap();
    let identical = same.l1 == 0.0 && same.psnr == 100.0 && (same.ssim - 1.0).abs() < 1e-12;

    let mut ssim_err = 0.0f64;
    for (h, w) in [(16, 16), (12, 20), (7, 9)] {
        let a = random(&[1, 3, h, w], 0.0, 1.0, &mut rng);
        let noise = random(&[1, 3, h, w], -0.2, 0.2, &mut rng);
        let b = a.zip_map(&noise, |v, n| (v + n).clamp(0.0, 1.0)).unwrap();
        let got = metrics(&a, &b).unwrap().ssim;
        let oracle: f64 = (0..3)
            .map(|c| ssim_oracle(&a.data()[c * h * w..(c + 1) * h * w], &b.data()[c * h * w..(c + 1) * h * w], h, w))
            .sum::<f64>()
            / 3.0;
        ssim_err = ssim_err.max((got - oracle).abs());
    }

    let base = random(&[1, 3, 16, 16], 0.0, 0.9, &mut rng);
    let shifted = base.map(|v| v + 0.1);
    let psnr = metrics(&base, &shifted).unwrap().psnr;
    let psnr_err = (psnr - 20.0).abs();
    outcome(
        identical && ssim_err < 1e-6 && psnr_err < 1e-9,
        format!(
            "metrics(x,x) = ({}, {}, {}), ssim oracle err {ssim_err:.1e}, 0.1 gap psnr {psnr:.12} dB",
            same.l1, same.psnr, same.ssim
        ),
    )
}

fn criterion_9(root: &Path) -> Outcome {
    let manifest = write_dataset(&root.join("repro_data"), 4, 8, 64, 3).unwrap();
    let data = Dataset::load(&Manifest::load(&root.join("repro_data/manifest.txt")).unwrap()).unwrap();
    assert_eq!(manifest.num_frames(), 32);
    let cfg = RunConfig::parse("profile = desk\ntrain.steps = 10\ntrain.precision = f64\ntrain.log_every = 0\n", &[])
        .unwrap();
    let run = |name: &str| train(&cfg, &data, &root.join(name), &mut |_| {}).unwrap();
    let (a, b) = (run("repro_a"), run("repro_b"));
    let csv_a = fs::read(root.join("repro_a").join(METRICS_FILE)).unwrap();
    let csv_b = fs::read(root.join("repro_b").join(METRICS_FILE)).unwrap();
    let csv_same = csv_a == csv_b && a.records.len() == 10;

    let bytes = fs::read(&b.checkpoint).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let state = state_from_checkpoint::<f64>(&ck).unwrap();
    let resaved = state_to_checkpoint(&state).unwrap().to_bytes() == bytes;
    let path = root.join("copy.mcnc");
    ck.save(&path).unwrap();
    let file_same = fs::read(&path).unwrap() == bytes;

    let (m1, s1) = model_from_checkpoint::<f64>(&ck).unwrap();
    let (m2, s2) = model_from_checkpoint::<f64>(&Checkpoint::load(&path).unwrap()).unwrap();
    let src: Tensor<f64> = data.batch(&[(0, 0), (3, 0)]).unwrap();
    let drv: Tensor<f64> = data.batch(&[(0, 5), (3, 7)]).unwrap();
    let o1 = m1.generate(&s1, &src, &drv, AnimateOptions::default()).unwrap();
    let o2 = m2.generate(&s2, &src, &drv, AnimateOptions::default()).unwrap();
    let o0 = state.model.generate(&state.store, &src, &drv, AnimateOptions::default()).unwrap();
    let forward_same = o1.data() == o2.data() && o0.data() == o1.data();
    outcome(
        csv_same && resaved && file_same && forward_same,
        format!(
            "csv identical {csv_same} ({} bytes), re-encode identical {resaved}, file copy identical {file_same}, forward identical {forward_same}",
            csv_a.len()
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    match train_desk(dir.path()) {
        Ok(t) => {
            report(5, criterion_5(&t));
            report(6, criterion_6(&t));
        }
        Err(e) => {
            report(5, outcome(false, format!("training failed: {e}")));
            report(6, outcome(false, "no trained checkpoint".into()));
        }
    }
    report(7, criterion_7());
    report(8, criterion_8());
    report(9, criterion_9(dir.path()));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
