//! Subcommands of the `mcnet` binary.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mcnet_core::{gradcheck, AnimateOptions, DType, MCNetModel, ParamStore, Real, Tensor};

use crate::checkpoint::{model_from_checkpoint, stored_precision, Checkpoint};
use crate::config::{parse_override, RunConfig};
use crate::dataset::Dataset;
use crate::error::{AppError, Result};
use crate::eval::{eval_cross, eval_same, mean_metrics, CROSS_HEADER, SAME_HEADER};
use crate::image_io::Image;
use crate::inspect::{memory_views, write_views};
use crate::manifest::Manifest;
use crate::synth::write_dataset;
use crate::trainer::train;

#[derive(Debug, Parser)]
#[command(name = "mcnet", version, about = "Memory-compensated talking-head animation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Same,
    Cross,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic talking-face dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        sequences: usize,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a key=value configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override one configuration key, e.g. `--set train.steps=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Animate a source image with every frame of a driving manifest.
    Animate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long = "driving-manifest")]
        driving_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop the memory compensation branch.
        #[arg(long)]
        ablate_memory: bool,
    },
    /// Dump memory channels as grayscale tiles.
    InspectMemory {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Show the memory conditioned on this face instead of the shared bank.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Same)]
        mode: EvalMode,
        /// Per-frame CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        ablate_memory: bool,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { crate::error::EXIT_USAGE } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth { out: dir, sequences, frames, size, seed } => {
            let m = write_dataset(&dir, sequences, frames, size, seed)?;
            say(
                out,
                &format!("wrote {} frames in {} sequences to {}", m.num_frames(), m.sequences.len(), dir.display()),
            )
        }
        Command::Train { config, set } => {
            let overrides = set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
            let cfg = RunConfig::load(&config, &overrides)?;
            let manifest =
                cfg.data.manifest.as_ref().ok_or_else(|| AppError::Usage("data.manifest is not set".into()))?;
            let out_dir = cfg.data.out_dir.as_ref().ok_or_else(|| AppError::Usage("data.out_dir is not set".into()))?;
            let dataset = Dataset::load(&Manifest::load(manifest)?)?;
            let mut log = |line: &str| {
                let _ = writeln!(out, "{line}");
            };
            let report = train(&cfg, &dataset, out_dir, &mut log)?;
            if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
                say(
                    out,
                    &format!(
                        "trained steps {}..{}: loss {:.4} -> {:.4}, psnr {:.2}, ssim {:.4}",
                        first.step,
                        report.final_step,
                        first.stats.loss_total,
                        last.stats.loss_total,
                        last.metrics.psnr,
                        last.metrics.ssim
                    ),
                )?;
            }
            say(out, &format!("checkpoint {}", report.checkpoint.display()))
        }
        Command::Animate { ckpt, source, driving_manifest, out: dir, ablate_memory } => {
            let ck = Checkpoint::load(&ckpt)?;
            let source = Image::load(&source)?;
            let driving = Manifest::load(&driving_manifest)?;
            let opts = AnimateOptions { ablate_memory };
            let n = match stored_precision(&ck)? {
                DType::F32 => with_model::<f32, _>(&ck, |m, s| animate(m, s, &source, &driving, &dir, opts))?,
                DType::F64 => with_model::<f64, _>(&ck, |m, s| animate(m, s, &source, &driving, &dir, opts))?,
            };
            say(out, &format!("wrote {n} frames to {}", dir.display()))
        }
        Command::InspectMemory { ckpt, out: dir, source } => {
            let ck = Checkpoint::load(&ckpt)?;
            let source = source.map(|p| Image::load(&p)).transpose()?;
            let n = match stored_precision(&ck)? {
                DType::F32 => with_model::<f32, _>(&ck, |m, s| inspect(m, s, source.as_ref(), &dir))?,
                DType::F64 => with_model::<f64, _>(&ck, |m, s| inspect(m, s, source.as_ref(), &dir))?,
            };
            say(out, &format!("wrote {n} channel tiles to {}", dir.display()))
        }
        Command::Eval { ckpt, manifest, mode, out: csv, ablate_memory } => {
            let ck = Checkpoint::load(&ckpt)?;
            let dataset = Dataset::load(&Manifest::load(&manifest)?)?;
            let opts = AnimateOptions { ablate_memory };
            let (text, summary) = match stored_precision(&ck)? {
                DType::F32 => with_model::<f32, _>(&ck, |m, s| evaluate(m, s, &dataset, mode, opts))?,
                DType::F64 => with_model::<f64, _>(&ck, |m, s| evaluate(m, s, &dataset, mode, opts))?,
            };
            match csv {
                Some(path) => {
                    fs::write(&path, text).map_err(|e| AppError::io(&path, e))?;
                    say(out, &summary)
                }
                None => out.write_all(text.as_bytes()).map_err(|e| AppError::io(Path::new("<stdout>"), e)),
            }
        }
        Command::Gradcheck { op, seed } => {
            let ops = match op {
                Some(name) => vec![gradcheck::find(&name).ok_or_else(|| {
                    let known: Vec<&str> = gradcheck::registry().iter().map(|o| o.name).collect();
                    AppError::Usage(format!("unknown op {name:?}; known ops: {}", known.join(", ")))
                })?],
                None => gradcheck::registry(),
            };
            let mut failed = Vec::new();
            for op in &ops {
                let report = gradcheck::check_op(op, seed)?;
                let verdict = if report.passed() { "pass" } else { "FAIL" };
                say(
                    out,
                    &format!(
                        "{verdict} {:<22} probes {}  max rel err {:.2e}",
                        report.name,
                        report.probes.len(),
                        report.max_rel_err()
                    ),
                )?;
                if !report.passed() {
                    failed.push(report.name);
                }
            }
            if failed.is_empty() {
                say(out, &format!("all {} operations passed", ops.len()))
            } else {
                Err(AppError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
    }
}

fn say(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| AppError::io(Path::new("<stdout>"), e))
}

fn with_model<T: Real, R>(ck: &Checkpoint, f: impl FnOnce(&MCNetModel, &ParamStore<T>) -> Result<R>) -> Result<R> {
    let (model, store) = model_from_checkpoint::<T>(ck)?;
    f(&model, &store)
}

fn check_size(img: &Image, size: usize, what: &str) -> Result<()> {
    if img.channels != 3 || img.width != size || img.height != size {
        return Err(AppError::data(format!(
            "{what} is {}x{}x{}, the model expects {size}x{size} RGB",
            img.width, img.height, img.channels
        )));
    }
    Ok(())
}

fn animate<T: Real>(
    model: &MCNetModel,
    store: &ParamStore<T>,
    source: &Image,
    driving: &Manifest,
    dir: &Path,
    opts: AnimateOptions,
) -> Result<usize> {
    let size = model.config.image_size;
    check_size(source, size, "source image")?;
    let paths: Vec<&PathBuf> = driving.sequences.iter().flatten().collect();
    if paths.is_empty() {
        return Err(AppError::data("driving manifest lists no frames"));
    }
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let src = source.to_tensor::<T>();
    for (i, path) in paths.iter().enumerate() {
        let frame = Image::load(path)?;
        check_size(&frame, size, &format!("driving frame {}", path.display()))?;
        let g = model.generate(store, &src, &frame.to_tensor::<T>(), opts)?;
        Image::from_tensor(&g, 0)?.save(&dir.join(format!("frame_{i:04}.ppm")))?;
    }
    Ok(paths.len())
}

fn inspect<T: Real>(model: &MCNetModel, store: &ParamStore<T>, source: Option<&Image>, dir: &Path) -> Result<usize> {
    let src: Option<Tensor<T>> = match source {
        Some(img) => {
            check_size(img, model.config.image_size, "source image")?;
            Some(img.to_tensor())
        }
        None => None,
    };
    let views = memory_views(model, store, src.as_ref())?;
    write_views(dir, &views)
}

fn evaluate<T: Real>(
    model: &MCNetModel,
    store: &ParamStore<T>,
    dataset: &Dataset,
    mode: EvalMode,
    opts: AnimateOptions,
) -> Result<(String, String)> {
    match mode {
        EvalMode::Same => {
            let rows = eval_same(model, store, dataset, opts)?;
            let mut text = format!("{SAME_HEADER}\n");
            rows.iter().for_each(|r| text.push_str(&format!("{}\n", r.csv_line())));
            let m = mean_metrics(&rows);
            let summary = format!("{} frames: l1 {:.5} psnr {:.3} ssim {:.4}", rows.len(), m.l1, m.psnr, m.ssim);
            Ok((text, summary))
        }
        EvalMode::Cross => {
            let rows = eval_cross(model, store, dataset, opts)?;
            let mut text = format!("{CROSS_HEADER}\n");
            rows.iter().for_each(|r| text.push_str(&format!("{}\n", r.csv_line())));
            let l1 = rows.iter().map(|r| r.l1_to_source).sum::<f64>() / rows.len().max(1) as f64;
            Ok((text, format!("{} frames: mean l1 to source {l1:.5}", rows.len())))
        }
    }
}
