//! The optimization loop: pair sampling, steps, metrics CSV, checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mcnet_core::objectives::{metrics, Metrics, RandomConvExtractor, TransformBatch};
use mcnet_core::optim::Adam;
use mcnet_core::train::{train_step, StepStats};
use mcnet_core::{Error as CoreError, MCNetModel, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{state_from_checkpoint, state_to_checkpoint, Checkpoint, TrainState};
use crate::config::{Precision, RunConfig};
use crate::dataset::{Dataset, FrameRef, PairMode};
use crate::error::{AppError, Result};

pub const METRICS_HEADER: &str = "step,l1,psnr,ssim,loss_total,loss_p,loss_eq,loss_dist,loss_con";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST: &str = "latest.mcnc";

/// One line of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub metrics: Metrics,
    pub stats: StepStats,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let (m, s) = (&self.metrics, &self.stats);
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, m.l1, m.psnr, m.ssim, s.loss_total, s.loss_p, s.loss_eq, s.loss_dist, s.loss_con
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Records of the steps run by this invocation.
    pub records: Vec<StepRecord>,
    pub final_step: u64,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.mcnc")
}

/// Randomness of step `step`: independent of how the run was split into
/// resumed segments.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Source and driving frames plus equivariance transforms for one step.
pub fn sample_batch(
    dataset: &Dataset,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<FrameRef>, Vec<FrameRef>, TransformBatch)> {
    let mut src = Vec::with_capacity(batch);
    let mut drv = Vec::with_capacity(batch);
    for _ in 0..batch {
        let p = dataset.sample_pair(PairMode::Same, rng)?;
        src.push(p.source);
        drv.push(p.driving);
    }
    Ok((src, drv, TransformBatch::random(2 * batch, rng)))
}

pub fn train(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path, log: &mut dyn FnMut(&str)) -> Result<TrainReport> {
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(cfg, dataset, out_dir, log),
        Precision::F64 => train_typed::<f64>(cfg, dataset, out_dir, log),
    }
}

fn initial_state<T: Real>(cfg: &RunConfig) -> Result<TrainState<T>> {
    if let Some(path) = &cfg.train.resume {
        let ck = Checkpoint::load(path)?;
        let mut state = state_from_checkpoint::<T>(&ck)?;
        if state.model.config != cfg.model {
            return Err(AppError::Usage(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        state.adam.config = cfg.adam();
        return Ok(state);
    }
    let (model, store) = MCNetModel::init::<T>(&cfg.model, cfg.train.seed)?;
    let adam = Adam::new(&store, cfg.adam());
    Ok(TrainState { model, store, adam, step: 0 })
}

fn save<T: Real>(state: &TrainState<T>, out_dir: &Path) -> Result<PathBuf> {
    let ck = state_to_checkpoint(state)?;
    let path = out_dir.join(checkpoint_name(state.step));
    ck.save(&path)?;
    ck.save(&out_dir.join(LATEST))?;
    Ok(path)
}

fn open_metrics(path: &Path, fresh: bool) -> Result<BufWriter<File>> {
    let io = |e| AppError::io(path, e);
    if fresh || !path.exists() {
        let mut f = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(f, "{METRICS_HEADER}").map_err(io)?;
        Ok(f)
    } else {
        Ok(BufWriter::new(OpenOptions::new().append(true).open(path).map_err(io)?))
    }
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<TrainReport> {
    let mut state = initial_state::<T>(cfg)?;
    let size = state.model.config.image_size;
    if dataset.size != size {
        return Err(AppError::data(format!(
            "dataset frames are {0}x{0}, the model expects {size}x{size}",
            dataset.size
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| AppError::io(out_dir, e))?;
    let csv_path = out_dir.join(METRICS_FILE);
    let mut csv = open_metrics(&csv_path, cfg.train.resume.is_none())?;
    let extractor = RandomConvExtractor::<T>::default();
    let t = &cfg.train;
    let mut records = Vec::new();

    while state.step < t.steps {
        let step = state.step;
        let mut rng = step_rng(t.seed, step);
        let (src, drv, transforms) = sample_batch(dataset, t.batch, &mut rng)?;
        let source = dataset.batch::<T>(&src)?;
        let driving = dataset.batch::<T>(&drv)?;
        let (stats, generated) = train_step(
            &state.model,
            &mut state.store,
            &mut state.adam,
            &extractor,
            &source,
            &driving,
            &transforms,
            &cfg.loss,
        )
        .map_err(|e| match e {
            CoreError::NonFinite { op } => AppError::Numeric(format!("step {step}: {op} produced a non-finite value")),
            e => AppError::Model(e),
        })?;
        if !stats.loss_total.is_finite() {
            return Err(AppError::Numeric(format!("step {step}: loss is {}", stats.loss_total)));
        }
        let record = StepRecord { step, metrics: metrics(&generated, &driving)?, stats };
        writeln!(csv, "{}", record.csv_line()).map_err(|e| AppError::io(&csv_path, e))?;
        records.push(record);
        state.step += 1;

        if t.log_every > 0 && (state.step % t.log_every == 0 || state.step == t.steps) {
            log(&format!(
                "step {:>6}  loss {:.4}  l1 {:.4}  psnr {:.2}  ssim {:.4}",
                step, stats.loss_total, record.metrics.l1, record.metrics.psnr, record.metrics.ssim
            ));
        }
        if t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0 && state.step < t.steps {
            csv.flush().map_err(|e| AppError::io(&csv_path, e))?;
            save(&state, out_dir)?;
        }
    }
    csv.flush().map_err(|e| AppError::io(&csv_path, e))?;
    let checkpoint = save(&state, out_dir)?;
    Ok(TrainReport { records, final_step: state.step, checkpoint })
}
