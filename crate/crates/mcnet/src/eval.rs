//! Held-out evaluation: reconstruction metrics for same-sequence pairs and
//! output statistics for cross-sequence reenactment.

use mcnet_core::objectives::{metrics, Metrics};
use mcnet_core::{AnimateOptions, MCNetModel, ParamStore, Real, Tensor};

use crate::dataset::{Dataset, FrameRef};
use crate::error::{AppError, Result};

pub const SAME_HEADER: &str = "sequence,frame,l1,psnr,ssim";
pub const CROSS_HEADER: &str = "source_sequence,driving_sequence,frame,mean,std,l1_to_source";

/// Frames generated per forward pass.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SameRow {
    pub sequence: usize,
    pub frame: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossRow {
    pub source_sequence: usize,
    pub driving_sequence: usize,
    pub frame: usize,
    pub mean: f64,
    pub std: f64,
    pub l1_to_source: f64,
}

impl SameRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.sequence, self.frame, self.metrics.l1, self.metrics.psnr, self.metrics.ssim)
    }
}

impl CrossRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.source_sequence, self.driving_sequence, self.frame, self.mean, self.std, self.l1_to_source
        )
    }
}

/// Generates one frame per `(source, driving)` pair, in chunks.
pub fn generate_pairs<T: Real>(
    model: &MCNetModel,
    store: &ParamStore<T>,
    dataset: &Dataset,
    pairs: &[(FrameRef, FrameRef)],
    opts: AnimateOptions,
) -> Result<Vec<Tensor<T>>> {
    if dataset.size != model.config.image_size {
        return Err(AppError::data(format!(
            "frames are {0}x{0}, the model expects {1}x{1}",
            dataset.size, model.config.image_size
        )));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let src: Vec<FrameRef> = chunk.iter().map(|p| p.0).collect();
        let drv: Vec<FrameRef> = chunk.iter().map(|p| p.1).collect();
        let g = model.generate(store, &dataset.batch::<T>(&src)?, &dataset.batch::<T>(&drv)?, opts)?;
        for i in 0..chunk.len() {
            out.push(g.index_first(i)?);
        }
    }
    Ok(out)
}

/// Frame 0 of every sequence animated by each later frame of the same
/// sequence, scored against that frame.
pub fn eval_same<T: Real>(
    model: &MCNetModel,
    store: &ParamStore<T>,
    dataset: &Dataset,
    opts: AnimateOptions,
) -> Result<Vec<SameRow>> {
    let mut pairs = Vec::new();
    for (s, seq) in dataset.sequences.iter().enumerate() {
        pairs.extend((1..seq.len()).map(|f| ((s, 0), (s, f))));
    }
    if pairs.is_empty() {
        return Err(AppError::data("same-sequence evaluation needs a sequence with at least 2 frames"));
    }
    let generated = generate_pairs(model, store, dataset, &pairs, opts)?;
    pairs
        .iter()
        .zip(&generated)
        .map(|(&(_, d), g)| {
            let target = dataset.frame(d).to_tensor::<T>().index_first(0)?;
            Ok(SameRow { sequence: d.0, frame: d.1, metrics: metrics(g, &target)? })
        })
        .collect()
}

/// Frame 0 of sequence `s` animated by every frame of sequence `s + 1`.
pub fn eval_cross<T: Real>(
    model: &MCNetModel,
    store: &ParamStore<T>,
    dataset: &Dataset,
    opts: AnimateOptions,
) -> Result<Vec<CrossRow>> {
    let n = dataset.sequences.len();
    if n < 2 {
        return Err(AppError::data("cross-sequence evaluation needs at least 2 sequences"));
    }
    let mut pairs = Vec::new();
    for s in 0..n {
        let d = (s + 1) % n;
        pairs.extend((0..dataset.sequences[d].len()).map(|f| ((s, 0), (d, f))));
    }
    let generated = generate_pairs(model, store, dataset, &pairs, opts)?;
    Ok(pairs
        .iter()
        .zip(&generated)
        .map(|(&(s, d), g)| {
            let v = g.to_f64_vec();
            let src = dataset.frame(s).to_tensor::<f64>();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let l1 = v.iter().zip(src.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
            CrossRow {
                source_sequence: s.0,
                driving_sequence: d.0,
                frame: d.1,
                mean,
                std: var.sqrt(),
                l1_to_source: l1,
            }
        })
        .collect())
}

pub fn mean_metrics(rows: &[SameRow]) -> Metrics {
    let n = rows.len().max(1) as f64;
    let sum = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    Metrics { l1: sum(|m| m.l1), psnr: sum(|m| m.psnr), ssim: sum(|m| m.ssim) }
}
