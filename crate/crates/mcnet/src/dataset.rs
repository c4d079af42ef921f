//! Decoded frames and training pair sampling.

use mcnet_core::{Real, Tensor};
use rand::Rng;

use crate::error::{AppError, Result};
use crate::image_io::Image;
use crate::manifest::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Source and driving from one sequence; the driving frame is the target.
    Same,
    /// Source and driving from different sequences; no ground truth.
    Cross,
}

/// Frame coordinates `(sequence, frame)`.
pub type FrameRef = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub source: FrameRef,
    pub driving: FrameRef,
}

/// Draws one pair from sequences of the given lengths.
pub fn sample_pair(lengths: &[usize], mode: PairMode, rng: &mut impl Rng) -> Result<Pair> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(AppError::data("cannot sample from an empty sequence list"));
    }
    match mode {
        PairMode::Same => {
            if let Some(i) = lengths.iter().position(|&n| n < 2) {
                return Err(AppError::data(format!(
                    "sequence {i} has {} frame(s); same-sequence pairs need at least 2",
                    lengths[i]
                )));
            }
            let s = rng.random_range(0..lengths.len());
            let a = rng.random_range(0..lengths[s]);
            let mut b = rng.random_range(0..lengths[s] - 1);
            if b >= a {
                b += 1;
            }
            Ok(Pair { source: (s, a), driving: (s, b) })
        }
        PairMode::Cross => {
            if lengths.len() < 2 {
                return Err(AppError::data("cross-sequence pairs need at least 2 sequences"));
            }
            let s = rng.random_range(0..lengths.len());
            let mut d = rng.random_range(0..lengths.len() - 1);
            if d >= s {
                d += 1;
            }
            Ok(Pair { source: (s, rng.random_range(0..lengths[s])), driving: (d, rng.random_range(0..lengths[d])) })
        }
    }
}

/// Every frame of a manifest, decoded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<Vec<Image>>,
    pub size: usize,
}

impl Dataset {
    pub fn new(sequences: Vec<Vec<Image>>) -> Result<Self> {
        let first = sequences.iter().flatten().next().ok_or_else(|| AppError::data("dataset has no frames"))?;
        let size = first.width;
        for (i, img) in sequences.iter().flatten().enumerate() {
            if img.channels != 3 || img.width != size || img.height != size {
                return Err(AppError::data(format!(
                    "frame {i} is {}x{}x{}; every frame must be {size}x{size} RGB",
                    img.width, img.height, img.channels
                )));
            }
        }
        Ok(Dataset { sequences, size })
    }

    pub fn load(manifest: &Manifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(AppError::data("manifest lists no frames"));
        }
        let sequences = manifest
            .sequences
            .iter()
            .map(|seq| seq.iter().map(|p| Image::load(p)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(sequences)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(Vec::len).collect()
    }

    pub fn frame(&self, at: FrameRef) -> &Image {
        &self.sequences[at.0][at.1]
    }

    pub fn sample_pair(&self, mode: PairMode, rng: &mut impl Rng) -> Result<Pair> {
        sample_pair(&self.lengths(), mode, rng)
    }

    /// Stacks frames into one `[B, 3, H, W]` tensor.
    pub fn batch<T: Real>(&self, frames: &[FrameRef]) -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = frames.iter().map(|&f| self.frame(f).to_tensor()).collect();
        let stacked = Tensor::stack(&items)?;
        let &[b, _, c, h, w] = stacked.shape() else { unreachable!("stack adds one axis") };
        Ok(stacked.reshape(&[b, c, h, w])?)
    }
}
