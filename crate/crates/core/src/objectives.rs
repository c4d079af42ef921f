//! Training losses and image-quality metrics.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::memory::LevelOutput;
use crate::motion::resize_map;
use crate::params::he_normal;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub perceptual: f64,
    pub equivariance: f64,
    pub distance: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { perceptual: 10.0, equivariance: 10.0, distance: 10.0, consistency: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.perceptual, self.equivariance, self.distance, self.consistency];
        if w.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(invalid("loss weights", "weights must be finite and non-negative"))
        }
    }
}

/// The four loss terms on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub perceptual: Var,
    pub equivariance: Var,
    pub distance: Var,
    pub consistency: Var,
}

pub fn total_loss<T: Real>(tape: &mut Tape<T>, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let terms = [
        (parts.perceptual, w.perceptual),
        (parts.equivariance, w.equivariance),
        (parts.distance, w.distance),
        (parts.consistency, w.consistency),
    ];
    let mut acc: Option<Var> = None;
    for (v, weight) in terms {
        let t = tape.scale(v, T::from_f64(weight))?;
        acc = Some(match acc {
            None => t,
            Some(a) => tape.add(a, t)?,
        });
    }
    Ok(acc.expect("four terms"))
}

// ---------------------------------------------------------------------------
// Perceptual loss
// ---------------------------------------------------------------------------

/// Frozen multi-layer feature network used by the perceptual loss.
pub trait FeatureExtractor<T: Real> {
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>>;
}

/// Raw pixels as the only feature layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, _: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

/// Pixels followed by the activations of a fixed random conv-ReLU stack.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor<T> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> RandomConvExtractor<T> {
    pub fn new(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let layers = widths
            .iter()
            .map(|&c| {
                let w = he_normal(&[c, c_in, 3, 3], c_in * 9, &mut rng);
                c_in = c;
                (w, Tensor::zeros(&[c]))
            })
            .collect();
        RandomConvExtractor { layers }
    }
}

impl<T: Real> Default for RandomConvExtractor<T> {
    fn default() -> Self {
        Self::new(&[8, 16], 0x5eed)
    }
}

impl<T: Real> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut out = vec![x];
        let mut h = x;
        for (w, b) in &self.layers {
            let w = tape.constant(w.clone());
            let b = tape.constant(b.clone());
            let y = tape.conv2d(h, w, Some(b), 1, 1)?;
            h = tape.relu(y)?;
            out.push(h);
        }
        Ok(out)
    }
}

pub const PYRAMID_LEVELS: usize = 4;

/// Sum over a 4-level average-pool pyramid of the mean L1 between extractor
/// features of `generated` and `target`.
pub fn perceptual_loss<T: Real>(
    tape: &mut Tape<T>,
    generated: Var,
    target: Var,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var> {
    let s = tape.shape(generated).to_vec();
    let floor = 1 << (PYRAMID_LEVELS - 1);
    if s.len() != 4 || !s[2].is_multiple_of(floor) || !s[3].is_multiple_of(floor) {
        return Err(shape_err("perceptual_loss", alloc::format!("image {s:?} not divisible by {floor}")));
    }
    let (mut g, mut t) = (generated, target);
    let mut acc: Option<Var> = None;
    for level in 0..PYRAMID_LEVELS {
        if level > 0 {
            g = tape.avg_pool2(g)?;
            t = tape.avg_pool2(t)?;
        }
        let fg = extractor.features(tape, g)?;
        let ft = extractor.features(tape, t)?;
        for (a, b) in fg.into_iter().zip(ft) {
            let l = tape.l1(a, b)?;
            acc = Some(match acc {
                None => l,
                Some(x) => tape.add(x, l)?,
            });
        }
    }
    Ok(acc.expect("at least one level"))
}

// ---------------------------------------------------------------------------
// Equivariance
// ---------------------------------------------------------------------------

/// `p ↦ A p + t` on normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform { a: [[1.0, 0.0], [0.0, 1.0]], t: [0.0, 0.0] }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineTransform { t: [dx, dy], ..Self::identity() }
    }

    /// Rotation within ±15°, isotropic scale in [0.8, 1.2] and translation
    /// within ±0.1 on each axis.
    pub fn random(rng: &mut impl Rng) -> Self {
        let angle = rng.random_range(-15.0f64..=15.0).to_radians();
        let scale = rng.random_range(0.8..=1.2);
        let (s, c) = (libm::sin(angle) * scale, libm::cos(angle) * scale);
        let t = [rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1)];
        AffineTransform { a: [[c, -s], [s, c]], t }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0], self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1]]
    }

    pub fn inverse(&self) -> Result<Self> {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        if det.is_nan() || det.abs() <= 1e-12 {
            return Err(invalid("affine transform", "matrix is singular"));
        }
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let t = [-(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]), -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1])];
        Ok(AffineTransform { a: inv, t })
    }
}

/// Per-image transforms for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformBatch(pub Vec<AffineTransform>);

impl TransformBatch {
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        TransformBatch((0..n).map(|_| AffineTransform::random(rng)).collect())
    }

    /// Backward sampling grid `[N, h, w, 2]` realizing `T(I)(p) = I(T⁻¹ p)`.
    pub fn grid<T: Real>(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let id = crate::autodiff::kernels::identity_grid::<f64>(h, w);
        let mut data = Vec::with_capacity(self.0.len() * h * w * 2);
        for tf in &self.0 {
            let inv = tf.inverse()?;
            for p in id.data().chunks(2) {
                let q = inv.apply([p[0], p[1]]);
                data.push(T::from_f64(q[0]));
                data.push(T::from_f64(q[1]));
            }
        }
        Tensor::new(&[self.0.len(), h, w, 2], data)
    }

    /// Applies each transform to the matching keypoint set `[N, K, 2]`.
    pub fn keypoints<T: Real>(&self, tape: &mut Tape<T>, kp: Var) -> Result<Var> {
        let n = self.0.len();
        if tape.shape(kp).len() != 3 || tape.shape(kp)[0] != n {
            return Err(shape_err("transform keypoints", alloc::format!("{:?} for {n} transforms", tape.shape(kp))));
        }
        let at: Vec<f64> = self.0.iter().flat_map(|t| [t.a[0][0], t.a[1][0], t.a[0][1], t.a[1][1]]).collect();
        let off: Vec<f64> = self.0.iter().flat_map(|t| t.t).collect();
        let at = tape.constant(Tensor::from_f64(&[n, 2, 2], &at)?);
        let off = tape.constant(Tensor::from_f64(&[n, 1, 2], &off)?);
        let moved = tape.matmul(kp, at)?;
        tape.add(moved, off)
    }
}

pub fn warp_images<T: Real>(tape: &mut Tape<T>, images: Var, tf: &TransformBatch) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    let grid = tape.constant(tf.grid(s[2], s[3])?);
    tape.grid_sample(images, grid)
}

/// Mean L1 between transformed keypoints of `images` (given as `kp`) and the
/// keypoints detected on the transformed images.
pub fn equivariance_loss<T: Real>(
    tape: &mut Tape<T>,
    images: Var,
    kp: Var,
    tf: &TransformBatch,
    detect: &mut dyn FnMut(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let moved = tf.keypoints(tape, kp)?;
    let warped = warp_images(tape, images, tf)?;
    let kp_t = detect(tape, warped)?;
    tape.l1(moved, kp_t)
}

// ---------------------------------------------------------------------------
// Keypoint distance
// ---------------------------------------------------------------------------

/// Differentiable hinge `Σ_{i≠j} max(0, α − ‖X_i − X_j‖₁)`, averaged over the batch.
pub fn keypoint_distance_hinge<T: Real>(tape: &mut Tape<T>, kp: Var, alpha: f64) -> Result<Var> {
    let (b, k) = match tape.shape(kp) {
        &[b, k, 2] => (b, k),
        s => return Err(shape_err("keypoint_distance", alloc::format!("{s:?}"))),
    };
    let a = tape.reshape(kp, &[b, k, 1, 2])?;
    let c = tape.reshape(kp, &[b, 1, k, 2])?;
    let d = tape.sub(a, c)?;
    let d = tape.abs(d)?;
    let d = tape.sum_axis(d, 3)?;
    let neg = tape.neg(d)?;
    let gap = tape.add_scalar(neg, T::from_f64(alpha))?;
    let hinge = tape.relu(gap)?;
    let off_diag = Tensor::from_fn(&[1, k, k, 1], |i| if i / k == i % k { T::ZERO } else { T::ONE });
    let mask = tape.constant(off_diag);
    let hinge = tape.mul(hinge, mask)?;
    let total = tape.sum(hinge)?;
    tape.scale(total, T::from_f64(1.0 / b as f64))
}

/// The literal `Σ_{i≠j} (1 − sign(‖X_i − X_j‖₁ − α))`, averaged over the batch.
pub fn keypoint_distance_exact<T: Real>(kp: &Tensor<T>, alpha: f64) -> f64 {
    let s = kp.shape();
    let (b, k) = (s[0], s[1]);
    let v = kp.to_f64_vec();
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let p = &v[(bi * k + i) * 2..];
                let q = &v[(bi * k + j) * 2..];
                let d = (p[0] - q[0]).abs() + (p[1] - q[1]).abs();
                let sign = if d > alpha {
                    1.0
                } else if d < alpha {
                    -1.0
                } else {
                    0.0
                };
                total += 1.0 - sign;
            }
        }
    }
    total / b as f64
}

// ---------------------------------------------------------------------------
// Consistency
// ---------------------------------------------------------------------------

/// Which levels enter the consistency loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConsistencyLevels {
    #[default]
    All,
    /// A single level, 1-based.
    Only(usize),
}

/// Mean over the selected levels of the L1 between the memory values,
/// resampled to the feature grid, and the detached projected features.
/// Uses [`LevelOutput::memory_values`], so only memory-path parameters
/// receive its gradient.
pub fn consistency_loss<T: Real>(
    tape: &mut Tape<T>,
    levels: &[LevelOutput],
    memory_hw: (usize, usize),
    select: ConsistencyLevels,
) -> Result<Var> {
    let chosen: Vec<&LevelOutput> = match select {
        ConsistencyLevels::All => levels.iter().collect(),
        ConsistencyLevels::Only(i) if i >= 1 && i <= levels.len() => vec![&levels[i - 1]],
        ConsistencyLevels::Only(i) => {
            return Err(invalid("consistency_loss", alloc::format!("level {i} of {}", levels.len())))
        }
    };
    let mut acc: Option<Var> = None;
    for l in &chosen {
        let ps = tape.shape(l.proj).to_vec();
        let v = tape.reshape(l.memory_values, &[ps[0], ps[1], memory_hw.0, memory_hw.1])?;
        let v = resize_map(tape, v, ps[2], ps[3])?;
        let target = tape.detach(l.proj)?;
        let d = tape.l1(v, target)?;
        acc = Some(match acc {
            None => d,
            Some(a) => tape.add(a, d)?,
        });
    }
    let sum = acc.ok_or_else(|| invalid("consistency_loss", "no levels"))?;
    tape.scale(sum, T::from_f64(1.0 / chosen.len() as f64))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub const PSNR_CAP: f64 = 100.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP)
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            libm::exp(-(d * d) / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window side used for an `h`×`w` plane: 11, or the largest odd size that fits.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let m = h.min(w).min(11);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

fn filter_valid(x: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = win.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..n).map(|k| win[k] * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..n).map(|k| win[k] * rows[(yo + k) * wo + xo]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM of two planes with an 11×11 Gaussian window (σ = 1.5) over the
/// valid region.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let win = gaussian_window(ssim_window_size(h, w), 1.5);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>();
    let (mu_a, ho, wo) = filter_valid(a, h, w, &win);
    let (mu_b, _, _) = filter_valid(b, h, w, &win);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, &win);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, &win);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, &win);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    total / (ho * wo) as f64
}

/// L1, PSNR and channel-averaged SSIM for `[B, C, H, W]` or `[C, H, W]`
/// images in `[0, 1]`, each averaged over the batch.
pub fn metrics<T: Real>(generated: &Tensor<T>, target: &Tensor<T>) -> Result<Metrics> {
    if generated.shape() != target.shape() {
        return Err(shape_err("metrics", alloc::format!("{:?} vs {:?}", generated.shape(), target.shape())));
    }
    let s = generated.shape();
    let (b, c, h, w) = match *s {
        [b, c, h, w] => (b, c, h, w),
        [c, h, w] => (1, c, h, w),
        _ => return Err(shape_err("metrics", alloc::format!("expected an image, got {s:?}"))),
    };
    let g = generated.to_f64_vec();
    let t = target.to_f64_vec();
    let per = c * h * w;
    let plane = h * w;
    let mut acc = Metrics { l1: 0.0, psnr: 0.0, ssim: 0.0 };
    for bi in 0..b {
        let gi = &g[bi * per..(bi + 1) * per];
        let ti = &t[bi * per..(bi + 1) * per];
        let l1 = gi.iter().zip(ti).map(|(x, y)| (x - y).abs()).sum::<f64>() / per as f64;
        let mse = gi.iter().zip(ti).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / per as f64;
        let ssim = (0..c)
            .map(|ch| ssim_plane(&gi[ch * plane..(ch + 1) * plane], &ti[ch * plane..(ch + 1) * plane], h, w))
            .sum::<f64>()
            / c as f64;
        acc.l1 += l1;
        acc.psnr += psnr_from_mse(mse);
        acc.ssim += ssim;
    }
    let n = b as f64;
    Ok(Metrics { l1: acc.l1 / n, psnr: acc.psnr / n, ssim: acc.ssim / n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let t = AffineTransform::random(&mut rng);
            let p = [0.3, -0.7];
            let q = t.inverse().unwrap().apply(t.apply(p));
            assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_transform_grid_is_identity() {
        let tf = TransformBatch(vec![AffineTransform::identity(); 2]);
        let g = tf.grid::<f64>(3, 5).unwrap();
        let id = crate::autodiff::kernels::identity_grid::<f64>(3, 5);
        assert_eq!(g.index_first(1).unwrap().data(), id.data());
    }

    #[test]
    fn hinge_at_coincident_points_is_two_alpha() {
        let mut tape = Tape::<f64>::new();
        let kp = tape.constant(Tensor::new(&[1, 2, 2], vec![0.1, 0.1, 0.1, 0.1]).unwrap());
        let l = keypoint_distance_hinge(&mut tape, kp, 0.2).unwrap();
        assert!((tape.value(l).item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn gaussian_window_sums_to_one() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(ssim_window_size(64, 64), 11);
        assert_eq!(ssim_window_size(8, 9), 7);
    }
}
