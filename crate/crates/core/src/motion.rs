//! Keypoint detection and dense motion estimation.
//!
//! Coordinates are normalized to `[-1, 1]` with x to the right and y down;
//! `-1` and `1` are the centers of the border pixels. Keypoint sets travel as
//! `[B, K, 2]` variables.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::kernels::identity_grid;
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Conv2d, Hourglass};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Pixel-center coordinates of an `h`×`w` grid as a `[h·w, 2]` matrix.
pub fn coordinate_matrix<T: Real>(h: usize, w: usize) -> Tensor<T> {
    identity_grid::<T>(h, w).reshape(&[h * w, 2]).expect("same element count")
}

/// Spatial softmax at temperature `tau` followed by the coordinate
/// expectation. Returns keypoints `[B, K, 2]` and heatmaps `[B, K, H, W]`.
pub fn soft_argmax<T: Real>(tape: &mut Tape<T>, raw: Var, tau: f64) -> Result<(Var, Var)> {
    let s = tape.shape(raw).to_vec();
    if s.len() != 4 {
        return Err(shape_err("soft_argmax", format!("expected [B, K, H, W], got {s:?}")));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(invalid("soft_argmax", "temperature must be positive"));
    }
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = tape.reshape(raw, &[b, k, h * w])?;
    let sharp = tape.scale(flat, T::from_f64(1.0 / tau))?;
    let heat = tape.softmax(sharp, 2)?;
    let grid = tape.constant(coordinate_matrix(h, w));
    let kp = tape.matmul(heat, grid)?;
    let heat = tape.reshape(heat, &[b, k, h, w])?;
    Ok((kp, heat))
}

/// Unnormalized isotropic Gaussians `[B, K, h, w]` centred on each keypoint.
pub fn keypoint_gaussians<T: Real>(tape: &mut Tape<T>, kp: Var, sigma: f64, h: usize, w: usize) -> Result<Var> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(invalid("keypoint_gaussians", "sigma must be positive"));
    }
    let (b, k) = kp_dims(tape, kp)?;
    let grid = tape.constant(identity_grid::<T>(h, w).reshape(&[1, 1, h, w, 2])?);
    let centres = tape.reshape(kp, &[b, k, 1, 1, 2])?;
    let d = tape.sub(grid, centres)?;
    let d2 = tape.mul(d, d)?;
    let r2 = tape.sum_axis(d2, 4)?;
    let e = tape.scale(r2, T::from_f64(-0.5 / (sigma * sigma)))?;
    let g = tape.exp(e)?;
    tape.reshape(g, &[b, k, h, w])
}

fn kp_dims<T: Real>(tape: &Tape<T>, kp: Var) -> Result<(usize, usize)> {
    match tape.shape(kp) {
        &[b, k, 2] => Ok((b, k)),
        s => Err(shape_err("keypoints", format!("expected [B, K, 2], got {s:?}"))),
    }
}

/// Candidate sampling grids `[B, K+1, h, w, 2]`: the identity shifted by
/// `kp_s - kp_d` for each keypoint, then the unshifted background grid.
pub fn sparse_motions<T: Real>(tape: &mut Tape<T>, kp_s: Var, kp_d: Var, h: usize, w: usize) -> Result<Var> {
    let (b, k) = kp_dims(tape, kp_s)?;
    if kp_dims(tape, kp_d)? != (b, k) {
        return Err(shape_err("sparse_motions", "source and driving keypoint sets differ in shape"));
    }
    let grid = tape.constant(identity_grid::<T>(h, w).reshape(&[1, 1, h, w, 2])?);
    let disp = tape.sub(kp_s, kp_d)?;
    let disp = tape.reshape(disp, &[b, k, 1, 1, 2])?;
    let moved = tape.add(grid, disp)?;
    let background = tape.broadcast_to(grid, &[b, 1, h, w, 2])?;
    tape.concat(&[moved, background], 1)
}

/// `Σ_m masks[:, m] · candidates[:, m]` as a `[B, h, w, 2]` grid.
pub fn combine_motions<T: Real>(tape: &mut Tape<T>, masks: Var, candidates: Var) -> Result<Var> {
    let s = tape.shape(candidates).to_vec();
    if s.len() != 5 || tape.shape(masks) != &s[..4] {
        return Err(shape_err("combine_motions", format!("masks {:?} vs candidates {s:?}", tape.shape(masks))));
    }
    let m = tape.reshape(masks, &[s[0], s[1], s[2], s[3], 1])?;
    let weighted = tape.mul(m, candidates)?;
    let flow = tape.sum_axis(weighted, 1)?;
    tape.reshape(flow, &[s[0], s[2], s[3], 2])
}

/// Bilinearly resamples a `[B, h, w, 2]` flow to `[B, ho, wo, 2]`.
pub fn resize_flow<T: Real>(tape: &mut Tape<T>, flow: Var, ho: usize, wo: usize) -> Result<Var> {
    let s = tape.shape(flow).to_vec();
    if s.len() != 4 || s[3] != 2 {
        return Err(shape_err("resize_flow", format!("expected [B, h, w, 2], got {s:?}")));
    }
    if (s[1], s[2]) == (ho, wo) {
        return Ok(flow);
    }
    let planes = tape.permute(flow, &[0, 3, 1, 2])?;
    let resized = resize_map(tape, planes, ho, wo)?;
    tape.permute(resized, &[0, 2, 3, 1])
}

/// Bilinear resize of a `[B, C, h, w]` map to `[B, C, ho, wo]`.
pub fn resize_map<T: Real>(tape: &mut Tape<T>, x: Var, ho: usize, wo: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() == 4 && (s[2], s[3]) == (ho, wo) {
        return Ok(x);
    }
    let grid = tape.constant(identity_grid(ho, wo));
    tape.grid_sample(x, grid)
}

/// Warps `[B, C, H, W]` features along a flow of any resolution.
pub fn warp_feature<T: Real>(tape: &mut Tape<T>, feature: Var, flow: Var) -> Result<Var> {
    let s = tape.shape(feature).to_vec();
    if s.len() != 4 {
        return Err(shape_err("warp_feature", format!("expected [B, C, H, W], got {s:?}")));
    }
    let grid = resize_flow(tape, flow, s[2], s[3])?;
    tape.grid_sample(feature, grid)
}

/// Repeated 2× average pooling until the spatial size reaches `size`.
fn pool_to<T: Real>(tape: &mut Tape<T>, image: Var, size: usize) -> Result<Var> {
    let mut x = image;
    loop {
        let s = tape.shape(x);
        if s[2] == size && s[3] == size {
            return Ok(x);
        }
        if s[2] < size || !s[2].is_multiple_of(2) || s[2] != s[3] {
            return Err(shape_err("pool_to", format!("cannot reduce {}x{} to {size}x{size} by halving", s[2], s[3])));
        }
        x = tape.avg_pool2(x)?;
    }
}

#[derive(Debug, Clone)]
pub struct MotionConfig {
    pub num_keypoints: usize,
    /// Side length of heatmaps, masks and the estimated flow.
    pub size: usize,
    pub temperature: f64,
    pub sigma: f64,
    pub detector_widths: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub occlusion: bool,
}

#[derive(Debug, Clone)]
pub struct KeypointDetector {
    hourglass: Hourglass,
    head: Conv2d,
    size: usize,
    temperature: f64,
}

impl KeypointDetector {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &MotionConfig, rng: &mut impl Rng) -> Result<Self> {
        let hourglass = Hourglass::new(store, "kp.hourglass", 3, &cfg.detector_widths, rng)?;
        let head = Conv2d::new(store, "kp.head", hourglass.out_channels(), cfg.num_keypoints, 3, true, rng)?;
        Ok(KeypointDetector { hourglass, head, size: cfg.size, temperature: cfg.temperature })
    }

    /// Keypoints `[B, K, 2]` and their normalized heatmaps.
    pub fn detect<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<(Var, Var)> {
        let raw = self.raw_maps(tape, store, image)?;
        soft_argmax(tape, raw, self.temperature)
    }

    pub fn raw_maps<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let x = pool_to(tape, image, self.size)?;
        let h = self.hourglass.forward(tape, store, x)?;
        self.head.forward(tape, store, h)
    }
}

/// Estimated motion between a source and a driving frame.
#[derive(Debug, Clone, Copy)]
pub struct DenseMotion {
    /// Backward sampling grid `[B, h, w, 2]`.
    pub flow: Var,
    /// Soft assignment `[B, K+1, h, w]` over the candidate motions.
    pub masks: Var,
    /// Optional visibility map `[B, 1, h, w]` in `(0, 1)`.
    pub occlusion: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct DenseMotionNet {
    hourglass: Hourglass,
    mask_head: Conv2d,
    occlusion_head: Option<Conv2d>,
    size: usize,
    sigma: f64,
}

impl DenseMotionNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &MotionConfig, rng: &mut impl Rng) -> Result<Self> {
        let k1 = cfg.num_keypoints + 1;
        let c_in = k1 + 3 * k1;
        let hourglass = Hourglass::new(store, "dense.hourglass", c_in, &cfg.dense_widths, rng)?;
        let c = hourglass.out_channels();
        let mask_head = Conv2d::new(store, "dense.mask", c, k1, 3, true, rng)?;
        let occlusion_head =
            if cfg.occlusion { Some(Conv2d::new(store, "dense.occlusion", c, 1, 3, true, rng)?) } else { None };
        Ok(DenseMotionNet { hourglass, mask_head, occlusion_head, size: cfg.size, sigma: cfg.sigma })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        source: Var,
        kp_s: Var,
        kp_d: Var,
    ) -> Result<DenseMotion> {
        let n = self.size;
        let (b, k) = kp_dims(tape, kp_s)?;
        let k1 = k + 1;

        let hd = keypoint_gaussians(tape, kp_d, self.sigma, n, n)?;
        let hs = keypoint_gaussians(tape, kp_s, self.sigma, n, n)?;
        let heat = tape.sub(hd, hs)?;
        let zero = tape.constant(Tensor::zeros(&[b, 1, n, n]));
        let heat = tape.concat(&[heat, zero], 1)?;

        let candidates = sparse_motions(tape, kp_s, kp_d, n, n)?;
        let grids = tape.reshape(candidates, &[b * k1, n, n, 2])?;
        let small = pool_to(tape, source, n)?;
        let small = tape.reshape(small, &[b, 1, 3, n, n])?;
        let repeated = tape.broadcast_to(small, &[b, k1, 3, n, n])?;
        let repeated = tape.reshape(repeated, &[b * k1, 3, n, n])?;
        let deformed = tape.grid_sample(repeated, grids)?;
        let deformed = tape.reshape(deformed, &[b, k1 * 3, n, n])?;

        let input = tape.concat(&[heat, deformed], 1)?;
        let h = self.hourglass.forward(tape, store, input)?;
        let logits = self.mask_head.forward(tape, store, h)?;
        let masks = tape.softmax(logits, 1)?;
        let flow = combine_motions(tape, masks, candidates)?;
        let occlusion = match &self.occlusion_head {
            Some(head) => {
                let o = head.forward(tape, store, h)?;
                Some(tape.sigmoid(o)?)
            }
            None => None,
        };
        Ok(DenseMotion { flow, masks, occlusion })
    }
}
