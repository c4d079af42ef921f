//! Full model: encoder, keypoint-driven warping, memory compensation per
//! level, and a decoder with skip concatenation.
//!
//! Encoder level 1 is the full-resolution map; level `i` is downsampled by
//! `2^(i-1)` and carries `base·2^(i-1)` channels. Decoding starts from the
//! coarsest compensated map and ends at level 1.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::memory::{build_levels, LevelOutput, MemoryConfig, MemoryLevel, MetaMemory};
use crate::motion::{resize_map, warp_feature, DenseMotion, DenseMotionNet, KeypointDetector, MotionConfig};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_keypoints: usize,
    pub num_levels: usize,
    pub base_channels: usize,
    pub memory_channels: usize,
    pub memory_height: usize,
    pub memory_width: usize,
    pub n_kernels: usize,
    pub pe_levels: usize,
    pub attention_scaling: bool,
    pub query_bias: bool,
    pub demod_eps: f64,
    pub motion_size: usize,
    pub temperature: f64,
    pub sigma: f64,
    pub detector_widths: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub occlusion: bool,
}

impl ModelConfig {
    /// Full-size settings: 256² images, 15 keypoints, 4 levels, 512×32×32 memory.
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 256,
            num_keypoints: 15,
            num_levels: 4,
            base_channels: 64,
            memory_channels: 512,
            memory_height: 32,
            memory_width: 32,
            n_kernels: 4,
            pe_levels: 0,
            attention_scaling: true,
            query_bias: true,
            demod_eps: 1e-8,
            motion_size: 64,
            temperature: 0.1,
            sigma: 0.1,
            detector_widths: alloc::vec![32, 64, 128, 256, 512],
            dense_widths: alloc::vec![64, 128, 256, 512, 1024],
            occlusion: false,
        }
    }

    /// Settings small enough to train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            num_keypoints: 5,
            num_levels: 3,
            base_channels: 16,
            memory_channels: 32,
            memory_height: 8,
            memory_width: 8,
            motion_size: 32,
            detector_widths: alloc::vec![16, 32, 64],
            dense_widths: alloc::vec![32, 64, 64],
            ..Self::paper()
        }
    }

    pub fn level_channels(&self) -> Vec<usize> {
        (0..self.num_levels).map(|i| self.base_channels << i).collect()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn memory(&self) -> MemoryConfig {
        MemoryConfig {
            channels: self.memory_channels,
            height: self.memory_height,
            width: self.memory_width,
            n_kernels: self.n_kernels,
            pe_levels: self.pe_levels,
            attention_scaling: self.attention_scaling,
            query_bias: self.query_bias,
            eps: self.demod_eps,
        }
    }

    pub fn motion(&self) -> MotionConfig {
        MotionConfig {
            num_keypoints: self.num_keypoints,
            size: self.motion_size,
            temperature: self.temperature,
            sigma: self.sigma,
            detector_widths: self.detector_widths.clone(),
            dense_widths: self.dense_widths.clone(),
            occlusion: self.occlusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.num_levels == 0 {
            return fail("model.levels must be at least 1");
        }
        if [self.num_keypoints, self.base_channels, self.memory_channels, self.memory_height, self.memory_width]
            .contains(&0)
        {
            return fail("model dimensions must be positive");
        }
        if self.n_kernels == 0 {
            return fail("model.n_kernels must be at least 1");
        }
        if self.base_channels < 2 {
            return fail("model.base_channels must be at least 2 so features can be split");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.num_levels) {
            return fail("model.image_size must be divisible by 2^levels");
        }
        let halvings_ok = |from: usize, to: usize| {
            let mut s = from;
            while s > to && s.is_multiple_of(2) {
                s /= 2;
            }
            s == to
        };
        if self.motion_size == 0 || !halvings_ok(self.image_size, self.motion_size) {
            return fail("model.motion_size must be the image size halved zero or more times");
        }
        for (name, widths) in [("detector", &self.detector_widths), ("dense", &self.dense_widths)] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::Config(format!("model.{name}_widths must be non-empty and positive")));
            }
            if !self.motion_size.is_multiple_of(1 << widths.len()) {
                return Err(Error::Config(format!(
                    "model.motion_size must be divisible by 2^{} for the {name} hourglass",
                    widths.len()
                )));
            }
        }
        if !(self.temperature > 0.0 && self.sigma > 0.0 && self.demod_eps > 0.0) {
            return fail("temperature, sigma and demodulation eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AnimateOptions {
    /// Replace every cross-attention output with zeros.
    pub ablate_memory: bool,
}

/// Output image plus every intermediate the losses and tools need.
#[derive(Debug, Clone)]
pub struct Animation {
    pub image: Var,
    pub kp_source: Var,
    pub kp_driving: Var,
    pub heat_source: Var,
    pub heat_driving: Var,
    pub motion: DenseMotion,
    pub encoded: Vec<Var>,
    pub warped: Vec<Var>,
    pub levels: Vec<LevelOutput>,
}

#[derive(Debug, Clone)]
pub struct MCNetModel {
    pub config: ModelConfig,
    pub detector: KeypointDetector,
    pub dense: DenseMotionNet,
    pub encoder: Vec<Conv2d>,
    pub levels: Vec<MemoryLevel>,
    pub decoder: Vec<Conv2d>,
    pub head: Conv2d,
    pub memory: MetaMemory,
}

impl MCNetModel {
    /// Builds the model and a freshly initialized parameter store.
    pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::build(config, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn build<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let motion = config.motion();
        let detector = KeypointDetector::new(store, &motion, rng)?;
        let dense = DenseMotionNet::new(store, &motion, rng)?;

        let ch = config.level_channels();
        let mut encoder = Vec::with_capacity(ch.len());
        let mut c_in = 3;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(Conv2d::new(store, &format!("encoder{}", i + 1), c_in, c, 3, true, rng)?);
            c_in = c;
        }

        let memory = MetaMemory::new(store, &config.memory(), rng)?;
        let levels = build_levels(store, &ch, config.num_keypoints, &config.memory(), rng)?;

        let n = ch.len();
        let mut decoder = Vec::with_capacity(n.saturating_sub(1));
        for j in (1..n).rev() {
            let c_in = if j == n - 1 { ch[j] } else { 2 * ch[j] };
            decoder.push(Conv2d::new(store, &format!("decoder{}", j + 1), c_in, ch[j - 1], 3, true, rng)?);
        }
        let head_in = if n == 1 { ch[0] } else { 2 * ch[0] };
        let head = Conv2d::new(store, "decoder.head", head_in, 3, 3, true, rng)?;

        Ok(MCNetModel { config: config.clone(), detector, dense, encoder, levels, decoder, head, memory })
    }

    /// Encoder pyramid, finest level first.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<Var>> {
        self.check_image(tape, image)?;
        let mut out = Vec::with_capacity(self.encoder.len());
        let mut x = image;
        for (i, conv) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = tape.avg_pool2(x)?;
            }
            let y = conv.forward(tape, store, x)?;
            x = tape.relu(y)?;
            out.push(x);
        }
        Ok(out)
    }

    fn check_image<T: Real>(&self, tape: &Tape<T>, image: Var) -> Result<()> {
        let n = self.config.image_size;
        match tape.shape(image) {
            &[_, 3, h, w] if h == n && w == n => Ok(()),
            s => Err(shape_err("image", format!("expected [B, 3, {n}, {n}], got {s:?}"))),
        }
    }

    /// Compensated features back to an image in `(0, 1)`.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, compensated: &[Var]) -> Result<Var> {
        let n = compensated.len();
        let mut d: Option<Var> = None;
        for (step, conv) in self.decoder.iter().enumerate() {
            let j = n - 1 - step;
            let input = match d {
                None => compensated[j],
                Some(prev) => tape.concat(&[prev, compensated[j]], 1)?,
            };
            let y = conv.forward(tape, store, input)?;
            let y = tape.relu(y)?;
            d = Some(tape.upsample_nearest2(y)?);
        }
        let input = match d {
            None => compensated[0],
            Some(prev) => tape.concat(&[prev, compensated[0]], 1)?,
        };
        let y = self.head.forward(tape, store, input)?;
        tape.sigmoid(y)
    }

    pub fn animate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        source: Var,
        driving: Var,
        opts: AnimateOptions,
    ) -> Result<Animation> {
        self.check_image(tape, source)?;
        if tape.shape(source) != tape.shape(driving) {
            return Err(shape_err(
                "animate",
                format!("source {:?} vs driving {:?}", tape.shape(source), tape.shape(driving)),
            ));
        }
        let (kp_source, heat_source) = self.detector.detect(tape, store, source)?;
        let (kp_driving, heat_driving) = self.detector.detect(tape, store, driving)?;
        let motion = self.dense.forward(tape, store, source, kp_source, kp_driving)?;
        let encoded = self.encode(tape, store, source)?;
        let memory = self.memory.var(tape, store)?;
        let mem_cfg = self.config.memory();

        let mut warped = Vec::with_capacity(encoded.len());
        let mut levels = Vec::with_capacity(encoded.len());
        for (i, &f) in encoded.iter().enumerate() {
            let mut w = warp_feature(tape, f, motion.flow)?;
            if let Some(occ) = motion.occlusion {
                let s = self.config.level_size(i);
                let occ = resize_map(tape, occ, s, s)?;
                w = tape.mul(w, occ)?;
            }
            warped.push(w);
            levels.push(self.levels[i].forward(tape, store, memory, w, kp_source, &mem_cfg, opts.ablate_memory)?);
        }
        let compensated: Vec<Var> = levels.iter().map(|l| l.compensated).collect();
        let image = self.decode(tape, store, &compensated)?;
        Ok(Animation { image, kp_source, kp_driving, heat_source, heat_driving, motion, encoded, warped, levels })
    }

    /// Forward pass on plain tensors, returning only the generated frames.
    pub fn generate<T: Real>(
        &self,
        store: &ParamStore<T>,
        source: &Tensor<T>,
        driving: &Tensor<T>,
        opts: AnimateOptions,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let s = tape.constant(source.clone());
        let d = tape.constant(driving.clone());
        let a = self.animate(&mut tape, store, s, d, opts)?;
        Ok(tape.value(a.image).clone())
    }

    pub fn count_parameters<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.numel()
    }
}
