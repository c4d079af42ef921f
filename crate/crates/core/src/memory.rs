//! Meta-memory, identity-conditioned memory and cross-attention compensation.
//!
//! One learnable cube `[C_m, H_m, W_m]` is shared by every decoder level. At
//! each level the warped feature is split in half along channels: the first
//! half passes through untouched, the second half is projected to `C_m`
//! channels and used both to condition the memory on the source identity and
//! as the query side of a cross-attention against that conditioned memory.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, Mlp};
use crate::params::{he_normal, normal, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MemoryConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Candidate kernels per dynamic convolution.
    pub n_kernels: usize,
    /// Frequencies of the keypoint positional encoding; 0 feeds raw coordinates.
    pub pe_levels: usize,
    /// Divide attention logits by `sqrt(C_m)`.
    pub attention_scaling: bool,
    pub query_bias: bool,
    pub eps: f64,
}

/// The shared memory bank.
#[derive(Debug, Clone)]
pub struct MetaMemory {
    pub id: ParamId,
}

impl MetaMemory {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &MemoryConfig, rng: &mut impl Rng) -> Result<Self> {
        let id = store.add("memory.bank", normal(&[cfg.channels, cfg.height, cfg.width], 0.02, rng))?;
        Ok(MetaMemory { id })
    }

    /// The bank as a batch-1 feature map `[1, C_m, H_m, W_m]`.
    pub fn var<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let m = tape.param(store, self.id);
        let s = tape.shape(m).to_vec();
        tape.reshape(m, &[1, s[0], s[1], s[2]])
    }
}

/// Splits channels into the pass-through first `ceil(C/2)` and the
/// remaining `floor(C/2)`.
pub fn split_channels<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    let c = tape.shape(x)[1];
    if c < 2 {
        return Err(shape_err("split_channels", format!("need at least 2 channels, got {c}")));
    }
    let keep = c.div_ceil(2);
    let parts = tape.split(x, 1, &[keep, c - keep])?;
    Ok((parts[0], parts[1]))
}

/// Flattens `[B, K, 2]` keypoints to `[B, 2K(1+2L)]`, expanding every
/// coordinate `c` to `(c, sin(2^0 πc), cos(2^0 πc), …, sin(2^(L-1) πc), cos(2^(L-1) πc))`.
pub fn positional_encoding<T: Real>(tape: &mut Tape<T>, kp: Var, levels: usize) -> Result<Var> {
    let s = tape.shape(kp).to_vec();
    let b = s[0];
    let n = s[1..].iter().product::<usize>();
    let flat = tape.reshape(kp, &[b, n, 1])?;
    if levels == 0 {
        return tape.reshape(flat, &[b, n]);
    }
    let freqs = Tensor::from_fn(&[1, 1, levels], |l| T::from_f64(core::f64::consts::PI * (1u64 << l) as f64));
    let freqs = tape.constant(freqs);
    let arg = tape.mul(flat, freqs)?;
    let sin = tape.sin(arg)?;
    let cos = tape.cos(arg)?;
    let sin = tape.reshape(sin, &[b, n, levels, 1])?;
    let cos = tape.reshape(cos, &[b, n, levels, 1])?;
    let pairs = tape.concat(&[sin, cos], 3)?;
    let pairs = tape.reshape(pairs, &[b, n, 2 * levels])?;
    let all = tape.concat(&[flat, pairs], 2)?;
    tape.reshape(all, &[b, n * (1 + 2 * levels)])
}

/// Per-sample weights `[B, C_out, C_in, k, k]`: each input channel `i` is
/// scaled by `s[b, i]`, then every output channel is divided by its
/// root-sum-square plus `eps`.
pub fn modulate_demodulate<T: Real>(tape: &mut Tape<T>, weight: Var, s: Var, eps: f64) -> Result<Var> {
    let ws = tape.shape(weight).to_vec();
    let ss = tape.shape(s).to_vec();
    if ws.len() != 4 || ss.len() != 2 || ss[1] != ws[1] {
        return Err(shape_err("modulate_demodulate", format!("weight {ws:?}, style {ss:?}")));
    }
    let b = ss[0];
    let w = tape.reshape(weight, &[1, ws[0], ws[1], ws[2], ws[3]])?;
    let style = tape.reshape(s, &[b, 1, ss[1], 1, 1])?;
    let modulated = tape.mul(w, style)?;
    let sq = tape.mul(modulated, modulated)?;
    let sq = tape.sum_axis(sq, 2)?;
    let sq = tape.sum_axis(sq, 3)?;
    let sq = tape.sum_axis(sq, 4)?;
    let sq = tape.add_scalar(sq, T::from_f64(eps))?;
    let norm = tape.sqrt(sq)?;
    tape.div(modulated, norm)
}

/// Convolves the shared `[1, C, H, W]` memory with each sample's weights.
pub fn condition_memory<T: Real>(tape: &mut Tape<T>, memory: Var, omega: Var) -> Result<Var> {
    let k = tape.shape(omega).last().copied().unwrap_or(1);
    tape.conv2d(memory, omega, None, 1, k / 2)
}

/// Attention-weighted values before the output projection.
///
/// `q: [B, C, N_q]`, `k, v: [B, C, N_k]`. Returns `[B, C, N_q]` and the
/// attention matrix `[B, N_q, N_k]` whose rows sum to one.
pub fn attend<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, scaled: bool) -> Result<(Var, Var)> {
    let c = tape.shape(q)[1];
    let logits = tape.matmul_t(q, k, true, false)?;
    let logits = if scaled { tape.scale(logits, T::from_f64(1.0 / libm::sqrt(c as f64)))? } else { logits };
    let attn = tape.softmax(logits, 2)?;
    let out = tape.matmul_t(v, attn, false, true)?;
    Ok((out, attn))
}

/// Convolution whose kernel is a softmax-weighted mix of `n` candidates,
/// with the mixing weights predicted from a pooled descriptor.
#[derive(Debug, Clone)]
pub struct DynamicConv {
    attention: Mlp,
    kernels: ParamId,
    biases: ParamId,
    channels: usize,
}

impl DynamicConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        n_kernels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attention = Mlp::new(store, &format!("{name}.attention"), &[channels, channels, n_kernels], rng)?;
        let per = channels * channels * 9;
        let kernels = store.add(&format!("{name}.kernels"), he_normal(&[n_kernels, per], channels * 9, rng))?;
        let biases = store.add(&format!("{name}.biases"), Tensor::zeros(&[n_kernels, channels]))?;
        Ok(DynamicConv { attention, kernels, biases, channels })
    }

    /// Mixing weights `[B, n]` from a `[B, C]` descriptor.
    pub fn attention<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pooled: Var) -> Result<Var> {
        let logits = self.attention.forward(tape, store, pooled)?;
        tape.softmax(logits, 1)
    }

    /// Convolves `x: [B, C, H, W]` with the kernel mixed by `att: [B, n]`.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, att: Var) -> Result<Var> {
        let b = tape.shape(att)[0];
        let c = self.channels;
        let kernels = tape.param(store, self.kernels);
        let biases = tape.param(store, self.biases);
        let w = tape.matmul(att, kernels)?;
        let w = tape.reshape(w, &[b, c, c, 3, 3])?;
        let bias = tape.matmul(att, biases)?;
        let bias = tape.reshape(bias, &[b, c, 1, 1])?;
        let y = tape.conv2d(x, w, None, 1, 1)?;
        tape.add(y, bias)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, pooled: Var) -> Result<Var> {
        let att = self.attention(tape, store, pooled)?;
        self.apply(tape, store, x, att)
    }
}

/// Intermediate values of one memory level, kept for losses and inspection.
#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    /// `concat(F_ca, keep)`, same shape as the warped input.
    pub compensated: Var,
    pub keep: Var,
    pub proj: Var,
    pub identity: Var,
    pub conditioned: Var,
    /// Values `[B, C_m, H_m·W_m]`.
    pub values: Var,
    /// The same values recomputed from detached identity inputs, so a loss
    /// on them trains only the memory path.
    pub memory_values: Var,
    pub attention: Var,
    pub cross: Var,
}

#[derive(Debug, Clone)]
pub struct MemoryLevel {
    pub proj: Conv2d,
    pub identity: Mlp,
    pub memory_weight: ParamId,
    pub key: DynamicConv,
    pub value: DynamicConv,
    pub query: Conv2d,
    pub output: Conv2d,
    pub channels: usize,
}

impl MemoryLevel {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        num_keypoints: usize,
        cfg: &MemoryConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cm = cfg.channels;
        let half = channels / 2;
        let proj = Conv2d::new(store, &format!("{name}.proj"), half, cm, 1, true, rng)?;
        let kp_width = 2 * num_keypoints * (1 + 2 * cfg.pe_levels);
        let identity = Mlp::new(store, &format!("{name}.identity"), &[cm + kp_width, cm, cm, cm], rng)?;
        let memory_weight = store.add(&format!("{name}.memory_weight"), he_normal(&[cm, cm, 3, 3], cm * 9, rng))?;
        let key = DynamicConv::new(store, &format!("{name}.key"), cm, cfg.n_kernels, rng)?;
        let value = DynamicConv::new(store, &format!("{name}.value"), cm, cfg.n_kernels, rng)?;
        let query = Conv2d::new(store, &format!("{name}.query"), cm, cm, 1, cfg.query_bias, rng)?;
        let output = Conv2d::new(store, &format!("{name}.output"), cm, half, 1, true, rng)?;
        Ok(MemoryLevel { proj, identity, memory_weight, key, value, query, output, channels })
    }

    /// Implicit identity code `[B, C_m]` from pooled projected features and
    /// the encoded source keypoints.
    pub fn encode_identity<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pooled: Var,
        kp_s: Var,
        pe_levels: usize,
    ) -> Result<Var> {
        let kp = positional_encoding(tape, kp_s, pe_levels)?;
        let input = tape.concat(&[pooled, kp], 1)?;
        self.identity.forward(tape, store, input)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        memory: Var,
        warped: Var,
        kp_s: Var,
        cfg: &MemoryConfig,
        ablate: bool,
    ) -> Result<LevelOutput> {
        let s = tape.shape(warped).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(shape_err("memory level", format!("expected {} channels, got {s:?}", self.channels)));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let cm = cfg.channels;

        let (keep, modulate) = split_channels(tape, warped)?;
        let proj = self.proj.forward(tape, store, modulate)?;
        let pooled = tape.global_avg_pool(proj)?;

        let identity = self.encode_identity(tape, store, pooled, kp_s, cfg.pe_levels)?;
        let weight = tape.param(store, self.memory_weight);
        let omega = modulate_demodulate(tape, weight, identity, cfg.eps)?;
        let conditioned = condition_memory(tape, memory, omega)?;

        let nk = cfg.height * cfg.width;
        let keys = self.key.forward(tape, store, conditioned, pooled)?;
        let keys = tape.reshape(keys, &[b, cm, nk])?;
        let values = self.value.forward(tape, store, conditioned, pooled)?;
        let values = tape.reshape(values, &[b, cm, nk])?;

        let pooled_cut = tape.detach(pooled)?;
        let kp_cut = tape.detach(kp_s)?;
        let identity_cut = self.encode_identity(tape, store, pooled_cut, kp_cut, cfg.pe_levels)?;
        let omega_cut = modulate_demodulate(tape, weight, identity_cut, cfg.eps)?;
        let conditioned_cut = condition_memory(tape, memory, omega_cut)?;
        let memory_values = self.value.forward(tape, store, conditioned_cut, pooled_cut)?;
        let memory_values = tape.reshape(memory_values, &[b, cm, nk])?;

        let q = self.query.forward(tape, store, proj)?;
        let q = tape.relu(q)?;
        let q = tape.reshape(q, &[b, cm, h * w])?;
        let (pre, attention) = attend(tape, q, keys, values, cfg.attention_scaling)?;
        let pre = tape.reshape(pre, &[b, cm, h, w])?;
        let cross = self.output.forward(tape, store, pre)?;
        let cross = if ablate {
            let z = Tensor::zeros(tape.shape(cross));
            tape.constant(z)
        } else {
            cross
        };
        let compensated = tape.concat(&[cross, keep], 1)?;
        Ok(LevelOutput { compensated, keep, proj, identity, conditioned, values, memory_values, attention, cross })
    }
}

/// Gathers the per-level memory heads of a model.
pub fn build_levels<T: Real>(
    store: &mut ParamStore<T>,
    channels: &[usize],
    num_keypoints: usize,
    cfg: &MemoryConfig,
    rng: &mut impl Rng,
) -> Result<Vec<MemoryLevel>> {
    channels
        .iter()
        .enumerate()
        .map(|(i, &c)| MemoryLevel::new(store, &format!("level{}", i + 1), c, num_keypoints, cfg, rng))
        .collect()
}
