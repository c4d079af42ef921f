//! Parameterized layers. Each layer owns only [`ParamId`]s; values live in a
//! [`ParamStore`] and are pulled onto the tape at forward time.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square `k`×`k` convolution with "same" padding at stride 1.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), he_normal(&[c_out, c_in, k, k], c_in * k * k, rng))?;
        let bias = if bias { Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]))?) } else { None };
        Ok(Conv2d { weight, bias, stride: 1, padding: k / 2 })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Affine map on `[B, in]` rows: `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), he_normal(&[d_in, d_out], d_in, rng))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Stack of [`Linear`] layers with ReLU between them and no output activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width from input to output, so it has one more
    /// entry than there are layers.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(invalid("mlp", "needs at least an input and an output width"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// U-shaped convolutional stack: `depth` conv-ReLU-pool steps down, then
/// upsample-conv-ReLU steps back up with a skip concatenation at every scale.
/// The output carries `out_channels()` channels at the input resolution.
#[derive(Debug, Clone)]
pub struct Hourglass {
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    out_channels: usize,
}

impl Hourglass {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(invalid("hourglass", "depth must be at least one"));
        }
        let mut down = Vec::with_capacity(widths.len());
        let mut c = c_in;
        for (i, &w) in widths.iter().enumerate() {
            down.push(Conv2d::new(store, &format!("{name}.down{i}"), c, w, 3, true, rng)?);
            c = w;
        }
        // Going up, level i receives the deeper output and emits the width of
        // the level above it, then concatenates that level's skip.
        let mut up = Vec::with_capacity(widths.len());
        let mut c_up = widths[widths.len() - 1];
        for i in (0..widths.len()).rev() {
            let skip = if i == 0 { c_in } else { widths[i - 1] };
            let w = if i == 0 { widths[0] } else { widths[i - 1] };
            up.push(Conv2d::new(store, &format!("{name}.up{i}"), c_up, w, 3, true, rng)?);
            c_up = w + skip;
        }
        Ok(Hourglass { down, up, out_channels: c_up })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Total downsampling factor the input size must be divisible by.
    pub fn factor(&self) -> usize {
        1 << self.down.len()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for conv in &self.down {
            skips.push(h);
            let y = conv.forward(tape, store, h)?;
            let y = tape.relu(y)?;
            h = tape.avg_pool2(y)?;
        }
        for conv in &self.up {
            let u = tape.upsample_nearest2(h)?;
            let y = conv.forward(tape, store, u)?;
            let y = tape.relu(y)?;
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(&[y, skip], 1)?;
        }
        Ok(h)
    }
}
