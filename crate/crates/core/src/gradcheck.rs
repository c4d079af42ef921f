//! Central finite-difference verification of every differentiable operation.
//!
//! Each registered check produces a few probes: concrete 64-bit inputs plus a
//! function that records the operation on a tape. The scalar being
//! differentiated is `sum(out ⊙ R)` for a fixed random `R`, so every output
//! element contributes with a distinct weight. Inputs are drawn away from the
//! kinks of piecewise-linear operations.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels::identity_grid;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::memory::{attend, condition_memory, modulate_demodulate, positional_encoding};
use crate::motion::{combine_motions, keypoint_gaussians, resize_map, soft_argmax, sparse_motions, warp_feature};
use crate::objectives::{keypoint_distance_hinge, perceptual_loss, RandomConvExtractor};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the relative-error denominator, so that gradients which
/// are zero up to rounding are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-3;

pub type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Probe {
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
}

impl Probe {
    pub fn new(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Probe { inputs, build: Box::new(build) }
    }
}

pub struct OpCheck {
    pub name: &'static str,
    pub probes: fn(&mut ChaCha8Rng) -> Vec<Probe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub shapes: Vec<Vec<usize>>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl ProbeResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub probes: Vec<ProbeResult>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.probes.iter().all(ProbeResult::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

fn evaluate(probe: &Probe, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = (probe.build)(&mut tape, &vars)?;
    let o = tape.value(out);
    Ok(o.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

/// Compares the tape's gradient with central differences on every input
/// element.
pub fn check_probe(probe: &Probe, rng: &mut impl Rng) -> Result<ProbeResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = probe.inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = (probe.build)(&mut tape, &vars)?;
    let weights = Tensor::from_fn(tape.shape(out), |_| rng.random_range(-1.0..1.0));
    let r = tape.constant(weights.clone());
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut inputs = probe.inputs.clone();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let fp = evaluate(probe, &inputs, &weights)?;
            inputs[i].data_mut()[j] = orig - STEP;
            let fm = evaluate(probe, &inputs, &weights)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs();
            max_abs = max_abs.max(err);
            max_rel = max_rel.max(err / a.abs().max(numeric.abs()).max(DENOM_FLOOR));
        }
    }
    Ok(ProbeResult {
        shapes: probe.inputs.iter().map(|t| t.shape().to_vec()).collect(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
    })
}

pub fn check_op(op: &OpCheck, seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = (op.probes)(&mut rng);
    let results = probes.iter().map(|p| check_probe(p, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(OpReport { name: op.name.into(), probes: results })
}

pub fn find(name: &str) -> Option<OpCheck> {
    registry().into_iter().find(|op| op.name == name)
}

// ---------------------------------------------------------------------------
// Input generators
// ---------------------------------------------------------------------------

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Magnitudes in [0.2, 1] with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// Sampling coordinates for an `h`×`w` input that stay clear of pixel
/// boundaries; a few land well outside the image to exercise clamping.
fn grid_coords(rng: &mut ChaCha8Rng, b: usize, ho: usize, wo: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut coord = |size: usize| {
        if rng.random_bool(0.1) {
            let m = rng.random_range(1.3..1.8);
            return if rng.random_bool(0.5) { m } else { -m };
        }
        let i = rng.random_range(0..size - 1) as f64;
        let p = i + rng.random_range(0.15..0.85);
        p * 2.0 / (size - 1) as f64 - 1.0
    };
    let mut data = Vec::with_capacity(b * ho * wo * 2);
    for _ in 0..b * ho * wo {
        data.push(coord(w));
        data.push(coord(h));
    }
    Tensor::new(&[b, ho, wo, 2], data).expect("sizes match")
}

/// Keypoint sets whose pairwise L1 distances avoid 0 and `alpha` by a margin.
fn separated_keypoints(rng: &mut ChaCha8Rng, b: usize, k: usize, alpha: f64) -> Tensor<f64> {
    loop {
        let t = uniform(rng, &[b, k, 2]).map(|v| 0.15 * v);
        let v = t.data();
        let mut active = false;
        let ok = (0..b).all(|bi| {
            (0..k).all(|i| {
                (0..k).all(|j| {
                    if i == j {
                        return true;
                    }
                    let p = &v[(bi * k + i) * 2..];
                    let q = &v[(bi * k + j) * 2..];
                    let dx = (p[0] - q[0]).abs();
                    let dy = (p[1] - q[1]).abs();
                    active |= dx + dy < alpha;
                    dx > 0.01 && dy > 0.01 && ((dx + dy) - alpha).abs() > 0.02
                })
            })
        });
        if ok && active {
            return t;
        }
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

fn binary_probes(
    rng: &mut ChaCha8Rng,
    gen_b: fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>,
) -> Vec<(Tensor<f64>, Tensor<f64>)> {
    [(&[2, 3][..], &[2, 3][..]), (&[2, 3, 4][..], &[3, 1][..]), (&[1, 3, 1, 2][..], &[2, 1, 4, 2][..])]
        .iter()
        .map(|(a, b)| (uniform(rng, a), gen_b(rng, b)))
        .collect()
}

fn unary(
    rng: &mut ChaCha8Rng,
    gen: fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>,
    f: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Vec<Probe> {
    [&[5][..], &[2, 3][..], &[2, 2, 3][..]]
        .iter()
        .map(|s| Probe::new(vec![gen(rng, s)], move |t, v| f(t, v[0])))
        .collect()
}

/// Every differentiable operation, primitives first.
pub fn registry() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "add",
            probes: |rng| {
                binary_probes(rng, uniform)
                    .into_iter()
                    .map(|(a, b)| Probe::new(vec![a, b], |t, v| t.add(v[0], v[1])))
                    .collect()
            },
        },
        OpCheck {
            name: "sub",
            probes: |rng| {
                binary_probes(rng, uniform)
                    .into_iter()
                    .map(|(a, b)| Probe::new(vec![a, b], |t, v| t.sub(v[0], v[1])))
                    .collect()
            },
        },
        OpCheck {
            name: "mul",
            probes: |rng| {
                binary_probes(rng, uniform)
                    .into_iter()
                    .map(|(a, b)| Probe::new(vec![a, b], |t, v| t.mul(v[0], v[1])))
                    .collect()
            },
        },
        OpCheck {
            name: "div",
            probes: |rng| {
                binary_probes(rng, away_from_zero)
                    .into_iter()
                    .map(|(a, b)| Probe::new(vec![a, b], |t, v| t.div(v[0], v[1])))
                    .collect()
            },
        },
        OpCheck { name: "scale", probes: |rng| unary(rng, uniform, |t, x| t.scale(x, -1.7)) },
        OpCheck { name: "add_scalar", probes: |rng| unary(rng, uniform, |t, x| t.add_scalar(x, 0.3)) },
        OpCheck { name: "exp", probes: |rng| unary(rng, uniform, |t, x| t.exp(x)) },
        OpCheck { name: "sin", probes: |rng| unary(rng, uniform, |t, x| t.sin(x)) },
        OpCheck { name: "cos", probes: |rng| unary(rng, uniform, |t, x| t.cos(x)) },
        OpCheck { name: "sqrt", probes: |rng| unary(rng, positive, |t, x| t.sqrt(x)) },
        OpCheck { name: "abs", probes: |rng| unary(rng, away_from_zero, |t, x| t.abs(x)) },
        OpCheck { name: "relu", probes: |rng| unary(rng, away_from_zero, |t, x| t.relu(x)) },
        OpCheck { name: "sigmoid", probes: |rng| unary(rng, uniform, |t, x| t.sigmoid(x)) },
        OpCheck { name: "sum", probes: |rng| unary(rng, uniform, |t, x| t.sum(x)) },
        OpCheck { name: "mean", probes: |rng| unary(rng, uniform, |t, x| t.mean(x)) },
        OpCheck {
            name: "sum_axis",
            probes: |rng| {
                vec![
                    Probe::new(vec![uniform(rng, &[3, 4])], |t, v| t.sum_axis(v[0], 0)),
                    Probe::new(vec![uniform(rng, &[2, 3, 4])], |t, v| t.sum_axis(v[0], 1)),
                    Probe::new(vec![uniform(rng, &[2, 2, 3])], |t, v| t.sum_axis(v[0], 2)),
                ]
            },
        },
        OpCheck {
            name: "l1",
            probes: |rng| {
                [&[4][..], &[2, 3][..], &[2, 2, 2][..]]
                    .iter()
                    .map(|s| {
                        let a = uniform(rng, s);
                        let b = a.zip_map(&away_from_zero(rng, s), |x, d| x + d).expect("same shape");
                        Probe::new(vec![a, b], |t, v| t.l1(v[0], v[1]))
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "reshape",
            probes: |rng| {
                vec![
                    Probe::new(vec![uniform(rng, &[2, 3])], |t, v| t.reshape(v[0], &[3, 2])),
                    Probe::new(vec![uniform(rng, &[2, 3, 4])], |t, v| t.reshape(v[0], &[6, 4])),
                    Probe::new(vec![uniform(rng, &[4])], |t, v| t.reshape(v[0], &[1, 2, 2])),
                ]
            },
        },
        OpCheck {
            name: "permute",
            probes: |rng| {
                vec![
                    Probe::new(vec![uniform(rng, &[2, 3])], |t, v| t.permute(v[0], &[1, 0])),
                    Probe::new(vec![uniform(rng, &[2, 3, 4])], |t, v| t.permute(v[0], &[2, 0, 1])),
                    Probe::new(vec![uniform(rng, &[2, 1, 3, 2])], |t, v| t.permute(v[0], &[0, 3, 1, 2])),
                ]
            },
        },
        OpCheck {
            name: "broadcast_to",
            probes: |rng| {
                vec![
                    Probe::new(vec![uniform(rng, &[3])], |t, v| t.broadcast_to(v[0], &[2, 3])),
                    Probe::new(vec![uniform(rng, &[2, 1, 3])], |t, v| t.broadcast_to(v[0], &[2, 4, 3])),
                    Probe::new(vec![uniform(rng, &[1, 2, 1])], |t, v| t.broadcast_to(v[0], &[3, 2, 2])),
                ]
            },
        },
        OpCheck {
            name: "concat",
            probes: |rng| {
                vec![
                    Probe::new(vec![uniform(rng, &[2, 3]), uniform(rng, &[1, 3])], |t, v| t.concat(v, 0)),
                    Probe::new(vec![uniform(rng, &[2, 1, 2]), uniform(rng, &[2, 3, 2])], |t, v| t.concat(v, 1)),
                    Probe::new(vec![uniform(rng, &[2, 2]), uniform(rng, &[2, 1]), uniform(rng, &[2, 3])], |t, v| {
                        t.concat(v, 1)
                    }),
                ]
            },
        },
        OpCheck {
            name: "split",
            probes: |rng| {
                vec![
                    Probe::new(vec![uniform(rng, &[5, 2])], |t, v| Ok(t.split(v[0], 0, &[2, 3])?[1])),
                    Probe::new(vec![uniform(rng, &[2, 4, 3])], |t, v| Ok(t.split(v[0], 1, &[1, 2, 1])?[1])),
                    Probe::new(vec![uniform(rng, &[2, 3, 4])], |t, v| Ok(t.split(v[0], 2, &[3, 1])?[0])),
                ]
            },
        },
        OpCheck {
            name: "softmax",
            probes: |rng| {
                vec![
                    Probe::new(vec![uniform(rng, &[4])], |t, v| t.softmax(v[0], 0)),
                    Probe::new(vec![uniform(rng, &[3, 5])], |t, v| t.softmax(v[0], 1)),
                    Probe::new(vec![uniform(rng, &[2, 3, 4])], |t, v| t.softmax(v[0], 1)),
                ]
            },
        },
        OpCheck {
            name: "matmul",
            probes: |rng| {
                vec![
                    Probe::new(vec![uniform(rng, &[3, 4]), uniform(rng, &[4, 2])], |t, v| t.matmul(v[0], v[1])),
                    Probe::new(vec![uniform(rng, &[4, 3]), uniform(rng, &[2, 4])], |t, v| {
                        t.matmul_t(v[0], v[1], true, true)
                    }),
                    Probe::new(vec![uniform(rng, &[2, 3, 4]), uniform(rng, &[2, 5, 4])], |t, v| {
                        t.matmul_t(v[0], v[1], false, true)
                    }),
                    Probe::new(vec![uniform(rng, &[2, 4, 3]), uniform(rng, &[4, 2])], |t, v| {
                        t.matmul_t(v[0], v[1], true, false)
                    }),
                ]
            },
        },
        OpCheck {
            name: "conv2d",
            probes: |rng| {
                vec![
                    Probe::new(
                        vec![uniform(rng, &[2, 2, 5, 5]), uniform(rng, &[3, 2, 3, 3]), uniform(rng, &[3])],
                        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
                    ),
                    Probe::new(vec![uniform(rng, &[1, 3, 6, 5]), uniform(rng, &[2, 3, 3, 3])], |t, v| {
                        t.conv2d(v[0], v[1], None, 2, 0)
                    }),
                    Probe::new(vec![uniform(rng, &[2, 2, 4, 4]), uniform(rng, &[2, 2, 2, 1, 1])], |t, v| {
                        t.conv2d(v[0], v[1], None, 1, 0)
                    }),
                    Probe::new(
                        vec![uniform(rng, &[1, 2, 4, 3]), uniform(rng, &[2, 1, 2, 3, 3]), uniform(rng, &[1])],
                        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
                    ),
                ]
            },
        },
        OpCheck {
            name: "grid_sample",
            probes: |rng| {
                vec![
                    Probe::new(vec![uniform(rng, &[1, 1, 3, 3]), grid_coords(rng, 1, 2, 2, 3, 3)], |t, v| {
                        t.grid_sample(v[0], v[1])
                    }),
                    Probe::new(vec![uniform(rng, &[2, 2, 4, 5]), grid_coords(rng, 2, 3, 2, 4, 5)], |t, v| {
                        t.grid_sample(v[0], v[1])
                    }),
                    Probe::new(vec![uniform(rng, &[2, 3, 3, 4]), grid_coords(rng, 1, 4, 3, 3, 4)], |t, v| {
                        t.grid_sample(v[0], v[1])
                    }),
                ]
            },
        },
        OpCheck {
            name: "upsample_nearest2",
            probes: |rng| {
                [&[1, 1, 2, 2][..], &[2, 2, 3, 2][..], &[1, 3, 1, 4][..]]
                    .iter()
                    .map(|s| Probe::new(vec![uniform(rng, s)], |t, v| t.upsample_nearest2(v[0])))
                    .collect()
            },
        },
        OpCheck {
            name: "avg_pool2",
            probes: |rng| {
                [&[1, 1, 2, 2][..], &[2, 2, 4, 2][..], &[1, 3, 4, 6][..]]
                    .iter()
                    .map(|s| Probe::new(vec![uniform(rng, s)], |t, v| t.avg_pool2(v[0])))
                    .collect()
            },
        },
        OpCheck {
            name: "global_avg_pool",
            probes: |rng| {
                [&[1, 1, 1, 1][..], &[2, 3, 2, 2][..], &[1, 2, 3, 5][..]]
                    .iter()
                    .map(|s| Probe::new(vec![uniform(rng, s)], |t, v| t.global_avg_pool(v[0])))
                    .collect()
            },
        },
        // -- composites -------------------------------------------------------
        OpCheck {
            name: "soft_argmax",
            probes: |rng| {
                [(&[1, 1, 3, 3][..], 0.1), (&[2, 2, 4, 3][..], 0.5), (&[1, 3, 2, 5][..], 1.0)]
                    .iter()
                    .map(|&(s, tau)| {
                        Probe::new(vec![uniform(rng, s)], move |t, v| {
                            let (kp, heat) = soft_argmax(t, v[0], tau)?;
                            let kp = t.reshape(kp, &[t.shape(heat)[0] * t.shape(heat)[1] * 2])?;
                            let h = t.reshape(heat, &[t.value(heat).numel()])?;
                            t.concat(&[kp, h], 0)
                        })
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "keypoint_gaussians",
            probes: |rng| {
                [(1, 1, 3, 0.3), (2, 2, 4, 0.5), (1, 3, 5, 0.2)]
                    .iter()
                    .map(|&(b, k, n, sigma)| {
                        Probe::new(vec![uniform(rng, &[b, k, 2])], move |t, v| keypoint_gaussians(t, v[0], sigma, n, n))
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "dense_flow",
            probes: |rng| {
                [(1, 1, 3), (2, 2, 3), (1, 3, 4)]
                    .iter()
                    .map(|&(b, k, n)| {
                        let inputs = vec![
                            uniform(rng, &[b, k, 2]).map(|x| 0.5 * x),
                            uniform(rng, &[b, k, 2]).map(|x| 0.5 * x),
                            uniform(rng, &[b, k + 1, n, n]),
                        ];
                        Probe::new(inputs, move |t, v| {
                            let cand = sparse_motions(t, v[0], v[1], n, n)?;
                            let masks = t.softmax(v[2], 1)?;
                            combine_motions(t, masks, cand)
                        })
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "warp_feature",
            probes: |rng| {
                [(1, 1, 3, 3, 2), (2, 2, 4, 4, 4), (1, 2, 6, 6, 3)]
                    .iter()
                    .map(|&(b, c, h, w, nf)| {
                        let inputs = vec![uniform(rng, &[b, c, h, w]), grid_coords(rng, b, nf, nf, h, w)];
                        Probe::new(inputs, |t, v| warp_feature(t, v[0], v[1]))
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "resize_map",
            probes: |rng| {
                [(1, 1, 2, 3, 3, 4), (2, 2, 4, 4, 6, 6), (1, 3, 3, 2, 5, 4)]
                    .iter()
                    .map(|&(b, c, h, w, ho, wo)| {
                        Probe::new(vec![uniform(rng, &[b, c, h, w])], move |t, v| resize_map(t, v[0], ho, wo))
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "positional_encoding",
            probes: |rng| {
                [(1, 1, 1), (2, 2, 2), (1, 3, 3)]
                    .iter()
                    .map(|&(b, k, l)| {
                        Probe::new(vec![uniform(rng, &[b, k, 2])], move |t, v| positional_encoding(t, v[0], l))
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "modulate_demodulate",
            probes: |rng| {
                [(1, 2, 2, 1), (2, 3, 2, 3), (2, 2, 4, 3)]
                    .iter()
                    .map(|&(b, co, ci, k)| {
                        let inputs = vec![uniform(rng, &[co, ci, k, k]), uniform(rng, &[b, ci])];
                        Probe::new(inputs, |t, v| modulate_demodulate(t, v[0], v[1], 1e-8))
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "condition_memory",
            probes: |rng| {
                [(1, 2, 3, 3), (2, 2, 2, 4), (2, 3, 4, 3)]
                    .iter()
                    .map(|&(b, c, h, w)| {
                        let inputs =
                            vec![uniform(rng, &[1, c, h, w]), uniform(rng, &[c, c, 3, 3]), uniform(rng, &[b, c])];
                        Probe::new(inputs, |t, v| {
                            let omega = modulate_demodulate(t, v[1], v[2], 1e-8)?;
                            condition_memory(t, v[0], omega)
                        })
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "dynamic_conv",
            probes: |rng| {
                [(1, 1, 2, 3), (2, 2, 2, 3), (2, 3, 3, 2)]
                    .iter()
                    .map(|&(b, n, c, s)| {
                        let inputs = vec![
                            uniform(rng, &[b, c, s, s]),
                            uniform(rng, &[b, n]),
                            uniform(rng, &[n, c * c * 9]),
                            uniform(rng, &[n, c]),
                        ];
                        Probe::new(inputs, move |t, v| {
                            let att = t.softmax(v[1], 1)?;
                            let w = t.matmul(att, v[2])?;
                            let w = t.reshape(w, &[b, c, c, 3, 3])?;
                            let bias = t.matmul(att, v[3])?;
                            let bias = t.reshape(bias, &[b, c, 1, 1])?;
                            let y = t.conv2d(v[0], w, None, 1, 1)?;
                            t.add(y, bias)
                        })
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "cross_attention",
            probes: |rng| {
                [(1, 2, 3, 2, true), (2, 3, 4, 5, true), (1, 2, 2, 3, false)]
                    .iter()
                    .map(|&(b, c, nq, nk, scaled)| {
                        let inputs =
                            vec![uniform(rng, &[b, c, nq]), uniform(rng, &[b, c, nk]), uniform(rng, &[b, c, nk])];
                        Probe::new(inputs, move |t, v| Ok(attend(t, v[0], v[1], v[2], scaled)?.0))
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "keypoint_distance",
            probes: |rng| {
                [(1, 2), (2, 3), (1, 5)]
                    .iter()
                    .map(|&(b, k)| {
                        let kp = separated_keypoints(rng, b, k, 0.2);
                        Probe::new(vec![kp], |t, v| keypoint_distance_hinge(t, v[0], 0.2))
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "perceptual",
            probes: |rng| {
                [(1, 8), (2, 8), (1, 16)]
                    .iter()
                    .map(|&(b, n)| {
                        let gen = uniform(rng, &[b, 3, n, n]);
                        let target = gen.zip_map(&away_from_zero(rng, &[b, 3, n, n]), |x, d| x + d).expect("shape");
                        Probe::new(vec![gen], move |t, v| {
                            let ex = RandomConvExtractor::<f64>::new(&[2], 3);
                            let tgt = t.constant(target.clone());
                            perceptual_loss(t, v[0], tgt, &ex)
                        })
                    })
                    .collect()
            },
        },
        OpCheck {
            name: "identity_warp",
            probes: |rng| {
                [(1, 1, 3), (2, 2, 4), (1, 3, 5)]
                    .iter()
                    .map(|&(b, c, n)| {
                        Probe::new(vec![uniform(rng, &[b, c, n, n])], move |t, v| {
                            let g = t.constant(identity_grid(n, n));
                            t.grid_sample(v[0], g)
                        })
                    })
                    .collect()
            },
        },
    ]
}
