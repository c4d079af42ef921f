use mcnet_core::autodiff::kernels::identity_grid;
use mcnet_core::memory::modulate_demodulate;
use mcnet_core::objectives::{
    keypoint_distance_exact, keypoint_distance_hinge, metrics, total_loss, LossParts, LossWeights,
};
use mcnet_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for bi in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[bi, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    let i = out.offset(&[bi, o, oy, ox]);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_sums_to_one(rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..400.0, axis in 0usize..2, seed: u64) {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[rows, cols], -scale, scale, seed));
        let y = tape.softmax(x, axis).unwrap();
        let v = tape.value(y);
        let (outer, inner) = if axis == 0 { (cols, rows) } else { (rows, cols) };
        for o in 0..outer {
            let s: f64 = (0..inner)
                .map(|i| if axis == 0 { v.at(&[i, o]) } else { v.at(&[o, i]) })
                .sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn concat_of_split_is_exact(a in 1usize..4, b in 1usize..4, c in 1usize..4, axis in 0usize..3, seed: u64) {
        let mut shape = [2, 3, 4];
        shape[axis] = a + b + c;
        let x = random(&shape, -1.0, 1.0, seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let parts = tape.split(v, axis, &[a, b, c]).unwrap();
        let back = tape.concat(&parts, axis).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn identity_grid_reproduces_input(h in 1usize..9, w in 1usize..9, seed: u64) {
        let x = random(&[2, 3, h, w], -1.0, 1.0, seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(identity_grid(h, w));
        let y = tape.grid_sample(xv, g).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn conv_matches_nested_loops(ci in 1usize..4, co in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]),
                                 stride in 1usize..3, pad in 0usize..3, seed: u64) {
        let h = 5 + seed as usize % 3;
        let x = random(&[2, ci, h, 6], -1.0, 1.0, seed);
        let w = random(&[co, ci, k, k], -1.0, 1.0, seed ^ 1);
        let b = random(&[co], -1.0, 1.0, seed ^ 2);
        prop_assume!(h + 2 * pad >= k);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let oracle = naive_conv(&x, &w, b.data(), stride, pad);
        prop_assert_eq!(tape.shape(y), oracle.shape());
        prop_assert!(tape.value(y).max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn replayed_backward_is_identical(seed: u64) {
        let mut tape = Tape::new();
        let x = tape.input(random(&[2, 3, 4, 4], -1.0, 1.0, seed));
        let w = tape.input(random(&[3, 3, 3, 3], -1.0, 1.0, seed ^ 7));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let y = tape.sigmoid(y).unwrap();
        let y = tape.mul(y, x).unwrap();
        let l = tape.mean(y).unwrap();
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        prop_assert_eq!(g1.wrt(&tape, x), g2.wrt(&tape, x));
        prop_assert_eq!(g1.wrt(&tape, w), g2.wrt(&tape, w));
    }

    #[test]
    fn total_loss_is_linear_in_each_weight(parts in prop::array::uniform4(0.0f64..5.0), w in prop::array::uniform4(0.0f64..20.0), which in 0usize..4) {
        let eval = |w: [f64; 4]| {
            let mut tape = Tape::<f64>::new();
            let v: Vec<_> = parts.iter().map(|&p| tape.constant(Tensor::scalar(p))).collect();
            let p = LossParts { perceptual: v[0], equivariance: v[1], distance: v[2], consistency: v[3] };
            let lw = LossWeights { perceptual: w[0], equivariance: w[1], distance: w[2], consistency: w[3] };
            let t = total_loss(&mut tape, &p, &lw).unwrap();
            tape.value(t).item()
        };
        let mut doubled = w;
        doubled[which] *= 2.0;
        let expected = eval(w) + w[which] * parts[which];
        prop_assert!((eval(doubled) - expected).abs() < 1e-9 * (1.0 + expected.abs()));
        prop_assert_eq!(eval([0.0; 4]), 0.0);
    }

    #[test]
    fn hinge_and_sign_share_zero_set(k in 2usize..6, spread in 0.05f64..1.0, seed: u64) {
        let kp = random(&[2, k, 2], -spread, spread, seed);
        // keep clear of the boundary where the two forms legitimately differ
        let alpha = 0.2;
        let near_boundary = (0..2).any(|b| (0..k).any(|i| (0..k).any(|j| {
            let d = (kp.at(&[b, i, 0]) - kp.at(&[b, j, 0])).abs() + (kp.at(&[b, i, 1]) - kp.at(&[b, j, 1])).abs();
            i != j && (d - alpha).abs() < 1e-9
        })));
        prop_assume!(!near_boundary);
        let mut tape = Tape::new();
        let v = tape.constant(kp.clone());
        let hv = keypoint_distance_hinge(&mut tape, v, alpha).unwrap();
        let h = tape.value(hv).item();
        let e = keypoint_distance_exact(&kp, alpha);
        prop_assert!(h >= 0.0 && e >= 0.0);
        prop_assert_eq!(h == 0.0, e == 0.0);
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed: u64) {
        let a = random(&[2, 3, 12, 12], 0.0, 1.0, seed);
        let b = random(&[2, 3, 12, 12], 0.0, 1.0, seed ^ 3);
        let m1 = metrics(&a, &b).unwrap();
        let m2 = metrics(&b, &a).unwrap();
        prop_assert!((m1.l1 - m2.l1).abs() < 1e-12 && (m1.psnr - m2.psnr).abs() < 1e-9 && (m1.ssim - m2.ssim).abs() < 1e-12);
        prop_assert!(m1.ssim <= 1.0 && m1.ssim >= -1.0 && m1.psnr > 0.0);
    }

    #[test]
    fn demodulated_rows_have_at_most_unit_norm(seed: u64, eps_exp in -8i32..1) {
        let mut tape = Tape::new();
        let w = tape.constant(random(&[4, 3, 3, 3], -1.0, 1.0, seed));
        let s = tape.constant(random(&[2, 3], 0.1, 2.0, seed ^ 5));
        let o = modulate_demodulate(&mut tape, w, s, 10f64.powi(eps_exp)).unwrap();
        let v = tape.value(o);
        for row in v.data().chunks(27) {
            let sq: f64 = row.iter().map(|x| x * x).sum();
            prop_assert!(sq > 0.0 && sq <= 1.0);
        }
    }
}
