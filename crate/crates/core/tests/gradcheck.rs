use mcnet_core::gradcheck::{check_op, check_probe, registry, Probe, DENOM_FLOOR, TOLERANCE};
use mcnet_core::{CustomOp, Error, Result, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_registered_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for op in registry() {
        let report = check_op(&op, 7).unwrap();
        println!("{:<22} max rel err {:.3e}", report.name, report.max_rel_err());
        if !report.passed() {
            failures.push(report.name.clone());
        }
    }
    assert!(failures.is_empty(), "failing ops: {failures:?}");
}

/// `x²` with a configurable error in its derivative.
struct Square {
    adjoint_scale: Option<f64>,
}

impl CustomOp<f64> for Square {
    fn name(&self) -> &str {
        "square"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(inputs[0].map(|v| v * v))
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, grad: &Tensor<f64>) -> Option<Vec<Tensor<f64>>> {
        let s = self.adjoint_scale?;
        Some(vec![inputs[0].zip_map(grad, |x, g| 2.0 * x * g * s).unwrap()])
    }
}

fn square_probe(adjoint_scale: Option<f64>) -> Probe {
    let x = Tensor::from_fn(&[2, 3], |i| 0.3 + 0.2 * i as f64);
    Probe::new(vec![x], move |t, v| t.custom(&[v[0]], Box::new(Square { adjoint_scale })))
}

#[test]
fn correct_custom_adjoint_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = check_probe(&square_probe(Some(1.0)), &mut rng).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn perturbed_adjoint_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = check_probe(&square_probe(Some(1.001)), &mut rng).unwrap();
    assert!(!r.passed());
    assert!(r.max_rel_err > TOLERANCE);
}

#[test]
fn missing_adjoint_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = check_probe(&square_probe(None), &mut rng).unwrap_err();
    assert_eq!(err, Error::MissingAdjoint { op: "square".into() });
}

#[test]
fn tiny_gradients_are_compared_absolutely() {
    // sum(x) * 1e-9 has a gradient far below the floor; a zero-gradient
    // implementation would still be within tolerance, which is the intent.
    assert!(1e-9 / DENOM_FLOOR < TOLERANCE);
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::ones(&[3]));
    let y = tape.scale(x, 1e-9).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap().wrt(&tape, x);
    assert!(g.data().iter().all(|&v| (v - 1e-9).abs() < 1e-20));
}
