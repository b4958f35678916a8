use std::time::Instant;

use dvgnn_core::diffusion::{self, DiffusionParams, SequenceWeights, StepVars};
use dvgnn_core::gradcheck::grad_check;
use dvgnn_core::gradsuite::{forecaster_reference_check, run_suite};
use dvgnn_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_suite_within_tolerance_and_budget() {
    let start = Instant::now();
    let results = run_suite(42, 100).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "{elapsed:?}");
    for r in &results {
        assert!(r.instances >= 100);
        assert!(r.max_error < 1e-4, "{r:?}");
    }
    assert!(results.iter().any(|r| r.name == "encoder+elbo"));
    assert!(results.iter().any(|r| r.name == "forecaster+l2"));
}

#[test]
fn forecaster_reference_instance() {
    assert!(forecaster_reference_check(7).unwrap() < 1e-4);
}

#[test]
fn relu_matmul_sigmoid_composite_at_coarse_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let rand3 = |rng: &mut ChaCha8Rng| Tensor::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let mut checked = 0;
    while checked < 20 {
        let (a, b) = (rand3(&mut rng), rand3(&mut rng));
        // skip draws whose ReLU inputs sit within the finite-difference step
        if a.matmul(&b).unwrap().data().iter().any(|v| v.abs() < 0.05) {
            continue;
        }
        let mut store = ParamStore::new();
        store.insert("a", a);
        store.insert("b", b);
        let err = grad_check(
            |t, s| {
                let a = t.param(s, "a")?;
                let b = t.param(s, "b")?;
                let ab = t.matmul(a, b)?;
                let r = t.relu(ab);
                let y = t.matmul(r, a)?;
                let y = t.sigmoid(y);
                Ok(t.sum(y))
            },
            &store,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        checked += 1;
    }
}

#[test]
fn per_edge_term_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..50 {
        let mut store = ParamStore::new();
        store.insert("ls_i", Tensor::from_fn(1, 1, |_, _| rng.random_range(0.0..1.0)));
        store.insert("ls_j", Tensor::from_fn(1, 1, |_, _| rng.random_range(0.0..1.0)));
        store.insert(diffusion::SIGMA, Tensor::from_fn(1, 1, |_, _| rng.random_range(-0.8..0.8)));
        let noises = vec![
            Tensor::from_fn(1, 1, |_, _| rng.random_range(-2.0..2.0)),
            Tensor::from_fn(1, 1, |_, _| rng.random_range(-2.0..2.0)),
        ];
        let params = DiffusionParams::new(1);
        let weights = SequenceWeights {
            transitions: vec![(0, 1, 1.0)],
            kl: vec![0.0, 0.0],
        };
        let err = grad_check(
            |t, s| {
                let zero = t.constant(Tensor::zeros(&[1, 1]));
                let steps = [
                    StepVars { mu: zero, log_sigma: t.param(s, "ls_i")? },
                    StepVars { mu: zero, log_sigma: t.param(s, "ls_j")? },
                ];
                let sigma = t.param(s, diffusion::SIGMA)?;
                diffusion::sequence_loss_on_tape(t, &steps, &noises, sigma, &params, &weights, 0.0)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
