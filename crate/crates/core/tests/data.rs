use dvgnn_core::data::{
    self, inject_poisson, load_dataset, make_windows, minmax_normalize, repair_missing, simulate_sde, write_dataset,
    SimSpec, Split, TimeSeriesDataset,
};
use dvgnn_core::graphs::{normalize_adjacency, split_edges};
use dvgnn_core::{Graph, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single_node(values: &[f64]) -> TimeSeriesDataset {
    let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
    TimeSeriesDataset::from_grid(&rows, None).unwrap()
}

#[test]
fn repair_error_within_lipschitz_bound() {
    // sin(0.05 t) has Lipschitz constant 0.05 per step.
    let lip = 0.05;
    let truth: Vec<f64> = (0..400).map(|t| (lip * t as f64).sin()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut holed = truth.clone();
    for v in holed.iter_mut().skip(1).take(398) {
        if rng.random_bool(0.05) {
            *v = f64::NAN;
        }
    }
    let repaired = repair_missing(&single_node(&holed)).unwrap();
    let mut t = 0;
    while t < holed.len() {
        if holed[t].is_nan() {
            let start = t;
            while holed[t].is_nan() {
                t += 1;
            }
            let width = (t - start + 1) as f64;
            for k in start..t {
                let err = (repaired.value(k, 0, 0) - truth[k]).abs();
                assert!(err <= lip * width, "step {k}: {err}");
            }
        }
        t += 1;
    }
    assert!(!repaired.has_missing());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn minmax_roundtrip(values in prop::collection::vec(-1e3f64..1e3, 20..60)) {
        let ds = single_node(&values);
        let (norm, stats) = minmax_normalize(&ds).unwrap();
        let back = stats.invert(&norm);
        for t in 0..ds.steps {
            prop_assert!((back.value(t, 0, 0) - values[t]).abs() <= 1e-12 * values[t].abs().max(1.0));
        }
        for t in ds.splits().range(Split::Train) {
            let v = norm.value(t, 0, 0);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn edge_split_partitions(seed in 0u64..1000, density in 0.2f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let mut adj = Tensor::from_fn(n, n, |i, j| if i != j && rng.random_bool(density) { 1.0 } else { 0.0 });
        adj.set(0, 1, 1.0);
        let g = Graph::new(adj).unwrap();
        let s = split_edges(&g, 0.8, seed).unwrap();
        let mut all: Vec<_> = s.train_edges.iter().chain(&s.held_out_edges).cloned().collect();
        all.sort_unstable();
        let mut orig = g.edges();
        orig.sort_unstable();
        prop_assert_eq!(all, orig);
        let non_edges = n * (n - 1) - g.edge_count();
        prop_assert_eq!(s.negative_samples.len(), s.held_out_edges.len().min(non_edges));
        for e in &s.negative_samples {
            prop_assert_eq!(g.weight(e.0, e.1), 0.0);
        }
    }
}

#[test]
fn windows_never_cross_split_boundaries() {
    for total in 20..60 {
        let ds = single_node(&(0..total).map(|t| t as f64).collect::<Vec<_>>());
        let splits = ds.splits();
        for (p, h) in [(2, 1), (3, 2), (4, 1)] {
            for split in [Split::Train, Split::Val, Split::Test] {
                let range = splits.range(split);
                let Ok(batch) = make_windows(&ds, p, h, split) else {
                    assert!(range.len() < p + h);
                    continue;
                };
                assert_eq!(batch.len(), range.len() - p - h + 1);
                for w in &batch.windows {
                    // values equal their time index, so every cell names its step
                    for x in &w.inputs {
                        assert!(range.contains(&(x.item() as usize)));
                    }
                    for k in 0..h {
                        assert!(range.contains(&(w.targets.get(0, k) as usize)));
                    }
                }
            }
        }
    }
}

#[test]
fn poisson_moments_and_test_split_untouched() {
    let n = 10;
    let steps = 14_286;
    let rows = vec![vec![0.0; n]; steps];
    let ds = TimeSeriesDataset::from_grid(&rows, None).unwrap();
    let noisy = inject_poisson(&ds, 3.0, 9).unwrap();
    let train = ds.splits().range(Split::Train);
    let count = (train.len() * n) as f64;
    assert!(count >= 1e5);
    let mean = train.clone().flat_map(|t| (0..n).map(move |i| (t, i))).map(|(t, i)| noisy.value(t, i, 0)).sum::<f64>() / count;
    assert!((mean - 3.0).abs() < 3.0 * (3.0 / count).sqrt(), "{mean}");
    for t in train.end..steps {
        for i in 0..n {
            assert_eq!(noisy.value(t, i, 0).to_bits(), ds.value(t, i, 0).to_bits());
        }
    }
    assert_eq!(inject_poisson(&ds, 3.0, 9).unwrap().values, noisy.values);
}

#[test]
fn noiseless_simulation_matches_matrix_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let n = 4;
    let drift = Tensor::from_fn(n, n, |i, j| if i == j { -0.5 } else { rng.random_range(-0.2..0.2) });
    let z0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dt = 0.1;
    let sim = simulate_sde(&SimSpec {
        n_nodes: n,
        drift: Some(drift.clone()),
        noise_scale: 0.0,
        steps: 50,
        dt,
        init: Some(z0.clone()),
        ..SimSpec::default()
    })
    .unwrap();
    let step = DMatrix::from_fn(n, n, |i, j| drift.get(i, j) * dt + if i == j { 1.0 } else { 0.0 });
    let mut z = nalgebra::DVector::from_vec(z0);
    for k in 0..50 {
        for i in 0..n {
            assert!((sim.dataset.value(k, i, 0) - z[i]).abs() < 1e-10, "step {k}");
        }
        z = &step * z;
    }
}

fn lag1_corr(ds: &TimeSeriesDataset, a: usize, b: usize) -> f64 {
    let x: Vec<f64> = (0..ds.steps - 1).map(|t| ds.value(t, a, 0)).collect();
    let y: Vec<f64> = (1..ds.steps).map(|t| ds.value(t, b, 0)).collect();
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (m(&x), m(&y));
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn planted_edge_shows_in_lagged_correlation() {
    // Edge 0 -> 1 means F[1][0] != 0.
    let mut drift = Tensor::from_fn(3, 3, |i, j| if i == j { -0.5 } else { 0.0 });
    drift.set(1, 0, 0.4);
    for seed in 0..5 {
        let sim = simulate_sde(&SimSpec {
            n_nodes: 3,
            drift: Some(drift.clone()),
            seed,
            ..SimSpec::default()
        })
        .unwrap();
        assert_eq!(sim.truth.weight(0, 1), 1.0);
        assert_eq!(sim.truth.edge_count(), 1);
        assert!(lag1_corr(&sim.dataset, 0, 1) > lag1_corr(&sim.dataset, 0, 2), "seed {seed}");
    }
}

#[test]
fn dataset_roundtrip_and_identity_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let ds = TimeSeriesDataset::from_grid(&[vec![1.0, 2.5], vec![-3.0, 4.0], vec![0.125, 6.0], vec![7.0, -8.0]], None).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.values, ds.values);
    assert_eq!((back.steps, back.n_nodes, back.features), (4, 2, 1));
    assert!(back.adjacency.is_none());
    assert_eq!(back.predefined_graph(), Graph::identity(2));
}

#[test]
fn ragged_csv_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(data::manifest::MANIFEST), "nodes = 2\nfeatures = s.csv\n").unwrap();
    std::fs::write(dir.path().join("s.csv"), "time,a,b\n0,1,2\n1,3\n").unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("s.csv:3"), "{err}");
}

#[test]
fn normalized_laplacian_spectral_radius_at_most_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..50 {
        let n = 5;
        let mut a = Tensor::from_fn(n, n, |_, _| if rng.random_bool(0.5) { rng.random_range(0.0..3.0) } else { 0.0 });
        for i in 0..n {
            a.set(i, i, 0.0);
            for j in 0..i {
                let v = a.get(i, j);
                a.set(j, i, v);
            }
        }
        let l = normalize_adjacency(&a);
        let m = DMatrix::from_fn(n, n, |i, j| l.get(i, j));
        let radius = m.symmetric_eigenvalues().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(radius <= 1.0 + 1e-10, "{radius}");
    }
}
