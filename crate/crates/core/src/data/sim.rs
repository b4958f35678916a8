//! Linear SDE simulator with a planted causal graph.
//!
//! Euler-Maruyama on `dZ = F Z dt + sqrt(2) dB`:
//! `Z[k+1] = Z[k] + F Z[k] dt + noise_scale * sqrt(2 dt) * xi`.
//! Node `j` drives node `i` when `F[i][j] != 0`, so the planted graph has
//! `truth[j][i] = 1` for every off-diagonal nonzero `F[i][j]`.

use std::path::Path;

use nalgebra::{DMatrix, Schur};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graphs::{write_matrix_csv, Graph};
use crate::tensor::Tensor;

use super::TimeSeriesDataset;

const OVERFLOW: f64 = 1e8;
const MAX_DRAWS: usize = 1000;
const SCHUR_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SimSpec {
    pub n_nodes: usize,
    pub n_true_edges: usize,
    /// Explicit drift; when `None` one is drawn from the seed.
    pub drift: Option<Tensor>,
    pub drift_diag: f64,
    pub weight_range: (f64, f64),
    pub dt: f64,
    pub steps: usize,
    pub noise_scale: f64,
    pub seed: u64,
    /// Initial state; standard normal from the seed when `None`.
    pub init: Option<Vec<f64>>,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n_nodes: 10,
            n_true_edges: 15,
            drift: None,
            drift_diag: -0.5,
            weight_range: (0.3, 0.6),
            dt: 0.1,
            steps: 2000,
            noise_scale: 1.0,
            seed: 42,
            init: None,
        }
    }
}

pub struct SimOutput {
    pub dataset: TimeSeriesDataset,
    pub truth: Graph,
    pub drift: Tensor,
}

impl SimOutput {
    /// Dataset files plus `truth.csv` and `drift.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        super::write_dataset(&self.dataset, dir)?;
        self.truth.write_csv(&dir.join("truth.csv"))?;
        write_matrix_csv(&dir.join("drift.csv"), &self.drift)
    }
}

/// Largest eigenvalue modulus of `I + F dt`; infinite when the eigenvalue
/// iteration does not converge.
pub fn step_spectral_radius(drift: &Tensor, dt: f64) -> f64 {
    let n = drift.rows();
    let m = DMatrix::from_fn(n, n, |i, j| drift.get(i, j) * dt + if i == j { 1.0 } else { 0.0 });
    match Schur::try_new(m, f64::EPSILON, SCHUR_ITERS) {
        Some(s) => s.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max),
        None => f64::INFINITY,
    }
}

/// Planted graph of a drift matrix (`truth[j][i] = 1` iff `F[i][j] != 0`).
pub fn truth_from_drift(drift: &Tensor) -> Graph {
    let n = drift.rows();
    let adj = Tensor::from_fn(n, n, |i, j| if i != j && drift.get(j, i) != 0.0 { 1.0 } else { 0.0 });
    Graph::new(adj).expect("0/1 matrix is a valid graph")
}

fn draw_drift<R: Rng>(spec: &SimSpec, rng: &mut R) -> Result<Tensor> {
    let n = spec.n_nodes;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    if spec.n_true_edges > pairs.len() {
        return Err(Error::Spec(format!(
            "{} edges requested but only {} off-diagonal pairs exist",
            spec.n_true_edges,
            pairs.len()
        )));
    }
    let (lo, hi) = spec.weight_range;
    if !(0.0 <= lo && lo <= hi) {
        return Err(Error::Spec(format!("bad weight range [{lo}, {hi}]")));
    }
    for _ in 0..MAX_DRAWS {
        let mut f = Tensor::from_fn(n, n, |i, j| if i == j { spec.drift_diag } else { 0.0 });
        let mut shuffled = pairs.clone();
        shuffled.shuffle(rng);
        for &(i, j) in &shuffled[..spec.n_true_edges] {
            let mag = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            f.set(i, j, sign * mag);
        }
        if step_spectral_radius(&f, spec.dt) < 1.0 {
            return Ok(f);
        }
    }
    Err(Error::Spec(format!(
        "no stable drift found in {MAX_DRAWS} draws; lower the edge weights or dt"
    )))
}

pub fn simulate_sde(spec: &SimSpec) -> Result<SimOutput> {
    let n = spec.n_nodes;
    if n == 0 || spec.steps == 0 {
        return Err(Error::Spec("nodes and steps must be positive".into()));
    }
    if !(spec.dt > 0.0) || !(spec.noise_scale >= 0.0) {
        return Err(Error::Spec("dt must be > 0 and noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let drift = match &spec.drift {
        Some(f) => {
            if f.shape() != [n, n] {
                return Err(Error::Spec(format!("drift is {:?}, expected {n}x{n}", f.shape())));
            }
            f.clone()
        }
        None => draw_drift(spec, &mut rng)?,
    };
    let mut z: Vec<f64> = match &spec.init {
        Some(v) if v.len() == n => v.clone(),
        Some(v) => return Err(Error::Spec(format!("initial state has {} values, expected {n}", v.len()))),
        None => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    };
    let kick = spec.noise_scale * (2.0 * spec.dt).sqrt();
    let mut rows = Vec::with_capacity(spec.steps);
    for k in 0..spec.steps {
        if let Some(i) = z.iter().position(|v| !(v.abs() <= OVERFLOW)) {
            return Err(Error::Spec(format!("trajectory diverged at step {k}, node {i}")));
        }
        rows.push(z.clone());
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let fz: f64 = (0..n).map(|j| drift.get(i, j) * z[j]).sum();
                let xi: f64 = if kick > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
                z[i] + fz * spec.dt + kick * xi
            })
            .collect();
        z = next;
    }
    let mut dataset = TimeSeriesDataset::from_grid(&rows, None)?;
    dataset.node_ids = (0..n).map(|i| format!("z{i}")).collect();
    Ok(SimOutput {
        truth: truth_from_drift(&drift),
        dataset,
        drift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_drift_is_constant() {
        let spec = SimSpec {
            n_nodes: 3,
            drift: Some(Tensor::zeros(&[3, 3])),
            noise_scale: 0.0,
            steps: 20,
            init: Some(vec![1.5, -2.0, 0.25]),
            ..SimSpec::default()
        };
        let out = simulate_sde(&spec).unwrap();
        for t in 0..20 {
            assert_eq!(out.dataset.features_at(t).data(), &[1.5, -2.0, 0.25]);
        }
        assert_eq!(out.truth.edge_count(), 0);
    }

    #[test]
    fn diagonal_decay_is_geometric() {
        let spec = SimSpec {
            n_nodes: 2,
            drift: Some(Tensor::from_fn(2, 2, |i, j| if i == j { -0.5 } else { 0.0 })),
            noise_scale: 0.0,
            steps: 30,
            init: Some(vec![1.0, 2.0]),
            ..SimSpec::default()
        };
        let out = simulate_sde(&spec).unwrap();
        for t in 0..30 {
            let want = 0.95f64.powi(t as i32);
            assert!((out.dataset.value(t, 0, 0) - want).abs() < 1e-12);
            assert!((out.dataset.value(t, 1, 0) - 2.0 * want).abs() < 1e-12);
        }
    }

    #[test]
    fn default_spec_is_stable_and_planted() {
        let out = simulate_sde(&SimSpec::default()).unwrap();
        assert_eq!(out.truth.edge_count(), 15);
        assert!(step_spectral_radius(&out.drift, 0.1) < 1.0);
        assert_eq!(out.dataset.steps, 2000);
    }

    #[test]
    fn unstable_drift_reports_divergence() {
        let spec = SimSpec {
            n_nodes: 1,
            drift: Some(Tensor::full(&[1, 1], 50.0)),
            steps: 500,
            ..SimSpec::default()
        };
        assert!(matches!(simulate_sde(&spec), Err(Error::Spec(_))));
    }
}
