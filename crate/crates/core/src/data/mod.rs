//! Datasets, chronological splits, normalization, windowing and noise.

pub mod manifest;
pub mod sim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::graphs::Graph;
use crate::tensor::Tensor;

pub use manifest::{load_dataset, write_dataset, Manifest};
pub use sim::{simulate_sde, SimOutput, SimSpec};

/// A `T x n x F` signal grid. `values[(t * n + i) * F + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub steps: usize,
    pub n_nodes: usize,
    pub features: usize,
    pub values: Vec<f64>,
    pub target_feature: usize,
    pub adjacency: Option<Graph>,
    pub node_ids: Vec<String>,
    pub times: Vec<String>,
    pub sampling_minutes: f64,
    /// Extra manifest keys carried through unchanged.
    pub extra: Vec<(String, String)>,
}

impl TimeSeriesDataset {
    /// Single-feature dataset from a `T x n` grid with default labels.
    pub fn from_grid(rows: &[Vec<f64>], adjacency: Option<Graph>) -> Result<Self> {
        let steps = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if steps == 0 || n == 0 {
            return Err(Error::Data("empty signal grid".into()));
        }
        if let Some(t) = rows.iter().position(|r| r.len() != n) {
            return Err(Error::Data(format!("row {t} has {} values, expected {n}", rows[t].len())));
        }
        if let Some(g) = &adjacency {
            if g.n_nodes() != n {
                return Err(Error::Data(format!("adjacency has {} nodes, grid has {n}", g.n_nodes())));
            }
        }
        Ok(Self {
            steps,
            n_nodes: n,
            features: 1,
            values: rows.concat(),
            target_feature: 0,
            adjacency,
            node_ids: (0..n).map(|i| format!("n{i}")).collect(),
            times: (0..steps).map(|t| t.to_string()).collect(),
            sampling_minutes: 5.0,
            extra: Vec::new(),
        })
    }

    fn idx(&self, t: usize, i: usize, k: usize) -> usize {
        (t * self.n_nodes + i) * self.features + k
    }

    pub fn value(&self, t: usize, i: usize, k: usize) -> f64 {
        self.values[self.idx(t, i, k)]
    }

    pub fn set(&mut self, t: usize, i: usize, k: usize, v: f64) {
        let idx = self.idx(t, i, k);
        self.values[idx] = v;
    }

    /// `n x F` feature matrix at step `t`.
    pub fn features_at(&self, t: usize) -> Tensor {
        let start = t * self.n_nodes * self.features;
        let data = self.values[start..start + self.n_nodes * self.features].to_vec();
        Tensor::new(vec![self.n_nodes, self.features], data).expect("consistent layout")
    }

    /// Target-feature series of node `i`.
    pub fn target_series(&self, i: usize) -> Vec<f64> {
        (0..self.steps).map(|t| self.value(t, i, self.target_feature)).collect()
    }

    /// The pre-defined graph, or the identity when none was supplied.
    pub fn predefined_graph(&self) -> Graph {
        self.adjacency.clone().unwrap_or_else(|| Graph::identity(self.n_nodes))
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| !v.is_finite())
    }

    pub fn splits(&self) -> Splits {
        Splits::chronological(self.steps)
    }
}

/// Chronological train/validation/test boundaries (70/10/20).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Splits {
    pub fn chronological(total: usize) -> Self {
        Self {
            train_end: total * 7 / 10,
            val_end: total * 8 / 10,
            total,
        }
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..self.total,
            Split::All => 0..self.total,
        }
    }
}

/// Fills missing (non-finite) cells by per-node, per-feature linear
/// interpolation; leading and trailing gaps copy the nearest observation.
pub fn repair_missing(ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    let mut out = ds.clone();
    for i in 0..ds.n_nodes {
        for k in 0..ds.features {
            let known: Vec<usize> = (0..ds.steps).filter(|&t| ds.value(t, i, k).is_finite()).collect();
            if known.is_empty() {
                return Err(Error::Data(format!(
                    "node {} ({}) feature {k} has no observed values",
                    i, ds.node_ids.get(i).map_or("?", String::as_str)
                )));
            }
            if known.len() == ds.steps {
                continue;
            }
            let (first, last) = (known[0], known[known.len() - 1]);
            for t in 0..first {
                out.set(t, i, k, ds.value(first, i, k));
            }
            for t in last + 1..ds.steps {
                out.set(t, i, k, ds.value(last, i, k));
            }
            for w in known.windows(2) {
                let (a, b) = (w[0], w[1]);
                let (va, vb) = (ds.value(a, i, k), ds.value(b, i, k));
                for t in a + 1..b {
                    let frac = (t - a) as f64 / (b - a) as f64;
                    out.set(t, i, k, va + frac * (vb - va));
                }
            }
        }
    }
    Ok(out)
}

/// Per node-feature min/max from a reference range.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub n_nodes: usize,
    pub features: usize,
    pub min: Vec<f64>,
    /// `max - min`, or 1 where the reference range is constant.
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn fit(ds: &TimeSeriesDataset, range: std::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() {
            return Err(Error::Contract("normalization range is empty".into()));
        }
        let cells = ds.n_nodes * ds.features;
        let mut min = vec![f64::INFINITY; cells];
        let mut max = vec![f64::NEG_INFINITY; cells];
        for t in range {
            for c in 0..cells {
                let v = ds.values[t * cells + c];
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        let scale = min
            .iter()
            .zip(&max)
            .map(|(lo, hi)| if hi > lo { hi - lo } else { 1.0 })
            .collect();
        Ok(Self {
            n_nodes: ds.n_nodes,
            features: ds.features,
            min,
            scale,
        })
    }

    pub fn normalize_value(&self, i: usize, k: usize, v: f64) -> f64 {
        let c = i * self.features + k;
        (v - self.min[c]) / self.scale[c]
    }

    pub fn denormalize_value(&self, i: usize, k: usize, v: f64) -> f64 {
        let c = i * self.features + k;
        v * self.scale[c] + self.min[c]
    }

    pub fn apply(&self, ds: &TimeSeriesDataset) -> TimeSeriesDataset {
        self.map(ds, |s, c, v| (v - s.min[c]) / s.scale[c])
    }

    pub fn invert(&self, ds: &TimeSeriesDataset) -> TimeSeriesDataset {
        self.map(ds, |s, c, v| v * s.scale[c] + s.min[c])
    }

    fn map(&self, ds: &TimeSeriesDataset, f: impl Fn(&Self, usize, f64) -> f64) -> TimeSeriesDataset {
        let cells = self.n_nodes * self.features;
        let mut out = ds.clone();
        for (idx, v) in out.values.iter_mut().enumerate() {
            *v = f(self, idx % cells, *v);
        }
        out
    }
}

/// Min-max normalizes with statistics fitted on the training split.
pub fn minmax_normalize(ds: &TimeSeriesDataset) -> Result<(TimeSeriesDataset, NormStats)> {
    let stats = NormStats::fit(ds, ds.splits().range(Split::Train))?;
    Ok((stats.apply(ds), stats))
}

/// One sliding window: `p` feature matrices starting at `start`, followed by
/// `horizon` target rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub inputs: Vec<Tensor>,
    /// `n x horizon` target-feature values after the inputs.
    pub targets: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub p: usize,
    pub horizon: usize,
    pub windows: Vec<Window>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn starts(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.start).collect()
    }
}

/// Number of stride-1 windows over a span of `len` steps.
pub fn window_count(len: usize, p: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(p + horizon)
}

/// Start indices of every window that fits entirely inside `range`.
pub fn window_starts(range: std::ops::Range<usize>, p: usize, horizon: usize) -> Result<Vec<usize>> {
    if p == 0 || horizon == 0 {
        return Err(Error::Contract("window length and horizon must be positive".into()));
    }
    let count = window_count(range.len(), p, horizon);
    if count == 0 {
        return Err(Error::Contract(format!(
            "split of {} steps is too short for p = {p} and horizon = {horizon}",
            range.len()
        )));
    }
    Ok((range.start..range.start + count).collect())
}

pub fn make_windows(ds: &TimeSeriesDataset, p: usize, horizon: usize, split: Split) -> Result<WindowBatch> {
    let starts = window_starts(ds.splits().range(split), p, horizon)?;
    let windows = starts
        .into_iter()
        .map(|s| Window {
            start: s,
            inputs: (s..s + p).map(|t| ds.features_at(t)).collect(),
            targets: Tensor::from_fn(ds.n_nodes, horizon, |i, h| ds.value(s + p + h, i, ds.target_feature)),
        })
        .collect();
    Ok(WindowBatch { p, horizon, windows })
}

/// Adds Poisson(`lambda`) draws to every training-split cell. Other splits
/// are left bit-identical.
pub fn inject_poisson(ds: &TimeSeriesDataset, lambda: f64, seed: u64) -> Result<TimeSeriesDataset> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Contract(format!("poisson rate must be >= 0, got {lambda}")));
    }
    let mut out = ds.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    let dist = Poisson::new(lambda).map_err(|e| Error::Contract(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let end = ds.splits().train_end * ds.n_nodes * ds.features;
    for v in &mut out.values[..end] {
        let draw: f64 = dist.sample(&mut rng);
        *v += draw;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f64]]) -> TimeSeriesDataset {
        TimeSeriesDataset::from_grid(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), None).unwrap()
    }

    #[test]
    fn repair_midpoint_and_ends() {
        let ds = grid(&[&[f64::NAN, 1.0], &[1.0, f64::NAN], &[f64::NAN, 3.0], &[3.0, f64::NAN]]);
        let r = repair_missing(&ds).unwrap();
        assert_eq!(r.target_series(0), vec![1.0, 1.0, 2.0, 3.0]);
        assert_eq!(r.target_series(1), vec![1.0, 2.0, 3.0, 3.0]);
        let clean = grid(&[&[1.0], &[2.0]]);
        assert_eq!(repair_missing(&clean).unwrap(), clean);
    }

    #[test]
    fn repair_rejects_empty_node() {
        let ds = grid(&[&[1.0, f64::NAN], &[2.0, f64::NAN]]);
        let err = repair_missing(&ds).unwrap_err();
        assert!(err.to_string().contains("node 1"), "{err}");
    }

    #[test]
    fn minmax_examples() {
        let ds = grid(&[&[0.0, 7.0], &[5.0, 7.0], &[10.0, 7.0]]);
        let stats = NormStats::fit(&ds, 0..3).unwrap();
        let n = stats.apply(&ds);
        assert_eq!(n.target_series(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(n.target_series(1), vec![0.0, 0.0, 0.0]);
        assert_eq!(stats.scale[1], 1.0);
        assert_eq!(stats.invert(&n), ds);
    }

    #[test]
    fn window_arithmetic() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64]).collect();
        let ds = TimeSeriesDataset::from_grid(&rows, None).unwrap();
        let b = make_windows(&ds, 3, 2, Split::All).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.windows[5].targets.data(), &[8.0, 9.0]);
        assert!(make_windows(&ds, 8, 4, Split::All).is_err());
    }

    #[test]
    fn poisson_only_touches_train() {
        let rows: Vec<Vec<f64>> = (0..20).map(|t| vec![t as f64, 0.0]).collect();
        let ds = TimeSeriesDataset::from_grid(&rows, None).unwrap();
        assert_eq!(inject_poisson(&ds, 0.0, 1).unwrap(), ds);
        let a = inject_poisson(&ds, 3.0, 5).unwrap();
        assert_eq!(a, inject_poisson(&ds, 3.0, 5).unwrap());
        let cut = ds.splits().train_end * 2;
        assert_eq!(a.values[cut..], ds.values[cut..]);
        assert_ne!(a.values[..cut], ds.values[..cut]);
    }
}
