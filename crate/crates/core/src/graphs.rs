//! Weighted graphs, GCN normalization, edge hold-out splits and masking.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square nonnegative weighted adjacency over `n` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    adjacency: Tensor,
}

pub type Edge = (usize, usize);

impl Graph {
    pub fn new(adjacency: Tensor) -> Result<Self> {
        if adjacency.rank() != 2 || adjacency.rows() != adjacency.cols() {
            return Err(Error::dim("graph", adjacency.shape(), &[]));
        }
        if let Some(bad) = adjacency.data().iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Data(format!("adjacency weight {bad} is negative or non-finite")));
        }
        Ok(Self { adjacency })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            adjacency: Tensor::zeros(&[n, n]),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            adjacency: Tensor::eye(n),
        }
    }

    pub fn from_edges(n: usize, edges: &[Edge]) -> Result<Self> {
        let mut a = Tensor::zeros(&[n, n]);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Contract(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            a.set(i, j, 1.0);
        }
        Ok(Self { adjacency: a })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency.get(i, j)
    }

    /// Off-diagonal pairs with positive weight, in row-major order.
    pub fn edges(&self) -> Vec<Edge> {
        let n = self.n_nodes();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.weight(i, j) > 0.0)
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.n_nodes();
        (0..n).all(|i| (0..i).all(|j| self.weight(i, j) == self.weight(j, i)))
    }

    /// Reads an `n x n` headerless CSV of nonnegative decimals.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let rows = read_matrix_csv(path)?;
        let n = rows.len();
        for (line, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line + 1,
                    msg: format!("expected {n} columns, found {}", r.len()),
                });
            }
        }
        Graph::new(Tensor::from_rows(&rows)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, &self.adjacency)
    }
}

/// Headerless numeric CSV reader used for adjacency, truth and drift files.
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|cell| {
                cell.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line + 1,
                    msg: format!("non-numeric cell {cell:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let cells: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())
}

/// Renormalized GCN propagation matrix `D^-1/2 (A + I) D^-1/2`, with `D` the
/// row-degree matrix of `A + I`.
pub fn normalize_laplacian(g: &Graph) -> Tensor {
    normalize_adjacency(g.adjacency())
}

/// Same normalization applied to a raw nonnegative weight matrix, such as a
/// per-step transition graph.
pub fn normalize_adjacency(a: &Tensor) -> Tensor {
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = a.row(i).iter().sum::<f64>() + 1.0;
            1.0 / deg.sqrt()
        })
        .collect();
    Tensor::from_fn(n, n, |i, j| {
        let w = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
        inv_sqrt[i] * w * inv_sqrt[j]
    })
}

/// Zeroes every weight strictly below `tau`.
pub fn threshold_edges(g: &Graph, tau: f64) -> Graph {
    Graph {
        adjacency: g.adjacency.map(|w| if w < tau { 0.0 } else { w }),
    }
}

/// Train / held-out partition of a graph's edges plus matched negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSplit {
    pub train_edges: Vec<Edge>,
    pub held_out_edges: Vec<Edge>,
    pub negative_samples: Vec<Edge>,
}

impl EdgeSplit {
    /// The original graph restricted to training edges (weights kept, self
    /// loops dropped).
    pub fn train_graph(&self, g: &Graph) -> Graph {
        let n = g.n_nodes();
        let mut a = Tensor::zeros(&[n, n]);
        for &(i, j) in &self.train_edges {
            a.set(i, j, g.weight(i, j));
        }
        Graph { adjacency: a }
    }
}

/// Splits the off-diagonal edges of `g` into a training part holding
/// `ceil(train_fraction * |E|)` edges and a held-out remainder, and draws as
/// many negatives uniformly without replacement from the non-edges (all of
/// them when there are fewer non-edges than held-out edges).
pub fn split_edges(g: &Graph, train_fraction: f64, seed: u64) -> Result<EdgeSplit> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Contract(format!("train_fraction {train_fraction} not in (0, 1]")));
    }
    let mut edges = g.edges();
    if edges.is_empty() {
        return Err(Error::Contract("cannot split a graph without edges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let n_train = ((train_fraction * edges.len() as f64) - 1e-9).ceil() as usize;
    let n_train = n_train.clamp(1, edges.len());
    let held_out_edges = edges.split_off(n_train);
    let mut train_edges = edges;
    train_edges.sort_unstable();

    let present: HashSet<Edge> = g.edges().into_iter().collect();
    let n = g.n_nodes();
    let mut non_edges: Vec<Edge> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && !present.contains(&(i, j)))
        .collect();
    non_edges.shuffle(&mut rng);
    non_edges.truncate(held_out_edges.len());

    let mut held_out_edges = held_out_edges;
    held_out_edges.sort_unstable();
    non_edges.sort_unstable();
    Ok(EdgeSplit {
        train_edges,
        held_out_edges,
        negative_samples: non_edges,
    })
}

/// 0/1 connectivity pattern of a graph (`1` where the weight is positive).
pub fn mask_pattern(mask: &Graph) -> Tensor {
    mask.adjacency().map(|w| if w > 0.0 { 1.0 } else { 0.0 })
}

/// Entrywise product of `sigma` with the connectivity pattern of `mask`.
pub fn apply_mask(sigma: &Tensor, mask: &Graph) -> Result<Tensor> {
    sigma.zip_map(&mask_pattern(mask), "apply_mask", |s, m| s * m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn isolated_nodes_normalize_to_identity() {
        assert_eq!(normalize_laplacian(&Graph::empty(3)), Tensor::eye(3));
    }

    #[test]
    fn two_node_normalization() {
        let g = Graph::new(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        let l = normalize_laplacian(&g);
        assert!(close(&l, &Tensor::full(&[2, 2], 0.5), 1e-15));
    }

    #[test]
    fn rejects_negative_weights() {
        let a = Tensor::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(Graph::new(a), Err(Error::Data(_))));
        assert!(Graph::new(Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn threshold_behaviour() {
        let g = Graph::new(Tensor::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 0.4 })).unwrap();
        assert_eq!(threshold_edges(&g, 0.5).edge_count(), 0);
        assert_eq!(threshold_edges(&g, 0.0), g);
    }

    fn ten_edge_graph() -> Graph {
        let edges: Vec<Edge> = (0..10).map(|k| (k, (k + 1) % 10)).collect();
        Graph::from_edges(10, &edges).unwrap()
    }

    #[test]
    fn split_arithmetic() {
        let s = split_edges(&ten_edge_graph(), 0.8, 3).unwrap();
        assert_eq!(s.train_edges.len(), 8);
        assert_eq!(s.held_out_edges.len(), 2);
        assert_eq!(s.negative_samples.len(), 2);

        let all = split_edges(&ten_edge_graph(), 1.0, 3).unwrap();
        assert_eq!(all.train_edges.len(), 10);
        assert!(all.held_out_edges.is_empty() && all.negative_samples.is_empty());
    }

    #[test]
    fn split_is_a_partition_with_true_negatives() {
        let g = ten_edge_graph();
        let s = split_edges(&g, 0.7, 11).unwrap();
        let mut union: Vec<Edge> = s.train_edges.iter().chain(&s.held_out_edges).cloned().collect();
        union.sort_unstable();
        assert_eq!(union, g.edges());
        for e in &s.negative_samples {
            assert_eq!(g.weight(e.0, e.1), 0.0);
            assert_ne!(e.0, e.1);
        }
    }

    #[test]
    fn split_is_deterministic() {
        let g = ten_edge_graph();
        assert_eq!(split_edges(&g, 0.8, 5).unwrap(), split_edges(&g, 0.8, 5).unwrap());
    }

    #[test]
    fn split_rejects_empty_graph() {
        assert!(matches!(split_edges(&Graph::empty(4), 0.8, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_identity_and_zero() {
        let sigma = Tensor::from_fn(3, 3, |i, j| (i * 3 + j) as f64 + 0.5);
        let ones = Graph::new(Tensor::ones(&[3, 3])).unwrap();
        assert_eq!(apply_mask(&sigma, &ones).unwrap(), sigma);
        assert_eq!(apply_mask(&sigma, &Graph::empty(3)).unwrap(), Tensor::zeros(&[3, 3]));
        assert!(apply_mask(&sigma, &Graph::empty(2)).is_err());
    }

    #[test]
    fn mask_on_path_graph_zeroes_non_edges() {
        let path = Graph::from_edges(4, &[(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]).unwrap();
        let sigma = Tensor::from_fn(4, 4, |i, j| 0.3 + (i as f64) - 0.7 * j as f64);
        let masked = apply_mask(&sigma, &path).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if path.weight(i, j) == 0.0 {
                    assert_eq!(masked.get(i, j), 0.0);
                } else {
                    assert_eq!(masked.get(i, j), sigma.get(i, j));
                }
            }
        }
    }
}
