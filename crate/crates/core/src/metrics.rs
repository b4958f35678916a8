//! Forecast errors and causal-graph quality.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graphs::{EdgeSplit, Graph};
use crate::tensor::Tensor;

pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_same(pred, truth, "rmse")?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / pred.numel() as f64).sqrt())
}

pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_same(pred, truth, "mae")?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

fn check_same(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::Contract(format!("{op} of empty tensors")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// A score at or above `threshold` is a predicted edge.
    pub fn count(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive predictions; `precision` is reported as 0.
    pub precision_undefined: bool,
}

impl From<Confusion> for PrecisionF1 {
    fn from(c: Confusion) -> Self {
        let predicted = c.tp + c.fp;
        let precision = if predicted == 0 { 0.0 } else { c.tp as f64 / predicted as f64 };
        let actual = c.tp + c.fn_;
        let recall = if actual == 0 { 0.0 } else { c.tp as f64 / actual as f64 };
        let denom = 2 * c.tp + c.fp + c.fn_;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * c.tp as f64 / denom as f64 };
        Self {
            precision,
            recall,
            f1,
            precision_undefined: predicted == 0,
        }
    }
}

pub fn precision_f1_pairs(scores: &[f64], labels: &[bool], threshold: f64) -> PrecisionF1 {
    Confusion::count(scores, labels, threshold).into()
}

/// Precision and F1 over the off-diagonal entries of `scores` against `truth`.
pub fn precision_f1(scores: &Tensor, truth: &Graph, threshold: f64) -> Result<PrecisionF1> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Contract(format!("threshold {threshold} outside [0, 1]")));
    }
    let (s, y) = offdiag_pairs(scores, truth, false)?;
    Ok(precision_f1_pairs(&s, &y, threshold))
}

/// Mann-Whitney AUC with tied scores counted half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("roc_auc", &[scores.len()], &[labels.len()]));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(format!("roc_auc needs both classes, got {pos} positive and {neg} negative")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("roc_auc got a NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks within tie groups.
    let mut rank_sum_pos = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        let avg = (k + 1 + end) as f64 / 2.0;
        rank_sum_pos += avg * order[k..end].iter().filter(|&&idx| labels[idx]).count() as f64;
        k = end;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Flattens `scores` and the 0/1 pattern of `truth` over directed pairs.
pub fn offdiag_pairs(scores: &Tensor, truth: &Graph, include_diagonal: bool) -> Result<(Vec<f64>, Vec<bool>)> {
    let n = truth.n_nodes();
    if scores.shape() != [n, n] {
        return Err(Error::dim("offdiag_pairs", scores.shape(), &[n, n]));
    }
    let mut s = Vec::with_capacity(n * n);
    let mut y = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i != j || include_diagonal {
                s.push(scores.get(i, j));
                y.push(truth.weight(i, j) > 0.0);
            }
        }
    }
    Ok((s, y))
}

/// Held-out positives against sampled negatives.
pub fn split_pairs(scores: &Tensor, split: &EdgeSplit) -> (Vec<f64>, Vec<bool>) {
    let pos = split.held_out_edges.iter().map(|&(i, j)| (scores.get(i, j), true));
    let neg = split.negative_samples.iter().map(|&(i, j)| (scores.get(i, j), false));
    pos.chain(neg).unzip()
}

pub enum LinkTarget<'a> {
    /// Every directed pair against a known graph.
    Truth { graph: &'a Graph, include_diagonal: bool },
    /// Held-out edges and their negatives.
    Split(&'a EdgeSplit),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkEvalReport {
    pub auc: f64,
    pub precision: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub best_f1: f64,
    pub best_threshold: f64,
    pub curve: Vec<CurvePoint>,
}

pub const CURVE_STEPS: usize = 20;

/// AUC plus precision/F1 at `threshold` and over the grid `0, 0.05, ..., 1`.
pub fn link_eval(scores: &Tensor, target: LinkTarget<'_>, threshold: f64) -> Result<LinkEvalReport> {
    let (s, y) = match target {
        LinkTarget::Truth { graph, include_diagonal } => offdiag_pairs(scores, graph, include_diagonal)?,
        LinkTarget::Split(split) => split_pairs(scores, split),
    };
    let auc = roc_auc(&s, &y)?;
    let at = precision_f1_pairs(&s, &y, threshold);
    let negatives = y.iter().filter(|&&v| !v).count().max(1) as f64;
    let curve: Vec<CurvePoint> = (0..=CURVE_STEPS)
        .map(|k| {
            let threshold = k as f64 / CURVE_STEPS as f64;
            let c = Confusion::count(&s, &y, threshold);
            let m = PrecisionF1::from(c);
            CurvePoint {
                threshold,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                fpr: c.fp as f64 / negatives,
            }
        })
        .collect();
    let mut best = CurvePoint {
        threshold,
        precision: at.precision,
        recall: at.recall,
        f1: at.f1,
        fpr: 0.0,
    };
    for p in &curve {
        if p.f1 > best.f1 {
            best = *p;
        }
    }
    Ok(LinkEvalReport {
        auc,
        precision: at.precision,
        f1: at.f1,
        precision_undefined: at.precision_undefined,
        best_f1: best.f1,
        best_threshold: best.threshold,
        curve,
    })
}

/// Flat metrics report, serialized as one JSON object with sorted keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport(pub BTreeMap<String, f64>);

impl MetricsReport {
    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.0.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied()
    }

    pub fn add_link(&mut self, r: &LinkEvalReport) {
        self.insert("auc", r.auc);
        self.insert("precision", r.precision);
        self.insert("f1", r.f1);
        self.insert("best_f1", r.best_f1);
        self.insert("best_threshold", r.best_threshold);
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .0
            .iter()
            .map(|(k, v)| {
                let v = serde_json::Number::from_f64(*v).map_or(serde_json::Value::Null, serde_json::Value::Number);
                (k.clone(), v)
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("plain map");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Data(format!("metrics report: {e}")))?;
        let obj = v.as_object().ok_or_else(|| Error::Data("metrics report is not an object".into()))?;
        Ok(Self(
            obj.iter()
                .map(|(k, v)| (k.clone(), v.as_f64().unwrap_or(f64::NAN)))
                .collect(),
        ))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_mae_examples() {
        let truth = Tensor::zeros(&[1, 2]);
        let pred = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert!((rmse(&pred, &truth).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae(&pred, &truth).unwrap(), 3.5);
        assert_eq!(rmse(&pred, &pred).unwrap(), 0.0);
        assert!(rmse(&pred, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn precision_f1_examples() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let exact = precision_f1(g.adjacency(), &g, 0.5).unwrap();
        assert_eq!((exact.precision, exact.f1), (1.0, 1.0));
        let inverse = g.adjacency().map(|v| 1.0 - v);
        let wrong = precision_f1(&inverse, &g, 0.5).unwrap();
        assert_eq!((wrong.precision, wrong.f1), (0.0, 0.0));
        let none = precision_f1(&Tensor::zeros(&[3, 3]), &g, 0.5).unwrap();
        assert!(none.precision_undefined);
    }

    #[test]
    fn auc_examples() {
        let y = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &y).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &y).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.9, 0.8], &y).unwrap(), 0.0);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn link_eval_grid_and_perfect_scores() {
        let g = Graph::from_edges(4, &[(0, 1), (2, 3), (3, 0)]).unwrap();
        let r = link_eval(
            g.adjacency(),
            LinkTarget::Truth {
                graph: &g,
                include_diagonal: false,
            },
            0.5,
        )
        .unwrap();
        assert_eq!((r.auc, r.f1, r.best_f1), (1.0, 1.0, 1.0));
        let ts: Vec<f64> = r.curve.iter().map(|p| p.threshold).collect();
        assert_eq!(ts.len(), 21);
        assert_eq!((ts[0], ts[20]), (0.0, 1.0));
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn report_json_sorted() {
        let mut r = MetricsReport::default();
        r.insert("rmse_h1", 0.5);
        r.insert("auc", 0.75);
        let text = r.to_json();
        assert!(text.find("auc").unwrap() < text.find("rmse_h1").unwrap());
        assert_eq!(MetricsReport::from_json(&text).unwrap(), r);
    }
}
