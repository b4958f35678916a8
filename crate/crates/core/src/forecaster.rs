//! Multi-step forecaster over per-step transition graphs.
//!
//! Pipeline for one window of `T_r` steps:
//!
//! 1. two dynamic GCN layers per step, `h_t = ReLU(L_t ReLU(L_t X_t W_a) W_b)`,
//!    weights shared across steps;
//! 2. a same-padded temporal convolution of width `kernel` along time;
//! 3. temporal attention `E = V_e sigmoid((h^T U1) U2 (U3 h) + b_e)`, row
//!    softmax, output `E' h`;
//! 4. a linear head on the flattened attention output plus a residual linear
//!    map of the raw target-feature window.

use rand::Rng;

use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const GCN_A: &str = "forecast.gcn_a";
pub const GCN_B: &str = "forecast.gcn_b";
pub const TEMPORAL: &str = "forecast.temporal";
pub const V_E: &str = "forecast.v_e";
pub const B_E: &str = "forecast.b_e";
pub const U1: &str = "forecast.u1";
pub const U2: &str = "forecast.u2";
pub const U3: &str = "forecast.u3";
pub const W2: &str = "forecast.w2";
pub const B2: &str = "forecast.b2";
pub const RESIDUAL: &str = "forecast.residual";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForecastShape {
    pub n_nodes: usize,
    pub features: usize,
    pub channels: usize,
    /// Temporal length `T_r = p - 1`.
    pub steps: usize,
    pub horizon: usize,
    /// Temporal convolution width; must be odd.
    pub kernel: usize,
}

impl ForecastShape {
    pub fn validate(&self) -> Result<()> {
        let ForecastShape {
            n_nodes,
            features,
            channels,
            steps,
            horizon,
            kernel,
        } = *self;
        if n_nodes == 0 || features == 0 || channels == 0 || steps == 0 || horizon == 0 {
            return Err(Error::Contract(format!("degenerate forecaster shape {self:?}")));
        }
        if kernel % 2 == 0 {
            return Err(Error::Contract(format!("temporal kernel must be odd, got {kernel}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastParams {
    pub gcn_a: Tensor,
    pub gcn_b: Tensor,
    pub temporal: Tensor,
    pub v_e: Tensor,
    pub b_e: Tensor,
    pub u1: Tensor,
    pub u2: Tensor,
    pub u3: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub residual: Tensor,
}

impl ForecastParams {
    /// Random GCN / attention weights, an identity `V_e`, a zero output head
    /// and a residual map that repeats the last observed value for every
    /// horizon. The untrained model is therefore the persistence forecast.
    pub fn init<R: Rng>(shape: ForecastShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let ForecastShape {
            n_nodes: n,
            features: f,
            channels: c,
            steps: t,
            horizon: h,
            kernel: k,
        } = shape;
        Ok(Self {
            gcn_a: glorot(f, c, rng),
            gcn_b: glorot(c, c, rng),
            temporal: glorot(k * c, c, rng),
            v_e: Tensor::eye(t),
            b_e: Tensor::zeros(&[t, t]),
            u1: glorot(n, 1, rng),
            u2: glorot(c, n, rng),
            u3: glorot(c, 1, rng),
            w2: Tensor::zeros(&[t * c, h]),
            b2: Tensor::zeros(&[n, h]),
            residual: Tensor::from_fn(t, h, |s, _| if s + 1 == t { 1.0 } else { 0.0 }),
        })
    }

    pub fn shape(&self) -> ForecastShape {
        let c = self.gcn_b.rows();
        ForecastShape {
            n_nodes: self.u1.rows(),
            features: self.gcn_a.rows(),
            channels: c,
            steps: self.v_e.rows(),
            horizon: self.w2.cols(),
            kernel: self.temporal.rows() / c,
        }
    }

    pub fn register(&self, store: &mut ParamStore) {
        for (name, t) in self.named() {
            store.insert(name, t.clone());
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            gcn_a: store.expect(GCN_A)?.clone(),
            gcn_b: store.expect(GCN_B)?.clone(),
            temporal: store.expect(TEMPORAL)?.clone(),
            v_e: store.expect(V_E)?.clone(),
            b_e: store.expect(B_E)?.clone(),
            u1: store.expect(U1)?.clone(),
            u2: store.expect(U2)?.clone(),
            u3: store.expect(U3)?.clone(),
            w2: store.expect(W2)?.clone(),
            b2: store.expect(B2)?.clone(),
            residual: store.expect(RESIDUAL)?.clone(),
        })
    }

    fn named(&self) -> [(&'static str, &Tensor); 11] {
        [
            (GCN_A, &self.gcn_a),
            (GCN_B, &self.gcn_b),
            (TEMPORAL, &self.temporal),
            (V_E, &self.v_e),
            (B_E, &self.b_e),
            (U1, &self.u1),
            (U2, &self.u2),
            (U3, &self.u3),
            (W2, &self.w2),
            (B2, &self.b2),
            (RESIDUAL, &self.residual),
        ]
    }

    pub fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        self.register(&mut s);
        s
    }
}

/// Two GCN layers per step with per-step propagation matrices.
pub fn dynamic_gcn_on_tape(tape: &mut Tape, window: &[Var], laplacians: &[Var], store: &ParamStore) -> Result<Vec<Var>> {
    if window.len() != laplacians.len() {
        return Err(Error::Contract(format!(
            "{} window steps but {} laplacians",
            window.len(),
            laplacians.len()
        )));
    }
    let wa = tape.param(store, GCN_A)?;
    let wb = tape.param(store, GCN_B)?;
    window
        .iter()
        .zip(laplacians)
        .map(|(&x, &l)| {
            let lx = tape.matmul(l, x)?;
            let a = tape.matmul(lx, wa)?;
            let a = tape.relu(a);
            let la = tape.matmul(l, a)?;
            let b = tape.matmul(la, wb)?;
            Ok(tape.relu(b))
        })
        .collect()
}

/// Same-padded temporal convolution followed by ReLU.
pub fn temporal_conv_on_tape(tape: &mut Tape, h: &[Var], store: &ParamStore) -> Result<Vec<Var>> {
    let w = tape.param(store, TEMPORAL)?;
    let shape = tape.shape(h[0]).to_vec();
    let c = shape[1];
    let k = tape.shape(w)[0] / c;
    let half = (k / 2) as isize;
    let zero = tape.constant(Tensor::zeros(&shape));
    (0..h.len() as isize)
        .map(|t| {
            let taps: Vec<Var> = (-half..=half)
                .map(|o| {
                    let s = t + o;
                    if s < 0 || s >= h.len() as isize {
                        zero
                    } else {
                        h[s as usize]
                    }
                })
                .collect();
            let stacked = tape.concat_cols(&taps)?;
            let y = tape.matmul(stacked, w)?;
            Ok(tape.relu(y))
        })
        .collect()
}

/// Temporal attention. Returns the attended sequence and the normalized
/// `T_r x T_r` attention matrix.
pub fn temporal_attention_on_tape(tape: &mut Tape, h: &[Var], store: &ParamStore) -> Result<(Vec<Var>, Var)> {
    let u1 = tape.param(store, U1)?;
    let u2 = tape.param(store, U2)?;
    let u3 = tape.param(store, U3)?;
    let v_e = tape.param(store, V_E)?;
    let b_e = tape.param(store, B_E)?;
    let t_r = h.len();
    let (n, c) = {
        let s = tape.shape(h[0]);
        (s[0], s[1])
    };
    if tape.shape(v_e) != [t_r, t_r] {
        return Err(Error::dim("temporal_attention", tape.shape(v_e), &[t_r, t_r]));
    }

    let u1t = tape.transpose(u1)?;
    let mut lhs_rows = Vec::with_capacity(t_r);
    let mut rhs_cols = Vec::with_capacity(t_r);
    let mut flat_rows = Vec::with_capacity(t_r);
    for &ht in h {
        lhs_rows.push(tape.matmul(u1t, ht)?);
        rhs_cols.push(tape.matmul(ht, u3)?);
        flat_rows.push(tape.reshape(ht, &[1, n * c])?);
    }
    let lhs = tape.concat_rows(&lhs_rows)?;
    let lhs = tape.matmul(lhs, u2)?;
    let rhs = tape.concat_cols(&rhs_cols)?;
    let prod = tape.matmul(lhs, rhs)?;
    let pre = tape.add(prod, b_e)?;
    let act = tape.sigmoid(pre);
    let e = tape.matmul(v_e, act)?;
    let e_norm = tape.softmax_rows(e)?;

    let flat = tape.concat_rows(&flat_rows)?;
    let mixed = tape.matmul(e_norm, flat)?;
    let out = (0..t_r)
        .map(|t| {
            let row = tape.slice_rows(mixed, t, 1)?;
            tape.reshape(row, &[n, c])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, e_norm))
}

/// Full forecast for one window: `n x T'`.
///
/// `target_window` is the raw target feature over the window, `n x T_r`.
pub fn predict_on_tape(
    tape: &mut Tape,
    window: &[Var],
    target_window: Var,
    laplacians: &[Var],
    store: &ParamStore,
) -> Result<Var> {
    let h = dynamic_gcn_on_tape(tape, window, laplacians, store)?;
    let h = temporal_conv_on_tape(tape, &h, store)?;
    let (att, _) = temporal_attention_on_tape(tape, &h, store)?;
    let flat = tape.concat_cols(&att)?;
    let w2 = tape.param(store, W2)?;
    let b2 = tape.param(store, B2)?;
    let res = tape.param(store, RESIDUAL)?;

    let proj = tape.matmul(flat, w2)?;
    let proj = tape.add(proj, b2)?;
    let resid = tape.matmul(target_window, res)?;
    tape.add(proj, resid)
}

/// Mean squared error between two equally shaped matrices.
pub fn l2_loss_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.hadamard(d, d)?;
    Ok(tape.mean(sq))
}

pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let d = pred.zip_map(target, "l2_loss", |a, b| (a - b) * (a - b))?;
    Ok(d.sum() / d.numel() as f64)
}

/// Evaluates [`dynamic_gcn_on_tape`] on plain tensors.
pub fn dynamic_gcn_forward(window: &[Tensor], laplacians: &[Tensor], params: &ForecastParams) -> Result<Vec<Tensor>> {
    let store = params.store();
    let mut tape = Tape::new();
    let xs: Vec<Var> = window.iter().map(|x| tape.constant(x.clone())).collect();
    let ls: Vec<Var> = laplacians.iter().map(|l| tape.constant(l.clone())).collect();
    let h = dynamic_gcn_on_tape(&mut tape, &xs, &ls, &store)?;
    Ok(h.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Evaluates [`temporal_attention_on_tape`] on plain tensors.
pub fn temporal_attention(h: &[Tensor], params: &ForecastParams) -> Result<(Vec<Tensor>, Tensor)> {
    let store = params.store();
    let mut tape = Tape::new();
    let hs: Vec<Var> = h.iter().map(|x| tape.constant(x.clone())).collect();
    let (out, e) = temporal_attention_on_tape(&mut tape, &hs, &store)?;
    Ok((out.iter().map(|&v| tape.value(v).clone()).collect(), tape.value(e).clone()))
}

/// Evaluates [`predict_on_tape`] on plain tensors.
pub fn predict(
    window: &[Tensor],
    target_window: &Tensor,
    laplacians: &[Tensor],
    params: &ForecastParams,
) -> Result<Tensor> {
    predict_with_store(window, target_window, laplacians, &params.store())
}

pub(crate) fn predict_with_store(
    window: &[Tensor],
    target_window: &Tensor,
    laplacians: &[Tensor],
    store: &ParamStore,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xs: Vec<Var> = window.iter().map(|x| tape.constant(x.clone())).collect();
    let ls: Vec<Var> = laplacians.iter().map(|l| tape.constant(l.clone())).collect();
    let tw = tape.constant(target_window.clone());
    let out = predict_on_tape(&mut tape, &xs, tw, &ls, store)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, t: usize, h: usize) -> ForecastShape {
        ForecastShape {
            n_nodes: n,
            features: 2,
            channels: 3,
            steps: t,
            horizon: h,
            kernel: 3,
        }
    }

    fn params(s: ForecastShape, seed: u64) -> ForecastParams {
        ForecastParams::init(s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identity_gcn_passes_nonnegative_input() {
        let mut p = params(shape(3, 2, 1), 0);
        p.gcn_a = Tensor::from_fn(2, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        p.gcn_b = Tensor::eye(3);
        let x = Tensor::from_fn(3, 2, |i, j| (i + j) as f64 * 0.5);
        let h = dynamic_gcn_forward(&[x.clone(), x.clone()], &[Tensor::eye(3), Tensor::eye(3)], &p).unwrap();
        for ht in h {
            for i in 0..3 {
                assert_eq!(&ht.row(i)[..2], x.row(i));
                assert_eq!(ht.get(i, 2), 0.0);
            }
        }
    }

    #[test]
    fn zero_window_gives_zero_hidden() {
        let p = params(shape(4, 3, 2), 1);
        let w = vec![Tensor::zeros(&[4, 2]); 3];
        let l = vec![Tensor::eye(4); 3];
        assert!(dynamic_gcn_forward(&w, &l, &p).unwrap().iter().all(|h| h.max_abs() == 0.0));
    }

    #[test]
    fn laplacian_count_mismatch() {
        let p = params(shape(4, 3, 2), 1);
        let w = vec![Tensor::zeros(&[4, 2]); 3];
        let l = vec![Tensor::eye(4); 2];
        assert!(matches!(dynamic_gcn_forward(&w, &l, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_attention_averages() {
        let mut p = params(shape(3, 4, 1), 2);
        p.v_e = Tensor::zeros(&[4, 4]);
        let h: Vec<Tensor> = (0..4).map(|t| Tensor::from_fn(3, 3, |i, j| (t * 7 + i * 3 + j) as f64 * 0.1)).collect();
        let (out, e) = temporal_attention(&h, &p).unwrap();
        assert!(e.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for o in &out {
            for k in 0..9 {
                let mean = h.iter().map(|x| x.data()[k]).sum::<f64>() / 4.0;
                assert!((o.data()[k] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_attention_is_identity() {
        let p = params(shape(3, 1, 1), 3);
        let h = vec![Tensor::from_fn(3, 3, |i, j| (i * 3 + j) as f64)];
        let (out, e) = temporal_attention(&h, &p).unwrap();
        assert_eq!(e.data(), &[1.0]);
        assert_eq!(out[0], h[0]);
    }

    #[test]
    fn zero_everything_predicts_zero() {
        let s = shape(3, 4, 2);
        let mut p = params(s, 4);
        p.residual = Tensor::zeros(&[4, 2]);
        let w = vec![Tensor::zeros(&[3, 2]); 4];
        let l = vec![Tensor::eye(3); 4];
        let out = predict(&w, &Tensor::zeros(&[3, 4]), &l, &p).unwrap();
        assert_eq!(out, Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn untrained_model_is_persistence() {
        let s = shape(3, 4, 1);
        let p = params(s, 5);
        let w: Vec<Tensor> = (0..4).map(|t| Tensor::from_fn(3, 2, |i, j| (t + i + j) as f64)).collect();
        let tw = Tensor::from_fn(3, 4, |i, t| (t + i) as f64);
        let l = vec![Tensor::eye(3); 4];
        let out = predict(&w, &tw, &l, &p).unwrap();
        for i in 0..3 {
            assert_eq!(out.get(i, 0), tw.get(i, 3));
        }
    }

    #[test]
    fn l2_values() {
        let a = Tensor::from_fn(2, 3, |i, j| (i + j) as f64);
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l2_loss(&a.map(|x| x + 1.0), &a).unwrap(), 1.0);
        assert!(l2_loss(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let mut s = shape(3, 4, 1);
        s.kernel = 2;
        assert!(ForecastParams::init(s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
