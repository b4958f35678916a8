//! Randomized finite-difference checks over every differentiable op and the
//! composed training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{self, DiffusionParams, SequenceWeights, StepVars};
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::forecaster::{self, ForecastParams, ForecastShape};
use crate::gradcheck::grad_check;
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

type Program = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Entries bounded away from zero with random sign, so the ReLU kink is
/// never within one finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `v` to a scalar through a fixed random weighting so every output
/// entry contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, v: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let h = tape.hadamard(v, wv)?;
    Ok(tape.sum(h))
}

fn unary_instance(rng: &mut ChaCha8Rng, name: &'static str) -> (ParamStore, Program) {
    let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
    let a = match name {
        "log" => uniform(rng, r, c, 0.5, 2.0),
        _ => away_from_zero(rng, r, c),
    };
    let out_shape = if name == "transpose" { (c, r) } else { (r, c) };
    let w = uniform(rng, out_shape.0, out_shape.1, -1.0, 1.0);
    let k = rng.random_range(-2.0..2.0);
    let mut store = ParamStore::new();
    store.insert("a", a);
    let prog: Program = Box::new(move |t, s| {
        let a = t.param(s, "a")?;
        let out = match name {
            "relu" => t.relu(a),
            "sigmoid" => t.sigmoid(a),
            "tanh" => t.tanh(a),
            "exp" => t.exp(a),
            "log" => t.log(a),
            "softmax_rows" => t.softmax_rows(a)?,
            "transpose" => t.transpose(a)?,
            "scale" => t.scale(a, k),
            "add_scalar" => t.add_scalar(a, k),
            "sum" => return Ok(t.sum(a)),
            "mean" => return Ok(t.mean(a)),
            _ => unreachable!("unknown unary op {name}"),
        };
        weighted_sum(t, out, &w)
    });
    (store, prog)
}

fn binary_instance(rng: &mut ChaCha8Rng, name: &'static str) -> (ParamStore, Program) {
    let (r, k, c) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let (a, b, out) = match name {
        "matmul" => (uniform(rng, r, k, -1.0, 1.0), uniform(rng, k, c, -1.0, 1.0), (r, c)),
        "div" => (uniform(rng, r, c, -1.0, 1.0), uniform(rng, r, c, 0.5, 2.0), (r, c)),
        "concat_rows" => (uniform(rng, r, c, -1.0, 1.0), uniform(rng, k, c, -1.0, 1.0), (r + k, c)),
        "concat_cols" => (uniform(rng, r, c, -1.0, 1.0), uniform(rng, r, k, -1.0, 1.0), (r, c + k)),
        _ => (uniform(rng, r, c, -1.0, 1.0), uniform(rng, r, c, -1.0, 1.0), (r, c)),
    };
    let w = uniform(rng, out.0, out.1, -1.0, 1.0);
    let mut store = ParamStore::new();
    store.insert("a", a);
    store.insert("b", b);
    let prog: Program = Box::new(move |t, s| {
        let a = t.param(s, "a")?;
        let b = t.param(s, "b")?;
        let out = match name {
            "matmul" => t.matmul(a, b)?,
            "add" => t.add(a, b)?,
            "sub" => t.sub(a, b)?,
            "hadamard" => t.hadamard(a, b)?,
            "div" => t.div(a, b)?,
            "concat_rows" => t.concat_rows(&[a, b])?,
            "concat_cols" => t.concat_cols(&[a, b])?,
            _ => unreachable!("unknown binary op {name}"),
        };
        weighted_sum(t, out, &w)
    });
    (store, prog)
}

fn shape_instance(rng: &mut ChaCha8Rng, name: &'static str) -> (ParamStore, Program) {
    let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
    let a = uniform(rng, r, c, -1.0, 1.0);
    let (start, len) = match name {
        "slice_rows" => {
            let s = rng.random_range(0..r);
            (s, rng.random_range(1..=r - s))
        }
        _ => {
            let s = rng.random_range(0..c);
            (s, rng.random_range(1..=c - s))
        }
    };
    let out = match name {
        "slice_rows" => (len, c),
        "slice_cols" => (r, len),
        _ => (c, r),
    };
    let w = uniform(rng, out.0, out.1, -1.0, 1.0);
    let mut store = ParamStore::new();
    store.insert("a", a);
    let prog: Program = Box::new(move |t, s| {
        let a = t.param(s, "a")?;
        let out = match name {
            "slice_rows" => t.slice_rows(a, start, len)?,
            "slice_cols" => t.slice_cols(a, start, len)?,
            "reshape" => t.reshape(a, &[c, r])?,
            _ => unreachable!("unknown shape op {name}"),
        };
        weighted_sum(t, out, &w)
    });
    (store, prog)
}

/// Encoder over `p` steps followed by the negated sequence ELBO, checked
/// with respect to every encoder weight and the cross-covariance.
fn elbo_instance(rng: &mut ChaCha8Rng) -> Result<(ParamStore, Program)> {
    let n = rng.random_range(2..4);
    let f = rng.random_range(1..3);
    let (h1, h2) = (rng.random_range(2..5), rng.random_range(1..3));
    let p = rng.random_range(2..4);
    let enc = EncoderParams::glorot(f, h1, h2, rng)?;
    let mut store = ParamStore::new();
    enc.register(&mut store);
    // sigma >= 1 under the sigmoid head, so |Sigma| < 0.5 keeps the
    // determinant well away from zero.
    store.insert(diffusion::SIGMA, uniform(rng, n, n, -0.5, 0.5));
    let xs: Vec<Tensor> = (0..p).map(|_| uniform(rng, n, f, -1.0, 1.0)).collect();
    let noises: Vec<Tensor> = (0..p).map(|_| encoder::standard_normal(n, h2, rng)).collect();
    let lap = crate::graphs::normalize_adjacency(&uniform(rng, n, n, 0.0, 1.0));
    let params = DiffusionParams::new(n);
    let weights = SequenceWeights::window(p)?;
    let reg = rng.random_range(0.0..0.01);
    let prog: Program = Box::new(move |t, s| {
        let lv = t.constant(lap.clone());
        let mut steps = Vec::with_capacity(xs.len());
        for x in &xs {
            let xv = t.constant(x.clone());
            let (mu, log_sigma) = encoder::encode_on_tape(t, xv, lv, s, EncoderConfig::default())?;
            steps.push(StepVars { mu, log_sigma });
        }
        let sigma = t.param(s, diffusion::SIGMA)?;
        diffusion::sequence_loss_on_tape(t, &steps, &noises, sigma, &params, &weights, reg)
    });
    Ok((store, prog))
}

/// Full forecaster and L2 loss, checked with respect to every forecaster
/// parameter. The output head starts away from zero so all paths carry
/// gradient.
fn forecast_instance(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> Result<(ParamStore, Program)> {
    let shape = ForecastShape {
        n_nodes: n,
        features: rng.random_range(1..3),
        channels: rng.random_range(2..4),
        steps,
        horizon: rng.random_range(1..4),
        kernel: 3,
    };
    let mut params = ForecastParams::init(shape, rng)?;
    params.w2 = uniform(rng, params.w2.rows(), params.w2.cols(), -0.5, 0.5);
    params.b2 = uniform(rng, params.b2.rows(), params.b2.cols(), -0.5, 0.5);
    params.v_e = uniform(rng, steps, steps, -1.0, 1.0);
    params.b_e = uniform(rng, steps, steps, -0.5, 0.5);
    let store = params.store();
    let window: Vec<Tensor> = (0..steps).map(|_| away_from_zero(rng, n, shape.features)).collect();
    let laps: Vec<Tensor> = (0..steps)
        .map(|_| crate::graphs::normalize_adjacency(&uniform(rng, n, n, 0.0, 1.0)))
        .collect();
    let tw = uniform(rng, n, steps, 0.0, 1.0);
    let target = uniform(rng, n, shape.horizon, 0.0, 1.0);
    let prog: Program = Box::new(move |t, s| {
        let xs: Vec<Var> = window.iter().map(|x| t.constant(x.clone())).collect();
        let ls: Vec<Var> = laps.iter().map(|l| t.constant(l.clone())).collect();
        let twv = t.constant(tw.clone());
        let pred = forecaster::predict_on_tape(t, &xs, twv, &ls, s)?;
        let tv = t.constant(target.clone());
        forecaster::l2_loss_on_tape(t, pred, tv)
    });
    Ok((store, prog))
}

pub const UNARY: &[&str] = &[
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax_rows",
    "transpose",
    "scale",
    "add_scalar",
    "sum",
    "mean",
];
pub const BINARY: &[&str] = &["matmul", "add", "sub", "hadamard", "div", "concat_rows", "concat_cols"];
pub const SHAPE: &[&str] = &["slice_rows", "slice_cols", "reshape"];

/// Runs `instances` random instances of every op and of both composed
/// losses. Returns the worst relative error per check.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| {
        results.push(CheckResult {
            name,
            instances: errs.len(),
            max_error: errs.into_iter().fold(0.0, f64::max),
        });
    };
    for &name in UNARY {
        let errs = (0..instances)
            .map(|_| {
                let (s, p) = unary_instance(&mut rng, name);
                grad_check(p, &s, EPSILON)
            })
            .collect::<Result<Vec<_>>>()?;
        record(name, errs);
    }
    for &name in BINARY {
        let errs = (0..instances)
            .map(|_| {
                let (s, p) = binary_instance(&mut rng, name);
                grad_check(p, &s, EPSILON)
            })
            .collect::<Result<Vec<_>>>()?;
        record(name, errs);
    }
    for &name in SHAPE {
        let errs = (0..instances)
            .map(|_| {
                let (s, p) = shape_instance(&mut rng, name);
                grad_check(p, &s, EPSILON)
            })
            .collect::<Result<Vec<_>>>()?;
        record(name, errs);
    }
    let errs = (0..instances)
        .map(|_| {
            let (s, p) = elbo_instance(&mut rng)?;
            grad_check(p, &s, EPSILON)
        })
        .collect::<Result<Vec<_>>>()?;
    record("encoder+elbo", errs);
    let errs = (0..instances)
        .map(|_| {
            let n = rng.random_range(2..5);
            let steps = rng.random_range(1..6);
            let (s, p) = forecast_instance(&mut rng, n, steps)?;
            grad_check(p, &s, EPSILON)
        })
        .collect::<Result<Vec<_>>>()?;
    record("forecaster+l2", errs);
    Ok(results)
}

/// The fixed 4-node, `T_r = 5` forecaster instance.
pub fn forecaster_reference_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, p) = forecast_instance(&mut rng, 4, 5)?;
    grad_check(p, &s, EPSILON)
}
