//! Two-stage training: the graph stage fits the encoder and the
//! cross-covariance by maximizing the sequence ELBO; the forecast stage fits
//! the forecaster on frozen per-step transition graphs.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::TimeSeriesDataset;
use crate::diffusion::{self, DiffusionParams, DynamicGraphSequence, SequenceWeights, StepVars};
use crate::encoder::{self, EncoderConfig, EncoderParams, LatentDistribution};
use crate::error::{Error, Result};
use crate::forecaster::{self, ForecastParams, ForecastShape};
use crate::graphs::{normalize_adjacency, Graph};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Largest allowed `|Sigma_ij|` as a fraction of the smallest `sigma_i sigma_j`
/// seen in the batch.
const SIGMA_MARGIN: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_rmse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 is the initial state.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let with_val = self.epochs.iter().any(|r| r.val_rmse.is_some());
        let mut s = String::from(if with_val { "epoch,loss,val_rmse\n" } else { "epoch,loss\n" });
        for r in &self.epochs {
            match (with_val, r.val_rmse) {
                (true, Some(v)) => s.push_str(&format!("{},{},{}\n", r.epoch, r.loss, v)),
                (true, None) => s.push_str(&format!("{},{},\n", r.epoch, r.loss)),
                _ => s.push_str(&format!("{},{}\n", r.epoch, r.loss)),
            }
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Encoder weights, the cross-covariance and the fixed propagation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphModel {
    /// `encoder.*` and `diffusion.sigma`.
    pub store: ParamStore,
    pub diffusion: DiffusionParams,
    pub encoder_cfg: EncoderConfig,
    /// Normalized pre-defined graph used by the encoder.
    pub laplacian: Tensor,
}

impl GraphModel {
    pub fn init(
        features: usize,
        hidden1: usize,
        hidden2: usize,
        graph: &Graph,
        mask: bool,
        encoder_cfg: EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = graph.n_nodes();
        let enc = EncoderParams::glorot(features, hidden1, hidden2, rng)?;
        let mut diffusion = DiffusionParams::new(n);
        if mask {
            diffusion = diffusion.with_mask(graph)?;
        }
        let mut store = ParamStore::new();
        enc.register(&mut store);
        diffusion.register(&mut store);
        Ok(Self {
            store,
            diffusion,
            encoder_cfg,
            laplacian: crate::graphs::normalize_laplacian(graph),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.laplacian.rows()
    }

    /// Posterior of every step in `range`, in order.
    pub fn posteriors(&self, ds: &TimeSeriesDataset, range: std::ops::Range<usize>) -> Result<Vec<LatentDistribution>> {
        range
            .into_par_iter()
            .map(|t| encoder::encode_with_store(&ds.features_at(t), &self.laplacian, &self.store, self.encoder_cfg))
            .collect()
    }

    /// Causal and transition graphs for steps `range.start + 1 .. range.end`.
    pub fn graphs(&self, ds: &TimeSeriesDataset, range: std::ops::Range<usize>) -> Result<DynamicGraphSequence> {
        let start = range.start;
        let dists = self.posteriors(ds, range)?;
        DynamicGraphSequence::from_posteriors(&dists, &self.diffusion, start)
    }
}

/// Groups window starts into contiguous batches of at most `batch`.
fn contiguous_batches(starts: &[usize], batch: usize) -> Vec<Vec<usize>> {
    starts.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn divergence(epoch: usize, batch: usize, tape: &Tape, what: &str) -> Error {
    let detail = match tape.first_non_finite() {
        Some(op) => format!("{what} is non-finite; first non-finite value from {op}"),
        None => format!("{what} is non-finite"),
    };
    Error::Divergence { epoch, batch, detail }
}

/// One optimizer step of the graph stage on the windows starting at `starts`.
/// Returns the mean negated ELBO of those windows.
#[allow(clippy::too_many_arguments)]
pub fn graph_batch_step(
    model: &mut GraphModel,
    ds: &TimeSeriesDataset,
    starts: &[usize],
    p: usize,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    (epoch, batch): (usize, usize),
) -> Result<f64> {
    let steps: BTreeSet<usize> = starts.iter().flat_map(|&s| s..s + p).collect();
    let steps: Vec<usize> = steps.into_iter().collect();
    let mut weights = SequenceWeights::empty();
    let scale = 1.0 / starts.len() as f64;
    for &s in starts {
        let offset = steps.binary_search(&s).expect("window start is in the step set");
        weights.add_window(offset, p, scale)?;
    }

    let mut tape = Tape::new();
    let lap = tape.constant(model.laplacian.clone());
    let hidden2 = model.store.expect(encoder::W1_MU)?.cols();
    let n = model.n_nodes();
    let mut vars = Vec::with_capacity(steps.len());
    let mut noises = Vec::with_capacity(steps.len());
    for &t in &steps {
        let x = tape.constant(ds.features_at(t));
        let (mu, log_sigma) = encoder::encode_on_tape(&mut tape, x, lap, &model.store, model.encoder_cfg)?;
        vars.push(StepVars { mu, log_sigma });
        noises.push(encoder::standard_normal(n, hidden2, rng));
    }
    let sigma = tape.param(&model.store, diffusion::SIGMA)?;
    let loss = diffusion::sequence_loss_on_tape(
        &mut tape,
        &vars,
        &noises,
        sigma,
        &model.diffusion,
        &weights,
        cfg.reg_weight,
    )?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(divergence(epoch, batch, &tape, "graph-stage loss"));
    }
    let min_log_sigma = vars
        .iter()
        .flat_map(|v| tape.value(v.log_sigma).data().iter().copied())
        .fold(f64::INFINITY, f64::min);

    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    if !model.store.grad_norm().is_finite() {
        return Err(divergence(epoch, batch, &tape, "graph-stage gradient"));
    }
    clip_grad_norm(&mut model.store, cfg.grad_clip);
    adam_step(&mut model.store, state, cfg.lr_graph, AdamConfig::default());

    model.diffusion.sync_from(&model.store)?;
    model.diffusion.apply_mask();
    model.diffusion.project(SIGMA_MARGIN * (2.0 * min_log_sigma).exp());
    model.diffusion.sync_into(&mut model.store)?;
    Ok(value)
}

/// Graph stage: maximizes the sequence ELBO over windows of `p` steps
/// starting at `starts`. Batches are contiguous runs of starts, visited in a
/// seeded random order each epoch.
pub fn train_graph_stage(
    model: &mut GraphModel,
    ds: &TimeSeriesDataset,
    starts: &[usize],
    p: usize,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if p < 2 {
        return Err(Error::Contract(format!("graph stage needs p >= 2, got {p}")));
    }
    if starts.is_empty() {
        return Err(Error::Contract("graph stage has no windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new();
    let mut batches = contiguous_batches(starts, cfg.batch);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs_graph {
        batches.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, starts) in batches.iter().enumerate() {
            total += graph_batch_step(model, ds, starts, p, cfg, &mut state, &mut rng, (epoch, b))?;
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss: total / batches.len() as f64,
            val_rmse: None,
        });
    }
    Ok(log)
}

/// Per-step propagation matrices for the forecaster, indexed by step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLaplacians {
    laps: Vec<Option<Tensor>>,
}

impl StepLaplacians {
    /// Normalized transition graphs from a graph sequence.
    pub fn from_transitions(graphs: &DynamicGraphSequence, total_steps: usize) -> Self {
        let mut laps = vec![None; total_steps];
        for (&t, a) in graphs.steps.iter().zip(&graphs.transition) {
            if t < total_steps {
                laps[t] = Some(normalize_adjacency(a));
            }
        }
        Self { laps }
    }

    /// The same matrix at every step.
    pub fn constant(lap: &Tensor, total_steps: usize) -> Self {
        Self {
            laps: vec![Some(lap.clone()); total_steps],
        }
    }

    pub fn get(&self, t: usize) -> Result<&Tensor> {
        self.laps
            .get(t)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Contract(format!("no propagation matrix for step {t}")))
    }

    pub fn set(&mut self, t: usize, lap: Tensor) {
        if t >= self.laps.len() {
            self.laps.resize(t + 1, None);
        }
        self.laps[t] = Some(lap);
    }
}

/// Inputs of one forecast: steps `s+1 .. s+p-1` and the following horizon.
pub struct ForecastExample {
    pub window: Vec<Tensor>,
    pub target_window: Tensor,
    pub laplacians: Vec<Tensor>,
    pub targets: Tensor,
}

pub fn forecast_example(
    ds: &TimeSeriesDataset,
    laps: &StepLaplacians,
    start: usize,
    p: usize,
    horizon: usize,
) -> Result<ForecastExample> {
    if start + p + horizon > ds.steps {
        return Err(Error::Contract(format!("window at {start} runs past the series end")));
    }
    let steps: Vec<usize> = (start + 1..start + p).collect();
    let target_window = Tensor::from_fn(ds.n_nodes, steps.len(), |i, k| ds.value(steps[k], i, ds.target_feature));
    Ok(ForecastExample {
        window: steps.iter().map(|&t| ds.features_at(t)).collect(),
        target_window,
        laplacians: steps.iter().map(|&t| laps.get(t).cloned()).collect::<Result<_>>()?,
        targets: Tensor::from_fn(ds.n_nodes, horizon, |i, h| ds.value(start + p + h, i, ds.target_feature)),
    })
}

fn example_loss_and_grads(ex: &ForecastExample, store: &ParamStore) -> Result<(f64, ParamStore, Option<&'static str>)> {
    let mut tape = Tape::new();
    let xs: Vec<Var> = ex.window.iter().map(|x| tape.constant(x.clone())).collect();
    let ls: Vec<Var> = ex.laplacians.iter().map(|l| tape.constant(l.clone())).collect();
    let tw = tape.constant(ex.target_window.clone());
    let pred = forecaster::predict_on_tape(&mut tape, &xs, tw, &ls, store)?;
    let target = tape.constant(ex.targets.clone());
    let loss = forecaster::l2_loss_on_tape(&mut tape, pred, target)?;
    let value = tape.value(loss).item();
    let mut grads = store.fresh_grads();
    if value.is_finite() {
        tape.backward(loss, &mut grads)?;
    }
    Ok((value, grads, tape.first_non_finite()))
}

/// One optimizer step of the forecast stage: the mean L2 loss over the
/// windows starting at `starts`. Per-window gradients are computed in
/// parallel and summed in window order.
#[allow(clippy::too_many_arguments)]
pub fn forecast_batch_step(
    store: &mut ParamStore,
    ds: &TimeSeriesDataset,
    laps: &StepLaplacians,
    starts: &[usize],
    p: usize,
    horizon: usize,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    (epoch, batch): (usize, usize),
) -> Result<f64> {
    let results: Vec<(f64, ParamStore, Option<&'static str>)> = starts
        .par_iter()
        .map(|&s| {
            let ex = forecast_example(ds, laps, s, p, horizon)?;
            example_loss_and_grads(&ex, store)
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / starts.len() as f64;
    store.zero_grad();
    let mut total = 0.0;
    for (value, grads, bad) in &results {
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch,
                detail: format!(
                    "forecast loss is non-finite; first non-finite value from {}",
                    bad.unwrap_or("unknown op")
                ),
            });
        }
        total += value;
        store.merge_grads(grads, scale)?;
    }
    clip_grad_norm(store, cfg.grad_clip);
    adam_step(store, state, cfg.lr_forecast, AdamConfig::default());
    Ok(total * scale)
}

/// Predictions (`n x horizon`, normalized units) for each window start.
pub fn forecast_windows(
    store: &ParamStore,
    ds: &TimeSeriesDataset,
    laps: &StepLaplacians,
    starts: &[usize],
    p: usize,
    horizon: usize,
) -> Result<Vec<(Tensor, Tensor)>> {
    starts
        .par_iter()
        .map(|&s| {
            let ex = forecast_example(ds, laps, s, p, horizon)?;
            let pred = forecaster::predict_with_store(&ex.window, &ex.target_window, &ex.laplacians, store)?;
            Ok((pred, ex.targets))
        })
        .collect()
}

/// Root mean squared error over every window, node and horizon.
pub fn windows_rmse(pairs: &[(Tensor, Tensor)]) -> f64 {
    let (mut s, mut count) = (0.0, 0usize);
    for (pred, truth) in pairs {
        for (a, b) in pred.data().iter().zip(truth.data()) {
            s += (a - b) * (a - b);
        }
        count += pred.numel();
    }
    (s / count.max(1) as f64).sqrt()
}

pub fn init_forecaster(shape: ForecastShape, seed: u64) -> Result<ParamStore> {
    // Offset so forecaster weights do not reuse the encoder's stream.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f0ca);
    Ok(ForecastParams::init(shape, &mut rng)?.store())
}

/// Forecast stage: minimizes the L2 forecast loss over training windows,
/// recording the validation RMSE after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_forecast_stage(
    store: &mut ParamStore,
    ds: &TimeSeriesDataset,
    laps: &StepLaplacians,
    train_starts: &[usize],
    val_starts: &[usize],
    p: usize,
    horizon: usize,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_starts.is_empty() {
        return Err(Error::Contract("forecast stage has no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut state = OptimizerState::new();
    let mut order = train_starts.to_vec();
    let mut log = TrainLog::default();
    let val_rmse = |store: &ParamStore| -> Result<Option<f64>> {
        if val_starts.is_empty() {
            return Ok(None);
        }
        Ok(Some(windows_rmse(&forecast_windows(store, ds, laps, val_starts, p, horizon)?)))
    };
    // Keeps the parameters with the lowest validation error, the initial
    // state included.
    let mut best = val_rmse(store)?.map(|v| (v, 0, store.clone()));
    for epoch in 1..=cfg.epochs_forecast {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch).collect();
        for (b, starts) in batches.iter().enumerate() {
            total += forecast_batch_step(store, ds, laps, starts, p, horizon, cfg, &mut state, (epoch, b))?;
        }
        let val = val_rmse(store)?;
        if let (Some(v), Some((bv, be, bs))) = (val, best.as_mut()) {
            if v < *bv {
                (*bv, *be) = (v, epoch);
                bs.clone_from(store);
            }
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss: total / batches.len() as f64,
            val_rmse: val,
        });
    }
    if let Some((_, epoch, params)) = best {
        *store = params;
        log.best_epoch = Some(epoch);
    }
    Ok(log)
}
