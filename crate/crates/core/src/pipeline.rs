//! End-to-end runs: preprocessing, both training stages, evaluation and
//! artifact export.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, RunConfig};
use crate::data::{self, NormStats, Split, Splits, TimeSeriesDataset};
use crate::diffusion::{self, DynamicGraphSequence};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::forecaster::ForecastShape;
use crate::graphs::{self, EdgeSplit, Graph};
use crate::io::write_atomic;
use crate::metrics::{self, LinkEvalReport, LinkTarget, MetricsReport};
use crate::model_io;
use crate::optim::OptimizerState;
use crate::tape::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{self, GraphModel, StepLaplacians, TrainLog};

pub const MODEL_FILE: &str = "model.dvgn";
pub const INCOMPLETE: &str = ".incomplete";

const META_NORM_MIN: &str = "meta.norm_min";
const META_NORM_SCALE: &str = "meta.norm_scale";
const META_LAPLACIAN: &str = "meta.laplacian";
const META_FLAGS: &str = "meta.flags";
const META_HELD_OUT: &str = "meta.held_out";
const META_NEGATIVES: &str = "meta.negatives";
const MASK: &str = "diffusion.mask";

/// Everything needed to rebuild graphs and forecasts for a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub graph: GraphModel,
    /// `forecast.*`; absent after a graph-only run.
    pub forecast: Option<ParamStore>,
    pub stats: NormStats,
    pub ablation: Ablation,
    pub p: usize,
    pub horizon: usize,
    pub target_feature: usize,
    /// Held-out edges and negatives for link evaluation, if any.
    pub edge_split: Option<EdgeSplit>,
}

fn edges_tensor(edges: &[(usize, usize)]) -> Tensor {
    Tensor::new(
        vec![edges.len(), 2],
        edges.iter().flat_map(|&(i, j)| [i as f64, j as f64]).collect(),
    )
    .expect("k x 2 layout")
}

fn tensor_edges(t: &Tensor) -> Vec<(usize, usize)> {
    t.data().chunks(2).map(|c| (c[0] as usize, c[1] as usize)).collect()
}

impl TrainedModel {
    pub fn to_store(&self) -> ParamStore {
        let mut meta = ParamStore::new();
        let (n, f) = (self.stats.n_nodes, self.stats.features);
        meta.insert(META_NORM_MIN, Tensor::new(vec![n, f], self.stats.min.clone()).expect("n x F"));
        meta.insert(META_NORM_SCALE, Tensor::new(vec![n, f], self.stats.scale.clone()).expect("n x F"));
        meta.insert(META_LAPLACIAN, self.graph.laplacian.clone());
        meta.insert(
            META_FLAGS,
            Tensor::new(
                vec![5],
                vec![
                    f64::from(u8::from(self.graph.encoder_cfg.linear_logsigma)),
                    f64::from(u8::from(self.ablation == Ablation::Static)),
                    self.p as f64,
                    self.horizon as f64,
                    self.target_feature as f64,
                ],
            )
            .expect("flag vector"),
        );
        if let Some(m) = &self.graph.diffusion.mask {
            meta.insert(MASK, m.clone());
        }
        if let Some(s) = &self.edge_split {
            meta.insert(META_HELD_OUT, edges_tensor(&s.held_out_edges));
            meta.insert(META_NEGATIVES, edges_tensor(&s.negative_samples));
        }
        let empty = ParamStore::new();
        model_io::merge(&[&self.graph.store, self.forecast.as_ref().unwrap_or(&empty), &meta])
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let flags = store.expect(META_FLAGS)?.data().to_vec();
        if flags.len() != 5 {
            return Err(Error::Model("malformed meta.flags".into()));
        }
        let norm_min = store.expect(META_NORM_MIN)?;
        let (n, f) = (norm_min.rows(), norm_min.cols());
        let stats = NormStats {
            n_nodes: n,
            features: f,
            min: norm_min.data().to_vec(),
            scale: store.expect(META_NORM_SCALE)?.data().to_vec(),
        };
        let mut graph_store = model_io::subset(store, "encoder.");
        let sigma = store.expect(diffusion::SIGMA)?.clone();
        graph_store.insert(diffusion::SIGMA, sigma.clone());
        let mut dp = diffusion::DiffusionParams::new(n);
        dp.sigma_cross = sigma;
        dp.mask = store.get(MASK).cloned();
        let forecast = model_io::subset(store, "forecast.");
        let edge_split = match (store.get(META_HELD_OUT), store.get(META_NEGATIVES)) {
            (Some(h), Some(ng)) => Some(EdgeSplit {
                train_edges: Vec::new(),
                held_out_edges: tensor_edges(h),
                negative_samples: tensor_edges(ng),
            }),
            _ => None,
        };
        Ok(Self {
            graph: GraphModel {
                store: graph_store,
                diffusion: dp,
                encoder_cfg: EncoderConfig {
                    linear_logsigma: flags[0] != 0.0,
                },
                laplacian: store.expect(META_LAPLACIAN)?.clone(),
            },
            forecast: if forecast.is_empty() { None } else { Some(forecast) },
            stats,
            ablation: if flags[1] != 0.0 { Ablation::Static } else { Ablation::Dynamic },
            p: flags[2] as usize,
            horizon: flags[3] as usize,
            target_feature: flags[4] as usize,
            edge_split,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        model_io::save(path, &self.to_store())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&model_io::load(path)?)
    }

    pub fn laplacians(&self, graphs: &DynamicGraphSequence, steps: usize) -> StepLaplacians {
        match self.ablation {
            Ablation::Dynamic => StepLaplacians::from_transitions(graphs, steps),
            Ablation::Static => StepLaplacians::constant(&self.graph.laplacian, steps),
        }
    }
}

/// Repairs gaps; the dataset must be usable for windows of `p + horizon`.
pub fn prepare(ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    if ds.has_missing() {
        data::repair_missing(ds)
    } else {
        Ok(ds.clone())
    }
}

/// Untrained graph model for a repaired dataset, with normalization fitted
/// on the training split and, when the dataset has a graph, a held-out edge
/// split.
pub fn setup_graph(ds: &TimeSeriesDataset, cfg: &RunConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let stats = NormStats::fit(ds, ds.splits().range(Split::Train))?;
    let (encoder_graph, edge_split) = match &ds.adjacency {
        Some(g) if g.edge_count() > 0 && cfg.train_fraction < 1.0 => {
            let split = graphs::split_edges(g, cfg.train_fraction, cfg.train.seed)?;
            (split.train_graph(g), Some(split))
        }
        Some(g) => (g.clone(), None),
        None => (Graph::identity(ds.n_nodes), None),
    };
    let mask = cfg.mask.unwrap_or(ds.adjacency.is_some());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let graph = GraphModel::init(
        ds.features,
        cfg.hidden1,
        cfg.hidden2,
        &encoder_graph,
        mask,
        EncoderConfig {
            linear_logsigma: cfg.linear_logsigma,
        },
        &mut rng,
    )?;
    Ok(TrainedModel {
        graph,
        forecast: None,
        stats,
        ablation: cfg.ablation,
        p: cfg.p,
        horizon: cfg.horizon,
        target_feature: ds.target_feature,
        edge_split,
    })
}

/// Graph stage on a raw dataset.
pub fn train_graph(raw: &TimeSeriesDataset, cfg: &RunConfig) -> Result<(TrainedModel, TrainLog)> {
    let ds = prepare(raw)?;
    let mut model = setup_graph(&ds, cfg)?;
    let norm = model.stats.apply(&ds);
    let starts = data::window_starts(norm.splits().range(Split::Train), cfg.p, cfg.horizon)?;
    let log = trainer::train_graph_stage(&mut model.graph, &norm, &starts, cfg.p, &cfg.train)?;
    Ok((model, log))
}

fn forecast_shape(model: &TrainedModel, ds: &TimeSeriesDataset, cfg: &RunConfig) -> ForecastShape {
    ForecastShape {
        n_nodes: ds.n_nodes,
        features: ds.features,
        channels: cfg.channels,
        steps: model.p - 1,
        horizon: model.horizon,
        kernel: cfg.temporal_kernel,
    }
}

/// Forecast stage on frozen graphs from `model`. The graph parameters are
/// not touched.
pub fn train_forecast(model: &mut TrainedModel, raw: &TimeSeriesDataset, cfg: &RunConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let ds = prepare(raw)?;
    let norm = model.stats.apply(&ds);
    let graphs = model.graph.graphs(&norm, 0..norm.steps)?;
    let laps = model.laplacians(&graphs, norm.steps);
    let splits = norm.splits();
    let train = data::window_starts(splits.range(Split::Train), model.p, model.horizon)?;
    let val = data::window_starts(splits.range(Split::Val), model.p, model.horizon).unwrap_or_default();
    let mut store = trainer::init_forecaster(forecast_shape(model, &norm, cfg), cfg.train.seed)?;
    let log = trainer::train_forecast_stage(&mut store, &norm, &laps, &train, &val, model.p, model.horizon, &cfg.train)?;
    model.forecast = Some(store);
    Ok(log)
}

/// Interleaves one graph step and one forecast step per batch, refreshing
/// the transition graphs of the batch's steps in between.
pub fn train_joint(raw: &TimeSeriesDataset, cfg: &RunConfig) -> Result<(TrainedModel, TrainLog, TrainLog)> {
    let ds = prepare(raw)?;
    let mut model = setup_graph(&ds, cfg)?;
    let norm = model.stats.apply(&ds);
    let splits = norm.splits();
    let train = data::window_starts(splits.range(Split::Train), cfg.p, cfg.horizon)?;
    let val = data::window_starts(splits.range(Split::Val), cfg.p, cfg.horizon).unwrap_or_default();
    let mut fstore = trainer::init_forecaster(forecast_shape(&model, &norm, cfg), cfg.train.seed)?;

    let graphs = model.graph.graphs(&norm, 0..norm.steps)?;
    let mut laps = model.laplacians(&graphs, norm.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let (mut gstate, mut fstate) = (OptimizerState::new(), OptimizerState::new());
    let mut batches: Vec<Vec<usize>> = train.chunks(cfg.train.batch).map(<[usize]>::to_vec).collect();
    let (mut glog, mut flog) = (TrainLog::default(), TrainLog::default());
    let epochs = cfg.train.epochs_graph.max(cfg.train.epochs_forecast);
    for epoch in 1..=epochs {
        batches.shuffle(&mut rng);
        let (mut gt, mut ft) = (0.0, 0.0);
        for (b, starts) in batches.iter().enumerate() {
            gt += trainer::graph_batch_step(&mut model.graph, &norm, starts, cfg.p, &cfg.train, &mut gstate, &mut rng, (epoch, b))?;
            if model.ablation == Ablation::Dynamic {
                let lo = starts[0];
                let hi = starts[starts.len() - 1] + cfg.p;
                let fresh = model.graph.graphs(&norm, lo..hi)?;
                for (&t, a) in fresh.steps.iter().zip(&fresh.transition) {
                    laps.set(t, graphs::normalize_adjacency(a));
                }
            }
            ft += trainer::forecast_batch_step(
                &mut fstore,
                &norm,
                &laps,
                starts,
                cfg.p,
                cfg.horizon,
                &cfg.train,
                &mut fstate,
                (epoch, b),
            )?;
        }
        let nb = batches.len() as f64;
        glog.epochs.push(trainer::EpochRecord {
            epoch,
            loss: gt / nb,
            val_rmse: None,
        });
        let val_rmse = if val.is_empty() {
            None
        } else {
            let graphs = model.graph.graphs(&norm, 0..norm.steps)?;
            let l = model.laplacians(&graphs, norm.steps);
            Some(trainer::windows_rmse(&trainer::forecast_windows(
                &fstore, &norm, &l, &val, cfg.p, cfg.horizon,
            )?))
        };
        flog.epochs.push(trainer::EpochRecord {
            epoch,
            loss: ft / nb,
            val_rmse,
        });
    }
    model.forecast = Some(fstore);
    Ok((model, glog, flog))
}

/// One row of the prediction export.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub window: usize,
    pub horizon: usize,
    pub node: usize,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonErrors {
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub graphs: DynamicGraphSequence,
    pub test_range: std::ops::Range<usize>,
    pub predictions: Vec<PredictionRow>,
    pub model: HorizonErrors,
    pub persistence: HorizonErrors,
    pub historical_mean: HorizonErrors,
    /// Min-max scaled mean causal scores over the test steps.
    pub causal_mean: Option<Tensor>,
    pub link: Option<LinkEvalReport>,
    pub metrics: MetricsReport,
    pub baselines: MetricsReport,
}

fn horizon_errors(rows: &[(usize, f64, f64)], horizon: usize) -> HorizonErrors {
    let mut se = vec![0.0; horizon];
    let mut ae = vec![0.0; horizon];
    let mut count = vec![0usize; horizon];
    for &(h, p, a) in rows {
        se[h] += (p - a) * (p - a);
        ae[h] += (p - a).abs();
        count[h] += 1;
    }
    HorizonErrors {
        rmse: (0..horizon).map(|h| (se[h] / count[h].max(1) as f64).sqrt()).collect(),
        mae: (0..horizon).map(|h| ae[h] / count[h].max(1) as f64).collect(),
    }
}

/// Scores a trained model on the test split of `raw`.
pub fn evaluate(
    model: &TrainedModel,
    raw: &TimeSeriesDataset,
    truth: Option<&Graph>,
    threshold: f64,
    include_diagonal: bool,
) -> Result<Evaluation> {
    let ds = prepare(raw)?;
    if ds.n_nodes != model.stats.n_nodes || ds.features != model.stats.features {
        return Err(Error::Data(format!(
            "dataset has {} nodes x {} features, model expects {} x {}",
            ds.n_nodes, ds.features, model.stats.n_nodes, model.stats.features
        )));
    }
    let fstore = model
        .forecast
        .as_ref()
        .ok_or_else(|| Error::Model("model has no forecaster; run the forecast stage first".into()))?;
    let norm = model.stats.apply(&ds);
    let graphs = model.graph.graphs(&norm, 0..norm.steps)?;
    let laps = model.laplacians(&graphs, norm.steps);
    let splits: Splits = norm.splits();
    let (p, h, k) = (model.p, model.horizon, model.target_feature);
    let test = data::window_starts(splits.range(Split::Test), p, h)?;
    let preds = trainer::forecast_windows(fstore, &norm, &laps, &test, p, h)?;

    let n = ds.n_nodes;
    let train_mean: Vec<f64> = (0..n)
        .map(|i| (0..splits.train_end).map(|t| ds.value(t, i, k)).sum::<f64>() / splits.train_end.max(1) as f64)
        .collect();
    let mut rows = Vec::new();
    let (mut m_rows, mut p_rows, mut h_rows) = (Vec::new(), Vec::new(), Vec::new());
    for (&s, (pred, _)) in test.iter().zip(&preds) {
        for hh in 0..h {
            for i in 0..n {
                let predicted = model.stats.denormalize_value(i, k, pred.get(i, hh));
                let actual = ds.value(s + p + hh, i, k);
                rows.push(PredictionRow {
                    window: s,
                    horizon: hh + 1,
                    node: i,
                    predicted,
                    actual,
                });
                m_rows.push((hh, predicted, actual));
                p_rows.push((hh, ds.value(s + p - 1, i, k), actual));
                h_rows.push((hh, train_mean[i], actual));
            }
        }
    }
    let model_err = horizon_errors(&m_rows, h);
    let persistence = horizon_errors(&p_rows, h);
    let historical_mean = horizon_errors(&h_rows, h);

    let test_range = splits.range(Split::Test);
    let causal_mean = graphs.mean_causal(test_range.clone()).map(|m| diffusion::minmax_scale_offdiag(&m));
    let link = match (&causal_mean, truth, &model.edge_split) {
        (Some(scores), Some(g), _) => Some(metrics::link_eval(
            scores,
            LinkTarget::Truth {
                graph: g,
                include_diagonal,
            },
            threshold,
        )?),
        (Some(scores), None, Some(split)) if !split.held_out_edges.is_empty() && !split.negative_samples.is_empty() => {
            Some(metrics::link_eval(scores, LinkTarget::Split(split), threshold)?)
        }
        _ => None,
    };

    let mut report = MetricsReport::default();
    let mut baselines = MetricsReport::default();
    for hh in 0..h {
        report.insert(format!("rmse_h{}", hh + 1), model_err.rmse[hh]);
        report.insert(format!("mae_h{}", hh + 1), model_err.mae[hh]);
        baselines.insert(format!("persistence_rmse_h{}", hh + 1), persistence.rmse[hh]);
        baselines.insert(format!("persistence_mae_h{}", hh + 1), persistence.mae[hh]);
        baselines.insert(format!("mean_rmse_h{}", hh + 1), historical_mean.rmse[hh]);
        baselines.insert(format!("mean_mae_h{}", hh + 1), historical_mean.mae[hh]);
    }
    if let Some(l) = &link {
        report.add_link(l);
    }
    Ok(Evaluation {
        graphs,
        test_range,
        predictions: rows,
        model: model_err,
        persistence,
        historical_mean,
        causal_mean,
        link,
        metrics: report,
        baselines,
    })
}

pub struct PipelineOutput {
    pub model: TrainedModel,
    pub graph_log: TrainLog,
    pub forecast_log: TrainLog,
    pub eval: Evaluation,
}

/// Both stages (sequential, or interleaved with `joint`) followed by test
/// evaluation.
pub fn run_pipeline(raw: &TimeSeriesDataset, truth: Option<&Graph>, cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let (model, graph_log, forecast_log) = if cfg.joint {
        train_joint(raw, cfg)?
    } else {
        let (mut model, glog) = train_graph(raw, cfg)?;
        let flog = train_forecast(&mut model, raw, cfg)?;
        (model, glog, flog)
    };
    let eval = evaluate(&model, raw, truth, cfg.threshold, cfg.include_diagonal)?;
    Ok(PipelineOutput {
        model,
        graph_log,
        forecast_log,
        eval,
    })
}

/// Marks `dir` as holding partial output until [`finish_outputs`] runs.
pub fn begin_outputs(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(INCOMPLETE), b"")?;
    Ok(())
}

pub fn finish_outputs(dir: &Path) -> Result<()> {
    match std::fs::remove_file(dir.join(INCOMPLETE)) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e.into()),
    }
}

/// Long-format causal and transition graphs for steps in `range`.
pub fn graphs_csv(graphs: &DynamicGraphSequence, range: std::ops::Range<usize>) -> String {
    let mut s = String::from("t,i,j,causal_score,transition_weight\n");
    for ((&t, c), a) in graphs.steps.iter().zip(&graphs.causal).zip(&graphs.transition) {
        if !range.contains(&t) {
            continue;
        }
        let n = c.rows();
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(s, "{t},{i},{j},{},{}", c.get(i, j), a.get(i, j));
            }
        }
    }
    s
}

pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut s = String::from("window,horizon,node,predicted,actual\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.window, r.horizon, r.node, r.predicted, r.actual);
    }
    s
}

pub fn horizons_csv(e: &Evaluation) -> String {
    let mut s = String::from("horizon,rmse,mae,persistence_rmse,mean_rmse\n");
    for h in 0..e.model.rmse.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            h + 1,
            e.model.rmse[h],
            e.model.mae[h],
            e.persistence.rmse[h],
            e.historical_mean.rmse[h]
        );
    }
    s
}

pub fn roc_csv(r: &LinkEvalReport) -> String {
    let mut s = String::from("threshold,precision,recall,f1,fpr\n");
    for c in &r.curve {
        let _ = writeln!(s, "{},{},{},{},{}", c.threshold, c.precision, c.recall, c.f1, c.fpr);
    }
    s
}

/// Evaluation artifacts: metrics, baselines, graphs, predictions, curves.
pub fn write_evaluation(e: &Evaluation, dir: &Path) -> Result<()> {
    e.metrics.write(&dir.join("metrics.json"))?;
    e.baselines.write(&dir.join("baselines.json"))?;
    write_atomic(&dir.join("graphs.csv"), graphs_csv(&e.graphs, e.test_range.clone()).as_bytes())?;
    write_atomic(&dir.join("predictions.csv"), predictions_csv(&e.predictions).as_bytes())?;
    write_atomic(&dir.join("horizons.csv"), horizons_csv(e).as_bytes())?;
    if let Some(c) = &e.causal_mean {
        graphs::write_matrix_csv(&dir.join("causal_scores.csv"), c)?;
    }
    if let Some(l) = &e.link {
        write_atomic(&dir.join("roc.csv"), roc_csv(l).as_bytes())?;
    }
    Ok(())
}

/// Model file and the learned cross-covariance.
pub fn write_model(model: &TrainedModel, dir: &Path) -> Result<()> {
    model.save(&dir.join(MODEL_FILE))?;
    graphs::write_matrix_csv(&dir.join("sigma.csv"), &model.graph.diffusion.effective())
}

pub fn write_pipeline(out: &PipelineOutput, dir: &Path) -> Result<()> {
    write_model(&out.model, dir)?;
    out.graph_log.write(&dir.join("graph_log.csv"))?;
    out.forecast_log.write(&dir.join("forecast_log.csv"))?;
    write_evaluation(&out.eval, dir)
}
