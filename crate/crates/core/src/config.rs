//! Run configuration and its flat `key = value` file format.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Optimization settings shared by both training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_graph: f64,
    pub lr_forecast: f64,
    pub epochs_graph: usize,
    pub epochs_forecast: usize,
    /// Windows per optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub mask_enabled: bool,
    pub reg_weight: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_graph: 0.001,
            lr_forecast: 0.0005,
            epochs_graph: 50,
            epochs_forecast: 50,
            batch: 32,
            seed: 42,
            mask_enabled: false,
            reg_weight: 1e-3,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_graph > 0.0 && self.lr_forecast > 0.0) {
            return Err(Error::Contract("learning rates must be positive".into()));
        }
        if self.epochs_graph == 0 || self.epochs_forecast == 0 || self.batch == 0 {
            return Err(Error::Contract("epochs and batch must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Contract("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Per-step transition graphs feed the forecaster.
    Dynamic,
    /// The pre-defined graph replaces every transition graph.
    Static,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub hidden1: usize,
    pub hidden2: usize,
    pub p: usize,
    pub horizon: usize,
    pub threshold: f64,
    pub temporal_kernel: usize,
    pub channels: usize,
    /// `None` means on exactly when the dataset has an adjacency.
    pub mask: Option<bool>,
    pub ablation: Ablation,
    pub joint: bool,
    pub linear_logsigma: bool,
    /// Fraction of pre-defined edges kept for training; the rest are held
    /// out for link evaluation.
    pub train_fraction: f64,
    pub include_diagonal: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            hidden1: 32,
            hidden2: 16,
            p: 60,
            horizon: 12,
            threshold: 0.5,
            temporal_kernel: 3,
            channels: 16,
            mask: None,
            ablation: Ablation::Dynamic,
            joint: false,
            linear_logsigma: false,
            train_fraction: 0.8,
            include_diagonal: false,
            out: PathBuf::from("out"),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Some(true),
        "0" | "false" | "off" | "no" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "lr_graph",
        "lr_forecast",
        "epochs_graph",
        "epochs_forecast",
        "batch",
        "seed",
        "mask",
        "reg_weight",
        "grad_clip",
        "hidden1",
        "hidden2",
        "p",
        "horizon",
        "threshold",
        "temporal_kernel",
        "channels",
        "ablation",
        "joint",
        "linear_logsigma",
        "train_fraction",
        "include_diagonal",
        "out",
    ];

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Contract(format!("invalid value {value:?} for {key}"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<usize>().map_err(|_| bad());
        let b = || parse_bool(value).ok_or_else(bad);
        match key {
            "lr_graph" => self.train.lr_graph = f()?,
            "lr_forecast" => self.train.lr_forecast = f()?,
            "epochs_graph" => self.train.epochs_graph = u()?,
            "epochs_forecast" => self.train.epochs_forecast = u()?,
            "batch" => self.train.batch = u()?,
            "seed" => self.train.seed = value.parse().map_err(|_| bad())?,
            "mask" => {
                self.mask = if value.eq_ignore_ascii_case("auto") { None } else { Some(b()?) };
            }
            "reg_weight" => self.train.reg_weight = f()?,
            "grad_clip" => self.train.grad_clip = f()?,
            "hidden1" => self.hidden1 = u()?,
            "hidden2" => self.hidden2 = u()?,
            "p" => self.p = u()?,
            "horizon" => self.horizon = u()?,
            "threshold" => self.threshold = f()?,
            "temporal_kernel" => self.temporal_kernel = u()?,
            "channels" => self.channels = u()?,
            "ablation" => {
                self.ablation = match value {
                    "dynamic" | "none" => Ablation::Dynamic,
                    "static" => Ablation::Static,
                    _ => return Err(bad()),
                }
            }
            "joint" => self.joint = b()?,
            "linear_logsigma" => self.linear_logsigma = b()?,
            "train_fraction" => self.train_fraction = f()?,
            "include_diagonal" => self.include_diagonal = b()?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Contract(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim()).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.p < 2 {
            return Err(Error::Contract(format!("p must be at least 2, got {}", self.p)));
        }
        if self.horizon == 0 || self.hidden1 == 0 || self.hidden2 == 0 || self.channels == 0 {
            return Err(Error::Contract("sizes must be positive".into()));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Contract("temporal_kernel must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Contract("threshold must lie in [0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Contract("train_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!((c.hidden1, c.hidden2, c.p, c.horizon, c.temporal_kernel), (32, 16, 60, 12, 3));
        assert_eq!(c.threshold, 0.5);
        assert_eq!((c.train.lr_graph, c.train.lr_forecast), (0.001, 0.0005));
        assert_eq!(c.mask, None);
    }

    #[test]
    fn file_overrides_and_errors() {
        let mut c = RunConfig::default();
        c.apply_text("# x\np = 10\nmask = off\nablation = static\n", Path::new("c.ini")).unwrap();
        assert_eq!((c.p, c.mask, c.ablation), (10, Some(false), Ablation::Static));
        let err = c.apply_text("hidden1 = many\n", Path::new("c.ini")).unwrap_err();
        assert!(err.to_string().contains("c.ini:1"), "{err}");
        assert!(c.set("nonsense", "1").is_err());
        for k in RunConfig::KEYS {
            let probe = match *k {
                "ablation" => "static",
                "mask" | "joint" | "linear_logsigma" | "include_diagonal" => "on",
                "out" => "dir",
                _ => "1",
            };
            c.set(k, probe).unwrap();
        }
    }
}
