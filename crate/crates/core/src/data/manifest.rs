//! `dataset.ini` manifests and signal CSV files.
//!
//! A manifest is UTF-8 `key = value` lines; `#` starts a comment line.
//! Recognized keys are `nodes`, `sampling_minutes`, `adjacency` (a path or
//! `none`), `features` (semicolon-separated CSV paths, relative to the
//! manifest) and `target`. Other keys are preserved verbatim.
//!
//! Each feature CSV has a `time,<node_0>,...` header and one row per step.
//! An empty cell marks a missing value.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graphs::Graph;

use super::TimeSeriesDataset;

pub const MANIFEST: &str = "dataset.ini";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub nodes: usize,
    pub sampling_minutes: f64,
    pub adjacency: Option<PathBuf>,
    pub features: Vec<PathBuf>,
    pub target: usize,
    /// Unrecognized keys, in file order.
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let (mut nodes, mut minutes, mut adjacency, mut features, mut target) = (None, None, None, None, None);
        let mut extra = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key = value, got {trimmed:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "nodes" => nodes = Some(value.parse::<usize>().map_err(|e| err(line, format!("nodes: {e}")))?),
                "sampling_minutes" => {
                    minutes = Some(value.parse::<f64>().map_err(|e| err(line, format!("sampling_minutes: {e}")))?)
                }
                "adjacency" => {
                    adjacency = Some(if value.eq_ignore_ascii_case("none") || value.is_empty() {
                        None
                    } else {
                        Some(PathBuf::from(value))
                    })
                }
                "features" => {
                    let list: Vec<PathBuf> = value
                        .split(';')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(PathBuf::from)
                        .collect();
                    if list.is_empty() {
                        return Err(err(line, "features list is empty".into()));
                    }
                    features = Some(list);
                }
                "target" => target = Some(value.parse::<usize>().map_err(|e| err(line, format!("target: {e}")))?),
                _ => extra.push((key.to_string(), value.to_string())),
            }
        }
        let missing = |k: &str| err(0, format!("missing key {k}"));
        let features: Vec<PathBuf> = features.ok_or_else(|| missing("features"))?;
        let target = target.unwrap_or(0);
        if target >= features.len() {
            return Err(err(0, format!("target {target} but only {} feature files", features.len())));
        }
        Ok(Self {
            nodes: nodes.ok_or_else(|| missing("nodes"))?,
            sampling_minutes: minutes.unwrap_or(5.0),
            adjacency: adjacency.flatten(),
            features,
            target,
            extra,
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("nodes = {}\n", self.nodes));
        s.push_str(&format!("sampling_minutes = {}\n", self.sampling_minutes));
        match &self.adjacency {
            Some(p) => s.push_str(&format!("adjacency = {}\n", p.display())),
            None => s.push_str("adjacency = none\n"),
        }
        let feats: Vec<String> = self.features.iter().map(|p| p.display().to_string()).collect();
        s.push_str(&format!("features = {}\n", feats.join(";")));
        s.push_str(&format!("target = {}\n", self.target));
        for (k, v) in &self.extra {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

/// Signal CSV contents: time labels, node ids and a `T x n` value grid with
/// `NaN` for missing cells.
pub struct SignalTable {
    pub times: Vec<String>,
    pub node_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn read_signal_csv(path: &Path) -> Result<SignalTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "header needs a time column and at least one node".into(),
        });
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected {} cells, found {}", header.len(), rec.len()),
            });
        }
        times.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|cell| {
                if cell.is_empty() {
                    Ok(f64::NAN)
                } else {
                    cell.parse::<f64>().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        msg: format!("non-numeric cell {cell:?}"),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    Ok(SignalTable {
        times,
        node_ids,
        values,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Accepts either a manifest file or a directory containing `dataset.ini`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

/// Loads a dataset from its manifest. Without an adjacency file the dataset
/// carries no graph and [`TimeSeriesDataset::predefined_graph`] falls back to
/// the identity.
pub fn load_dataset(path: &Path) -> Result<TimeSeriesDataset> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path)?;
    let manifest = Manifest::parse(&text, &path)?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut tables = Vec::with_capacity(manifest.features.len());
    for f in &manifest.features {
        let fp = resolve(base, f);
        let table = read_signal_csv(&fp)?;
        if table.node_ids.len() != manifest.nodes {
            return Err(Error::Parse {
                path: fp,
                line: 1,
                msg: format!("manifest declares {} nodes, header has {}", manifest.nodes, table.node_ids.len()),
            });
        }
        tables.push((fp, table));
    }
    let steps = tables[0].1.values.len();
    for (fp, t) in &tables[1..] {
        if t.values.len() != steps {
            return Err(Error::Parse {
                path: fp.clone(),
                line: t.values.len() + 1,
                msg: format!("feature file has {} rows, expected {steps}", t.values.len()),
            });
        }
    }

    let (n, f) = (manifest.nodes, tables.len());
    let mut values = vec![0.0; steps * n * f];
    for (k, (_, table)) in tables.iter().enumerate() {
        for (t, row) in table.values.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                values[(t * n + i) * f + k] = *v;
            }
        }
    }

    let adjacency = match &manifest.adjacency {
        Some(p) => {
            let g = Graph::read_csv(&resolve(base, p))?;
            if g.n_nodes() != n {
                return Err(Error::Parse {
                    path: resolve(base, p),
                    line: 1,
                    msg: format!("adjacency is {}x{}, manifest declares {n} nodes", g.n_nodes(), g.n_nodes()),
                });
            }
            Some(g)
        }
        None => None,
    };

    let (_, first) = tables.swap_remove(0);
    Ok(TimeSeriesDataset {
        steps,
        n_nodes: n,
        features: f,
        values,
        target_feature: manifest.target,
        adjacency,
        node_ids: first.node_ids,
        times: first.times,
        sampling_minutes: manifest.sampling_minutes,
        extra: manifest.extra,
    })
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Writes `ds` as a manifest plus one CSV per feature (and the adjacency, if
/// any) under `dir`.
pub fn write_dataset(ds: &TimeSeriesDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut features = Vec::with_capacity(ds.features);
    for k in 0..ds.features {
        let name = if ds.features == 1 {
            "signals.csv".to_string()
        } else {
            format!("feature_{k}.csv")
        };
        let mut out = String::from("time");
        for id in &ds.node_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for t in 0..ds.steps {
            out.push_str(&ds.times[t]);
            for i in 0..ds.n_nodes {
                out.push(',');
                out.push_str(&fmt_cell(ds.value(t, i, k)));
            }
            out.push('\n');
        }
        crate::io::write_atomic(&dir.join(&name), out.as_bytes())?;
        features.push(PathBuf::from(name));
    }
    let adjacency = match &ds.adjacency {
        Some(g) => {
            g.write_csv(&dir.join("adjacency.csv"))?;
            Some(PathBuf::from("adjacency.csv"))
        }
        None => None,
    };
    let manifest = Manifest {
        nodes: ds.n_nodes,
        sampling_minutes: ds.sampling_minutes,
        adjacency,
        features,
        target: ds.target_feature,
        extra: ds.extra.clone(),
    };
    crate::io::write_atomic(&dir.join(MANIFEST), manifest.render().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let text = "# comment\nnodes = 3\nsampling_minutes = 5\nadjacency = adj.csv\nfeatures = a.csv; b.csv\ntarget = 1\nnoise_lambda = 3\n";
        let m = Manifest::parse(text, Path::new("x.ini")).unwrap();
        assert_eq!(m.nodes, 3);
        assert_eq!(m.features, vec![PathBuf::from("a.csv"), PathBuf::from("b.csv")]);
        assert_eq!(m.extra, vec![("noise_lambda".to_string(), "3".to_string())]);
        assert_eq!(Manifest::parse(&m.render(), Path::new("x.ini")).unwrap(), m);
    }

    #[test]
    fn manifest_errors_carry_line() {
        let err = Manifest::parse("nodes = 3\nbogus line\n", Path::new("m.ini")).unwrap_err();
        assert!(err.to_string().contains("m.ini:2"), "{err}");
        let err = Manifest::parse("nodes = 3\nfeatures = a.csv\ntarget = 4\n", Path::new("m.ini")).unwrap_err();
        assert!(err.to_string().contains("target"), "{err}");
    }
}
