use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::train;
use crate::cli::{parse_flat, TrainConfig};
use crate::datapipe::{ItemTable, SampleSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    /// Vary one key at a time around the base configuration.
    OneFactor,
    Cartesian,
}

/// Candidate values per configuration key, kept as text and applied through
/// [`TrainConfig::set`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub axes: Vec<(String, Vec<String>)>,
    pub mode: GridMode,
}

impl GridSpec {
    /// The published search grids.
    pub fn table1() -> Self {
        let axis = |k: &str, vs: &[&str]| (k.to_string(), vs.iter().map(|v| v.to_string()).collect());
        let dropouts = ["0", "0.1", "0.2", "0.3", "0.4"];
        Self {
            axes: vec![
                axis("learning_rate", &["1e-3", "5e-4", "5e-5", "1e-5"]),
                axis("embedding_dim", &["16", "32", "64", "128"]),
                axis("transformer_dropout", &dropouts),
                axis("cross_net_dropout", &dropouts),
                axis("k", &["0", "2", "4", "8", "16", "24"]),
            ],
            mode: GridMode::OneFactor,
        }
    }

    /// `key = v1, v2, …` lines plus an optional `mode = one_factor | cartesian`.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut spec = Self {
            axes: Vec::new(),
            mode: GridMode::OneFactor,
        };
        let mut probe = TrainConfig::default();
        for (line, key, value) in parse_flat(path, text)? {
            let at = |m: String| Error::Config(format!("{}:{line}: {m}", path.display()));
            if key == "mode" {
                spec.mode = match value.as_str() {
                    "one_factor" => GridMode::OneFactor,
                    "cartesian" => GridMode::Cartesian,
                    other => return Err(at(format!("unknown grid mode `{other}`"))),
                };
                continue;
            }
            // list-valued keys cannot be swept, since `,` separates candidates
            if key == "deep_hidden" || key == "head_hidden" {
                return Err(at(format!("`{key}` cannot be swept")));
            }
            let values: Vec<String> = value.split(',').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(at(format!("empty candidate in `{key}`")));
            }
            for v in &values {
                probe.set(&key, v).map_err(at)?;
            }
            spec.axes.push((key, values));
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    /// The trial list, in a fixed order.
    pub fn trials(&self, base: &TrainConfig) -> Result<Vec<Trial>> {
        if self.axes.is_empty() || self.axes.iter().any(|(_, v)| v.is_empty()) {
            return Err(Error::Config("grid has no candidate values".into()));
        }
        let settings: Vec<Vec<(String, String)>> = match self.mode {
            GridMode::OneFactor => self
                .axes
                .iter()
                .flat_map(|(k, vs)| vs.iter().map(move |v| vec![(k.clone(), v.clone())]))
                .collect(),
            GridMode::Cartesian => self.axes.iter().fold(vec![Vec::new()], |acc, (k, vs)| {
                acc.iter()
                    .flat_map(|prefix| {
                        vs.iter().map(move |v| {
                            let mut s = prefix.clone();
                            s.push((k.clone(), v.clone()));
                            s
                        })
                    })
                    .collect()
            }),
        };
        settings
            .into_iter()
            .enumerate()
            .map(|(index, overrides)| {
                let mut config = base.clone();
                for (k, v) in &overrides {
                    config.set(k, v).map_err(Error::Config)?;
                }
                Ok(Trial {
                    index,
                    overrides,
                    config,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub overrides: Vec<(String, String)>,
    pub config: TrainConfig,
}

impl Trial {
    pub fn label(&self) -> String {
        self.overrides
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialStatus {
    Completed {
        best_val_auc: f64,
        val_logloss: f64,
        best_epoch: usize,
        epochs: usize,
    },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: Trial,
    pub status: TrialStatus,
}

impl TrialResult {
    pub fn auc(&self) -> Option<f64> {
        match self.status {
            TrialStatus::Completed { best_val_auc, .. } => Some(best_val_auc),
            TrialStatus::Failed(_) => None,
        }
    }
}

/// Runs every trial, possibly concurrently, and ranks them by best validation
/// AUC (failed trials last, ties by trial index). A failing trial never
/// aborts the sweep.
pub fn grid_search(
    grid: &GridSpec,
    base: &TrainConfig,
    items: &ItemTable,
    train_set: &SampleSet,
    val_set: &SampleSet,
) -> Result<Vec<TrialResult>> {
    let trials = grid.trials(base)?;
    let mut results: Vec<TrialResult> = trials
        .into_par_iter()
        .map(|trial| {
            let status = match trial.config.validate().and_then(|_| train(&trial.config, items, train_set, val_set, &mut |_| {})) {
                Ok(out) => TrialStatus::Completed {
                    best_val_auc: out.best_val.auc,
                    val_logloss: out.best_val.logloss,
                    best_epoch: out.best_epoch,
                    epochs: out.history.len(),
                },
                Err(e) => TrialStatus::Failed(e.to_string()),
            };
            TrialResult { trial, status }
        })
        .collect();
    results.sort_by(|a, b| match (a.auc(), b.auc()) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.trial.index.cmp(&b.trial.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.trial.index.cmp(&b.trial.index),
    });
    Ok(results)
}

pub const GRID_HEADER: &str = "rank\ttrial\tsettings\tstatus\tval_auc\tval_logloss\tbest_epoch\tepochs\tnote";

pub fn format_grid_tsv(results: &[TrialResult]) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for (rank, r) in results.iter().enumerate() {
        let _ = write!(out, "{}\t{}\t{}\t", rank + 1, r.trial.index, r.trial.label());
        let _ = match &r.status {
            TrialStatus::Completed {
                best_val_auc,
                val_logloss,
                best_epoch,
                epochs,
            } => writeln!(out, "ok\t{best_val_auc}\t{val_logloss}\t{best_epoch}\t{epochs}\t"),
            TrialStatus::Failed(msg) => {
                let msg: String = msg.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
                writeln!(out, "failed\t\t\t\t\t{msg}")
            }
        };
    }
    out
}

pub fn write_grid_tsv(path: impl AsRef<Path>, results: &[TrialResult]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_grid_tsv(results)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_one_factor_has_24_trials() {
        let trials = GridSpec::table1().trials(&TrainConfig::default()).unwrap();
        assert_eq!(trials.len(), 4 + 4 + 5 + 5 + 6);
        assert_eq!(trials[0].config.learning_rate, 1e-3);
        assert_eq!(trials[23].config.k, 24);
        assert_eq!(trials[23].config.embedding_dim, 64);
    }

    #[test]
    fn cartesian_and_parse() {
        let g = GridSpec::parse(Path::new("g"), "mode = cartesian\nk = 0, 2\nlearning_rate = 1e-3,1e-4,1e-5\n").unwrap();
        let t = g.trials(&TrainConfig::default()).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t[5].label(), "k=2;learning_rate=1e-5");
        assert!(GridSpec::parse(Path::new("g"), "depth = 1,2\n").is_err());
        assert!(GridSpec::parse(Path::new("g"), "k = 1,,2\n").is_err());
        let empty = GridSpec::parse(Path::new("g"), "# nothing\n").unwrap();
        assert!(empty.trials(&TrainConfig::default()).is_err());
    }

    #[test]
    fn tsv_layout() {
        let trial = |i: usize| Trial {
            index: i,
            overrides: vec![("k".into(), i.to_string())],
            config: TrainConfig::default(),
        };
        let rows = vec![
            TrialResult {
                trial: trial(1),
                status: TrialStatus::Completed { best_val_auc: 0.7, val_logloss: 0.6, best_epoch: 2, epochs: 4 },
            },
            TrialResult { trial: trial(0), status: TrialStatus::Failed("diverged\tat 1".into()) },
        ];
        let text = format_grid_tsv(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], GRID_HEADER);
        assert_eq!(lines[1], "1\t1\tk=1\tok\t0.7\t0.6\t2\t4\t");
        assert_eq!(lines[2], "2\t0\tk=0\tfailed\t\t\t\t\tdiverged at 1");
        assert!(lines.iter().all(|l| l.split('\t').count() == 9));
    }
}
