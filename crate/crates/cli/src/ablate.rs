//! Ablation grids: every cell of every family is trained and evaluated for
//! each seed, and summarised as mean with min–max spread.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use hoi_core::nn::derive_rng;

use crate::config::{read_table, set_dotted, RunConfig, Task};
use crate::error::{CliError, CliResult};
use crate::report::{fmt_metric, out_root, write_csv, write_jsonl, VERSION};
use crate::run::{eval_seed, metric_names, train_seed};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Family {
    pub name: String,
    /// Config key to the values it takes; cells are the cartesian product.
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    /// Base run config, relative to the grid file.
    #[serde(default)]
    pub base_config: Option<String>,
    /// Inline base run config.
    #[serde(default)]
    pub base: Option<toml::Table>,
    /// Overrides applied to the base before the axes.
    #[serde(default)]
    pub set: BTreeMap<String, toml::Value>,
    pub family: Vec<Family>,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub family: String,
    pub label: String,
    /// `Err` holds the reason the cell's config was rejected.
    pub config: Result<RunConfig, String>,
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub name: String,
    pub task: Task,
    pub cells: Vec<Cell>,
}

fn show(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Grid {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let file: GridFile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = match (&file.base_config, &file.base) {
            (Some(rel), None) => read_table(&path.parent().unwrap_or(Path::new(".")).join(rel))?,
            (None, Some(t)) => t.clone(),
            _ => return Err(CliError::Config("grid needs exactly one of base_config and [base]".into())),
        };
        Self::from_parts(base, &file.set, &file.family)
    }

    pub fn from_parts(mut base: toml::Table, set: &BTreeMap<String, toml::Value>, families: &[Family]) -> CliResult<Self> {
        for (k, v) in set {
            set_dotted(&mut base, k, v.clone())?;
        }
        let root = RunConfig::from_table(base.clone())?;
        if families.is_empty() {
            return Err(CliError::Config("grid has no [[family]]".into()));
        }
        let mut cells = Vec::new();
        for fam in families {
            if fam.axes.is_empty() || fam.axes.values().any(Vec::is_empty) {
                return Err(CliError::Config(format!("family {} has an empty axis", fam.name)));
            }
            let mut combos: Vec<Vec<(&String, &toml::Value)>> = vec![Vec::new()];
            for (k, vals) in &fam.axes {
                combos = combos
                    .into_iter()
                    .flat_map(|c| {
                        vals.iter().map(move |v| {
                            let mut c = c.clone();
                            c.push((k, v));
                            c
                        })
                    })
                    .collect();
            }
            for combo in combos {
                let label = combo.iter().map(|(k, v)| format!("{k}={}", show(v))).collect::<Vec<_>>().join(", ");
                let slug = combo.iter().map(|(k, v)| format!("{k}-{}", show(v))).collect::<Vec<_>>().join("_");
                let mut t = base.clone();
                let name = toml::Value::String(format!("{}/{}/{slug}", root.name, fam.name));
                let config = combo
                    .iter()
                    .try_for_each(|(k, v)| set_dotted(&mut t, k, (*v).clone()))
                    .and_then(|_| {
                        t.insert("name".into(), name);
                        RunConfig::from_table(t)
                    })
                    .map_err(|e| e.to_string());
                cells.push(Cell {
                    family: fam.name.clone(),
                    label,
                    config,
                });
            }
        }
        Ok(Self {
            name: root.name,
            task: root.task,
            cells,
        })
    }

    /// `(cell index, seed)` for every run, in definition order.
    pub fn jobs(&self) -> Vec<(usize, u64)> {
        self.cells
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                let seeds = c.config.as_ref().map(|c| c.seeds.clone()).unwrap_or_else(|_| vec![0]);
                seeds.into_iter().map(move |s| (i, s))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub family: String,
    pub cell: String,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub version: String,
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub kind: String,
    pub family: String,
    pub cell: String,
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub version: String,
    pub failed: usize,
    pub metrics: BTreeMap<String, Spread>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub runs: Vec<RunRecord>,
    pub cells: Vec<CellSummary>,
}

fn run_cell(cfg: &RunConfig, seed: u64, fresh: bool) -> CliResult<BTreeMap<String, f64>> {
    train_seed(cfg, seed, !fresh, None)?;
    Ok(eval_seed(cfg, seed, false)?.metrics)
}

/// Runs every job; failures are recorded per run and the grid continues.
/// `shuffle` permutes the execution order only.
pub fn run_grid(grid: &Grid, shuffle: Option<u64>, fresh: bool, mut progress: impl FnMut(&RunRecord)) -> GridReport {
    let mut jobs = grid.jobs();
    if let Some(s) = shuffle {
        jobs.shuffle(&mut derive_rng(s, &[0xAB1A7E]));
    }
    let mut done: BTreeMap<(usize, u64), RunRecord> = BTreeMap::new();
    for (ci, seed) in jobs {
        let cell = &grid.cells[ci];
        let (hash, result) = match &cell.config {
            Ok(cfg) => (Some(cfg.hash()), run_cell(cfg, seed, fresh).map_err(|e| e.to_string())),
            Err(e) => (None, Err(e.clone())),
        };
        let rec = RunRecord {
            kind: "ablate_run".into(),
            family: cell.family.clone(),
            cell: cell.label.clone(),
            seed,
            config_hash: hash,
            version: VERSION.into(),
            error: result.as_ref().err().cloned(),
            metrics: result.unwrap_or_default(),
        };
        progress(&rec);
        done.insert((ci, seed), rec);
    }
    let runs: Vec<RunRecord> = done.into_values().collect();
    let cells = grid
        .cells
        .iter()
        .map(|c| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.family == c.family && r.cell == c.label).collect();
            let ok: Vec<&&RunRecord> = mine.iter().filter(|r| r.error.is_none()).collect();
            let metrics = metric_names(grid.task)
                .iter()
                .filter_map(|name| {
                    let v: Vec<f64> = ok.iter().filter_map(|r| r.metrics.get(*name).copied()).collect();
                    (!v.is_empty()).then(|| {
                        let spread = Spread {
                            mean: v.iter().sum::<f64>() / v.len() as f64,
                            min: v.iter().copied().fold(f64::INFINITY, f64::min),
                            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                            n: v.len(),
                        };
                        (name.to_string(), spread)
                    })
                })
                .collect();
            CellSummary {
                kind: "ablate_cell".into(),
                family: c.family.clone(),
                cell: c.label.clone(),
                config_hash: c.config.as_ref().ok().map(RunConfig::hash),
                seeds: mine.iter().map(|r| r.seed).collect(),
                version: VERSION.into(),
                failed: mine.len() - ok.len(),
                metrics,
            }
        })
        .collect();
    GridReport { runs, cells }
}

/// One markdown table per family.
pub fn tables(task: Task, report: &GridReport) -> String {
    let names = metric_names(task);
    let mut out = String::new();
    let mut families: Vec<&str> = report.cells.iter().map(|c| c.family.as_str()).collect();
    families.dedup();
    for fam in families {
        out.push_str(&format!("## {fam}\n\n| cell | runs | {} |\n|---|---|{}\n", names.join(" | "), "---|".repeat(names.len())));
        for c in report.cells.iter().filter(|c| c.family == fam) {
            let ok = c.seeds.len() - c.failed;
            let cols: Vec<String> = names
                .iter()
                .map(|n| {
                    c.metrics.get(*n).map_or_else(
                        || "-".to_string(),
                        |s| format!("{} [{}, {}]", fmt_metric(s.mean), fmt_metric(s.min), fmt_metric(s.max)),
                    )
                })
                .collect();
            out.push_str(&format!("| {} | {ok}/{} | {} |\n", c.cell, c.seeds.len(), cols.join(" | ")));
        }
        out.push('\n');
    }
    out
}

/// Writes `ablate_runs.jsonl`, `ablate.jsonl`, `ablate.md` and one CSV per
/// family under the grid's run directory.
pub fn write_reports(grid: &Grid, report: &GridReport) -> CliResult<PathBuf> {
    let dir = out_root().join(&grid.name);
    write_jsonl(&dir.join("ablate_runs.jsonl"), &report.runs)?;
    write_jsonl(&dir.join("ablate.jsonl"), &report.cells)?;
    let md = tables(grid.task, report);
    hoi_core::archive::write_atomic(&dir.join("ablate.md"), md.as_bytes())?;
    let names = metric_names(grid.task);
    let mut header: Vec<String> = vec!["cell".into(), "runs".into(), "failed".into()];
    for n in names {
        header.extend([format!("{n}_mean"), format!("{n}_min"), format!("{n}_max")]);
    }
    let mut families: Vec<&str> = report.cells.iter().map(|c| c.family.as_str()).collect();
    families.dedup();
    for fam in families {
        let rows: Vec<Vec<String>> = report
            .cells
            .iter()
            .filter(|c| c.family == fam)
            .map(|c| {
                let mut r = vec![c.cell.clone(), c.seeds.len().to_string(), c.failed.to_string()];
                for n in names {
                    match c.metrics.get(*n) {
                        Some(s) => r.extend([s.mean, s.min, s.max].map(|v| format!("{v:.6}"))),
                        None => r.extend(std::iter::repeat_n(String::new(), 3)),
                    }
                }
                r
            })
            .collect();
        write_csv(&dir.join(format!("ablate_{fam}.csv")), &header, &rows)?;
    }
    Ok(dir)
}
