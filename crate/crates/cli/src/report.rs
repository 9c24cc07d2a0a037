//! The `report` command: plot-ready series recomputed from the per-episode
//! tables of a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use tlqr_core::simulation::mean_var;

use crate::config::{load_config, ConfigError};
use crate::run::{EpisodeRow, StepTimingRow, CONFIG_FILE, EPISODES_FILE, STEP_TIMING_FILE};

pub const REPORT_DIR: &str = "report";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("results directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("no results in {dir}: {file} is missing")]
    MissingFile { dir: PathBuf, file: &'static str },
    #[error("{0} has no episode rows")]
    Empty(PathBuf),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Serialize)]
struct CostRow<'a> {
    value: f64,
    controller: usize,
    label: &'a str,
    episodes: usize,
    failures: usize,
    mean_ratio: f64,
    var_ratio: f64,
    mean_cost: f64,
    var_cost: f64,
}

#[derive(Debug, Serialize)]
struct ReplanRow<'a> {
    value: f64,
    controller: usize,
    label: &'a str,
    mean_replans: f64,
    se_replans: f64,
}

#[derive(Debug, Serialize)]
struct EffortRow<'a> {
    value: f64,
    controller: usize,
    label: &'a str,
    mean_ratio: f64,
    mean_planning_time: f64,
    total_planning_time: f64,
}

#[derive(Debug, Serialize)]
struct StepRow<'a> {
    value: f64,
    controller: usize,
    label: &'a str,
    t: usize,
    mean_planning_time: f64,
}

/// Grid points in the order they first appear in the episode table.
struct Point {
    value: f64,
    controller: usize,
    label: String,
    episodes: Vec<EpisodeRow>,
    /// Planning time summed per step and per episode.
    step_time: Vec<f64>,
    total_time: f64,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require(dir: &Path, file: &'static str) -> Result<PathBuf, ReportError> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(ReportError::MissingFile {
            dir: dir.to_path_buf(),
            file,
        })
    }
}

fn key(value: f64, controller: usize) -> (u64, usize) {
    (value.to_bits(), controller)
}

fn collect_points(dir: &Path) -> Result<Vec<Point>, ReportError> {
    let episodes_path = require(dir, EPISODES_FILE)?;
    let timing_path = require(dir, STEP_TIMING_FILE)?;
    let episodes: Vec<EpisodeRow> = read_rows(&episodes_path)?;
    if episodes.is_empty() {
        return Err(ReportError::Empty(episodes_path));
    }
    let mut points: Vec<Point> = Vec::new();
    let mut index = BTreeMap::new();
    for e in episodes {
        let k = key(e.value, e.controller);
        let i = *index.entry(k).or_insert_with(|| {
            points.push(Point {
                value: e.value,
                controller: e.controller,
                label: e.label.clone(),
                episodes: Vec::new(),
                step_time: Vec::new(),
                total_time: 0.0,
            });
            points.len() - 1
        });
        points[i].episodes.push(e);
    }
    for row in read_rows::<StepTimingRow>(&timing_path)? {
        if let Some(&i) = index.get(&key(row.value, row.controller)) {
            let p = &mut points[i];
            if p.step_time.len() <= row.t {
                p.step_time.resize(row.t + 1, 0.0);
            }
            p.step_time[row.t] += row.planning_time;
            p.total_time += row.planning_time;
        }
    }
    Ok(points)
}

/// Writes the series files into `<dir>/report` and returns their paths.
pub fn write_report(dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if !dir.is_dir() {
        return Err(ReportError::MissingDir(dir.to_path_buf()));
    }
    let config = load_config(&require(dir, CONFIG_FILE)?)?;
    let points = collect_points(dir)?;
    let axis = format!("{:?}", config.sweep.axis).to_lowercase();

    let mut cost = Vec::new();
    let mut replans = Vec::new();
    let mut effort = Vec::new();
    let mut steps = Vec::new();
    for p in &points {
        let ok: Vec<&EpisodeRow> = p.episodes.iter().filter(|e| e.failure.is_none()).collect();
        let (mean_ratio, var_ratio) = mean_var(&ok.iter().map(|e| e.ratio).collect::<Vec<_>>());
        let (mean_cost, var_cost) = mean_var(&ok.iter().map(|e| e.cost).collect::<Vec<_>>());
        let counts: Vec<f64> = ok.iter().map(|e| e.replans as f64).collect();
        let (mean_replans, var_replans) = mean_var(&counts);
        let n = p.episodes.len();
        cost.push(CostRow {
            value: p.value,
            controller: p.controller,
            label: &p.label,
            episodes: n,
            failures: n - ok.len(),
            mean_ratio,
            var_ratio,
            mean_cost,
            var_cost,
        });
        replans.push(ReplanRow {
            value: p.value,
            controller: p.controller,
            label: &p.label,
            mean_replans,
            se_replans: (var_replans / counts.len() as f64).sqrt(),
        });
        effort.push(EffortRow {
            value: p.value,
            controller: p.controller,
            label: &p.label,
            mean_ratio,
            mean_planning_time: p.total_time / n as f64,
            total_planning_time: p.total_time,
        });
        for (t, total) in p.step_time.iter().enumerate() {
            steps.push(StepRow {
                value: p.value,
                controller: p.controller,
                label: &p.label,
                t,
                mean_planning_time: total / n as f64,
            });
        }
    }

    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out).map_err(|source| ReportError::Io {
        path: out.clone(),
        source,
    })?;
    let files = [
        out.join(format!("cost_vs_{axis}.csv")),
        out.join(format!("replans_vs_{axis}.csv")),
        out.join(format!("effort_vs_{axis}.csv")),
        out.join("time_vs_step.csv"),
    ];
    write_rows(&files[0], &cost)?;
    write_rows(&files[1], &replans)?;
    write_rows(&files[2], &effort)?;
    write_rows(&files[3], &steps)?;
    Ok(files.to_vec())
}
