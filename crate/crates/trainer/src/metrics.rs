//! Per-epoch metrics, CSV files and scaling summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TrainError;

pub const METRICS_HEADER: [&str; 9] = [
    "run_id",
    "world_size",
    "rank",
    "epoch",
    "compute_s",
    "comm_s",
    "total_s",
    "loss",
    "accuracy",
];

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub run_id: String,
    pub world_size: usize,
    pub rank: usize,
    pub epoch: usize,
    pub compute_s: f64,
    pub comm_s: f64,
    pub total_s: f64,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<(), TrainError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(TrainError::Usage(format!(
            "{} has header {header:?}, expected {METRICS_HEADER:?}",
            path.display()
        )));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Aggregate of one run (all ranks, all epochs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub world_size: usize,
    pub epochs: usize,
    /// Mean over epochs of the slowest rank's epoch time.
    pub mean_epoch_s: f64,
    pub mean_compute_s: f64,
    pub mean_comm_s: f64,
    /// Total comm time over total epoch time, all ranks pooled.
    pub comm_fraction: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Groups rows by run id (in first-seen order) and summarizes each run.
pub fn summarize_runs(rows: &[EpochMetrics]) -> Vec<RunSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_run: BTreeMap<&str, Vec<&EpochMetrics>> = BTreeMap::new();
    for r in rows {
        let e = by_run.entry(&r.run_id).or_default();
        if e.is_empty() {
            order.push(&r.run_id);
        }
        e.push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let rs = &by_run[id];
            let mut epoch_time: BTreeMap<usize, f64> = BTreeMap::new();
            for r in rs {
                let t = epoch_time.entry(r.epoch).or_insert(0.0);
                *t = t.max(r.total_s);
            }
            let n = rs.len() as f64;
            let total: f64 = rs.iter().map(|r| r.total_s).sum();
            let comm: f64 = rs.iter().map(|r| r.comm_s).sum();
            let last = rs
                .iter()
                .max_by_key(|r| (r.epoch, std::cmp::Reverse(r.rank)))
                .expect("non-empty");
            RunSummary {
                run_id: id.to_string(),
                world_size: rs[0].world_size,
                epochs: epoch_time.len(),
                mean_epoch_s: epoch_time.values().sum::<f64>() / epoch_time.len() as f64,
                mean_compute_s: rs.iter().map(|r| r.compute_s).sum::<f64>() / n,
                mean_comm_s: comm / n,
                comm_fraction: if total > 0.0 { comm / total } else { 0.0 },
                final_loss: last.loss,
                final_accuracy: last.accuracy,
            }
        })
        .collect()
}

/// One line of a scaling table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub series: String,
    pub world_size: usize,
    pub mean_epoch_s: f64,
    pub speedup: f64,
    pub efficiency: f64,
    pub comm_fraction: f64,
    pub runs: usize,
}

/// `(world_size, mean epoch time)` pairs of one series to speedup and
/// efficiency against the world-size-1 entry.
pub fn compute_speedup(points: &[(usize, f64)]) -> Result<Vec<(usize, f64, f64)>, TrainError> {
    let base = points
        .iter()
        .find(|(w, _)| *w == 1)
        .map(|&(_, t)| t)
        .ok_or_else(|| TrainError::Usage("speedup needs a world_size 1 baseline".into()))?;
    Ok(points
        .iter()
        .map(|&(w, t)| {
            let s = base / t;
            (w, s, s / w as f64)
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub metrics: Vec<EpochMetrics>,
}

impl ScalingReport {
    /// Builds the table from raw rows. `series_of` maps a run id to its
    /// series; runs of one series and world size are averaged as repeats.
    pub fn from_metrics(
        metrics: Vec<EpochMetrics>,
        series_of: impl Fn(&str) -> String,
    ) -> Result<Self, TrainError> {
        let mut groups: BTreeMap<(String, usize), Vec<RunSummary>> = BTreeMap::new();
        let mut series_order: Vec<String> = Vec::new();
        for s in summarize_runs(&metrics) {
            let series = series_of(&s.run_id);
            if !series_order.contains(&series) {
                series_order.push(series.clone());
            }
            groups.entry((series, s.world_size)).or_default().push(s);
        }
        let mut rows = Vec::new();
        for series in series_order {
            let cells: Vec<(usize, &Vec<RunSummary>)> = groups
                .iter()
                .filter(|((s, _), _)| *s == series)
                .map(|((_, w), runs)| (*w, runs))
                .collect();
            let points: Vec<(usize, f64)> = cells
                .iter()
                .map(|(w, runs)| {
                    (
                        *w,
                        runs.iter().map(|r| r.mean_epoch_s).sum::<f64>() / runs.len() as f64,
                    )
                })
                .collect();
            let speed = compute_speedup(&points).unwrap_or_else(|_| {
                points
                    .iter()
                    .map(|&(w, _)| (w, f64::NAN, f64::NAN))
                    .collect()
            });
            for ((w, runs), ((_, t), (_, s, e))) in cells.iter().zip(points.iter().zip(speed)) {
                rows.push(ScalingRow {
                    series: series.clone(),
                    world_size: *w,
                    mean_epoch_s: *t,
                    speedup: s,
                    efficiency: e,
                    comm_fraction: runs.iter().map(|r| r.comm_fraction).sum::<f64>()
                        / runs.len() as f64,
                    runs: runs.len(),
                });
            }
        }
        Ok(Self { rows, metrics })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>5} {:>12} {:>8} {:>10} {:>10} {:>4}",
            "series", "world", "epoch_s", "speedup", "efficiency", "comm_frac", "runs"
        );
        // a series without a world-1 run has no speedup
        let num = |v: f64| {
            if v.is_finite() {
                format!("{v:.3}")
            } else {
                "-".into()
            }
        };
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>5} {:>12.3} {:>8} {:>10} {:>10.3} {:>4}",
                r.series,
                r.world_size,
                r.mean_epoch_s,
                num(r.speedup),
                num(r.efficiency),
                r.comm_fraction,
                r.runs
            );
        }
        out
    }
}

/// Writes `metrics.csv`, `summary.csv` and `summary.txt` into `dir`.
pub fn write_report(report: &ScalingReport, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), &report.metrics)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join("summary.txt"), report.table())?;
    Ok(())
}

/// Reads back what [`write_report`] wrote.
pub fn read_report(dir: &Path) -> Result<ScalingReport, TrainError> {
    let metrics = read_metrics_csv(&dir.join("metrics.csv"))?;
    let path = dir.join("summary.csv");
    let rows = if path.exists() {
        csv::Reader::from_path(path)?
            .deserialize()
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    Ok(ScalingReport { rows, metrics })
}
