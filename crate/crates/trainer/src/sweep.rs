//! World-size and batch-size sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use tracing::{info, warn};
use vitdp_core::data::ScalingMode;

use crate::config::TrainConfig;
use crate::dataset::DatasetArg;
use crate::error::TrainError;
use crate::launch::{launch_local_world, LaunchSpec};
use crate::metrics::{write_report, ScalingReport};

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub exe: PathBuf,
    pub base: TrainConfig,
    pub world_sizes: Vec<usize>,
    pub mode: ScalingMode,
    pub micro_batches: Vec<usize>,
    pub accumulations: Vec<usize>,
    pub epochs: usize,
    pub repeats: usize,
    /// Rank to multiplier; ranks beyond a cell's world size are ignored.
    pub slowdown: BTreeMap<usize, f64>,
    pub dataset: DatasetArg,
    pub samples: Option<usize>,
    pub out_dir: PathBuf,
    pub timeout: Duration,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let usage = |m: &str| Err(TrainError::Usage(m.into()));
        if self.world_sizes.is_empty() {
            return usage("sweep needs at least one world size");
        }
        if self.world_sizes.contains(&0) || self.world_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return usage("world sizes must be ≥ 1 and strictly ascending");
        }
        if self.micro_batches.is_empty() || self.accumulations.is_empty() {
            return usage("sweep needs at least one micro batch and one accumulation value");
        }
        if self.epochs == 0 || self.repeats == 0 {
            return usage("epochs and repeats must be positive");
        }
        if self
            .slowdown
            .values()
            .any(|&m| !(m >= 1.0 && m.is_finite()))
        {
            return usage("slowdown multipliers must be ≥ 1");
        }
        Ok(())
    }
}

/// Series a run id belongs to: the id with its `-w…` suffix removed.
pub fn series_of(run_id: &str) -> String {
    match run_id.rfind("-w") {
        Some(i) => run_id[..i].to_string(),
        None => run_id.to_string(),
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub report: ScalingReport,
    /// Cells that did not complete, with the reason.
    pub failed: Vec<(String, String)>,
}

/// Runs every (micro, accum, world, repeat) cell, then writes the report.
/// A failing cell is recorded and the sweep moves on.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutcome, TrainError> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;
    let mut metrics = Vec::new();
    let mut failed = Vec::new();
    for &micro in &spec.micro_batches {
        for &accum in &spec.accumulations {
            for &world in &spec.world_sizes {
                for rep in 0..spec.repeats {
                    let run_id = format!("{}-m{micro}-a{accum}-w{world}-r{rep}", spec.mode);
                    let config = TrainConfig {
                        train_batch_size: Some(micro * accum * world),
                        micro_batch_per_gpu: micro,
                        gradient_accumulation_steps: accum,
                        epochs: spec.epochs,
                        scaling_mode: spec.mode,
                        ..spec.base.clone()
                    };
                    let mut cell =
                        LaunchSpec::new(&spec.exe, world, config, spec.out_dir.join(&run_id));
                    cell.dataset = spec.dataset.clone();
                    cell.samples = spec.samples;
                    cell.slowdown = spec
                        .slowdown
                        .iter()
                        .filter(|(&r, _)| r < world)
                        .map(|(&r, &m)| (r, m))
                        .collect();
                    cell.run_id = run_id.clone();
                    cell.timeout = spec.timeout;
                    info!(run = %run_id, "sweep cell");
                    match launch_local_world(&cell) {
                        Ok(out) => metrics.extend(out.metrics),
                        Err(e) => {
                            warn!(run = %run_id, error = %e, "sweep cell failed");
                            failed.push((run_id, e.to_string()));
                        }
                    }
                }
            }
        }
    }
    let report = ScalingReport::from_metrics(metrics, series_of)?;
    write_report(&report, &spec.out_dir)?;
    if !failed.is_empty() {
        let text: String = failed
            .iter()
            .map(|(id, e)| format!("{id}\t{e}\n"))
            .collect();
        fs::write(spec.out_dir.join("failed.txt"), text)?;
    }
    Ok(SweepOutcome { report, failed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(worlds: Vec<usize>) -> SweepSpec {
        SweepSpec {
            exe: "vitdp".into(),
            base: TrainConfig::default(),
            world_sizes: worlds,
            mode: ScalingMode::Strong,
            micro_batches: vec![16],
            accumulations: vec![1],
            epochs: 1,
            repeats: 1,
            slowdown: BTreeMap::new(),
            dataset: DatasetArg::Synthetic,
            samples: None,
            out_dir: "out".into(),
            timeout: Duration::from_secs(1),
        }
    }

    #[test]
    fn world_lists_are_checked() {
        assert!(matches!(
            run_sweep(&spec(vec![])),
            Err(TrainError::Usage(_))
        ));
        assert!(spec(vec![2, 1]).validate().is_err());
        assert!(spec(vec![0, 1]).validate().is_err());
        assert!(spec(vec![1, 2, 4, 8]).validate().is_ok());
        let mut s = spec(vec![1]);
        s.slowdown.insert(0, 0.5);
        assert!(s.validate().is_err());
    }

    #[test]
    fn series_strips_world_and_repeat() {
        assert_eq!(series_of("strong-m16-a1-w4-r0"), "strong-m16-a1");
        assert_eq!(series_of("plain"), "plain");
    }
}
