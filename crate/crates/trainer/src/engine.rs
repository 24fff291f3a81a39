//! Synchronous data-parallel training loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::info;
use vitdp_collectives::{local_world, CommStats, GroupOptions, ProcessGroup};
use vitdp_core::data::{epoch_order, ShardSpec};
use vitdp_core::vit::{init_params, loss_and_grads};
use vitdp_core::{Dataset, ParamSet, ViTConfig};

use crate::config::{validate_config, DataAssignment, TrainConfig};
use crate::error::TrainError;
use crate::metrics::{write_metrics_csv, EpochMetrics};
use crate::optim::{optimizer_step, OptimizerState};

/// Samples a rank draws from, fixed for the whole run.
pub enum EpochData {
    /// This rank's shard; reshuffled locally each epoch.
    Shard(Dataset),
    /// The full dataset, split per step by [`DataAssignment::Interleaved`].
    Global(Dataset),
}

impl EpochData {
    pub fn prepare(
        cfg: &TrainConfig,
        ds: &Dataset,
        rank: usize,
        world_size: usize,
    ) -> Result<Self, TrainError> {
        Ok(match cfg.data_assignment {
            DataAssignment::Sharded => {
                let spec = ShardSpec {
                    mode: cfg.scaling_mode,
                    rank,
                    world_size,
                    weak_fraction: cfg.weak_fraction,
                    seed: cfg.seed,
                };
                EpochData::Shard(ds.select(&spec.indices(ds.len())?))
            }
            DataAssignment::Interleaved => EpochData::Global(ds.clone()),
        })
    }

    pub fn dataset(&self) -> &Dataset {
        match self {
            EpochData::Shard(d) | EpochData::Global(d) => d,
        }
    }

    /// Micro-batch index lists for one epoch, `accum` per optimizer step.
    /// Incomplete steps at the end are dropped.
    pub fn plan(
        &self,
        cfg: &TrainConfig,
        rank: usize,
        world_size: usize,
        epoch: usize,
    ) -> Vec<Vec<usize>> {
        let (m, a) = (cfg.micro_batch_per_gpu, cfg.gradient_accumulation_steps);
        match self {
            EpochData::Shard(d) => {
                let order = epoch_order(d.len(), cfg.seed, epoch as u64);
                let steps = d.len() / m / a;
                order
                    .chunks_exact(m)
                    .take(steps * a)
                    .map(<[usize]>::to_vec)
                    .collect()
            }
            EpochData::Global(d) => {
                let order = epoch_order(d.len(), cfg.seed, epoch as u64);
                let steps = d.len() / (m * a * world_size);
                (0..steps * a)
                    .map(|i| {
                        let off = (i * world_size + rank) * m;
                        order[off..off + m].to_vec()
                    })
                    .collect()
            }
        }
    }
}

/// Everything a rank carries between epochs.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: ViTConfig,
    pub params: ParamSet<f32>,
    pub opt: OptimizerState,
    pub run_id: String,
    /// Compute-time multiplier for this rank; 1 means no slowdown.
    pub slowdown: f64,
}

#[derive(Clone, Debug)]
pub struct EpochResult {
    pub metrics: EpochMetrics,
    /// Global mean loss of every optimizer step.
    pub step_losses: Vec<f32>,
    /// Gradient AllReduce calls made during the epoch.
    pub grad_allreduces: u64,
}

pub fn train_epoch(
    state: &mut TrainState,
    pg: &mut ProcessGroup,
    data: &EpochData,
    epoch: usize,
) -> Result<EpochResult, TrainError> {
    let start = Instant::now();
    let before = pg.stats();
    let (rank, world) = (pg.rank(), pg.world_size());
    let plan = data.plan(&state.cfg, rank, world, epoch);
    if plan.is_empty() {
        return Err(TrainError::Config(format!(
            "{} samples on rank {rank} do not fill one step of micro batch {} × accumulation {}",
            data.dataset().len(),
            state.cfg.micro_batch_per_gpu,
            state.cfg.gradient_accumulation_steps
        )));
    }
    let numel = state.params.numel();
    let mut buf = vec![0.0f32; numel + 2];
    let mut compute = Duration::ZERO;
    let mut step_losses = Vec::with_capacity(plan.len() / state.cfg.gradient_accumulation_steps);
    let (mut correct, mut seen) = (0.0f64, 0usize);

    for window in plan.chunks(state.cfg.gradient_accumulation_steps) {
        buf.fill(0.0);
        let (mut samples, mut loss_sum, mut hits) = (0usize, 0.0f64, 0usize);
        for idx in window {
            let t = Instant::now();
            let (images, labels) = data.dataset().gather(idx);
            let out = loss_and_grads(&state.model, &state.params, &images, &labels)?;
            let b = labels.len() as f32;
            let mut off = 0;
            for g in out.grads.tensors() {
                for (dst, v) in buf[off..off + g.len()].iter_mut().zip(g.data()) {
                    *dst += v * b;
                }
                off += g.len();
            }
            samples += labels.len();
            loss_sum += out.loss as f64 * labels.len() as f64;
            hits += out.correct;
            if state.slowdown > 1.0 {
                thread::sleep(t.elapsed().mul_f64(state.slowdown - 1.0));
            }
            compute += t.elapsed();
        }
        let inv = 1.0 / samples as f32;
        buf[..numel].iter_mut().for_each(|v| *v *= inv);
        buf[numel] = (loss_sum / samples as f64) as f32;
        buf[numel + 1] = hits as f32;

        pg.allreduce_average(&mut buf)?;

        let t = Instant::now();
        optimizer_step(&mut state.opt, &mut state.params, &buf[..numel])?;
        compute += t.elapsed();
        step_losses.push(buf[numel]);
        correct += (buf[numel + 1] as f64 * world as f64).round();
        seen += samples * world;
    }
    let grad_allreduces = pg.stats().allreduce_calls - before.allreduce_calls;

    pg.barrier()?;
    check_consistency(pg, &state.params, epoch)?;

    let total = start.elapsed();
    let comm = pg.stats().comm_time - before.comm_time;
    let metrics = EpochMetrics {
        run_id: state.run_id.clone(),
        world_size: world,
        rank,
        epoch,
        compute_s: compute.as_secs_f64(),
        comm_s: comm.as_secs_f64(),
        total_s: total.as_secs_f64(),
        loss: step_losses.iter().map(|&l| l as f64).sum::<f64>() / step_losses.len() as f64,
        accuracy: correct / seen as f64,
    };
    if state.cfg.wall_clock_breakdown {
        info!(
            rank,
            epoch,
            compute_s = metrics.compute_s,
            comm_s = metrics.comm_s,
            total_s = metrics.total_s,
            loss = metrics.loss,
            accuracy = metrics.accuracy,
            "epoch"
        );
    }
    Ok(EpochResult {
        metrics,
        step_losses,
        grad_allreduces,
    })
}

/// Compares parameter checksums across ranks. Each checksum byte `b` is
/// summed along with `b²`; all ranks agree iff `(Σb)² = W·Σb²` for every byte.
fn check_consistency(
    pg: &mut ProcessGroup,
    params: &ParamSet<f32>,
    epoch: usize,
) -> Result<(), TrainError> {
    if pg.world_size() == 1 {
        return Ok(());
    }
    let bytes = params.checksum().to_le_bytes();
    let mut buf: Vec<f32> = bytes.iter().map(|&b| b as f32).collect();
    buf.extend(bytes.iter().map(|&b| (b as f32) * (b as f32)));
    pg.allreduce_sum(&mut buf)?;
    let w = pg.world_size() as f32;
    if (0..8).any(|i| buf[i] * buf[i] != w * buf[8 + i]) {
        return Err(TrainError::Diverged { epoch });
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub run_id: String,
    /// Rank to compute-time multiplier.
    pub slowdown: BTreeMap<usize, f64>,
    /// Rank 0 writes `metrics.csv`, `checkpoint.bin` and `run.json` here.
    pub out_dir: Option<PathBuf>,
    /// Rank that panics right after the initial broadcast.
    pub fail_rank: Option<usize>,
}

/// Per-run record written next to the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub world_size: usize,
    pub train_batch_size: usize,
    pub micro_batch_per_gpu: usize,
    pub gradient_accumulation_steps: usize,
    pub samples_per_rank: usize,
    pub step_losses: Vec<Vec<f32>>,
    pub grad_allreduces: Vec<u64>,
    pub param_checksum: String,
    pub ring_payload_bytes: u64,
}

pub struct RunOutcome {
    pub rank: usize,
    pub epochs: Vec<EpochResult>,
    /// Metrics of every rank, ordered by epoch then rank.
    pub all_metrics: Vec<EpochMetrics>,
    pub record: RunRecord,
    pub params: ParamSet<f32>,
    pub comm: CommStats,
}

pub fn run_training(
    cfg: &TrainConfig,
    pg: &mut ProcessGroup,
    dataset: &Dataset,
    opts: &RunOptions,
) -> Result<RunOutcome, TrainError> {
    let (rank, world) = (pg.rank(), pg.world_size());
    let cfg = validate_config(cfg.clone(), world)?;
    let slowdown = opts.slowdown.get(&rank).copied().unwrap_or(1.0);
    if slowdown < 1.0 || !slowdown.is_finite() {
        return Err(TrainError::Config(format!(
            "slowdown multiplier {slowdown} must be ≥ 1"
        )));
    }
    let model = cfg.model.for_dataset(dataset)?;
    let mut params = init_params::<f32>(&model, cfg.seed)?;
    let mut flat = params.flatten();
    pg.broadcast(&mut flat, 0)?;
    params.assign_flat(&flat)?;
    if opts.fail_rank == Some(rank) {
        panic!("injected failure on rank {rank}");
    }
    let data = EpochData::prepare(&cfg, dataset, rank, world)?;
    let mut state = TrainState {
        opt: OptimizerState::new(cfg.optimizer, &params),
        cfg,
        model,
        params,
        run_id: opts.run_id.clone(),
        slowdown,
    };
    let mut epochs = Vec::with_capacity(state.cfg.epochs);
    for epoch in 1..=state.cfg.epochs {
        epochs.push(train_epoch(&mut state, pg, &data, epoch)?);
    }
    let all_metrics = gather_metrics(pg, &epochs, &opts.run_id)?;
    let comm = pg.stats();
    let record = RunRecord {
        run_id: opts.run_id.clone(),
        world_size: world,
        train_batch_size: state.cfg.train_batch_size.expect("validated"),
        micro_batch_per_gpu: state.cfg.micro_batch_per_gpu,
        gradient_accumulation_steps: state.cfg.gradient_accumulation_steps,
        samples_per_rank: data.dataset().len(),
        step_losses: epochs.iter().map(|e| e.step_losses.clone()).collect(),
        grad_allreduces: epochs.iter().map(|e| e.grad_allreduces).collect(),
        param_checksum: format!("{:016x}", state.params.checksum()),
        ring_payload_bytes: comm.ring_payload_bytes,
    };
    if rank == 0 {
        if let Some(dir) = &opts.out_dir {
            fs::create_dir_all(dir)?;
            write_metrics_csv(&dir.join("metrics.csv"), &all_metrics)?;
            state
                .params
                .write_to(std::io::BufWriter::new(fs::File::create(
                    dir.join("checkpoint.bin"),
                )?))?;
            let json = serde_json::to_string_pretty(&record).expect("record serializes");
            fs::write(dir.join("run.json"), json)?;
        }
    }
    Ok(RunOutcome {
        rank,
        epochs,
        all_metrics,
        record,
        params: state.params,
        comm,
    })
}

const GATHERED_FIELDS: usize = 5;

/// Collects every rank's epoch metrics on all ranks. Each f64 travels as a
/// pair of f32 (value and rounding residual); other ranks contribute zeros.
fn gather_metrics(
    pg: &mut ProcessGroup,
    epochs: &[EpochResult],
    run_id: &str,
) -> Result<Vec<EpochMetrics>, TrainError> {
    let (rank, world) = (pg.rank(), pg.world_size());
    let per_rank = epochs.len() * GATHERED_FIELDS * 2;
    let mut buf = vec![0.0f32; per_rank * world];
    for (e, r) in epochs.iter().enumerate() {
        let m = &r.metrics;
        let fields = [m.compute_s, m.comm_s, m.total_s, m.loss, m.accuracy];
        for (f, v) in fields.iter().enumerate() {
            let hi = *v as f32;
            let at = rank * per_rank + (e * GATHERED_FIELDS + f) * 2;
            buf[at] = hi;
            buf[at + 1] = (*v - hi as f64) as f32;
        }
    }
    pg.allreduce_sum(&mut buf)?;
    let mut out = Vec::with_capacity(epochs.len() * world);
    for (e, r) in epochs.iter().enumerate() {
        for src in 0..world {
            let get = |f: usize| {
                let at = src * per_rank + (e * GATHERED_FIELDS + f) * 2;
                buf[at] as f64 + buf[at + 1] as f64
            };
            out.push(EpochMetrics {
                run_id: run_id.to_string(),
                world_size: world,
                rank: src,
                epoch: r.metrics.epoch,
                compute_s: get(0),
                comm_s: get(1),
                total_s: get(2),
                loss: get(3),
                accuracy: get(4),
            });
        }
    }
    Ok(out)
}

/// Runs a whole world as threads of this process, over in-memory links.
/// Returns one outcome per rank.
pub fn run_local(
    cfg: &TrainConfig,
    world_size: usize,
    dataset: Arc<Dataset>,
    opts: &RunOptions,
) -> Result<Vec<RunOutcome>, TrainError> {
    let lw = local_world(world_size, GroupOptions::default())?;
    let handles: Vec<_> = lw
        .groups
        .into_iter()
        .map(|mut pg| {
            let (cfg, ds, opts) = (cfg.clone(), Arc::clone(&dataset), opts.clone());
            thread::Builder::new()
                .name(format!("rank-{}", pg.rank()))
                .spawn(move || {
                    let r = run_training(&cfg, &mut pg, &ds, &opts);
                    if r.is_ok() {
                        pg.finish()?;
                    }
                    r
                })
        })
        .collect::<Result<_, _>>()?;
    let mut outcomes = Vec::with_capacity(world_size);
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok(o)) => outcomes.push(o),
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(TrainError::Usage("a rank thread panicked".into()));
            }
        }
    }
    let _ = lw.coordinator.join();
    match first_err {
        Some(e) => Err(e),
        None => Ok(outcomes),
    }
}
