use std::collections::BTreeMap;
use std::io::IsTerminal;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use vitdp_collectives::{rendezvous, Coordinator, CoordinatorOptions, GroupOptions};
use vitdp_core::data::ScalingMode;
use vitdp_trainer::dataset::{load_dataset, DatasetArg};
use vitdp_trainer::metrics::{read_metrics_csv, ScalingReport};
use vitdp_trainer::sweep::series_of;
use vitdp_trainer::{
    launch_local_world, run_sweep, run_training, LaunchSpec, RunOptions, SweepSpec, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "vitdp",
    version,
    about = "Data-parallel ViT training and scaling benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a local world of worker processes.
    Launch(LaunchArgs),
    /// Join a world as one rank (spawned by `launch`, or run by hand).
    Worker(WorkerArgs),
    /// Run a coordinator for workers on other machines.
    Coordinator(CoordinatorArgs),
    /// Sweep world sizes and batch settings.
    Sweep(SweepArgs),
    /// Print the scaling table for a metrics directory.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct JobArgs {
    /// JSON training config; engine defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic`, a CIFAR binary file, or a directory of them.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    /// Synthetic set size, or a cap on CIFAR images.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    mode: Option<ScalingMode>,
    #[arg(long)]
    weak_fraction: Option<f64>,
    /// Slow a rank's compute down, e.g. `3:2`. Repeatable.
    #[arg(long, value_parser = parse_slowdown)]
    slowdown: Vec<(usize, f64)>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Seconds to wait on rendezvous, barriers and peers.
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
}

#[derive(Args)]
struct LaunchArgs {
    #[arg(long)]
    world: usize,
    #[command(flatten)]
    job: JobArgs,
    #[arg(long)]
    run_id: Option<String>,
    /// Coordinator port; 0 picks a free one.
    #[arg(long, default_value_t = 0)]
    port: u16,
    #[arg(long, hide = true)]
    fail_rank: Option<usize>,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    coordinator: String,
    /// Expected world size; checked against the coordinator.
    #[arg(long)]
    world: Option<usize>,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_parser = parse_slowdown)]
    slowdown: Vec<(usize, f64)>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    run_id: String,
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
    #[arg(long, hide = true)]
    fail_rank: Option<usize>,
}

#[derive(Args)]
struct CoordinatorArgs {
    #[arg(long, default_value = "0.0.0.0:29500")]
    bind: SocketAddr,
    #[arg(long)]
    world: usize,
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated ascending world sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    worlds: Vec<usize>,
    /// Comma-separated micro batch sizes; the config's value when omitted.
    #[arg(long, value_delimiter = ',')]
    micro: Vec<usize>,
    /// Comma-separated accumulation steps; the config's value when omitted.
    #[arg(long, value_delimiter = ',')]
    accum: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[command(flatten)]
    job: JobArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

fn parse_slowdown(s: &str) -> Result<(usize, f64), String> {
    let (r, m) = s
        .split_once(':')
        .ok_or_else(|| format!("expected RANK:MULT, got {s:?}"))?;
    let rank = r.parse().map_err(|e| format!("rank {r:?}: {e}"))?;
    let mult: f64 = m.parse().map_err(|e| format!("multiplier {m:?}: {e}"))?;
    if !(mult >= 1.0 && mult.is_finite()) {
        return Err(format!("multiplier {mult} must be ≥ 1"));
    }
    Ok((rank, mult))
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_json(&text)?.0)
        }
    }
}

fn job_config(job: &JobArgs) -> Result<TrainConfig> {
    let mut cfg = read_config(job.config.as_deref())?;
    if let Some(m) = job.mode {
        cfg.scaling_mode = m;
    }
    if let Some(f) = job.weak_fraction {
        cfg.weak_fraction = f;
    }
    if let Some(e) = job.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = job.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn secs(s: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(s).context("timeout must be a non-negative number of seconds")
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    match Cli::parse().command {
        Cmd::Launch(a) => launch(a),
        Cmd::Worker(a) => worker(a),
        Cmd::Coordinator(a) => coordinator(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Report(a) => report(a),
    }
}

fn launch(a: LaunchArgs) -> Result<()> {
    let cfg = job_config(&a.job)?;
    let exe = std::env::current_exe()?;
    let mut spec = LaunchSpec::new(exe, a.world, cfg, &a.job.out);
    spec.dataset = a.job.dataset.parse()?;
    spec.samples = a.job.samples;
    spec.slowdown = a.job.slowdown.iter().copied().collect();
    spec.fail_rank = a.fail_rank;
    spec.port = a.port;
    spec.timeout = secs(a.job.timeout)?;
    if let Some(id) = a.run_id {
        spec.run_id = id;
    }
    let out = launch_local_world(&spec)?;
    let report = ScalingReport::from_metrics(out.metrics, series_of)?;
    print!("{}", report.table());
    println!("outputs in {}", a.job.out.display());
    Ok(())
}

fn worker(a: WorkerArgs) -> Result<()> {
    let cfg = read_config(Some(&a.config))?;
    let dataset: DatasetArg = a.dataset.parse()?;
    let ds = load_dataset(&dataset, a.samples, cfg.seed)?;
    let mut pg = rendezvous(
        &a.coordinator,
        a.world,
        GroupOptions {
            timeout: secs(a.timeout)?,
        },
    )?;
    tracing::info!(
        rank = pg.rank(),
        world = pg.world_size(),
        pid = std::process::id(),
        "joined"
    );
    let opts = RunOptions {
        run_id: a.run_id,
        slowdown: a.slowdown.into_iter().collect::<BTreeMap<_, _>>(),
        out_dir: a.out,
        fail_rank: a.fail_rank,
    };
    let out = run_training(&cfg, &mut pg, &ds, &opts)?;
    pg.finish()?;
    if let Some(last) = out.epochs.last() {
        tracing::info!(
            rank = out.rank,
            loss = last.metrics.loss,
            accuracy = last.metrics.accuracy,
            "done"
        );
    }
    Ok(())
}

fn coordinator(a: CoordinatorArgs) -> Result<()> {
    let t = secs(a.timeout)?;
    let c = Coordinator::start(
        a.bind,
        a.world,
        CoordinatorOptions {
            rendezvous_timeout: t,
            barrier_timeout: t,
        },
    )?;
    println!(
        "coordinator listening on {} for {} workers",
        c.addr(),
        a.world
    );
    let report = c.join()?;
    for (rank, exit) in &report.exits {
        println!(
            "rank {rank} (pid {}): {exit:?}",
            report.pids.get(*rank).copied().unwrap_or(0)
        );
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let base = job_config(&a.job)?;
    let spec = SweepSpec {
        exe: std::env::current_exe()?,
        world_sizes: a.worlds,
        mode: base.scaling_mode,
        micro_batches: if a.micro.is_empty() {
            vec![base.micro_batch_per_gpu]
        } else {
            a.micro
        },
        accumulations: if a.accum.is_empty() {
            vec![base.gradient_accumulation_steps]
        } else {
            a.accum
        },
        epochs: base.epochs,
        repeats: a.repeats,
        slowdown: a.job.slowdown.iter().copied().collect(),
        dataset: a.job.dataset.parse()?,
        samples: a.job.samples,
        out_dir: a.job.out.clone(),
        timeout: secs(a.job.timeout)?,
        base,
    };
    let out = run_sweep(&spec)?;
    print!("{}", out.report.table());
    for (id, e) in &out.failed {
        eprintln!("failed: {id}: {e}");
    }
    if !out.failed.is_empty() {
        bail!("{} sweep cells failed", out.failed.len());
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let path = a.input.join("metrics.csv");
    let rows = read_metrics_csv(&path).with_context(|| format!("reading {}", path.display()))?;
    let report = ScalingReport::from_metrics(rows, series_of)?;
    print!("{}", report.table());
    Ok(())
}
