//! Spawns a local world of worker processes around an in-process coordinator.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::Duration;

use tracing::{debug, info};
use vitdp_collectives::{CommError, Coordinator, CoordinatorOptions};

use crate::config::{validate_config, TrainConfig};
use crate::dataset::DatasetArg;
use crate::engine::RunRecord;
use crate::error::TrainError;
use crate::metrics::{read_metrics_csv, EpochMetrics};

const PORT_ATTEMPTS: u16 = 32;
const POLL: Duration = Duration::from_millis(20);

#[derive(Clone, Debug)]
pub struct LaunchSpec {
    /// The `vitdp` executable to run as `worker`.
    pub exe: PathBuf,
    pub world_size: usize,
    pub config: TrainConfig,
    pub dataset: DatasetArg,
    pub samples: Option<usize>,
    pub slowdown: BTreeMap<usize, f64>,
    pub out_dir: PathBuf,
    pub run_id: String,
    pub fail_rank: Option<usize>,
    /// Coordinator port; 0 picks a free one. A busy port is retried upwards.
    pub port: u16,
    pub timeout: Duration,
}

impl LaunchSpec {
    pub fn new(
        exe: impl Into<PathBuf>,
        world_size: usize,
        config: TrainConfig,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            exe: exe.into(),
            world_size,
            config,
            dataset: DatasetArg::Synthetic,
            samples: None,
            slowdown: BTreeMap::new(),
            out_dir: out_dir.into(),
            run_id: format!("w{world_size}"),
            fail_rank: None,
            port: 0,
            timeout: vitdp_collectives::DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LaunchOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub record: RunRecord,
    /// Worker process ids, by rank.
    pub pids: Vec<u32>,
    pub statuses: Vec<ExitStatus>,
}

fn start_coordinator(spec: &LaunchSpec) -> Result<Coordinator, TrainError> {
    let opts = CoordinatorOptions {
        rendezvous_timeout: spec.timeout,
        barrier_timeout: spec.timeout,
    };
    let mut port = spec.port;
    for _ in 0..PORT_ATTEMPTS {
        let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, port));
        match Coordinator::start(addr, spec.world_size, opts) {
            Err(CommError::Io(e)) if e.kind() == ErrorKind::AddrInUse && port != 0 => {
                debug!(port, "coordinator port busy, trying the next one");
                port = port.wrapping_add(1).max(1);
            }
            r => return Ok(r?),
        }
    }
    Err(TrainError::Usage(format!(
        "no free coordinator port in {}..{}",
        spec.port,
        spec.port as u32 + PORT_ATTEMPTS as u32
    )))
}

/// Runs one training job on `world_size` local worker processes. Any
/// worker exiting unsuccessfully kills the rest and fails the launch.
pub fn launch_local_world(spec: &LaunchSpec) -> Result<LaunchOutcome, TrainError> {
    let cfg = validate_config(spec.config.clone(), spec.world_size)?;
    if let Some((r, m)) = spec
        .slowdown
        .iter()
        .find(|(_, &m)| !(m >= 1.0 && m.is_finite()))
    {
        return Err(TrainError::Config(format!(
            "slowdown multiplier {m} for rank {r} must be ≥ 1"
        )));
    }
    fs::create_dir_all(&spec.out_dir)?;
    for stale in ["metrics.csv", "run.json", "checkpoint.bin"] {
        let _ = fs::remove_file(spec.out_dir.join(stale));
    }
    let config_path = spec.out_dir.join("config.json");
    fs::write(&config_path, cfg.to_json())?;

    let coord = start_coordinator(spec)?;
    info!(world = spec.world_size, addr = %coord.addr(), run = %spec.run_id, "launching");
    let mut children: Vec<(Child, PathBuf)> = Vec::with_capacity(spec.world_size);
    for i in 0..spec.world_size {
        let log = spec.out_dir.join(format!("worker-{i}.log"));
        let mut cmd = Command::new(&spec.exe);
        cmd.arg("worker")
            .arg("--coordinator")
            .arg(coord.addr().to_string())
            .arg("--config")
            .arg(&config_path)
            .arg("--dataset")
            .arg(spec.dataset.to_string())
            .arg("--world")
            .arg(spec.world_size.to_string())
            .arg("--out")
            .arg(&spec.out_dir)
            .arg("--run-id")
            .arg(&spec.run_id)
            .arg("--timeout")
            .arg(spec.timeout.as_secs_f64().to_string());
        if let Some(n) = spec.samples {
            cmd.arg("--samples").arg(n.to_string());
        }
        for (r, m) in &spec.slowdown {
            cmd.arg("--slowdown").arg(format!("{r}:{m}"));
        }
        if let Some(r) = spec.fail_rank {
            cmd.arg("--fail-rank").arg(r.to_string());
        }
        cmd.stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::from(fs::File::create(&log)?));
        match cmd.spawn() {
            Ok(c) => children.push((c, log)),
            Err(e) => {
                kill_all(&mut children);
                return Err(TrainError::Io(std::io::Error::new(
                    e.kind(),
                    format!("spawning {}: {e}", spec.exe.display()),
                )));
            }
        }
    }

    let mut statuses: Vec<Option<ExitStatus>> = vec![None; children.len()];
    loop {
        for (i, (child, log)) in children.iter_mut().enumerate() {
            if statuses[i].is_some() {
                continue;
            }
            if let Some(st) = child.try_wait()? {
                statuses[i] = Some(st);
                if !st.success() {
                    let pid = child.id();
                    let log = log.clone();
                    let rank = coord.pids().iter().position(|&p| p == pid);
                    kill_all(&mut children);
                    let who = match rank {
                        Some(r) => format!("rank {r} (pid {pid})"),
                        None => format!("#{i} (pid {pid}, no rank assigned yet)"),
                    };
                    return Err(TrainError::WorkerFailed {
                        rank,
                        who,
                        status: st.to_string(),
                        log,
                    });
                }
            }
        }
        if statuses.iter().all(Option::is_some) {
            break;
        }
        thread::sleep(POLL);
    }
    let pids = coord.pids();
    coord.join()?;
    let metrics = read_metrics_csv(&spec.out_dir.join("metrics.csv"))?;
    let record: RunRecord =
        serde_json::from_str(&fs::read_to_string(spec.out_dir.join("run.json"))?)
            .map_err(|e| TrainError::Usage(format!("run.json: {e}")))?;
    Ok(LaunchOutcome {
        metrics,
        record,
        pids,
        statuses: statuses
            .into_iter()
            .map(|s| s.expect("all exited"))
            .collect(),
    })
}

fn kill_all(children: &mut [(Child, PathBuf)]) {
    for (c, _) in children.iter_mut() {
        let _ = c.kill();
    }
    for (c, _) in children.iter_mut() {
        let _ = c.wait();
    }
}
