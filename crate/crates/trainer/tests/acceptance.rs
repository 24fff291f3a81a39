//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p vitdp-trainer --test acceptance -- 3 9`.
//! Scaling criteria need at least as many cores as ranks; on smaller
//! machines their failures are reported as environment-blocked and do not
//! set the exit status.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitdp_collectives::{local_world, naive_allreduce_oracle, GroupOptions};
use vitdp_core::data::{make_synthetic, ScalingMode};
use vitdp_core::gradcheck::{finite_diff_gradcheck, GradCheckOptions};
use vitdp_core::vit::{init_params, loss, loss_and_grads};
use vitdp_core::ViTConfig;
use vitdp_trainer::dataset::DatasetArg;
use vitdp_trainer::metrics::summarize_runs;
use vitdp_trainer::{
    launch_local_world, validate_config, DataAssignment, LaunchOutcome, LaunchSpec, TrainConfig,
};

const EXE: &str = env!("CARGO_BIN_EXE_vitdp");

const REFERENCE_CONFIG: &str = r#"{
  "train_batch_size": 32,
  "gradient_accumulation_steps": 1,
  "micro_batch_per_gpu": 16,
  "fp16": { "enabled": false },
  "zero_optimization": { "stage": 0 },
  "wall_clock_breakdown": true
}
"#;

struct Verdict {
    pass: bool,
    detail: String,
    /// Set when the machine cannot host the measurement.
    blocked: Option<String>,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Self {
            pass,
            detail,
            blocked: None,
        }
    }
}

type Check = Result<Verdict, Box<dyn std::error::Error>>;
type Criterion = (usize, &'static str, fn(&mut Ctx) -> Check);

struct Ctx {
    root: PathBuf,
    /// Loss column and checkpoint of the training-sanity run, for the rerun.
    sanity_run: Option<PathBuf>,
}

fn reference_config() -> TrainConfig {
    TrainConfig::from_json(REFERENCE_CONFIG)
        .expect("reference config")
        .0
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn blocked_if_short_of_cores(v: Verdict, ranks: usize) -> Verdict {
    let have = cores();
    if !v.pass && have < ranks {
        Verdict {
            blocked: Some(format!(
                "{have} core(s) available, {ranks} ranks need {ranks}"
            )),
            ..v
        }
    } else {
        v
    }
}

fn launch(
    ctx: &Ctx,
    name: &str,
    world: usize,
    cfg: TrainConfig,
    samples: usize,
) -> Result<LaunchOutcome, Box<dyn std::error::Error>> {
    launch_slowed(ctx, name, world, cfg, samples, BTreeMap::new())
}

fn launch_slowed(
    ctx: &Ctx,
    name: &str,
    world: usize,
    cfg: TrainConfig,
    samples: usize,
    slowdown: BTreeMap<usize, f64>,
) -> Result<LaunchOutcome, Box<dyn std::error::Error>> {
    let mut spec = LaunchSpec::new(EXE, world, cfg, ctx.root.join(name));
    spec.dataset = DatasetArg::Synthetic;
    spec.samples = Some(samples);
    spec.slowdown = slowdown;
    spec.run_id = name.to_string();
    Ok(launch_local_world(&spec)?)
}

fn mean_epoch_time(out: &LaunchOutcome) -> f64 {
    summarize_runs(&out.metrics)[0].mean_epoch_s
}

fn gradient_oracle(_: &mut Ctx) -> Check {
    let cfg = ViTConfig::desk(10);
    let params = init_params::<f64>(&cfg, 7)?;
    let ds = make_synthetic(10, 10, 32, 3)?;
    let (images, labels) = ds.gather(&[0, 3, 5, 9]);
    let images = images.cast::<f64>();
    let out = loss_and_grads(&cfg, &params, &images, &labels)?;
    let report = finite_diff_gradcheck(
        |p| loss(&cfg, p, &images, &labels),
        &params,
        &out.grads,
        GradCheckOptions {
            samples: 100,
            step: 1e-5,
            seed: 11,
        },
    )?;
    Ok(Verdict::new(
        report.max_relative_error < 1e-4 && report.checked == 100,
        format!(
            "max relative error {:.3e} over {} coordinates (worst {}[{}])",
            report.max_relative_error, report.checked, report.worst.0, report.worst.1
        ),
    ))
}

fn collective_oracle(_: &mut Ctx) -> Check {
    let mut worst_rel = 0.0f32;
    let mut problems = Vec::new();
    for world in [2usize, 3, 4, 8] {
        for n in [1usize, 7, 1000, 1_000_000] {
            for integer in [true, false] {
                let inputs: Vec<Vec<f32>> = (0..world)
                    .map(|r| {
                        let mut rng = ChaCha8Rng::seed_from_u64((world * 31 + r) as u64 + n as u64);
                        (0..n)
                            .map(|_| {
                                if integer {
                                    rng.gen_range(-100i32..=100) as f32
                                } else {
                                    rng.gen_range(0.01f32..1.0)
                                }
                            })
                            .collect()
                    })
                    .collect();
                let expected = naive_allreduce_oracle(&inputs);
                let inputs = Arc::new(inputs);
                let lw = local_world(world, GroupOptions::default())?;
                let handles: Vec<_> = lw
                    .groups
                    .into_iter()
                    .map(|mut g| {
                        let inputs = Arc::clone(&inputs);
                        std::thread::spawn(move || {
                            let mut buf = inputs[g.rank()].clone();
                            let r = g.allreduce_sum(&mut buf);
                            let stats = g.stats();
                            let _ = g.finish();
                            r.map(|_| (buf, stats))
                        })
                    })
                    .collect();
                for h in handles {
                    let (got, stats) = h.join().map_err(|_| "rank thread panicked")??;
                    if integer {
                        if got != expected {
                            problems
                                .push(format!("world {world} n {n}: integer sum not bit-exact"));
                        }
                    } else {
                        for (a, b) in got.iter().zip(&expected) {
                            worst_rel = worst_rel.max(((a - b) / b).abs());
                        }
                    }
                    let ideal = 2.0 * (world as f64 - 1.0) / world as f64 * n as f64 * 4.0;
                    let slack = (2 * world * 4) as f64;
                    if (stats.ring_payload_bytes as f64 - ideal).abs() > slack {
                        problems.push(format!(
                            "world {world} n {n}: {} payload bytes, ideal {ideal}",
                            stats.ring_payload_bytes
                        ));
                    }
                    if stats.ring_header_bytes != 2 * (world as u64 - 1) * 13 {
                        problems.push(format!(
                            "world {world} n {n}: {} header bytes",
                            stats.ring_header_bytes
                        ));
                    }
                }
                lw.coordinator.join().map_err(|_| "coordinator panicked")?;
            }
        }
    }
    let pass = problems.is_empty() && worst_rel <= 1e-5;
    let mut detail = format!("32 cells; integer sums bit-exact, float max relative error {worst_rel:.2e}; byte counts within chunk rounding");
    if !problems.is_empty() {
        detail = format!("{} problems, first: {}", problems.len(), problems[0]);
    }
    Ok(Verdict::new(pass, detail))
}

/// `‖a − b‖ / ‖b‖` over the whole parameter vector.
fn relative_param_error(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let norm: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
    (diff / norm).sqrt()
}

/// Largest element-wise relative difference, for the report only. Entries
/// with no gradient signal (attention key biases) drift with rounding noise
/// under Adam and dominate this number.
fn worst_element_error(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs() / (x.abs().max(y.abs()) as f64).max(1e-6))
        .fold(0.0, f64::max)
}

fn read_checkpoint(dir: &Path) -> Result<Vec<f32>, Box<dyn std::error::Error>> {
    let f = fs::File::open(dir.join("checkpoint.bin"))?;
    Ok(vitdp_core::ParamSet::<f32>::read_from(std::io::BufReader::new(f))?.flatten())
}

fn dp_equivalence(ctx: &mut Ctx) -> Check {
    let samples = 512;
    let two = TrainConfig {
        epochs: 2,
        data_assignment: DataAssignment::Interleaved,
        ..reference_config()
    };
    let one = TrainConfig {
        micro_batch_per_gpu: 32,
        ..two.clone()
    };
    let a = launch(ctx, "c3-world2", 2, two, samples)?;
    let b = launch(ctx, "c3-world1", 1, one, samples)?;
    let pa = read_checkpoint(&ctx.root.join("c3-world2"))?;
    let pb = read_checkpoint(&ctx.root.join("c3-world1"))?;
    if pa.len() != pb.len() {
        return Ok(Verdict::new(false, "checkpoints differ in size".into()));
    }
    let param_err = relative_param_error(&pa, &pb);
    let element_err = worst_element_error(&pa, &pb);
    let la: Vec<f32> = a.record.step_losses.concat();
    let lb: Vec<f32> = b.record.step_losses.concat();
    let loss_err = la
        .iter()
        .zip(&lb)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    let pass = param_err <= 1e-4 && la.len() == lb.len() && !la.is_empty() && loss_err <= 1e-4;
    Ok(Verdict::new(
        pass,
        format!(
            "{} steps; parameter relative error {param_err:.2e} (worst single entry {element_err:.2e}), \
             max per-step loss difference {loss_err:.2e}",
            la.len()
        ),
    ))
}

fn config_identity(ctx: &mut Ctx) -> Check {
    let accepted = validate_config(reference_config(), 2).is_ok();
    let in_process = validate_config(reference_config(), 3)
        .map(|_| String::new())
        .unwrap_or_else(|e| e.to_string());
    let dir = ctx.root.join("c4");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), REFERENCE_CONFIG)?;
    let out = Command::new(EXE)
        .args([
            "launch",
            "--world",
            "3",
            "--samples",
            "96",
            "--epochs",
            "1",
            "--config",
        ])
        .arg(dir.join("config.json"))
        .arg("--out")
        .arg(dir.join("run"))
        .output()?;
    let stderr = String::from_utf8_lossy(&out.stderr);
    let needle = "32 ≠ 16×1×3";
    let pass =
        accepted && in_process.contains(needle) && !out.status.success() && stderr.contains(needle);
    Ok(Verdict::new(
        pass,
        format!(
            "world 2 accepted: {accepted}; world 3 rejected in-process and by the CLI ({}) with \"{}\"",
            out.status,
            in_process.lines().next().unwrap_or("")
        ),
    ))
}

fn strong_scaling(ctx: &mut Ctx) -> Check {
    let cfg = TrainConfig {
        scaling_mode: ScalingMode::Strong,
        ..reference_config()
    };
    let mut times = Vec::new();
    for world in [1usize, 2, 4] {
        let c = TrainConfig {
            train_batch_size: Some(16 * world),
            ..cfg.clone()
        };
        let out = launch(ctx, &format!("c5-strong-w{world}"), world, c, 8000)?;
        times.push(mean_epoch_time(&out));
    }
    let (s2, s4) = (times[0] / times[1], times[0] / times[2]);
    let monotone = times.windows(2).all(|w| w[1] <= w[0]);
    let v = Verdict::new(
        s2 >= 1.6 && s4 >= 2.5 && monotone,
        format!(
            "epoch s {:.2}/{:.2}/{:.2} for worlds 1/2/4; speedup(2) {s2:.2} (≥ 1.6), speedup(4) {s4:.2} (≥ 2.5), monotone {monotone}",
            times[0], times[1], times[2]
        ),
    );
    Ok(blocked_if_short_of_cores(v, 4))
}

fn weak_scaling(ctx: &mut Ctx) -> Check {
    let fraction = 0.25;
    let mut times = Vec::new();
    let mut shards = Vec::new();
    for world in [1usize, 2, 4] {
        let c = TrainConfig {
            train_batch_size: Some(16 * world),
            scaling_mode: ScalingMode::Weak,
            weak_fraction: fraction,
            ..reference_config()
        };
        let out = launch(ctx, &format!("c6-weak-w{world}"), world, c, 8000)?;
        times.push(mean_epoch_time(&out));
        shards.push(out.record.samples_per_rank);
    }
    let within = times
        .iter()
        .all(|t| t / times[0] <= 1.3 && times[0] / t <= 1.3);
    let constant = shards.iter().all(|&s| s == shards[0]);
    let v = Verdict::new(
        within && constant,
        format!(
            "per-rank shard {:?}; epoch s {:.2}/{:.2}/{:.2} for worlds 1/2/4, ratios {:.2}/{:.2} (band ×1.3)",
            shards,
            times[0],
            times[1],
            times[2],
            times[1] / times[0],
            times[2] / times[0]
        ),
    );
    Ok(blocked_if_short_of_cores(v, 4))
}

fn straggler(ctx: &mut Ctx) -> Check {
    let world = 4;
    let slow_rank = 3;
    let cfg = TrainConfig {
        train_batch_size: Some(16 * world),
        ..reference_config()
    };
    let homog = launch(ctx, "c7-homogeneous", world, cfg.clone(), 2000)?;
    let slowed = launch_slowed(
        ctx,
        "c7-slowed",
        world,
        cfg,
        2000,
        BTreeMap::from([(slow_rank, 2.0)]),
    )?;
    let ratio = mean_epoch_time(&slowed) / mean_epoch_time(&homog);
    let comm_of = |out: &LaunchOutcome, rank: usize| {
        let rows: Vec<_> = out.metrics.iter().filter(|m| m.rank == rank).collect();
        rows.iter().map(|m| m.comm_s).sum::<f64>() / rows.len() as f64
    };
    let slowed_comm = comm_of(&slowed, slow_rank);
    let others: Vec<usize> = (0..world).filter(|&r| r != slow_rank).collect();
    let others_comm =
        others.iter().map(|&r| comm_of(&slowed, r)).sum::<f64>() / others.len() as f64;
    let others_homog =
        others.iter().map(|&r| comm_of(&homog, r)).sum::<f64>() / others.len() as f64;
    let added_time = mean_epoch_time(&slowed) - mean_epoch_time(&homog);
    let minimal = others.iter().all(|&r| comm_of(&slowed, r) > slowed_comm);
    let absorbed = others_comm - others_homog >= 0.5 * added_time;
    let homog_compute =
        homog.metrics.iter().map(|m| m.compute_s).sum::<f64>() / homog.metrics.len() as f64;
    let gated = mean_epoch_time(&slowed) >= 0.85 * 2.0 * homog_compute;
    let v = Verdict::new(
        (1.7..=2.4).contains(&ratio) && minimal && absorbed && gated,
        format!(
            "epoch time ratio {ratio:.2} (in [1.7, 2.4]); slowed epoch {:.2} s vs 0.85×2×compute {:.2} s; comm s/epoch: slowed rank {slowed_comm:.2}, others {others_comm:.2} \
             (homogeneous {others_homog:.2}); others absorb {:.0}% of the added {added_time:.2} s",
            mean_epoch_time(&slowed),
            1.7 * homog_compute,
            100.0 * (others_comm - others_homog) / added_time
        ),
    );
    Ok(blocked_if_short_of_cores(v, world))
}

fn sync_cost_trend(ctx: &mut Ctx) -> Check {
    let world = 2;
    let mut calls = Vec::new();
    let mut fractions = Vec::new();
    for micro in [16usize, 32, 64] {
        let c = TrainConfig {
            train_batch_size: Some(micro * world),
            micro_batch_per_gpu: micro,
            ..reference_config()
        };
        let out = launch(ctx, &format!("c8-micro{micro}"), world, c, 12_800)?;
        if out.record.samples_per_rank != 6400 {
            return Ok(Verdict::new(
                false,
                format!("shard is {} samples, not 6400", out.record.samples_per_rank),
            ));
        }
        calls.push(out.record.grad_allreduces.clone());
        fractions.push(summarize_runs(&out.metrics)[0].comm_fraction);
    }
    let exact = calls
        .iter()
        .zip([400u64, 200, 100])
        .all(|(c, want)| c.len() == 5 && c.iter().all(|&n| n == want));
    let decreasing = fractions.windows(2).all(|w| w[1] < w[0]);
    Ok(Verdict::new(
        exact && decreasing,
        format!(
            "AllReduce calls per epoch {:?}/{:?}/{:?}; comm fraction {:.3}/{:.3}/{:.3} for micro 16/32/64",
            calls[0].first(),
            calls[1].first(),
            calls[2].first(),
            fractions[0],
            fractions[1],
            fractions[2]
        ),
    ))
}

fn loss_column(dir: &Path) -> Result<Vec<String>, Box<dyn std::error::Error>> {
    let mut r = csv::Reader::from_path(dir.join("metrics.csv"))?;
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == "loss")
        .ok_or("no loss column")?;
    Ok(r.records()
        .map(|rec| rec.map(|rec| rec[idx].to_string()))
        .collect::<Result<_, _>>()?)
}

fn training_sanity(ctx: &mut Ctx) -> Check {
    let out = launch(ctx, "c9-sanity", 2, reference_config(), 2000)?;
    ctx.sanity_run = Some(ctx.root.join("c9-sanity"));
    let mut by_epoch: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for m in out.metrics.iter().filter(|m| m.rank == 0) {
        by_epoch.insert(m.epoch, (m.loss, m.accuracy));
    }
    let losses: Vec<f64> = by_epoch.values().map(|v| v.0).collect();
    let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
    let final_acc = by_epoch.values().last().map_or(0.0, |v| v.1);
    Ok(Verdict::new(
        losses.len() == 5 && decreasing >= 4 && final_acc > 1.5 * 0.1,
        format!(
            "epoch losses {:?}; {decreasing}/4 transitions decrease; final train accuracy {final_acc:.3} (> 0.15)",
            losses.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    ))
}

fn determinism(ctx: &mut Ctx) -> Check {
    let first = match &ctx.sanity_run {
        Some(p) => p.clone(),
        None => {
            launch(ctx, "c10-first", 2, reference_config(), 2000)?;
            ctx.root.join("c10-first")
        }
    };
    launch(ctx, "c10-rerun", 2, reference_config(), 2000)?;
    let second = ctx.root.join("c10-rerun");
    let same_loss = loss_column(&first)? == loss_column(&second)?;
    let same_ckpt =
        fs::read(first.join("checkpoint.bin"))? == fs::read(second.join("checkpoint.bin"))?;
    Ok(Verdict::new(
        same_loss && same_ckpt,
        format!("loss columns identical: {same_loss}; checkpoints byte-identical: {same_ckpt}"),
    ))
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [Criterion; 10] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "collective oracle", collective_oracle),
        (3, "data-parallel equivalence", dp_equivalence),
        (4, "config batch identity", config_identity),
        (5, "strong scaling", strong_scaling),
        (6, "weak scaling", weak_scaling),
        (7, "straggler", straggler),
        (8, "sync cost vs micro batch", sync_cost_trend),
        (9, "training sanity", training_sanity),
        (10, "determinism", determinism),
    ];
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).expect("acceptance output directory");
    let mut ctx = Ctx {
        root,
        sanity_run: None,
    };
    let (mut passed, mut failed, mut blocked) = (0, 0, 0);
    println!(
        "acceptance: {} core(s), outputs in {}",
        cores(),
        ctx.root.display()
    );
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let v = check(&mut ctx).unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        let secs = t.elapsed().as_secs_f64();
        let status = if v.pass { "PASS" } else { "FAIL" };
        let note = v
            .blocked
            .as_deref()
            .map(|b| format!(" [environment-blocked: {b}]"))
            .unwrap_or_default();
        println!(
            "{status} [{id:>2}] {name}: {} ({secs:.1} s){note}",
            v.detail
        );
        match (v.pass, v.blocked.is_some()) {
            (true, _) => passed += 1,
            (false, true) => blocked += 1,
            (false, false) => failed += 1,
        }
    }
    println!(
        "acceptance: {passed} passed, {failed} failed, {blocked} failed as environment-blocked"
    );
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
