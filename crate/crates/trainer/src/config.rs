//! Training configuration: DeepSpeed-style JSON with a `vitdp` extension section.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vitdp_core::data::{ScalingMode, DEFAULT_WEAK_FRACTION};
use vitdp_core::{Dataset, ViTConfig};

use crate::error::TrainError;

pub const DEFAULT_EPOCHS: usize = 5;
pub const DEFAULT_ADAM_LR: f64 = 3e-4;
pub const DEFAULT_SGD_LR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            lr: DEFAULT_ADAM_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How samples reach ranks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataAssignment {
    /// Each rank trains on its own shard, reshuffled locally every epoch.
    #[default]
    Sharded,
    /// One global order per epoch; within each optimizer step rank `r` takes
    /// the `r`-th micro-batch-sized slice of every accumulation round. A run
    /// at any world size sees the same global batches as a 1-rank run.
    Interleaved,
}

impl fmt::Display for DataAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataAssignment::Sharded => "sharded",
            DataAssignment::Interleaved => "interleaved",
        })
    }
}

impl FromStr for DataAssignment {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sharded" => Ok(Self::Sharded),
            "interleaved" => Ok(Self::Interleaved),
            other => Err(TrainError::Config(format!(
                "unknown data assignment {other:?}"
            ))),
        }
    }
}

/// Transformer geometry. Image size, channels and class count come from
/// the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ViTConfig::desk(10);
        Self {
            patch_size: d.patch_size,
            embed_dim: d.embed_dim,
            num_heads: d.num_heads,
            depth: d.depth,
            mlp_ratio: d.mlp_ratio,
        }
    }
}

impl ModelShape {
    pub fn for_dataset(&self, ds: &Dataset) -> Result<ViTConfig, TrainError> {
        let [c, h, w] = ds.image_shape();
        if h != w {
            return Err(TrainError::Config(format!(
                "images must be square, got {h}×{w}"
            )));
        }
        let cfg = ViTConfig {
            image_size: h,
            channels: c,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            depth: self.depth,
            mlp_ratio: self.mlp_ratio,
            num_classes: ds.class_count(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Global samples per optimizer step. Derived from the other two and the
    /// world size when absent.
    pub train_batch_size: Option<usize>,
    pub gradient_accumulation_steps: usize,
    pub micro_batch_per_gpu: usize,
    pub wall_clock_breakdown: bool,
    pub fp16_enabled: bool,
    pub zero_stage: u64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub scaling_mode: ScalingMode,
    pub weak_fraction: f64,
    pub data_assignment: DataAssignment,
    pub model: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_batch_size: None,
            gradient_accumulation_steps: 1,
            micro_batch_per_gpu: 16,
            wall_clock_breakdown: false,
            fp16_enabled: false,
            zero_stage: 0,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            optimizer: OptimizerKind::default(),
            scaling_mode: ScalingMode::Strong,
            weak_fraction: DEFAULT_WEAK_FRACTION,
            data_assignment: DataAssignment::Sharded,
            model: ModelShape::default(),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    train_batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gradient_accumulation_steps: Option<usize>,
    #[serde(
        alias = "train_micro_batch_size_per_gpu",
        skip_serializing_if = "Option::is_none"
    )]
    micro_batch_per_gpu: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fp16: Option<Fp16Section>,
    #[serde(skip_serializing_if = "Option::is_none")]
    zero_optimization: Option<ZeroSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_clock_breakdown: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vitdp: Option<Extension>,
    #[serde(flatten)]
    unknown: BTreeMap<String, Value>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Fp16Section {
    #[serde(default)]
    enabled: bool,
    #[serde(flatten)]
    unknown: BTreeMap<String, Value>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ZeroSection {
    #[serde(default)]
    stage: u64,
    #[serde(flatten)]
    unknown: BTreeMap<String, Value>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Extension {
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimizer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    betas: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scaling_mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weak_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_assignment: Option<DataAssignment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelShape>,
    #[serde(flatten)]
    unknown: BTreeMap<String, Value>,
}

fn collect_unknown(prefix: &str, map: &BTreeMap<String, Value>, out: &mut Vec<String>) {
    out.extend(map.keys().map(|k| format!("{prefix}{k}")));
}

impl TrainConfig {
    /// Parses a JSON config. Returns the config and the names of fields that
    /// were ignored.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>), TrainError> {
        let raw: RawConfig = serde_json::from_str(text)
            .map_err(|e| TrainError::Config(format!("config JSON: {e}")))?;
        let mut ignored = Vec::new();
        collect_unknown("", &raw.unknown, &mut ignored);
        let mut cfg = TrainConfig {
            train_batch_size: raw.train_batch_size,
            ..TrainConfig::default()
        };
        if let Some(a) = raw.gradient_accumulation_steps {
            cfg.gradient_accumulation_steps = a;
        }
        cfg.micro_batch_per_gpu = raw
            .micro_batch_per_gpu
            .ok_or_else(|| TrainError::Config("micro_batch_per_gpu is required".into()))?;
        if let Some(f) = &raw.fp16 {
            cfg.fp16_enabled = f.enabled;
            collect_unknown("fp16.", &f.unknown, &mut ignored);
        }
        if let Some(z) = &raw.zero_optimization {
            cfg.zero_stage = z.stage;
            collect_unknown("zero_optimization.", &z.unknown, &mut ignored);
        }
        cfg.wall_clock_breakdown = raw.wall_clock_breakdown.unwrap_or(false);
        if let Some(ext) = raw.vitdp {
            collect_unknown("vitdp.", &ext.unknown, &mut ignored);
            cfg.apply_extension(ext)?;
        }
        for name in &ignored {
            tracing::warn!(field = %name, "ignoring unknown config field");
        }
        Ok((cfg, ignored))
    }

    fn apply_extension(&mut self, ext: Extension) -> Result<(), TrainError> {
        if let Some(e) = ext.epochs {
            self.epochs = e;
        }
        if let Some(s) = ext.seed {
            self.seed = s;
        }
        let kind = ext.optimizer.as_deref().unwrap_or("adam");
        self.optimizer = match kind.to_ascii_lowercase().as_str() {
            "adam" => {
                let [beta1, beta2] = ext.betas.unwrap_or([0.9, 0.999]);
                OptimizerKind::Adam {
                    lr: ext.learning_rate.unwrap_or(DEFAULT_ADAM_LR),
                    beta1,
                    beta2,
                    eps: ext.eps.unwrap_or(1e-8),
                }
            }
            "sgd" => OptimizerKind::Sgd {
                lr: ext.learning_rate.unwrap_or(DEFAULT_SGD_LR),
                momentum: ext.momentum.unwrap_or(0.0),
            },
            other => {
                return Err(TrainError::Config(format!(
                    "unknown optimizer {other:?} (sgd or adam)"
                )))
            }
        };
        if let Some(m) = ext.scaling_mode {
            self.scaling_mode = m.parse()?;
        }
        if let Some(f) = ext.weak_fraction {
            self.weak_fraction = f;
        }
        if let Some(d) = ext.data_assignment {
            self.data_assignment = d;
        }
        if let Some(m) = ext.model {
            self.model = m;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let (optimizer, learning_rate, momentum, betas, eps) = match self.optimizer {
            OptimizerKind::Sgd { lr, momentum } => ("sgd", lr, Some(momentum), None, None),
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => ("adam", lr, None, Some([beta1, beta2]), Some(eps)),
        };
        let raw = RawConfig {
            train_batch_size: self.train_batch_size,
            gradient_accumulation_steps: Some(self.gradient_accumulation_steps),
            micro_batch_per_gpu: Some(self.micro_batch_per_gpu),
            fp16: Some(Fp16Section {
                enabled: self.fp16_enabled,
                ..Default::default()
            }),
            zero_optimization: Some(ZeroSection {
                stage: self.zero_stage,
                ..Default::default()
            }),
            wall_clock_breakdown: Some(self.wall_clock_breakdown),
            vitdp: Some(Extension {
                epochs: Some(self.epochs),
                seed: Some(self.seed),
                optimizer: Some(optimizer.into()),
                learning_rate: Some(learning_rate),
                momentum,
                betas,
                eps,
                scaling_mode: Some(self.scaling_mode.to_string()),
                weak_fraction: Some(self.weak_fraction),
                data_assignment: Some(self.data_assignment),
                model: Some(self.model),
                unknown: BTreeMap::new(),
            }),
            unknown: BTreeMap::new(),
        };
        serde_json::to_string_pretty(&raw).expect("config serializes")
    }

    /// Global batch implied by the per-rank settings.
    pub fn implied_batch(&self, world_size: usize) -> usize {
        self.micro_batch_per_gpu * self.gradient_accumulation_steps * world_size
    }
}

/// Checks the batch identity and feature support for `world_size` ranks and
/// fills in a missing `train_batch_size`.
pub fn validate_config(cfg: TrainConfig, world_size: usize) -> Result<TrainConfig, TrainError> {
    if cfg.fp16_enabled {
        return Err(TrainError::Unsupported(
            "fp16.enabled = true (only fp32 training is implemented)".into(),
        ));
    }
    if cfg.zero_stage > 0 {
        return Err(TrainError::Unsupported(format!(
            "zero_optimization.stage = {} (only stage 0 is implemented)",
            cfg.zero_stage
        )));
    }
    if world_size == 0 {
        return Err(TrainError::Config("world size must be at least 1".into()));
    }
    if cfg.micro_batch_per_gpu == 0 || cfg.gradient_accumulation_steps == 0 {
        return Err(TrainError::Config(
            "micro_batch_per_gpu and gradient_accumulation_steps must be positive".into(),
        ));
    }
    if cfg.epochs == 0 {
        return Err(TrainError::Config("epochs must be positive".into()));
    }
    let implied = cfg.implied_batch(world_size);
    let tbs = cfg.train_batch_size.unwrap_or(implied);
    if tbs != implied {
        return Err(TrainError::Config(format!(
            "batch identity violated: {tbs} ≠ {}×{}×{} \
             (train_batch_size ≠ micro_batch_per_gpu × gradient_accumulation_steps × world_size = {implied})",
            cfg.micro_batch_per_gpu, cfg.gradient_accumulation_steps, world_size
        )));
    }
    match cfg.optimizer {
        OptimizerKind::Sgd { lr, momentum } if !(lr > 0.0 && (0.0..1.0).contains(&momentum)) => {
            return Err(TrainError::Config(format!(
                "sgd needs lr > 0 and momentum in [0, 1), got {lr}, {momentum}"
            )));
        }
        OptimizerKind::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } if !(lr > 0.0
            && (0.0..1.0).contains(&beta1)
            && (0.0..1.0).contains(&beta2)
            && eps > 0.0) =>
        {
            return Err(TrainError::Config(format!(
                "adam needs lr > 0, betas in [0, 1) and eps > 0, got {lr}, {beta1}, {beta2}, {eps}"
            )));
        }
        _ => {}
    }
    Ok(TrainConfig {
        train_batch_size: Some(tbs),
        ..cfg
    })
}
