//! Flat `key = value` run configurations and the named presets.
//!
//! Every key is optional in a file; missing keys keep the value of the base
//! configuration the file is applied to. Unknown or repeated keys are errors.
//! [`RunConfig::to_text`] writes every key, and parsing that text reproduces
//! the configuration exactly.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::datagen::{split_ranges, DatasetPlan, DecomposedSample, NoiseScaling, DEFAULT_SNR_DB};
use crate::error::{Result, TsdError};
use crate::model::{Adapter, ModelConfig};
use crate::training::{Scheduler, TrainConfig};

/// Synthetic-data settings. The signal length is the model's `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub snr_db: f64,
    pub seed: u64,
    pub noise_scaling: NoiseScaling,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            snr_db: DEFAULT_SNR_DB,
            seed: 2024,
            noise_scaling: NoiseScaling::SqrtLength,
            train_count: 12_000,
            val_count: 2_000,
            test_count: 4_000,
        }
    }
}

impl DataConfig {
    pub fn total(&self) -> usize {
        self.train_count + self.val_count + self.test_count
    }

    /// One plan covering all three splits, which are contiguous index ranges.
    pub fn plan(&self, m: usize) -> DatasetPlan {
        let mut plan = DatasetPlan::new(self.total(), m, self.snr_db, self.seed);
        plan.spec.noise_scaling = self.noise_scaling;
        plan
    }

    /// Generates `(train, val, test)` in memory.
    pub fn generate(&self, m: usize) -> Result<[Vec<DecomposedSample>; 3]> {
        let plan = self.plan(m);
        plan.validate()?;
        let ranges = split_ranges(
            plan.count,
            &[self.train_count, self.val_count, self.test_count],
        )?;
        Ok([
            plan.generate_range(ranges[0].clone())?,
            plan.generate_range(ranges[1].clone())?,
            plan.generate_range(ranges[2].clone())?,
        ])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathConfig,
}


/// Every recognised key, in serialisation order.
pub const KEYS: &[&str] = &[
    "model.m",
    "model.d",
    "model.layers",
    "model.heads",
    "model.chunk",
    "model.adapter",
    "model.dropout",
    "model.zero_init_head",
    "model.output_kernel",
    "model.scale_dk",
    "train.lr",
    "train.batch_size",
    "train.epochs",
    "train.max_steps",
    "train.scheduler",
    "train.seed",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "data.snr_db",
    "data.seed",
    "data.noise_scaling",
    "data.train_count",
    "data.val_count",
    "data.test_count",
    "paths.train",
    "paths.val",
    "paths.test",
    "paths.checkpoint",
    "paths.metrics",
];

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| TsdError::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(TsdError::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn noise_name(n: NoiseScaling) -> &'static str {
    match n {
        NoiseScaling::SqrtLength => "sqrt_m",
        NoiseScaling::Length => "m",
    }
}

impl RunConfig {
    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        let p = &mut self.paths;
        match key {
            "model.m" => m.m = parse_num(key, v)?,
            "model.d" => m.d = parse_num(key, v)?,
            "model.layers" => m.layers = parse_num(key, v)?,
            "model.heads" => m.heads = parse_num(key, v)?,
            "model.chunk" => m.chunk = parse_num(key, v)?,
            "model.adapter" => m.adapter = v.parse()?,
            "model.dropout" => m.dropout = parse_num(key, v)?,
            "model.zero_init_head" => m.zero_init_head = parse_bool(key, v)?,
            "model.output_kernel" => m.output_kernel = parse_num(key, v)?,
            "model.scale_dk" => m.scale_dk = parse_bool(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.max_steps" => {
                t.max_steps = match v {
                    "" | "none" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "train.scheduler" => t.scheduler = v.parse()?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.adam_beta1" => t.adam.beta1 = parse_num(key, v)?,
            "train.adam_beta2" => t.adam.beta2 = parse_num(key, v)?,
            "train.adam_eps" => t.adam.eps = parse_num(key, v)?,
            "data.snr_db" => d.snr_db = parse_num(key, v)?,
            "data.seed" => d.seed = parse_num(key, v)?,
            "data.noise_scaling" => {
                d.noise_scaling = match v {
                    "sqrt_m" => NoiseScaling::SqrtLength,
                    "m" => NoiseScaling::Length,
                    _ => {
                        return Err(TsdError::config(format!(
                            "{key}: expected sqrt_m or m, got {v:?}"
                        )))
                    }
                }
            }
            "data.train_count" => d.train_count = parse_num(key, v)?,
            "data.val_count" => d.val_count = parse_num(key, v)?,
            "data.test_count" => d.test_count = parse_num(key, v)?,
            "paths.train" => p.train = parse_path(v),
            "paths.val" => p.val = parse_path(v),
            "paths.test" => p.test = parse_path(v),
            "paths.checkpoint" => p.checkpoint = parse_path(v),
            "paths.metrics" => p.metrics = parse_path(v),
            _ => return Err(TsdError::config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, d, p) = (&self.model, &self.train, &self.data, &self.paths);
        Some(match key {
            "model.m" => m.m.to_string(),
            "model.d" => m.d.to_string(),
            "model.layers" => m.layers.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.chunk" => m.chunk.to_string(),
            "model.adapter" => m.adapter.to_string(),
            "model.dropout" => m.dropout.to_string(),
            "model.zero_init_head" => m.zero_init_head.to_string(),
            "model.output_kernel" => m.output_kernel.to_string(),
            "model.scale_dk" => m.scale_dk.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.max_steps" => t.max_steps.map_or_else(|| "none".into(), |s| s.to_string()),
            "train.scheduler" => t.scheduler.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.adam_beta1" => t.adam.beta1.to_string(),
            "train.adam_beta2" => t.adam.beta2.to_string(),
            "train.adam_eps" => t.adam.eps.to_string(),
            "data.snr_db" => d.snr_db.to_string(),
            "data.seed" => d.seed.to_string(),
            "data.noise_scaling" => noise_name(d.noise_scaling).into(),
            "data.train_count" => d.train_count.to_string(),
            "data.val_count" => d.val_count.to_string(),
            "data.test_count" => d.test_count.to_string(),
            "paths.train" => show_path(&p.train),
            "paths.val" => show_path(&p.val),
            "paths.test" => show_path(&p.test),
            "paths.checkpoint" => show_path(&p.checkpoint),
            "paths.metrics" => show_path(&p.metrics),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TsdError::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(TsdError::config(format!("line {}: key {key:?} repeated", lineno + 1)));
            }
            self.set(key, value)
                .map_err(|e| TsdError::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Parses a file's text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.plan(self.model.m).spec.validate(self.model.m)
    }

    pub fn preset(name: &str) -> Result<Self> {
        preset(name)
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "paper-chunks",
    "paper-no-chunks",
    "ablation-row1",
    "ablation-row2",
    "ablation-row3",
    "ablation-row4",
    "ablation-row5",
    "ablation-row6",
    "ablation-row7",
    "ablation-row8",
    "ablation-row9",
    "ablation-row10",
    "overfit",
    "desk",
];

/// `(adapter, S, zero_init_head, one-cycle)` of each ablation row.
const ABLATION_ROWS: [(Adapter, usize, bool, bool); 10] = [
    (Adapter::NoChunks, 1, false, false),
    (Adapter::Sum, 4, false, false),
    (Adapter::Cat, 4, false, false),
    (Adapter::Conv, 4, false, false),
    (Adapter::Conv, 2, false, false),
    (Adapter::Conv, 8, false, false),
    (Adapter::Conv, 4, true, false),
    (Adapter::Conv, 4, true, true),
    (Adapter::NoChunks, 1, true, false),
    (Adapter::NoChunks, 1, true, true),
];

fn ablation_data() -> DataConfig {
    DataConfig {
        train_count: 2000,
        val_count: 500,
        test_count: 500,
        ..DataConfig::default()
    }
}

/// A named configuration.
///
/// * `paper-chunks`, `paper-no-chunks`: the full-size variants (four layers,
///   12000/2000/4000 samples, 15000 epochs).
/// * `ablation-row1` … `ablation-row10`: two-layer ablation grid on
///   2000/500/500 samples.
/// * `overfit`: eight samples at `M = 128`, 2000 steps, no dropout.
/// * `desk`: the `ablation-row4` architecture at `D = 256` with a budget that
///   fits a single CPU core.
pub fn preset(name: &str) -> Result<RunConfig> {
    let base = RunConfig::default();
    let cfg = match name {
        "paper-chunks" => base,
        "paper-no-chunks" => RunConfig {
            model: ModelConfig::paper_no_chunks(),
            ..base
        },
        "overfit" => RunConfig {
            model: ModelConfig {
                m: 128,
                d: 64,
                layers: 2,
                heads: 4,
                chunk: 4,
                adapter: Adapter::Conv,
                dropout: 0.0,
                ..ModelConfig::paper_chunks()
            },
            train: TrainConfig {
                batch_size: 8,
                epochs: 2000,
                max_steps: Some(2000),
                seed: 1,
                ..TrainConfig::default()
            },
            data: DataConfig {
                train_count: 8,
                val_count: 8,
                test_count: 0,
                seed: 128,
                ..DataConfig::default()
            },
            paths: PathConfig::default(),
        },
        "desk" => RunConfig {
            model: ModelConfig {
                d: 256,
                layers: 2,
                ..ModelConfig::paper_chunks()
            },
            train: TrainConfig {
                lr: DESK_LR,
                batch_size: DESK_BATCH,
                epochs: DESK_EPOCHS,
                scheduler: Scheduler::OneCycle,
                seed: 1,
                ..TrainConfig::default()
            },
            data: ablation_data(),
            paths: PathConfig::default(),
        },
        _ => {
            let row = name
                .strip_prefix("ablation-row")
                .and_then(|r| r.parse::<usize>().ok())
                .filter(|r| (1..=10).contains(r))
                .ok_or_else(|| {
                    TsdError::Usage(format!(
                        "unknown preset {name:?}; available: {}",
                        PRESETS.join(", ")
                    ))
                })?;
            let (adapter, chunk, zero_init_head, one_cycle) = ABLATION_ROWS[row - 1];
            RunConfig {
                model: ModelConfig {
                    layers: 2,
                    adapter,
                    chunk,
                    zero_init_head,
                    ..ModelConfig::paper_chunks()
                },
                train: TrainConfig {
                    scheduler: if one_cycle {
                        Scheduler::OneCycle
                    } else {
                        Scheduler::Constant
                    },
                    ..TrainConfig::default()
                },
                data: ablation_data(),
                paths: PathConfig::default(),
            }
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

// The desk budget: 40 epochs of 125 steps (5000 updates), about 90 minutes
// on one CPU core. Small batches buy more updates for the same compute.
pub const DESK_LR: f64 = 3e-4;
pub const DESK_BATCH: usize = 16;
pub const DESK_EPOCHS: usize = 40;

/// Published reference RMSEs (×10⁻³, order c, s, o, n, average) that the
/// full-scale presets target. Desk-scale runs are not expected to reach them.
pub mod reference {
    /// Ablation grid, rows 1–10.
    pub const ABLATION: [[f64; 5]; 10] = [
        [5.996, 5.933, 1.840, 2.329, 4.024],
        [6.654, 5.900, 1.211, 4.338, 4.526],
        [7.096, 6.164, 1.314, 3.667, 4.561],
        [6.821, 5.572, 1.061, 3.546, 4.250],
        [6.938, 6.133, 1.321, 2.838, 4.308],
        [6.901, 5.994, 1.042, 4.364, 4.575],
        [6.913, 5.722, 1.124, 3.577, 4.334],
        [7.266, 5.809, 1.158, 3.702, 4.484],
        [6.077, 5.890, 1.526, 2.369, 3.966],
        [6.215, 5.796, 1.701, 2.531, 4.061],
    ];
    pub const CHUNKS_REDUCED13: [f64; 5] = [4.248, 3.853, 0.879, 3.020, 2.999];
    pub const NO_CHUNKS_REDUCED13: [f64; 5] = [2.983, 2.873, 0.997, 1.762, 2.153];
    pub const CHUNKS_FULL: [f64; 5] = [4.107, 3.757, 0.686, 2.924, 2.869];
    pub const NO_CHUNKS_FULL: [f64; 5] = [3.230, 3.092, 0.843, 1.811, 2.244];

    /// `(description, preset, subset, values)` for every published target.
    pub fn targets() -> Vec<(String, String, &'static str, [f64; 5])> {
        let mut out: Vec<(String, String, &'static str, [f64; 5])> = ABLATION
            .iter()
            .enumerate()
            .map(|(i, v)| {
                (
                    format!("ablation row {}", i + 1),
                    format!("ablation-row{}", i + 1),
                    "full",
                    *v,
                )
            })
            .collect();
        out.push(("chunks, 13 signals".into(), "paper-chunks".into(), "reduced13", CHUNKS_REDUCED13));
        out.push(("no chunks, 13 signals".into(), "paper-no-chunks".into(), "reduced13", NO_CHUNKS_REDUCED13));
        out.push(("chunks, 4000 signals".into(), "paper-chunks".into(), "full", CHUNKS_FULL));
        out.push(("no chunks, 4000 signals".into(), "paper-no-chunks".into(), "full", NO_CHUNKS_FULL));
        out
    }
}
