//! Loss, Adam, the one-cycle schedule, and the epoch loop.

mod adam;
mod schedule;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use adam::{Adam, AdamConfig};
pub use schedule::{one_cycle_lr, Scheduler};

use crate::datagen::{splitmix64, DecomposedSample};
use crate::error::{Result, TsdError};
use crate::eval::{self, ComponentReport};
use crate::model::{checkpoint, tsd_forward, ParamVars, TsdModel};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Header of the per-epoch metrics CSV.
pub const METRICS_HEADER: &str = "epoch,train_loss,rmse_c,rmse_s,rmse_o,rmse_n,rmse_avg,lr";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Full passes over the training split.
    pub epochs: usize,
    /// Optional cap on optimizer steps; whichever budget runs out first wins.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    pub scheduler: Scheduler,
    /// Seeds batch order and dropout masks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            epochs: 15_000,
            max_steps: None,
            adam: AdamConfig::default(),
            scheduler: Scheduler::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TsdError::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TsdError::config("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(TsdError::config("epochs must be at least 1"));
        }
        if self.max_steps == Some(0) {
            return Err(TsdError::config("max_steps must be at least 1"));
        }
        self.adam.validate()
    }

    /// Steps per epoch after dropping the last partial batch.
    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len / self.batch_size
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        let by_epochs = self.epochs * self.steps_per_epoch(train_len);
        self.max_steps.map_or(by_epochs, |cap| cap.min(by_epochs))
    }
}

/// Ground truth as an `[M, 4]` row-major tensor with columns `(c, s, o, n)`.
pub fn truth_tensor<T: Real>(sample: &DecomposedSample) -> Tensor<T> {
    let [c, s, o, n] = sample.components();
    let mut data = Vec::with_capacity(4 * sample.len());
    for i in 0..sample.len() {
        for comp in [c, s, o, n] {
            data.push(T::lit(comp[i] as f64));
        }
    }
    Tensor::new(vec![sample.len(), 4], data).expect("shape matches data")
}

/// `Σ_x (1/M) ‖x − x̂‖²` over the four columns of `[M, 4]` tensors.
pub fn decomposition_loss<T: Real>(tape: &mut Tape<T>, pred: Var, truth: Var) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape.len() != 2 || shape[1] != 4 || tape.value(truth).shape() != shape.as_slice() {
        return Err(TsdError::input(format!(
            "decomposition loss needs two [M, 4] tensors, got {:?} and {:?}",
            shape,
            tape.value(truth).shape()
        )));
    }
    let sq = tape.squared_error(pred, truth)?;
    Ok(tape.scale(sq, T::lit(1.0 / shape[0] as f64)))
}

/// Plain-value counterpart of [`decomposition_loss`] on component slices.
pub fn decomposition_loss_value(pred: [&[f32]; 4], truth: [&[f32]; 4]) -> Result<f64> {
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(&truth) {
        let r = eval::rmse(t, p)?;
        total += r * r;
    }
    Ok(total)
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    model: &TsdModel<f32>,
    sample: &DecomposedSample,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, &model.params, true);
    let pred = tsd_forward(&mut tape, &model.config, &pv, &sample.f, dropout_rng)?;
    let truth = tape.constant(truth_tensor(sample));
    let loss = decomposition_loss(&mut tape, pred, truth)?;
    let value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    let out = pv
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, out))
}

/// Dropout stream for one sample of one step.
fn dropout_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xD50F_0A7E));
    rng.set_stream(((step as u64) << 20) | slot as u64);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5EED_B47C));
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Batch-mean loss and gradients. Samples run in parallel; gradients are
/// accumulated strictly in batch order so the result is independent of the
/// worker count.
pub fn batch_gradients(
    model: &TsdModel<f32>,
    samples: &[&DecomposedSample],
    seed: u64,
    step: usize,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let training = model.config.dropout > 0.0;
    let group = rayon::current_num_threads().max(1);
    let mut acc: Vec<Tensor<f32>> = model.params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut loss = 0.0;
    for (g, chunk) in samples.chunks(group).enumerate() {
        let results = chunk
            .par_iter()
            .enumerate()
            .map(|(j, s)| {
                let mut rng = training.then(|| dropout_rng(seed, step, g * group + j));
                sample_gradients(model, s, rng.as_mut())
            })
            .collect::<Vec<_>>();
        for r in results {
            let (l, grads) = r?;
            loss += l;
            for (a, g) in acc.iter_mut().zip(grads) {
                a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += *y);
            }
        }
    }
    let scale = 1.0 / samples.len() as f32;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((loss / samples.len() as f64, acc))
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub rmse: [f64; 4],
    pub rmse_avg: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch,
            self.train_loss,
            self.rmse[0],
            self.rmse[1],
            self.rmse[2],
            self.rmse[3],
            self.rmse_avg,
            self.lr
        )
    }
}

/// Mutable optimisation state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: Adam<f32>,
    pub epoch: usize,
    pub best_rmse_avg: f64,
    pub best_epoch: Option<usize>,
}

/// Where a run writes its artefacts. Both are optional so that tests can
/// train purely in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_model: TsdModel<f32>,
    /// Parameters with the lowest validation average RMSE.
    pub best_model: TsdModel<f32>,
    pub best_rmse_avg: f64,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Batch-mean training loss of every step.
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

fn check_lengths(model: &TsdModel<f32>, split: &[DecomposedSample], name: &str) -> Result<()> {
    if let Some(bad) = split.iter().find(|s| s.len() != model.config.m) {
        return Err(TsdError::config(format!(
            "{name} split has M = {}, model expects M = {}",
            bad.len(),
            model.config.m
        )));
    }
    Ok(())
}

fn validate_model(model: &TsdModel<f32>, val: &[DecomposedSample]) -> Result<ComponentReport> {
    let all: Vec<usize> = (0..val.len()).collect();
    eval::evaluate(model, val, &all, eval::DEFAULT_TAU, "validation")
}

/// Trains `model` with Adam, validating after every epoch and saving the
/// checkpoint whenever the validation average RMSE improves.
pub fn train(
    mut model: TsdModel<f32>,
    cfg: &TrainConfig,
    train_split: &[DecomposedSample],
    val_split: &[DecomposedSample],
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.validate()?;
    check_lengths(&model, train_split, "training")?;
    check_lengths(&model, val_split, "validation")?;
    if val_split.is_empty() {
        return Err(TsdError::Usage("validation split is empty".into()));
    }
    let per_epoch = cfg.steps_per_epoch(train_split.len());
    if per_epoch == 0 {
        return Err(TsdError::config(format!(
            "training split of {} samples is smaller than one batch of {}",
            train_split.len(),
            cfg.batch_size
        )));
    }
    let total = cfg.total_steps(train_split.len());

    let mut log = match &outputs.metrics {
        Some(p) => Some(create_log(p)?),
        None => None,
    };

    let mut state = TrainState {
        adam: Adam::new(cfg.adam, model.params.tensors()),
        epoch: 0,
        best_rmse_avg: f64::INFINITY,
        best_epoch: None,
    };
    let mut best_model = model.clone();
    let mut metrics = Vec::new();
    let mut step_losses = Vec::with_capacity(total);
    let mut step = 0;

    while step < total {
        let order = epoch_order(cfg.seed, state.epoch, train_split.len());
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        let mut lr = cfg.lr;
        for batch in order.chunks_exact(cfg.batch_size).take(per_epoch) {
            if step >= total {
                break;
            }
            lr = cfg.scheduler.lr(step, total, cfg.lr)?;
            let samples: Vec<&DecomposedSample> = batch.iter().map(|&i| &train_split[i]).collect();
            let (loss, grads) = batch_gradients(&model, &samples, cfg.seed, step)?;
            if !loss.is_finite() {
                return Err(TsdError::NonFinite {
                    context: format!("training loss at step {step}"),
                });
            }
            state.adam.step(&mut model.params, &grads, lr)?;
            step_losses.push(loss);
            epoch_loss += loss;
            epoch_steps += 1;
            step += 1;
        }

        let report = validate_model(&model, val_split)?;
        let row = EpochMetrics {
            epoch: state.epoch,
            train_loss: epoch_loss / epoch_steps.max(1) as f64,
            rmse: report.rmse,
            rmse_avg: report.rmse_avg,
            lr,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", row.csv_row())?;
            w.flush()?;
        }
        if row.rmse_avg < state.best_rmse_avg {
            state.best_rmse_avg = row.rmse_avg;
            state.best_epoch = Some(state.epoch);
            best_model = model.clone();
            if let Some(p) = &outputs.checkpoint {
                checkpoint::save(p, &model)?;
            }
        }
        metrics.push(row);
        state.epoch += 1;
    }

    Ok(TrainReport {
        final_model: model,
        best_model,
        best_rmse_avg: state.best_rmse_avg,
        best_epoch: state.best_epoch.unwrap_or(0),
        metrics,
        step_losses,
        steps: step,
    })
}

fn create_log(path: &Path) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    Ok(w)
}
