//! Per-component RMSE scoring, baselines, absence detection and report output.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::datagen::{Blend, DecomposedSample};
use crate::error::{Result, TsdError};
use crate::model::{TsdModel, COMPONENTS};

/// Default absence threshold on the RMS amplitude of a predicted component.
pub const DEFAULT_TAU: f64 = 0.05;

/// `√((1/M) ‖x − x̂‖²)`.
pub fn rmse(x: &[f32], x_hat: &[f32]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(TsdError::input(format!(
            "rmse of signals with lengths {} and {}",
            x.len(),
            x_hat.len()
        )));
    }
    if x.is_empty() {
        return Err(TsdError::input("rmse of empty signals"));
    }
    let sq: f64 = x
        .iter()
        .zip(x_hat)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok((sq / x.len() as f64).sqrt())
}

/// Root-mean-square amplitude.
pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// A component is absent when its RMS amplitude falls below `tau`.
pub fn absence_flags(components: [&[f32]; 4], tau: f64) -> Result<[bool; 4]> {
    if !(tau > 0.0) {
        return Err(TsdError::Usage(format!("absence threshold must be positive, got {tau}")));
    }
    Ok(components.map(|x| rms(x) < tau))
}

/// Which samples of a split are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    /// The first sample of each distinct blend row.
    Reduced13,
    Full,
}

impl std::str::FromStr for Subset {
    type Err = TsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced13" => Ok(Subset::Reduced13),
            "full" => Ok(Subset::Full),
            other => Err(TsdError::Usage(format!(
                "unknown subset {other:?} (expected reduced13 or full)"
            ))),
        }
    }
}

/// Indices of the scored samples, in dataset order.
pub fn select(samples: &[DecomposedSample], subset: Subset) -> Vec<usize> {
    match subset {
        Subset::Full => (0..samples.len()).collect(),
        Subset::Reduced13 => {
            let mut seen: Vec<Blend> = Vec::new();
            let mut picked = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                if !seen.contains(&s.blend) {
                    seen.push(s.blend);
                    picked.push(i);
                }
            }
            picked
        }
    }
}

/// Scores of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub index: usize,
    pub blend: Blend,
    pub rmse: [f64; 4],
    /// Absence flags of the predicted components.
    pub absent: [bool; 4],
}

impl SampleScore {
    pub fn rmse_avg(&self) -> f64 {
        self.rmse.iter().sum::<f64>() / 4.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub label: String,
    /// Per-component RMSE averaged over samples, `(c, s, o, n)`.
    pub rmse: [f64; 4],
    pub rmse_avg: f64,
    pub tau: f64,
    pub samples: Vec<SampleScore>,
}

impl ComponentReport {
    /// Averages per-sample scores. Errors on an empty subset.
    pub fn from_scores(label: impl Into<String>, tau: f64, samples: Vec<SampleScore>) -> Result<Self> {
        if samples.is_empty() {
            return Err(TsdError::Usage("evaluation subset is empty".into()));
        }
        let n = samples.len() as f64;
        let mut rmse = [0.0; 4];
        for s in &samples {
            for (acc, v) in rmse.iter_mut().zip(s.rmse) {
                *acc += v;
            }
        }
        rmse.iter_mut().for_each(|v| *v /= n);
        Ok(ComponentReport {
            label: label.into(),
            rmse,
            rmse_avg: rmse.iter().sum::<f64>() / 4.0,
            tau,
            samples,
        })
    }

    /// Aligned text table, values ×10⁻³.
    pub fn to_table(&self, per_sample: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "", "samples", "c", "s", "o", "n", "average"
        );
        let _ = writeln!(out, "{:<24} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}", "", "", "", "", "", "", "(x1e-3)");
        let row = |out: &mut String, name: &str, count: &str, r: &[f64; 4], avg: f64| {
            let _ = writeln!(
                out,
                "{:<24} {:>8} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
                name,
                count,
                r[0] * 1e3,
                r[1] * 1e3,
                r[2] * 1e3,
                r[3] * 1e3,
                avg * 1e3
            );
        };
        row(&mut out, &self.label, &self.samples.len().to_string(), &self.rmse, self.rmse_avg);
        if per_sample {
            for s in &self.samples {
                let b = s.blend;
                let name = format!("  #{} ({:.2},{:.2},{:.2})", s.index, b.c, b.s, b.o);
                row(&mut out, &name, "", &s.rmse, s.rmse_avg());
            }
        }
        out
    }

    /// One row per sample, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "index,b_c,b_s,b_o,rmse_c,rmse_s,rmse_o,rmse_n,rmse_avg,absent_c,absent_s,absent_o,absent_n\n",
        );
        for s in &self.samples {
            let b = s.blend;
            let _ = write!(out, "{},{},{},{}", s.index, b.c, b.s, b.o);
            for v in s.rmse {
                let _ = write!(out, ",{v:.9e}");
            }
            let _ = write!(out, ",{:.9e}", s.rmse_avg());
            for a in s.absent {
                let _ = write!(out, ",{}", a as u8);
            }
            out.push('\n');
        }
        let _ = write!(out, "mean,,,");
        for v in self.rmse {
            let _ = write!(out, ",{v:.9e}");
        }
        let _ = writeln!(out, ",{:.9e},,,,", self.rmse_avg);
        out
    }
}

/// Scores a prediction given in `(c, s, o, n)` order against one sample.
pub fn score_sample(
    index: usize,
    sample: &DecomposedSample,
    pred: [&[f32]; 4],
    tau: f64,
) -> Result<SampleScore> {
    let truth = sample.components();
    let mut r = [0.0; 4];
    for j in 0..4 {
        r[j] = rmse(truth[j], pred[j]).map_err(|e| {
            TsdError::input(format!("sample {index}, component {}: {e}", COMPONENTS[j]))
        })?;
    }
    Ok(SampleScore {
        index,
        blend: sample.blend,
        rmse: r,
        absent: absence_flags(pred, tau)?,
    })
}

/// Reference predictors that need no model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// All four components zero.
    Zero,
    /// `ĉ = f`, the others zero.
    Identity,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Zero => "zero predictor",
            Baseline::Identity => "identity (c = f)",
        }
    }
}

pub fn evaluate_baseline(
    baseline: Baseline,
    samples: &[DecomposedSample],
    indices: &[usize],
    tau: f64,
) -> Result<ComponentReport> {
    let scores = indices
        .iter()
        .map(|&i| {
            let s = &samples[i];
            let zeros = vec![0.0f32; s.len()];
            let c: &[f32] = match baseline {
                Baseline::Zero => &zeros,
                Baseline::Identity => &s.f,
            };
            score_sample(i, s, [c, &zeros, &zeros, &zeros], tau)
        })
        .collect::<Result<Vec<_>>>()?;
    ComponentReport::from_scores(baseline.name(), tau, scores)
}

/// Scores `model` on the selected samples in evaluation mode. Samples are
/// processed in parallel; the reduction runs in index order.
pub fn evaluate(
    model: &TsdModel<f32>,
    samples: &[DecomposedSample],
    indices: &[usize],
    tau: f64,
    label: &str,
) -> Result<ComponentReport> {
    if let Some(s) = samples.first() {
        if s.len() != model.config.m {
            return Err(TsdError::config(format!(
                "dataset has M = {}, checkpoint expects M = {}",
                s.len(),
                model.config.m
            )));
        }
    }
    let scores = indices
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let d = model.predict(&s.f)?;
            let [c, so, o, n] = &d.components;
            score_sample(i, s, [c, so, o, n], tau)
        })
        .collect::<Result<Vec<_>>>()?;
    ComponentReport::from_scores(label, tau, scores)
}

/// Fraction of samples with exactly one present ground-truth component whose
/// two absent signal components (among c, s, o) are both flagged absent.
/// Returns `(hits, total)`.
pub fn absence_hits(report: &ComponentReport) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for s in &report.samples {
        let present: Vec<bool> = s.blend.as_array().iter().map(|&b| b > 0.0).collect();
        if present.iter().filter(|&&p| p).count() != 1 {
            continue;
        }
        total += 1;
        if (0..3).all(|j| present[j] || s.absent[j]) {
            hits += 1;
        }
    }
    (hits, total)
}
