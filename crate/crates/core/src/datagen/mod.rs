//! Synthetic mixtures `f = c + s + o + n` with exact ground truth.
//!
//! Each observation blends a piecewise-constant (cartoon) component, a
//! low-band smooth component, and a high-band oscillatory component, all
//! normalised to zero mean and unit variance, and adds white Gaussian noise
//! calibrated to a target SNR.

pub mod format;

use std::f64::consts::PI;
use std::ops::Range;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Result, TsdError};

/// Default signal length.
pub const DEFAULT_LENGTH: usize = 512;
/// Default observation SNR in dB.
pub const DEFAULT_SNR_DB: f64 = 20.0;

const MAX_ATTEMPTS: u64 = 64;

/// A real sequence of `M` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal(pub Vec<f64>);

impl Signal {
    pub fn zeros(m: usize) -> Self {
        Signal(vec![0.0; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// Biased variance (divisor `M`).
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.0.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / self.0.len() as f64
    }

    /// `‖x − mean(x)‖₂`.
    pub fn centered_norm(&self) -> f64 {
        let mean = self.mean();
        self.0.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt()
    }
}

/// Term-count and frequency-index bounds for a band-limited component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandSpec {
    pub n_min: usize,
    pub n_max: usize,
    pub k_min: usize,
    pub k_max: usize,
}

impl BandSpec {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(TsdError::config(format!(
                "band term counts must satisfy 1 <= n_min <= n_max, got [{}, {}]",
                self.n_min, self.n_max
            )));
        }
        if self.k_min < 1 || self.k_min > self.k_max || 2 * self.k_max >= m {
            return Err(TsdError::config(format!(
                "band frequencies must satisfy 1 <= k_min <= k_max < M/2 = {}, got [{}, {}]",
                m / 2,
                self.k_min,
                self.k_max
            )));
        }
        Ok(())
    }
}

/// Jump-spacing and jump-amplitude bounds for the cartoon component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartoonSpec {
    pub d_min: usize,
    pub d_max: usize,
    pub a_min: f64,
    pub a_max: f64,
}

impl CartoonSpec {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.d_min < 1 || self.d_min > self.d_max || self.d_max > m {
            return Err(TsdError::config(format!(
                "jump distances must satisfy 1 <= d_min <= d_max <= M, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if !(self.a_min > 0.0 && self.a_min <= self.a_max && self.a_max.is_finite()) {
            return Err(TsdError::config(format!(
                "jump amplitudes must satisfy 0 < a_min <= a_max, got [{}, {}]",
                self.a_min, self.a_max
            )));
        }
        Ok(())
    }
}

/// How the noise standard deviation is scaled by the signal length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseScaling {
    /// `σ = 10^(−SNR/20) ‖f̄ − E f̄‖ / √M`, which realises the requested SNR.
    #[default]
    SqrtLength,
    /// Divides by `M` instead of `√M`; kept for compatibility with the
    /// formula as usually printed. The realised SNR is then higher than asked.
    Length,
}

/// Generation parameters for all three deterministic components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenSpec {
    pub cartoon: CartoonSpec,
    pub smooth: BandSpec,
    pub oscillatory: BandSpec,
    pub noise_scaling: NoiseScaling,
}

impl GenSpec {
    /// Reference setup for `M = 512`.
    pub fn paper() -> Self {
        GenSpec {
            cartoon: CartoonSpec {
                d_min: 40,
                d_max: 50,
                a_min: 0.5,
                a_max: 1.0,
            },
            smooth: BandSpec {
                n_min: 1,
                n_max: 3,
                k_min: 2,
                k_max: 7,
            },
            oscillatory: BandSpec {
                n_min: 1,
                n_max: 3,
                k_min: 70,
                k_max: 80,
            },
            noise_scaling: NoiseScaling::SqrtLength,
        }
    }

    /// The reference setup rescaled to length `m`: frequency indices and jump
    /// distances scale by `m / 512`, keeping at least `n_max` admissible
    /// frequencies per band.
    pub fn scaled(m: usize) -> Self {
        let base = Self::paper();
        if m == DEFAULT_LENGTH {
            return base;
        }
        let ratio = m as f64 / DEFAULT_LENGTH as f64;
        let scale = |v: usize| ((v as f64 * ratio).round() as usize).max(1);
        let band = |b: BandSpec| {
            let k_min = scale(b.k_min);
            let k_max = scale(b.k_max).max(k_min + b.n_max - 1);
            BandSpec { k_min, k_max, ..b }
        };
        let d_min = scale(base.cartoon.d_min);
        GenSpec {
            cartoon: CartoonSpec {
                d_min,
                d_max: scale(base.cartoon.d_max).max(d_min),
                ..base.cartoon
            },
            smooth: band(base.smooth),
            oscillatory: band(base.oscillatory),
            noise_scaling: base.noise_scaling,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        self.cartoon.validate(m)?;
        self.smooth.validate(m)?;
        self.oscillatory.validate(m)
    }
}

/// Blending factors `(b_c, b_s, b_o)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blend {
    pub c: f32,
    pub s: f32,
    pub o: f32,
}

impl Blend {
    pub const fn new(c: f32, s: f32, o: f32) -> Self {
        Blend { c, s, o }
    }

    pub fn as_array(&self) -> [f32; 3] {
        [self.c, self.s, self.o]
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.as_array();
        if v.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(TsdError::config(format!(
                "blending factors must lie in [0, 1], got {v:?}"
            )));
        }
        if v.iter().all(|&b| b == 0.0) {
            return Err(TsdError::config("at least one blending factor must be positive"));
        }
        Ok(())
    }

    /// Parses `"b_c,b_s,b_o;..."`; each factor may be a decimal or `p/q`.
    pub fn parse_list(text: &str) -> Result<Vec<Blend>> {
        let factor = |s: &str| -> Result<f32> {
            let s = s.trim();
            let bad = || TsdError::config(format!("bad blending factor {s:?}"));
            match s.split_once('/') {
                Some((p, q)) => {
                    let p: f64 = p.trim().parse().map_err(|_| bad())?;
                    let q: f64 = q.trim().parse().map_err(|_| bad())?;
                    Ok((p / q) as f32)
                }
                None => s.parse().map_err(|_| bad()),
            }
        };
        let rows: Vec<Blend> = text
            .split(';')
            .filter(|r| !r.trim().is_empty())
            .map(|row| {
                let parts: Vec<&str> = row.split(',').collect();
                if parts.len() != 3 {
                    return Err(TsdError::config(format!(
                        "blend row {row:?} needs three factors"
                    )));
                }
                let b = Blend::new(factor(parts[0])?, factor(parts[1])?, factor(parts[2])?);
                b.validate()?;
                Ok(b)
            })
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            return Err(TsdError::config("blend list is empty"));
        }
        Ok(rows)
    }
}

/// The 13 reference mixtures.
pub fn paper_blends() -> Vec<Blend> {
    const T: f32 = 1.0 / 3.0;
    const TT: f32 = 2.0 / 3.0;
    vec![
        Blend::new(1.0, 0.0, 0.0),
        Blend::new(0.0, 1.0, 0.0),
        Blend::new(0.0, 0.0, 1.0),
        Blend::new(T, TT, 0.0),
        Blend::new(TT, T, 0.0),
        Blend::new(0.0, T, TT),
        Blend::new(0.0, TT, T),
        Blend::new(T, 0.0, TT),
        Blend::new(TT, 0.0, T),
        Blend::new(T, T, T),
        Blend::new(0.2, 0.2, 0.6),
        Blend::new(0.6, 0.2, 0.2),
        Blend::new(0.2, 0.6, 0.2),
    ]
}

/// One frequency term of a band-limited component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierTerm {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// `x_i = Σ α_k cos(2π k i / M) + β_k sin(2π k i / M)` for `i in 0..M`.
pub fn synthesize(terms: &[FourierTerm], m: usize) -> Signal {
    let mut x = vec![0.0; m];
    for term in terms {
        for (i, xi) in x.iter_mut().enumerate() {
            // reduce k·i mod M first so the phase stays exact for large i
            let phase = 2.0 * PI * ((term.k * i) % m) as f64 / m as f64;
            *xi += term.alpha * phase.cos() + term.beta * phase.sin();
        }
    }
    Signal(x)
}

/// Draws the terms of a band-limited component: the term count uniform in
/// `[n_min, n_max]`, distinct frequency indices uniform in `[k_min, k_max]`,
/// and both coefficients uniform in `[0, 1]`.
pub fn draw_terms<R: Rng + ?Sized>(spec: &BandSpec, rng: &mut R) -> Result<Vec<FourierTerm>> {
    let n = rng.random_range(spec.n_min..=spec.n_max);
    let available = spec.k_max - spec.k_min + 1;
    if available < n {
        return Err(TsdError::InfeasibleSpec {
            terms: n,
            available,
        });
    }
    let picks = index::sample(rng, available, n).into_vec();
    Ok(picks
        .into_iter()
        .map(|offset| FourierTerm {
            k: spec.k_min + offset,
            alpha: rng.random_range(0.0..=1.0),
            beta: rng.random_range(0.0..=1.0),
        })
        .collect())
}

pub fn gen_oscillatory<R: Rng + ?Sized>(spec: &BandSpec, m: usize, rng: &mut R) -> Result<Signal> {
    spec.validate(m)?;
    let terms = draw_terms(spec, rng)?;
    Ok(synthesize(&terms, m))
}

/// Piecewise-constant signal built left to right from level 0; each jump
/// lands `d ∈ [d_min, d_max]` samples after the previous one and shifts every
/// later sample by `±|a|`, `|a| ∈ [a_min, a_max]`.
pub fn gen_cartoon<R: Rng + ?Sized>(spec: &CartoonSpec, m: usize, rng: &mut R) -> Result<Signal> {
    spec.validate(m)?;
    let mut x = vec![0.0; m];
    let mut pos = 0;
    loop {
        pos += rng.random_range(spec.d_min..=spec.d_max);
        if pos >= m {
            break;
        }
        let magnitude = rng.random_range(spec.a_min..=spec.a_max);
        let jump = if rng.random::<bool>() {
            magnitude
        } else {
            -magnitude
        };
        for v in &mut x[pos..] {
            *v += jump;
        }
    }
    Ok(Signal(x))
}

/// Zero mean, unit (biased) variance.
pub fn normalize(x: &Signal) -> Result<Signal> {
    if x.is_empty() {
        return Err(TsdError::Degenerate("empty signal".into()));
    }
    let mean = x.mean();
    let std = x.variance().sqrt();
    if !std.is_finite() || std <= 1e-12 * mean.abs().max(1.0) {
        return Err(TsdError::Degenerate(format!(
            "cannot normalise a signal with standard deviation {std:e}"
        )));
    }
    Ok(Signal(x.0.iter().map(|v| (v - mean) / std).collect()))
}

/// Noise standard deviation that gives `f̄ + n` the requested SNR.
pub fn noise_sigma(f_bar: &Signal, snr_db: f64, scaling: NoiseScaling) -> Result<f64> {
    let energy = f_bar.centered_norm();
    if energy == 0.0 || !energy.is_finite() {
        return Err(TsdError::Degenerate(
            "clean signal has no energy around its mean".into(),
        ));
    }
    let m = f_bar.len() as f64;
    let denom = match scaling {
        NoiseScaling::SqrtLength => m.sqrt(),
        NoiseScaling::Length => m,
    };
    Ok(10f64.powf(-snr_db / 20.0) * energy / denom)
}

/// `10 log10(‖f̄ − E f̄‖² / ‖n‖²)`.
pub fn realized_snr(f_bar: &[f64], noise: &[f64]) -> f64 {
    let clean = Signal(f_bar.to_vec()).centered_norm().powi(2);
    let noise: f64 = noise.iter().map(|v| v * v).sum();
    10.0 * (clean / noise).log10()
}

/// An observation with its ground-truth decomposition.
///
/// `c`, `s`, `o` are stored already multiplied by their blending factors.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedSample {
    pub f: Vec<f32>,
    pub c: Vec<f32>,
    pub s: Vec<f32>,
    pub o: Vec<f32>,
    pub n: Vec<f32>,
    pub blend: Blend,
    pub snr_db: f64,
    pub seed: u64,
}

impl DecomposedSample {
    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    /// Ground truth in output order `(c, s, o, n)`.
    pub fn components(&self) -> [&[f32]; 4] {
        [&self.c, &self.s, &self.o, &self.n]
    }

    /// `f̄ = c + s + o`, in double precision.
    pub fn clean(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.c[i] as f64 + self.s[i] as f64 + self.o[i] as f64)
            .collect()
    }

    pub fn realized_snr(&self) -> f64 {
        let noise: Vec<f64> = self.n.iter().map(|&v| v as f64).collect();
        realized_snr(&self.clean(), &noise)
    }

    /// `max |f − (c + s + o + n)|`.
    pub fn reconstruction_error(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let sum = self.c[i] as f64 + self.s[i] as f64 + self.o[i] as f64 + self.n[i] as f64;
                (self.f[i] as f64 - sum).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Cartoon = 0,
    Smooth = 1,
    Oscillatory = 2,
    Noise = 3,
}

fn slot_rng(seed: u64, slot: Slot, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((slot as u64) << 32) | attempt);
    rng
}

/// Draws and normalises a component, retrying on a fresh sub-stream when
/// the draw is constant.
fn normalized_component(
    seed: u64,
    slot: Slot,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Signal>,
) -> Result<Signal> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = slot_rng(seed, slot, attempt);
        match normalize(&draw(&mut rng)?) {
            Ok(x) => return Ok(x),
            Err(TsdError::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(TsdError::Degenerate(format!(
        "component draw stayed constant after {MAX_ATTEMPTS} attempts"
    )))
}

/// Normalised components `(c̄, s̄, ō)` as drawn for `seed`, before blending.
/// Components whose factor is zero are not drawn and come back as `None`.
pub fn gen_normalized(
    blend: &Blend,
    spec: &GenSpec,
    m: usize,
    seed: u64,
) -> Result<[Option<Signal>; 3]> {
    spec.validate(m)?;
    let c = (blend.c > 0.0)
        .then(|| normalized_component(seed, Slot::Cartoon, |r| gen_cartoon(&spec.cartoon, m, r)))
        .transpose()?;
    let s = (blend.s > 0.0)
        .then(|| normalized_component(seed, Slot::Smooth, |r| gen_oscillatory(&spec.smooth, m, r)))
        .transpose()?;
    let o = (blend.o > 0.0)
        .then(|| {
            normalized_component(seed, Slot::Oscillatory, |r| {
                gen_oscillatory(&spec.oscillatory, m, r)
            })
        })
        .transpose()?;
    Ok([c, s, o])
}

/// One fully seeded observation.
pub fn gen_sample(
    blend: Blend,
    spec: &GenSpec,
    snr_db: f64,
    m: usize,
    seed: u64,
) -> Result<DecomposedSample> {
    blend.validate()?;
    let parts = gen_normalized(&blend, spec, m, seed)?;
    let scaled: Vec<Vec<f32>> = parts
        .iter()
        .zip(blend.as_array())
        .map(|(part, b)| match part {
            Some(x) => x.0.iter().map(|v| (b as f64 * v) as f32).collect(),
            None => vec![0.0; m],
        })
        .collect();
    let f_bar = Signal(
        (0..m)
            .map(|i| scaled.iter().map(|x| x[i] as f64).sum())
            .collect(),
    );
    let sigma = noise_sigma(&f_bar, snr_db, spec.noise_scaling)?;
    let mut rng = slot_rng(seed, Slot::Noise, 0);
    let n: Vec<f32> = (0..m)
        .map(|_| (sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    let f = f_bar
        .0
        .iter()
        .zip(&n)
        .map(|(&clean, &noise)| (clean + noise as f64) as f32)
        .collect();
    let mut scaled = scaled.into_iter();
    Ok(DecomposedSample {
        f,
        c: scaled.next().unwrap(),
        s: scaled.next().unwrap(),
        o: scaled.next().unwrap(),
        n,
        blend,
        snr_db,
        seed,
    })
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index`: the `index + 1`-th output of a SplitMix64 stream
/// started at `master_seed`.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
    splitmix64(master_seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// A reproducible dataset description; samples are generated on demand.
#[derive(Debug, Clone)]
pub struct DatasetPlan {
    pub count: usize,
    pub blends: Vec<Blend>,
    pub spec: GenSpec,
    pub snr_db: f64,
    pub m: usize,
    pub master_seed: u64,
}

impl DatasetPlan {
    pub fn new(count: usize, m: usize, snr_db: f64, master_seed: u64) -> Self {
        DatasetPlan {
            count,
            blends: paper_blends(),
            spec: GenSpec::scaled(m),
            snr_db,
            m,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(TsdError::config("dataset count must be at least 1"));
        }
        if self.blends.is_empty() {
            return Err(TsdError::config("blend list is empty"));
        }
        if !self.snr_db.is_finite() {
            return Err(TsdError::config("SNR must be finite"));
        }
        for b in &self.blends {
            b.validate()?;
        }
        self.spec.validate(self.m)
    }

    /// Blend rows are assigned round-robin.
    pub fn blend_index(&self, index: usize) -> usize {
        index % self.blends.len()
    }

    pub fn sample(&self, index: usize) -> Result<DecomposedSample> {
        gen_sample(
            self.blends[self.blend_index(index)],
            &self.spec,
            self.snr_db,
            self.m,
            sample_seed(self.master_seed, index as u64),
        )
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<DecomposedSample>> + '_ {
        (0..self.count).map(move |i| self.sample(i))
    }

    /// Samples in `range`, generated in parallel and returned in index order.
    pub fn generate_range(&self, range: Range<usize>) -> Result<Vec<DecomposedSample>> {
        range.into_par_iter().map(|i| self.sample(i)).collect()
    }

    pub fn generate(&self) -> Result<Vec<DecomposedSample>> {
        self.validate()?;
        self.generate_range(0..self.count)
    }
}

/// Contiguous index ranges of the given sizes, in order.
pub fn split_ranges(count: usize, sizes: &[usize]) -> Result<Vec<Range<usize>>> {
    let total: usize = sizes.iter().sum();
    if total > count {
        return Err(TsdError::config(format!(
            "split sizes {sizes:?} exceed the {count} available samples"
        )));
    }
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|&len| {
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}
