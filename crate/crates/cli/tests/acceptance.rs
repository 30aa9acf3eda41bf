//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `TSD_ACCEPT_ONLY=1,5,8` restricts the run to the listed criteria; the
//! default runs all ten. Criteria 6 and 10 share one desk-scale training run.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use tsd_core::config::{preset, reference, PRESETS};
use tsd_core::datagen::format::{write_plan, Dataset};
use tsd_core::datagen::{gen_normalized, sample_seed, DatasetPlan, Signal};
use tsd_core::eval::{self, Baseline, ComponentReport, Subset, DEFAULT_TAU};
use tsd_core::model::{
    embed, encoder_stack, tsd_forward, Adapter, ModelConfig, ParamVars, TsdModel,
};
use tsd_core::tensor::{Tape, Tensor};
use tsd_core::training::{decomposition_loss, train, TrainOutputs};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

type Check = anyhow::Result<Outcome>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn loss_of(model: &TsdModel<f64>, f: &[f64], truth: &Tensor<f64>) -> anyhow::Result<f64> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, &model.params, false);
    let pred = tsd_forward::<f64, ChaCha8Rng>(&mut tape, &model.config, &pv, f, None)?;
    let t = tape.constant(truth.clone());
    let loss = decomposition_loss(&mut tape, pred, t)?;
    Ok(tape.value(loss).item())
}

fn gradient_check() -> Check {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (i, adapter) in [Adapter::NoChunks, Adapter::Sum, Adapter::Cat, Adapter::Conv]
        .into_iter()
        .enumerate()
    {
        let cfg = ModelConfig {
            m: 16,
            d: 8,
            layers: 1,
            heads: 2,
            chunk: if adapter == Adapter::NoChunks { 1 } else { 2 },
            adapter,
            dropout: 0.0,
            zero_init_head: false,
            ..ModelConfig::paper_chunks()
        };
        let mut r = rng(100 + i as u64);
        let mut model = TsdModel::<f64>::init(cfg, &mut r)?;
        let f: Vec<f64> = (0..cfg.m).map(|_| r.random_range(-1.0..1.0)).collect();
        let truth = Tensor::from_fn(&[cfg.m, 4], |_| r.random_range(-1.0..1.0));

        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &model.params, true);
        let pred = tsd_forward::<f64, ChaCha8Rng>(&mut tape, &cfg, &pv, &f, None)?;
        let t = tape.constant(truth.clone());
        let loss = decomposition_loss(&mut tape, pred, t)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = pv
            .vars()
            .iter()
            .zip(model.params.tensors())
            .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.len()], |g| g.data().to_vec()))
            .collect();

        for (k, a) in analytic.iter().enumerate() {
            let mut numeric = Vec::with_capacity(a.len());
            for j in 0..a.len() {
                let orig = model.params.tensors()[k].data()[j];
                model.params.tensors_mut()[k].data_mut()[j] = orig + STEP;
                let plus = loss_of(&model, &f, &truth)?;
                model.params.tensors_mut()[k].data_mut()[j] = orig - STEP;
                let minus = loss_of(&model, &f, &truth)?;
                model.params.tensors_mut()[k].data_mut()[j] = orig;
                numeric.push((plus - minus) / (2.0 * STEP));
            }
            let e = rel_err(a, &numeric);
            checked += 1;
            if e > worst.0 || worst.1.is_empty() {
                worst = (e, format!("{}:{}", adapter.name(), model.params.names()[k]));
            }
        }
    }
    Ok(Outcome::new(
        worst.0 < TOL,
        format!("{checked} tensors, worst rel err {:.2e} ({}) < {TOL:e}", worst.0, worst.1),
    ))
}

// ---------------------------------------------------------------- 2

fn spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// Energy outside bins `±[lo, hi]` relative to the total.
fn leakage(x: &[f64], lo: usize, hi: usize) -> f64 {
    let p = spectrum(x);
    let m = p.len();
    let band = |k: usize| (lo..=hi).contains(&k) || (lo..=hi).contains(&(m - k));
    let total: f64 = p.iter().sum();
    let out: f64 = (0..m).filter(|&k| k == 0 || !band(k)).map(|k| p[k]).sum();
    out / total
}

/// Lengths of every plateau that is not cut off by the right edge.
fn plateaus(x: &Signal) -> Vec<usize> {
    let jumps: Vec<usize> = (1..x.len()).filter(|&i| x.0[i] != x.0[i - 1]).collect();
    let mut prev = 0;
    jumps
        .iter()
        .map(|&j| {
            let len = j - prev;
            prev = j;
            len
        })
        .collect()
}

fn dataset_fidelity() -> Check {
    let data = preset("paper-chunks")?.data;
    let plan = data.plan(512);
    let plan = DatasetPlan { count: 1000, ..plan };
    let samples = plan.generate()?;

    let snr: f64 = samples.iter().map(|s| s.realized_snr()).sum::<f64>() / samples.len() as f64;
    let (mut worst_mean, mut worst_var, mut worst_s, mut worst_o) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut plateau = (usize::MAX, 0usize);
    let mut tail_max = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let seed = sample_seed(plan.master_seed, i as u64);
        let [c, sm, o] = gen_normalized(&s.blend, &plan.spec, plan.m, seed)?;
        for x in [&c, &sm, &o].into_iter().flatten() {
            worst_mean = worst_mean.max(x.mean().abs());
            worst_var = worst_var.max((x.variance() - 1.0).abs());
        }
        if let Some(c) = &c {
            let lens = plateaus(c);
            for &l in &lens {
                plateau = (plateau.0.min(l), plateau.1.max(l));
            }
            let last = lens.iter().sum::<usize>();
            tail_max = tail_max.max(plan.m - last);
        }
        if let Some(x) = &sm {
            worst_s = worst_s.max(leakage(&x.0, 2, 7));
        }
        if let Some(x) = &o {
            worst_o = worst_o.max(leakage(&x.0, 70, 80));
        }
    }
    let pass = (snr - 20.0).abs() <= 0.05
        && worst_mean < 1e-7
        && worst_var < 1e-6
        && plateau.0 >= 40
        && plateau.1 <= 50
        && tail_max <= 50
        && worst_s < 1e-9
        && worst_o < 1e-9;
    Ok(Outcome::new(
        pass,
        format!(
            "SNR mean {snr:.4} dB; |mean| ≤ {worst_mean:.1e}, |var−1| ≤ {worst_var:.1e}; \
             plateaus [{}, {}] (edge tail ≤ {tail_max}); leakage s {worst_s:.1e}, o {worst_o:.1e}",
            plateau.0, plateau.1
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn reconstruction_identity() -> Check {
    let plan = DatasetPlan::new(1000, 512, 20.0, 31);
    let mut bytes = Vec::new();
    write_plan(&mut bytes, &plan)?;
    let stored = Dataset::read(&mut bytes.as_slice())?;
    let worst = stored.samples.iter().map(|s| s.reconstruction_error()).fold(0.0, f64::max);
    Ok(Outcome::new(
        stored.len() == 1000 && worst < 1e-5,
        format!("{} stored samples, max |f − Σ| = {worst:.2e} < 1e-5", stored.len()),
    ))
}

// ---------------------------------------------------------------- 4

fn tsd(args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_tsd")).args(args).output()?;
    anyhow::ensure!(
        out.status.success(),
        "tsd {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn determinism() -> Check {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    for name in ["a.sds", "b.sds"] {
        tsd(&["gen", "--count", "500", "--seed", "11", "--out", p(&d.join(name))])?;
    }
    let gen_same = fs::read(d.join("a.sds"))? == fs::read(d.join("b.sds"))?;

    tsd(&["gen", "--preset", "overfit", "--out", p(&d.join("of"))])?;
    for tag in ["a", "b"] {
        tsd(&[
            "train", "--preset", "overfit", "--data", p(&d.join("of.train.sds")), "--val",
            p(&d.join("of.val.sds")), "--out-ckpt", p(&d.join(format!("{tag}.tsdc"))), "--log",
            p(&d.join(format!("{tag}.csv"))), "--dropout", "0.1", "--max-steps", "30",
        ])?;
    }
    let csv = fs::read(d.join("a.csv"))?;
    let train_same = csv == fs::read(d.join("b.csv"))?;
    let rows = csv.iter().filter(|&&b| b == b'\n').count() - 1;
    Ok(Outcome::new(
        gen_same && train_same,
        format!("gen byte-identical: {gen_same}; train metrics identical over {rows} epochs: {train_same}"),
    ))
}

// ---------------------------------------------------------------- 5

fn overfit() -> Check {
    let cfg = preset("overfit")?;
    let [tr, va, _] = cfg.data.generate(cfg.model.m)?;
    let model = TsdModel::<f32>::init(cfg.model, &mut rng(cfg.train.seed))?;
    let start = Instant::now();
    let report = train(model, &cfg.train, &tr, &va, &TrainOutputs::default())?;
    let secs = start.elapsed().as_secs_f64();
    let l = &report.step_losses;
    let ratio = l[10] / l[l.len() - 1];
    Ok(Outcome::new(
        ratio >= 100.0 && secs < 600.0 && report.steps == 2000,
        format!(
            "{} steps on {} samples: loss {:.3e} at step 10 → {:.3e} ({ratio:.0}×, need ≥ 100×) in {secs:.0} s",
            report.steps,
            tr.len(),
            l[10],
            l[l.len() - 1]
        ),
    ))
}

// ---------------------------------------------------------------- 6, 10

struct DeskRun {
    model: ComponentReport,
    zero: ComponentReport,
    identity: ComponentReport,
    elapsed: Duration,
    epochs: usize,
}

fn desk_run() -> anyhow::Result<DeskRun> {
    let cfg = preset("desk")?;
    let [tr, va, te] = cfg.data.generate(cfg.model.m)?;
    let model = TsdModel::<f32>::init(cfg.model, &mut rng(cfg.train.seed))?;
    let start = Instant::now();
    let report = train(model, &cfg.train, &tr, &va, &TrainOutputs::default())?;
    let elapsed = start.elapsed();
    let all = eval::select(&te, Subset::Full);
    Ok(DeskRun {
        model: eval::evaluate(&report.best_model, &te, &all, DEFAULT_TAU, "desk model")?,
        zero: eval::evaluate_baseline(Baseline::Zero, &te, &all, DEFAULT_TAU)?,
        identity: eval::evaluate_baseline(Baseline::Identity, &te, &all, DEFAULT_TAU)?,
        elapsed,
        epochs: report.metrics.len(),
    })
}

fn desk_learning(run: &DeskRun) -> Check {
    let secs = run.elapsed.as_secs_f64();
    let (m, z, i) = (run.model.rmse_avg, run.zero.rmse_avg, run.identity.rmse_avg);
    Ok(Outcome::new(
        m < z && m < i && secs <= 7200.0,
        format!(
            "test rmse_avg ×1e-3: model {:.3}, zero {:.3}, identity {:.3} ({} epochs, {secs:.0} s ≤ 7200 s)",
            m * 1e3,
            z * 1e3,
            i * 1e3,
            run.epochs
        ),
    ))
}

fn absence(run: &DeskRun) -> Check {
    let (hits, total) = eval::absence_hits(&run.model);
    let rate = hits as f64 / total.max(1) as f64;
    Ok(Outcome::new(
        total > 0 && rate >= 0.9,
        format!(
            "{hits}/{total} single-component test signals have both absent components below τ = {DEFAULT_TAU} ({:.1}%, need ≥ 90%)",
            100.0 * rate
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn reference_status() -> Check {
    let targets = reference::targets();
    let mut problems = Vec::new();
    for (what, name, subset, values) in &targets {
        match preset(name) {
            Ok(cfg) => {
                if let Err(e) = cfg.validate() {
                    problems.push(format!("{name}: {e}"));
                }
            }
            Err(e) => problems.push(format!("{what}: {e}")),
        }
        subset.parse::<Subset>().map_err(|e| anyhow::anyhow!("{what}: {e}"))?;
        let mean = values[..4].iter().sum::<f64>() / 4.0;
        if (mean - values[4]).abs() > 0.0015 {
            problems.push(format!("{what}: average {} vs components {mean:.4}", values[4]));
        }
    }
    let pinned = [
        (reference::ABLATION[3][4], 4.250),
        (reference::CHUNKS_REDUCED13[4], 2.999),
        (reference::NO_CHUNKS_REDUCED13[4], 2.153),
        (reference::CHUNKS_FULL[4], 2.869),
        (reference::NO_CHUNKS_FULL[4], 2.244),
    ];
    for (got, want) in pinned {
        if got != want {
            problems.push(format!("target {want} recorded as {got}"));
        }
    }
    let readme = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md"))
        .unwrap_or_default();
    for (_, want) in pinned {
        if !readme.contains(&format!("{want:.3}")) {
            problems.push(format!("README does not list {want:.3}"));
        }
    }
    let full = preset("paper-chunks")?;
    if (full.train.epochs, full.data.total()) != (15_000, 18_000) {
        problems.push("paper-chunks preset is not the full-scale schedule".into());
    }
    Ok(Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} reference targets documented as not reproduced at desk scale; \
                 every target has a valid full-scale preset ({} presets total)",
                targets.len(),
                PRESETS.len()
            )
        } else {
            problems.join("; ")
        },
    ))
}

// ---------------------------------------------------------------- 8

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = Vec::with_capacity(rows * cols);
    for &r in perm {
        out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![rows, cols], out).expect("same shape")
}

fn encode(model: &TsdModel<f64>, tokens: &Tensor<f64>) -> anyhow::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, &model.params, false);
    let x = tape.constant(tokens.clone());
    let z = encoder_stack::<f64, ChaCha8Rng>(&mut tape, &model.config, &pv, x, None)?;
    Ok(tape.value(z).clone())
}

fn embed_and_encode(model: &TsdModel<f64>, f: &[f64], perm: Option<&[usize]>) -> anyhow::Result<Tensor<f64>> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, &model.params, false);
    let signal = tape.constant(Tensor::new(vec![1, cfg.m], f.to_vec())?);
    // the optional permutation acts on the adapter tokens, before the
    // position encodings are added
    let tokens = tsd_core::model::input_adapter(&mut tape, cfg, &pv, signal)?;
    let raw = tape.value(tokens).clone();
    let raw = match perm {
        Some(p) => permute_rows(&raw, p),
        None => raw,
    };
    let with_pe = tape.constant(raw);
    let pe = tape.constant(tsd_core::model::positional_encoding(cfg.tokens(), cfg.d));
    let y = tape.add(with_pe, pe)?;
    let z = encoder_stack::<f64, ChaCha8Rng>(&mut tape, cfg, &pv, y, None)?;
    Ok(tape.value(z).clone())
}

fn equivariance() -> Check {
    let cfg = ModelConfig {
        m: 128,
        d: 64,
        layers: 2,
        heads: 4,
        chunk: 4,
        dropout: 0.0,
        ..ModelConfig::paper_chunks()
    };
    let mut r = rng(8);
    let model = TsdModel::<f64>::init(cfg, &mut r)?;
    let l = cfg.tokens();
    let mut no_pe = 0.0f64;
    let mut with_pe = f64::INFINITY;
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..l).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let x = Tensor::from_fn(&[l, cfg.d], |_| r.random_range(-1.0..1.0));
        let a = encode(&model, &permute_rows(&x, &perm))?;
        let b = permute_rows(&encode(&model, &x)?, &perm);
        no_pe = no_pe.max(a.max_abs_diff(&b));

        let f: Vec<f64> = (0..cfg.m).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = embed_and_encode(&model, &f, Some(&perm))?;
        let b = permute_rows(&embed_and_encode(&model, &f, None)?, &perm);
        with_pe = with_pe.min(a.max_abs_diff(&b));
    }
    // the library's own embedding path must agree with the manual one above
    let f: Vec<f64> = (0..cfg.m).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, &model.params, false);
    let signal = tape.constant(Tensor::new(vec![1, cfg.m], f.clone())?);
    let y = embed::<f64, ChaCha8Rng>(&mut tape, &cfg, &pv, signal, None)?;
    let z = encoder_stack::<f64, ChaCha8Rng>(&mut tape, &cfg, &pv, y, None)?;
    let agree = tape.value(z).max_abs_diff(&embed_and_encode(&model, &f, None)?) == 0.0;
    Ok(Outcome::new(
        no_pe < 1e-6 && with_pe > 1e-3 && agree,
        format!(
            "5 random shuffles of L = {l}: without PE max|Δ| = {no_pe:.1e} (< 1e-6); \
             with PE min over shuffles max|Δ| = {with_pe:.2e} (> 1e-3)"
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn zero_init() -> Check {
    let configs = [
        ModelConfig::paper_no_chunks(),
        ModelConfig { zero_init_head: true, ..ModelConfig::paper_chunks() },
        ModelConfig { zero_init_head: true, adapter: Adapter::Sum, d: 64, layers: 2, ..ModelConfig::paper_chunks() },
        ModelConfig { zero_init_head: true, adapter: Adapter::Cat, d: 64, layers: 1, chunk: 8, ..ModelConfig::paper_chunks() },
    ];
    let mut r = rng(9);
    let mut nonzero = 0usize;
    let mut outputs = 0usize;
    for cfg in configs {
        let model = TsdModel::<f32>::init(cfg, &mut r)?;
        for scale in [1.0f32, 1e-3, 1e3] {
            let f: Vec<f32> = (0..cfg.m).map(|_| scale * r.random_range(-1.0..1.0)).collect();
            let out = model.predict(&f)?;
            for comp in &out.components {
                outputs += comp.len();
                nonzero += comp.iter().filter(|&&v| v != 0.0).count();
            }
        }
    }
    Ok(Outcome::new(
        nonzero == 0,
        format!("{nonzero} non-zero values among {outputs} outputs of 4 untrained zero-init models"),
    ))
}

// ----------------------------------------------------------------

fn selection() -> BTreeSet<usize> {
    match std::env::var("TSD_ACCEPT_ONLY") {
        Ok(list) if !list.trim().is_empty() => list
            .split(',')
            .map(|v| v.trim().parse().expect("TSD_ACCEPT_ONLY lists criterion numbers"))
            .collect(),
        _ => (1..=10).collect(),
    }
}

fn main() -> ExitCode {
    let wanted = selection();
    let names = [
        "gradient correctness",
        "dataset fidelity",
        "reconstruction identity",
        "determinism",
        "overfit sanity",
        "desk-scale learning",
        "reference-number status",
        "equivariance / PE",
        "zero-init head",
        "absence detection",
    ];
    let desk = if wanted.contains(&6) || wanted.contains(&10) {
        eprintln!("training the desk preset for criteria 6 and 10 ...");
        Some(desk_run())
    } else {
        None
    };
    let mut failed = 0;
    for n in 1..=10 {
        if !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => gradient_check(),
            2 => dataset_fidelity(),
            3 => reconstruction_identity(),
            4 => determinism(),
            5 => overfit(),
            6 | 10 => match desk.as_ref().expect("desk run requested") {
                Ok(run) if n == 6 => desk_learning(run),
                Ok(run) => absence(run),
                Err(e) => Err(anyhow::anyhow!("desk training failed: {e:#}")),
            },
            7 => reference_status(),
            8 => equivariance(),
            _ => zero_init(),
        };
        let outcome = result.unwrap_or_else(|e| Outcome::new(false, format!("error: {e:#}")));
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {:<24} {}  {}  [{:.1} s]",
            names[n - 1],
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", wanted.len() - failed, wanted.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
