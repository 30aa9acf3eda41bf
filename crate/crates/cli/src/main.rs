//! `tsd`: generate synthetic mixtures, train the decomposition transformer,
//! evaluate it, decompose signals and plot results.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsd_core::config::{preset, RunConfig};
use tsd_core::datagen::format::{is_dataset_file, write_plan_range, Dataset};
use tsd_core::datagen::{split_ranges, Blend, DatasetPlan, DecomposedSample, NoiseScaling};
use tsd_core::eval::{self, Baseline, ComponentReport, Subset};
use tsd_core::model::{checkpoint, Adapter, TsdModel};
use tsd_core::plot;
use tsd_core::training::{self, Scheduler, TrainOutputs};
use tsd_core::TsdError;

#[derive(Debug, Parser)]
#[command(name = "tsd", version, about = "Transformer-based additive signal decomposition f = c + s + o + n")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an SDS1 dataset of synthetic mixtures.
    Gen(GenArgs),
    /// Train a model and keep the checkpoint with the best validation RMSE.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset (RMSE per component).
    Eval(EvalArgs),
    /// Decompose one signal read from a CSV file.
    Decompose(DecomposeArgs),
    /// Draw a signal and its components as an SVG figure.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Output file. With splits, the prefix of `<out>.train.sds`, `<out>.val.sds`, `<out>.test.sds`.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples [default: 18000, or the preset's split total].
    #[arg(long)]
    count: Option<usize>,
    /// Signal length M [default: 512].
    #[arg(long)]
    m: Option<usize>,
    /// Target SNR in dB [default: 20].
    #[arg(long)]
    snr: Option<f64>,
    /// Master seed [default: 2024].
    #[arg(long)]
    seed: Option<u64>,
    /// Blending rows as "b_c,b_s,b_o;..." (fractions like 1/3 allowed) [default: the 13 reference rows].
    #[arg(long)]
    blend_list: Option<String>,
    /// Take M, counts, seed and SNR from a run preset.
    #[arg(long)]
    preset: Option<String>,
    /// Split sizes "train,val,test" written to three files [default: the preset's splits, if any].
    #[arg(long)]
    splits: Option<String>,
    /// Noise scaling: sqrt_m realises the requested SNR, m divides by M instead [default: sqrt_m].
    #[arg(long)]
    noise_scaling: Option<String>,
    /// Worker threads [default: all cores]. The output does not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Base preset (paper-chunks: M=512 D=512 N=4 h=8 p=0.1, lr=1e-4, batch 64).
    #[arg(long, default_value = "paper-chunks")]
    preset: String,
    /// key = value file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training split (SDS1) [default: paths.train from the configuration].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation split (SDS1) [default: paths.val].
    #[arg(long)]
    val: Option<PathBuf>,
    /// Best checkpoint (TSDC) [default: paths.checkpoint].
    #[arg(long)]
    out_ckpt: Option<PathBuf>,
    /// Metrics CSV [default: paths.metrics].
    #[arg(long)]
    log: Option<PathBuf>,
    /// Token width D [full scale: 512].
    #[arg(long)]
    d: Option<usize>,
    /// Encoder layers N [full scale: 4; ablation: 2].
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads h [full scale: 8].
    #[arg(long)]
    heads: Option<usize>,
    /// Chunk size S [full scale: 4 with conv, 1 without chunks].
    #[arg(long)]
    chunk: Option<usize>,
    /// Input adapter: no_chunks, sum, cat or conv.
    #[arg(long)]
    adapter: Option<String>,
    /// Dropout probability [full scale: 0.1].
    #[arg(long)]
    dropout: Option<f64>,
    /// Start the final linear layer at zero.
    #[arg(long)]
    zero_init_head: bool,
    /// Learning rate [full scale: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size [full scale: 64].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs (full passes over the training split) [full scale: 15000].
    #[arg(long)]
    epochs: Option<usize>,
    /// Cap on optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// constant or one_cycle.
    #[arg(long)]
    scheduler: Option<String>,
    /// Seed for initialisation, batch order and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Any configuration key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Worker threads [default: all cores]. Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Test split (SDS1).
    #[arg(long)]
    data: PathBuf,
    /// reduced13 (first sample of each blend row), full, or both.
    #[arg(long, default_value = "both")]
    subset: String,
    /// Absence threshold on the RMS of a predicted component.
    #[arg(long, default_value_t = eval::DEFAULT_TAU)]
    tau: f64,
    /// Also write the per-sample scores as CSV; with both subsets `-reduced13` and `-full` are appended to the stem.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print one row per sample.
    #[arg(long)]
    per_sample: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// One sample per line, exactly M lines.
    #[arg(long)]
    input: PathBuf,
    /// CSV with columns f,c,s,o,n.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// SDS1 dataset, or a CSV with columns f,c,s,o,n.
    #[arg(long)]
    input: PathBuf,
    /// Sample index within a dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Overlay this checkpoint's estimates in red.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    TsdError::Usage(msg.into()).into()
}

fn with_workers<T>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match workers {
        None => f(),
        Some(0) => Err(usage("--workers must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building the worker pool")?
            .install(f),
    }
}

fn parse_splits(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("--splits expects three counts, got {text:?}")))?;
    match parts[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(usage(format!("--splits expects three counts, got {text:?}"))),
    }
}

fn split_path(prefix: &Path, name: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(format!(".{name}.sds"));
    PathBuf::from(s)
}

fn snr_summary(snrs: &[f64]) -> String {
    let n = snrs.len() as f64;
    let mean = snrs.iter().sum::<f64>() / n;
    let var = snrs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let min = snrs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = snrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    format!(
        "realised SNR over {} samples: mean {mean:.4} dB, std {:.4} dB, min {min:.3} dB, max {max:.3} dB",
        snrs.len(),
        var.sqrt()
    )
}

fn write_atomically(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let result = f(&mut w).and_then(|_| w.flush().map_err(Into::into));
    drop(w);
    match result {
        Ok(()) => fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display())),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let base = a.preset.as_deref().map(preset).transpose()?;
    let m = a.m.or(base.as_ref().map(|c| c.model.m)).unwrap_or(tsd_core::datagen::DEFAULT_LENGTH);
    let data = base.as_ref().map(|c| c.data).unwrap_or_default();
    let splits = match (&a.splits, &base) {
        (Some(s), _) => Some(parse_splits(s)?),
        (None, Some(c)) => Some([c.data.train_count, c.data.val_count, c.data.test_count]),
        (None, None) => None,
    };
    let count = match (a.count, splits) {
        (Some(c), _) => c,
        (None, Some(s)) => s.iter().sum(),
        (None, None) => 18_000,
    };
    let mut plan = DatasetPlan::new(count, m, a.snr.unwrap_or(data.snr_db), a.seed.unwrap_or(data.seed));
    plan.spec.noise_scaling = match a.noise_scaling.as_deref() {
        None => data.noise_scaling,
        Some("sqrt_m") => NoiseScaling::SqrtLength,
        Some("m") => NoiseScaling::Length,
        Some(other) => return Err(usage(format!("--noise-scaling expects sqrt_m or m, got {other:?}"))),
    };
    if let Some(list) = &a.blend_list {
        plan.blends = Blend::parse_list(list)?;
    }
    plan.validate()?;

    let outputs: Vec<(PathBuf, std::ops::Range<usize>)> = match splits {
        None => vec![(a.out.clone(), 0..count)],
        Some(sizes) => {
            let ranges = split_ranges(count, &sizes)?;
            ["train", "val", "test"]
                .iter()
                .zip(ranges)
                .filter(|(_, r)| !r.is_empty())
                .map(|(name, r)| (split_path(&a.out, name), r))
                .collect()
        }
    };
    with_workers(a.workers, || {
        let mut all = Vec::with_capacity(count);
        for (path, range) in &outputs {
            let mut snrs = Vec::new();
            write_atomically(path, |w| {
                snrs = write_plan_range(w, &plan, range.clone())?;
                Ok(())
            })?;
            println!("wrote {} samples (M = {}) to {}", range.len(), plan.m, path.display());
            all.extend(snrs);
        }
        println!("{}", snr_summary(&all));
        Ok(())
    })
}

fn load_split(path: &Path, what: &str) -> Result<Vec<DecomposedSample>> {
    if !path.exists() {
        bail!(TsdError::Input(format!("{what} file {} does not exist", path.display())));
    }
    Ok(Dataset::load(path)?.samples)
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = preset(&a.preset)?;
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
        cfg.apply_text(&text)?;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.d {
        m.d = v;
    }
    if let Some(v) = a.layers {
        m.layers = v;
    }
    if let Some(v) = a.heads {
        m.heads = v;
    }
    if let Some(v) = a.chunk {
        m.chunk = v;
    }
    if let Some(v) = &a.adapter {
        m.adapter = v.parse::<Adapter>()?;
    }
    if let Some(v) = a.dropout {
        m.dropout = v;
    }
    if a.zero_init_head {
        m.zero_init_head = true;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.max_steps {
        t.max_steps = Some(v);
    }
    if let Some(v) = &a.scheduler {
        t.scheduler = v.parse::<Scheduler>()?;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    let p = &mut cfg.paths;
    for (dst, src) in [
        (&mut p.train, &a.data),
        (&mut p.val, &a.val),
        (&mut p.checkpoint, &a.out_ckpt),
        (&mut p.metrics, &a.log),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    if a.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let p = &cfg.paths;
    let train_path = p.train.clone().ok_or_else(|| usage("no training data: pass --data"))?;
    let val_path = p.val.clone().ok_or_else(|| usage("no validation data: pass --val"))?;
    let ckpt = p.checkpoint.clone().ok_or_else(|| usage("no checkpoint path: pass --out-ckpt"))?;
    // everything is loaded and checked before any output file is created
    let train_split = load_split(&train_path, "training")?;
    let val_split = load_split(&val_path, "validation")?;

    with_workers(a.workers, || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = TsdModel::<f32>::init(cfg.model, &mut rng)?;
        println!(
            "training {} parameters: adapter {} S={} D={} N={} h={} on {} samples ({} steps)",
            model.params.scalar_count(),
            cfg.model.adapter,
            cfg.model.chunk,
            cfg.model.d,
            cfg.model.layers,
            cfg.model.heads,
            train_split.len(),
            cfg.train.total_steps(train_split.len())
        );
        let outputs = TrainOutputs {
            checkpoint: Some(ckpt.clone()),
            metrics: cfg.paths.metrics.clone(),
        };
        let start = Instant::now();
        let report = training::train(model, &cfg.train, &train_split, &val_split, &outputs)?;
        println!(
            "{} steps in {:.1} s; best validation rmse_avg {:.6e} at epoch {}; checkpoint {}",
            report.steps,
            start.elapsed().as_secs_f64(),
            report.best_rmse_avg,
            report.best_epoch,
            ckpt.display()
        );
        Ok(())
    })
}

fn csv_path(base: &Path, suffix: Option<&str>) -> PathBuf {
    match suffix {
        None => base.to_path_buf(),
        Some(s) => {
            let stem = base.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
            let ext = base.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
            base.with_file_name(format!("{stem}-{s}{ext}"))
        }
    }
}

fn print_report(r: &ComponentReport, per_sample: bool) {
    print!("{}", r.to_table(per_sample));
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let subsets: Vec<(Subset, &str)> = match a.subset.as_str() {
        "both" => vec![(Subset::Reduced13, "reduced13"), (Subset::Full, "full")],
        s => vec![(s.parse()?, s)],
    };
    let model: TsdModel<f32> = checkpoint::load(&a.ckpt)?;
    let data = load_split(&a.data, "test")?;
    with_workers(a.workers, || {
        for (subset, name) in &subsets {
            let idx = eval::select(&data, *subset);
            let report = eval::evaluate(&model, &data, &idx, a.tau, &format!("TSD ({name})"))?;
            print_report(&report, a.per_sample);
            for b in [Baseline::Zero, Baseline::Identity] {
                let r = eval::evaluate_baseline(b, &data, &idx, a.tau)?;
                print_report(&r, false);
            }
            let (hits, total) = eval::absence_hits(&report);
            if total > 0 {
                println!(
                    "absence (tau = {}): both absent components flagged on {hits}/{total} single-component samples",
                    a.tau
                );
            }
            println!();
            if let Some(base) = &a.csv {
                let path = csv_path(base, (subsets.len() > 1).then_some(*name));
                fs::write(&path, report.to_csv()).with_context(|| format!("cannot write {}", path.display()))?;
            }
        }
        Ok(())
    })
}

fn read_signal(path: &Path) -> Result<Vec<f32>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v = l.trim().trim_end_matches(',');
            v.parse::<f32>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| TsdError::Input(format!("line {}: {v:?} is not a finite number", i + 1)).into())
        })
        .collect()
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    let model: TsdModel<f32> = checkpoint::load(&a.ckpt)?;
    let f = read_signal(&a.input)?;
    if f.len() != model.config.m {
        bail!(TsdError::Input(format!(
            "{} has {} samples, the model expects M = {}",
            a.input.display(),
            f.len(),
            model.config.m
        )));
    }
    let d = model.predict(&f)?;
    let [c, s, o, n] = &d.components;
    write_atomically(&a.out, |w| {
        writeln!(w, "f,c,s,o,n")?;
        for i in 0..f.len() {
            writeln!(w, "{},{},{},{},{}", f[i], c[i], s[i], o[i], n[i])?;
        }
        Ok(())
    })?;
    println!("wrote {} rows to {}", f.len(), a.out.display());
    Ok(())
}

/// Columns of a `f,c,s,o,n` CSV.
fn read_components_csv(path: &Path) -> Result<[Vec<f32>; 5]> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::trim) {
        Some("f,c,s,o,n") => {}
        other => bail!(TsdError::Input(format!("expected a f,c,s,o,n header, got {other:?}"))),
    }
    let mut cols: [Vec<f32>; 5] = Default::default();
    for (i, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != 5 {
            bail!(TsdError::Input(format!("row {}: expected 5 columns", i + 2)));
        }
        for (col, v) in cols.iter_mut().zip(vals) {
            col.push(
                v.trim()
                    .parse()
                    .map_err(|_| TsdError::Input(format!("row {}: {v:?} is not a number", i + 2)))?,
            );
        }
    }
    Ok(cols)
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let model: Option<TsdModel<f32>> = a.ckpt.as_deref().map(checkpoint::load).transpose()?;
    let [f, c, s, o, n] = if is_dataset_file(&a.input)? {
        let data = Dataset::load(&a.input)?;
        let sample = data.samples.into_iter().nth(a.index).ok_or_else(|| {
            usage(format!("index {} out of range for {}", a.index, a.input.display()))
        })?;
        [sample.f, sample.c, sample.s, sample.o, sample.n]
    } else {
        if a.index != 0 {
            return Err(usage("a CSV input holds a single signal; --index must be 0"));
        }
        read_components_csv(&a.input)?
    };
    let pred = model.map(|m| m.predict(&f)).transpose()?;
    let svg = plot::decomposition_figure(
        &f,
        [&c, &s, &o, &n],
        pred.as_ref()
            .map(|p| [&p.components[0][..], &p.components[1][..], &p.components[2][..], &p.components[3][..]]),
    )?;
    write_atomically(&a.out, |w| Ok(w.write_all(svg.as_bytes())?))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<TsdError>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
