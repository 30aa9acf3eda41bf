use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use tsd_core::datagen::format::write_plan;
use tsd_core::datagen::{
    gen_cartoon, gen_normalized, gen_oscillatory, gen_sample, noise_sigma, normalize, paper_blends,
    realized_snr, Blend, DatasetPlan, GenSpec, NoiseScaling, Signal,
};

const M: usize = 512;

fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// Largest out-of-band bin energy relative to the peak bin.
fn band_leakage(x: &[f64], lo: usize, hi: usize) -> f64 {
    let p = power_spectrum(x);
    let m = p.len();
    let in_band = |k: usize| (lo..=hi).contains(&k) || (lo..=hi).contains(&(m - k));
    let peak = p.iter().cloned().fold(0.0, f64::max);
    let leak = (0..m).filter(|&k| k == 0 || !in_band(k)).map(|k| p[k]).fold(0.0, f64::max);
    leak / peak
}

#[test]
fn smooth_and_oscillatory_bands_are_confined() {
    let spec = GenSpec::paper();
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = gen_oscillatory(&spec.smooth, M, &mut rng).unwrap();
        assert!(band_leakage(&s.0, 2, 7) < 1e-9);
        let o = gen_oscillatory(&spec.oscillatory, M, &mut rng).unwrap();
        assert!(band_leakage(&o.0, 70, 80) < 1e-9);
        // normalisation keeps the band
        assert!(band_leakage(&normalize(&s).unwrap().0, 2, 7) < 1e-9);
    }
}

fn jumps(x: &[f64]) -> Vec<usize> {
    (1..x.len()).filter(|&i| x[i] != x[i - 1]).collect()
}

#[test]
fn cartoon_jump_counts_and_spacing() {
    let spec = GenSpec::paper().cartoon;
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..10_000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = gen_cartoon(&spec, M, &mut rng).unwrap();
        let j = jumps(&c.0);
        seen.insert(j.len());
        let mut prev = 0;
        for &p in &j {
            assert!((40..=50).contains(&(p - prev)), "distance {}", p - prev);
            prev = p;
        }
        assert!(M - prev <= 50);
        for w in c.0.windows(2) {
            let d = (w[1] - w[0]).abs();
            assert!(d == 0.0 || (0.5 - 1e-12..=1.0 + 1e-12).contains(&d));
        }
    }
    assert!(seen.iter().all(|n| (10..=12).contains(n)), "{seen:?}");
}

#[test]
fn noise_sigma_realizes_target_snr() {
    // unit-norm centred clean signal
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = gen_oscillatory(&GenSpec::paper().smooth, M, &mut rng).unwrap();
    let n = normalize(&raw).unwrap();
    let unit = Signal(n.0.iter().map(|v| v / (M as f64).sqrt()).collect());
    assert!((unit.centered_norm() - 1.0).abs() < 1e-12);
    let sigma = noise_sigma(&unit, 20.0, NoiseScaling::SqrtLength).unwrap();
    assert!((sigma - 4.4194e-3).abs() < 5e-8);

    let draws = 1000;
    let mut mean_snr = 0.0;
    for _ in 0..draws {
        let noise: Vec<f64> = (0..M)
            .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        mean_snr += realized_snr(&unit.0, &noise);
    }
    mean_snr /= draws as f64;
    assert!((mean_snr - 20.0).abs() < 0.1, "{mean_snr}");

    let sigma0 = noise_sigma(&unit, 0.0, NoiseScaling::SqrtLength).unwrap();
    let mut mean_norm = 0.0;
    for _ in 0..draws {
        let e: f64 = (0..M)
            .map(|_| (sigma0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).powi(2))
            .sum();
        mean_norm += e.sqrt();
    }
    mean_norm /= draws as f64;
    assert!((mean_norm - 1.0).abs() < 0.02, "{mean_norm}");
}

#[test]
fn normalized_components_have_unit_statistics() {
    let spec = GenSpec::paper();
    let all = Blend::new(1.0, 1.0, 1.0);
    for seed in 0..300 {
        for x in gen_normalized(&all, &spec, M, seed).unwrap().into_iter().flatten() {
            assert!(x.mean().abs() < 1e-7);
            assert!((x.variance() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn single_component_blend_stores_exact_zeros() {
    let s = gen_sample(Blend::new(1.0, 0.0, 0.0), &GenSpec::paper(), 20.0, M, 9).unwrap();
    assert!(s.s.iter().all(|&v| v == 0.0));
    assert!(s.o.iter().all(|&v| v == 0.0));
    let clean: Vec<f64> = s.f.iter().zip(&s.n).map(|(&f, &n)| f as f64 - n as f64).collect();
    // f − n equals c up to single-precision rounding, so it is piecewise constant
    let steps = clean.windows(2).filter(|w| (w[1] - w[0]).abs() > 1e-4).count();
    assert_eq!(steps, jumps(&s.c.iter().map(|&v| v as f64).collect::<Vec<_>>()).len());
    assert!((10..=12).contains(&steps));
}

#[test]
fn equal_thirds_blend_has_variance_one_third() {
    let b = Blend::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0);
    let seeds = 1000;
    let mean_var: f64 = (0..seeds)
        .map(|seed| {
            let s = gen_sample(b, &GenSpec::paper(), 20.0, M, seed).unwrap();
            Signal(s.clean()).variance()
        })
        .sum::<f64>()
        / seeds as f64;
    assert!((mean_var - 1.0 / 3.0).abs() < 0.01, "{mean_var}");
}

#[test]
fn same_seed_is_bit_identical() {
    let b = paper_blends()[9];
    let a = gen_sample(b, &GenSpec::paper(), 20.0, M, 77).unwrap();
    let c = gen_sample(b, &GenSpec::paper(), 20.0, M, 77).unwrap();
    assert_eq!(a, c);
    let d = gen_sample(b, &GenSpec::paper(), 20.0, M, 78).unwrap();
    assert_ne!(a, d);
}

#[test]
fn dataset_assigns_blends_round_robin() {
    let plan = DatasetPlan::new(13, M, 20.0, 7);
    let samples = plan.generate().unwrap();
    let rows = paper_blends();
    for (s, b) in samples.iter().zip(&rows) {
        assert_eq!(s.blend, *b);
    }
}

#[test]
fn paper_sized_dataset_is_deterministic() {
    let plan = DatasetPlan::new(18_000, M, 20.0, 2024);
    let a = plan.generate().unwrap();
    let b = plan.generate().unwrap();
    assert_eq!(a.len(), 18_000);
    assert!(a == b);
}

#[test]
fn worker_count_does_not_change_the_file() {
    let plan = DatasetPlan::new(300, M, 20.0, 11);
    let write_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut buf = Vec::new();
            write_plan(&mut buf, &plan).unwrap();
            buf
        })
    };
    assert_eq!(write_with(1), write_with(4));
}

#[test]
fn per_sample_invariants_hold() {
    let plan = DatasetPlan::new(1000, M, 20.0, 5);
    let samples = plan.generate().unwrap();
    let mut within_half_db = 0;
    let mut mean_snr = 0.0;
    for s in &samples {
        assert!(s.reconstruction_error() < 1e-5);
        let snr = s.realized_snr();
        mean_snr += snr;
        // 5.5 standard deviations of the χ² fluctuation at M = 512
        assert!((snr - 20.0).abs() < 1.5, "{snr}");
        if (snr - 20.0).abs() <= 0.5 {
            within_half_db += 1;
        }
        let c: Vec<f64> = s.c.iter().map(|&v| v as f64).collect();
        if s.blend.c > 0.0 {
            let j = jumps(&c);
            let mut prev = 0;
            for &p in &j {
                assert!((40..=50).contains(&(p - prev)));
                prev = p;
            }
        } else {
            assert!(c.iter().all(|&v| v == 0.0));
        }
    }
    mean_snr /= samples.len() as f64;
    assert!((mean_snr - 20.0).abs() < 0.05, "{mean_snr}");
    assert!(within_half_db >= 900, "{within_half_db} of 1000 within ±0.5 dB");
}
