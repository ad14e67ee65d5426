//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; `AOSENSE_ACCEPTANCE=1,4,9` selects a
//! subset. Exits non-zero when any selected criterion fails.

mod common;

use std::time::{Duration, Instant};

use aosense::confidence::{assess, classify, sweep, ConfidenceConfig, Status};
use aosense::corrloop::*;
use aosense::embedding::{Embedder, EmbeddingConfig};
use aosense::model::*;
use aosense::optics::{Microscope, OpticsConfig, OtfMask};
use aosense::predictor::{ModelPredictor, NoisePredictor, NoisyOracle, Oracle, ZeroPredictor};
use aosense::synth::*;
use aosense::volume::Volume;
use aosense::zernike::*;
use aosense::ZernikeCoeffs;
use common::*;
use ndarray::{s, Array3};
use rand::Rng;
use rustfft::num_complex::Complex64;

type Outcome = (bool, String);

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn random_coeffs(seed: u64, max_norm: f64, modes: &[usize]) -> ZernikeCoeffs {
    let mut r = aosense::rng::stream(seed, 77);
    let mut c = ZernikeCoeffs::zeros();
    for &j in modes {
        c[j] = r.random_range(-1.0..1.0);
    }
    c.scale(r.random_range(0.0..=max_norm) / c.norm())
}

fn zernike_orthonormality() -> Outcome {
    let t0 = Instant::now();
    let mut table_err = 0.0f64;
    for (x, y) in disk_points(64) {
        let (rho, theta) = (x.hypot(y), y.atan2(x));
        for j in 0..N_MODES {
            let (n, m) = ansi_to_nm(j);
            table_err = table_err.max((eval_mode(n, m, rho, theta).unwrap() - zernike_table(j, x, y)).abs());
        }
    }
    let planes: Vec<_> = (0..N_MODES)
        .map(|j| compose_wavefront::<f64>(&ZernikeCoeffs::single(j, 1.0), 256).unwrap())
        .collect();
    let inside = planes[0].mask.iter().filter(|&&m| m).count() as f64;
    let mut ortho = 0.0f64;
    for i in 0..N_MODES {
        for j in i..N_MODES {
            let dot = ndarray::Zip::from(&planes[i].phase)
                .and(&planes[j].phase)
                .and(&planes[i].mask)
                .fold(0.0, |acc, a, b, &m| if m { acc + a * b } else { acc })
                / inside;
            ortho = ortho.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    let modes: Vec<usize> = (1..N_MODES).collect();
    let mut rms_err = 0.0f64;
    for k in 0..100 {
        let c = random_coeffs(k, 0.5, &modes);
        let rms = wavefront_rms(&compose_wavefront::<f64>(&c, 256).unwrap()).unwrap();
        rms_err = rms_err.max((rms / c.norm() - 1.0).abs());
    }
    let dt = t0.elapsed();
    (
        table_err < 1e-12 && ortho < 1e-2 && rms_err < 0.01 && within(Duration::from_secs(10), dt),
        format!("max |<Zi,Zj> - dij| {ortho:.2e}, RMS identity {rms_err:.2e}, table {table_err:.1e}, {dt:.1?}"),
    )
}

fn energy_conservation() -> Outcome {
    let t0 = Instant::now();
    let scope = scope();
    let ideal = scope.detection(&ZernikeCoeffs::zeros()).unwrap().sum();
    let modes: Vec<usize> = (1..N_MODES).collect();
    let worst = (0..50)
        .map(|k| {
            let c = random_coeffs(1000 + k, 0.5, &modes);
            (scope.detection(&c).unwrap().sum() / ideal - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let dt = t0.elapsed();
    (
        worst < 1e-6 && within(Duration::from_secs(60), dt),
        format!("max relative energy change {worst:.2e} over 50 draws, {dt:.1?}"),
    )
}

fn synthetic_signal_bound() -> Outcome {
    let cfg = SynthConfig {
        camera: None,
        ..SynthConfig::training()
    };
    let scope = Microscope::new(&cfg.optics, cfg.light_sheet).unwrap();
    let o = &cfg.optics;
    let clear = |p: &[f64; 3]| {
        (0..3).all(|a| {
            let lo = p[a] + 0.5 * o.voxel_um[a];
            let hi = (o.shape[a] as f64 - 0.5) * o.voxel_um[a] - p[a];
            lo >= 1.0 && hi >= 1.0
        })
    };
    let (mut over, mut interior, mut worst_gap) = (0, 0, 0.0f64);
    for seed in 0..100 {
        let s = generate_sample_with(seed, &cfg, &scope).unwrap();
        let bound = s.puncta.len() as f64 * s.photons();
        let sv = s.volume.sum();
        if sv > bound * (1.0 + 1e-12) {
            over += 1;
        }
        if s.puncta.positions_um.iter().all(clear) {
            interior += 1;
            worst_gap = worst_gap.max(1.0 - sv / bound);
        }
    }
    (
        over == 0 && interior > 0 && worst_gap < 0.005,
        format!(
            "{over}/100 above J*N_o; {interior} samples with puncta >= 1 um from borders, worst equality gap {:.2}%",
            100.0 * worst_gap
        ),
    )
}

fn embedding_identity() -> Outcome {
    let t0 = Instant::now();
    let (scope, emb) = (scope(), embedder());
    let e = emb.embed(&point(&scope, &ZernikeCoeffs::zeros())).unwrap();
    let alpha = ndarray::Zip::from(plane(&e, 0))
        .and(emb.support(0))
        .fold(0.0f64, |w, &a, &s| if s { w.max((a - 1.0).abs()) } else { w });
    let phi = plane(&e, 3).iter().map(|v| v.abs()).fold(0.0, f64::max);
    let c = mixed();
    let e1 = emb.embed(&single(&scope, &c)).unwrap();
    let e5 = emb.embed(&field(&scope, &CROSS_LAYOUT, &c)).unwrap();
    let corr = plane_correlations(&e1, &e5).into_iter().fold(f64::INFINITY, f64::min);
    let dt = t0.elapsed();
    (
        alpha < 1e-3 && phi < 0.05 && corr > 0.9 && within(Duration::from_secs(30), dt),
        format!("|alpha1 - 1| {alpha:.1e}, |phi1| {phi:.1e} rad, min plane correlation 1 vs 5 beads {corr:.3}, {dt:.1?}"),
    )
}

fn interference_removal() -> Outcome {
    let (scope, emb) = (scope(), embedder());
    let c = ZernikeCoeffs::single(7, 0.05);
    let e1 = emb.embed(&single(&scope, &c)).unwrap();
    let e5 = emb.embed(&field(&scope, &CROSS_LAYOUT, &c)).unwrap();
    let mad = masked_mad(plane(&e1, 3), plane(&e5, 3), &emb.lateral_disk());
    (mad < 0.1, format!("phi1 mean abs difference 5 vs 1 bead {mad:.3} rad"))
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let r = grad_check(&ModelConfig::tiny(), 7, 200, GradCheckScope::Full).unwrap();
    let dt = t0.elapsed();
    (
        r.checked >= 200 && r.max_rel_err < 1e-3 && within(Duration::from_secs(300), dt),
        format!(
            "tiny model, {} parameters, max relative error {:.2e} at {}, {dt:.1?}",
            r.checked, r.max_rel_err, r.worst
        ),
    )
}

fn embed_samples(seeds: std::ops::Range<u64>, cfg: &SynthConfig, scope: &Microscope, emb: &Embedder) -> Dataset<f32> {
    use rayon::prelude::*;
    let (es, ts): (Vec<_>, Vec<_>) = seeds
        .into_par_iter()
        .map(|seed| {
            let s = generate_sample_with(seed, cfg, scope).unwrap();
            (emb.embed(&s.volume).unwrap(), s.truth)
        })
        .unzip();
    Dataset::new(&es, &ts).unwrap()
}

fn overfit_probe() -> Outcome {
    let t0 = Instant::now();
    let cfg = SynthConfig::probe();
    let scope = Microscope::new(&cfg.optics, cfg.light_sheet).unwrap();
    let emb = Embedder::new(&cfg.optics, cfg.light_sheet, &EmbeddingConfig::default()).unwrap();
    let data = embed_samples(0..256, &cfg, &scope, &emb);
    let batch = 8;
    let train_cfg = TrainConfig {
        batch,
        epochs: 2000 / steps_per_epoch(256, batch),
        warmup_epochs: 1,
        lr: 3e-4,
        weight_decay: 1e-3,
        optimizer: Optimizer::AdamW,
        max_steps: 2000,
        seed: 1,
        ..TrainConfig::default()
    };
    let (params, report) = fit(&data, &ModelConfig::probe(), &train_cfg).unwrap();
    let mut sq = 0.0;
    for k in (0..256).step_by(32) {
        let x = data.inputs.slice(s![k..k + 32, .., .., ..]).to_owned();
        let y = data.targets.slice(s![k..k + 32, ..]).to_owned();
        sq += loss_mse(&forward(&params, &x).unwrap(), &y) * 32.0;
    }
    let train_mse = sq / 256.0;

    let sim = LoopSim {
        scope: &scope,
        embedder: &emb,
        puncta: PunctaField::centered(&cfg.optics, cfg.fwhms_um[0], cfg.photon_range[0]),
        camera: None,
        seed: 0,
    };
    let model = ModelPredictor { params: &params };
    let (mut before, mut after, mut zero) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 100_000..100_064 {
        let (_, truth) = sample_truth(seed, &cfg).unwrap();
        let m = run_loop(&truth, &model, &sim, 1).unwrap();
        let z = run_loop(&truth, &ZeroPredictor, &sim, 1).unwrap();
        before.push(m.history[0]);
        after.push(m.history[1]);
        zero.push(z.history[1]);
    }
    let (m0, m1, mz) = (median(before), median(after), median(zero));
    let dt = t0.elapsed();
    (
        train_mse < 1e-4 && m1 < m0 && m1 < mz && within(Duration::from_secs(7200), dt),
        format!(
            "train MSE {train_mse:.2e} um^2 after {} steps ({:?}); held-out median residual {m0:.4} -> {m1:.4} waves \
             (zero predictor {mz:.4}), {dt:.1?}",
            params.opt.step, report.stop
        ),
    )
}

/// Every detectable group populated above the magnitude threshold.
fn rich_truth() -> ZernikeCoeffs {
    let mut c = ZernikeCoeffs::zeros();
    for (j, v) in [
        (3, 0.06),
        (5, -0.04),
        (6, 0.05),
        (7, -0.07),
        (8, 0.03),
        (9, 0.04),
        (10, -0.05),
        (11, 0.06),
        (12, 0.08),
        (13, 0.02),
        (14, 0.07),
    ] {
        c[j] = v;
    }
    c
}

fn confidence_pipeline() -> Outcome {
    let e = embedder().embed(&single(&scope(), &ZernikeCoeffs::zeros())).unwrap();
    let truth = rich_truth();
    let cfg = ConfidenceConfig::default();
    let report = classify(&sweep(&e, Some(&truth), &Oracle, 361).unwrap(), &cfg).unwrap();
    let slope_err = report
        .groups
        .iter()
        .filter(|g| g.m > 0)
        .map(|g| (g.slope.unwrap_or(f64::NAN) - 1.0).abs())
        .fold(0.0, f64::max);
    let confident = report.groups.iter().all(|g| g.status == Status::Confident);
    let coeff_err = (0..N_MODES).map(|j| (report.coeffs[j] - truth[j]).abs()).fold(0.0, f64::max);
    let noise = NoisePredictor {
        magnitude: 0.01,
        seed: 4,
    };
    let noisy = assess(&e, None, &noise, &cfg).unwrap();
    let zero = noisy.groups.iter().all(|g| g.status == Status::ConfidentZero);
    (
        slope_err < 0.01 && confident && coeff_err < 1e-3 && zero,
        format!(
            "oracle: max |slope - 1| {slope_err:.1e}, all confident {confident}, max coeff error {coeff_err:.1e} um; \
             0.01 um noise all confident_zero {zero}"
        ),
    )
}

fn correction_loop() -> Outcome {
    let (scope, emb) = (scope(), embedder());
    let sim = LoopSim {
        scope: &scope,
        embedder: &emb,
        puncta: PunctaField::centered(&scope.cfg, 0.1, 1e4),
        camera: None,
        seed: 0,
    };
    let modes = DETECTABLE_MODES.to_vec();
    let truth = random_coeffs(5, 0.3, &modes);
    let oracle = run_loop(&truth, &Oracle, &sim, 1).unwrap();
    let exact = oracle.residual == ZernikeCoeffs::zeros() && oracle.history[1] == 0.0;
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let truth = random_coeffs(200 + trial, 0.3, &modes);
        let state = run_loop(&truth, &NoisyOracle { q: 0.5, seed: trial }, &sim, 5).unwrap();
        let r0 = state.history[0];
        for (k, &r) in state.history.iter().enumerate() {
            worst = worst.max(r / (0.55f64.powi(k as i32) * r0));
        }
    }
    (
        exact && worst <= 1.0,
        format!("oracle residual exactly zero {exact}; noisy oracle worst residual / 0.55^k bound {worst:.3}"),
    )
}

fn deconvolution_stitching() -> Outcome {
    let shape = [64, 128, 128];
    let tile = [64, 64, 64];
    let vol = smooth_phantom(shape);
    let out = sv_deconvolve(&vol, &ideal_map(shape, tile), &optics(), SHEET, &DeconvConfig::default()).unwrap();
    let seams = border_discontinuity(&out, tile, 0.05);

    let small = [8, 12, 12];
    let data = Array3::from_shape_fn((8, 12, 12), |(z, y, x)| ((z * 5 + y * 3 + x * 7) % 13) as f64 + 20.0);
    let v = Volume::new(data, optics().voxel_um);
    let mask = OtfMask {
        support: Array3::from_shape_fn((8, 12, 12), |(z, y, x)| {
            let f = |i: usize, n: usize| i.min(n - i) as f64 / n as f64;
            f(z, 8).powi(2) + f(y, 12).powi(2) + f(x, 12).powi(2) < 0.1
        }),
    };
    let cfg = DeconvConfig {
        overlap: 0,
        snr: 1e12,
        otf_threshold: 0.0,
    };
    let m = mask.clone();
    let psf = move |_: Option<&ZernikeCoeffs>, s: [usize; 3]| Ok((delta(s), m.clone()));
    let got = sv_deconvolve_with(&v, &ideal_map(small, small), &cfg, &psf).unwrap();
    let mut spec = dft3(&v.data.mapv(|x| Complex64::new(x, 0.0)), -1.0);
    for (c, &keep) in spec.iter_mut().zip(&mask.support) {
        if !keep {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    let n = v.data.len() as f64;
    let expected = dft3(&spec, 1.0).mapv(|c| (c.re / n).max(0.0));
    let identity = got.data.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (
        seams < 0.01 && identity < 1e-9,
        format!("border discontinuity at overlap 32 {:.2}% of local intensity; delta-PSF vs masked DFT {identity:.1e}", 100.0 * seams),
    )
}

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Dataset files, trained checkpoint and evaluation CSV of one pipeline run.
fn pipeline_artifacts() -> (Vec<(String, Vec<u8>)>, Vec<u8>, String) {
    let synth = SynthConfig {
        optics: OpticsConfig {
            shape: [32, 32, 32],
            ..OpticsConfig::default()
        },
        ..SynthConfig::training()
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&synth, 6, dir.path(), 40).unwrap();
    let scope = Microscope::new(&synth.optics, synth.light_sheet).unwrap();
    let emb = Embedder::new(&synth.optics, synth.light_sheet, &EmbeddingConfig::default()).unwrap();
    let es: Vec<_> = (0..manifest.records.len())
        .map(|i| emb.embed(&Volume::read(&manifest.sample_path(dir.path(), i)).unwrap()).unwrap())
        .collect();
    let ts: Vec<_> = manifest.records.iter().map(|r| r.zernike_um).collect();
    let data = Dataset::<f32>::new(&es, &ts).unwrap();
    let stage = |p| StageConfig::new(p, 1, 2);
    let model = ModelConfig {
        stages: vec![stage(8), stage(4)],
        d: 32,
        planes: 6,
        z_out: N_MODES,
        rpe_m: 4,
    };
    let train_cfg = TrainConfig {
        batch: 3,
        epochs: 3,
        warmup_epochs: 1,
        lr: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let (params, _) = fit(&data, &model, &train_cfg).unwrap();
    let eval = EvalConfig {
        synth,
        amplitude_edges_waves: vec![0.0, 0.25, 0.5],
        photon_edges: vec![1e3, 1e4, 1e5],
        samples_per_bin: 2,
        iterations: 2,
        seed: 3,
    };
    let rows = evaluate_grid(&ModelPredictor { params: &params }, &eval, &scope, &emb).unwrap();
    (files(dir.path()), params.to_bytes().unwrap(), grid_csv(&rows))
}

fn determinism() -> Outcome {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(pipeline_artifacts)
    };
    let a = run(1);
    let b = run(1);
    let c = run(3);
    let same = |f: &dyn Fn(&(Vec<(String, Vec<u8>)>, Vec<u8>, String)) -> bool| f(&b) && f(&c);
    let dataset = same(&|x| x.0 == a.0);
    let training = same(&|x| x.1 == a.1);
    let evaluation = same(&|x| x.2 == a.2);
    (
        dataset && training && evaluation,
        format!(
            "byte-identical over 2 runs and 1/3 threads: dataset {dataset} ({} files), checkpoint {training}, \
             evaluation {evaluation}",
            a.0.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("Zernike orthonormality", zernike_orthonormality),
        ("PSF energy conservation", energy_conservation),
        ("synthetic-sample signal bound", synthetic_signal_bound),
        ("embedding identity", embedding_identity),
        ("interference removal", interference_removal),
        ("gradient check", gradient_check),
        ("overfit probe", overfit_probe),
        ("confidence pipeline", confidence_pipeline),
        ("correction loop algebra", correction_loop),
        ("deconvolution stitching", deconvolution_stitching),
        ("determinism", determinism),
    ];
    let selected: Option<Vec<usize>> = std::env::var("AOSENSE_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let (pass, detail) = run();
        println!("AC{n:<2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
