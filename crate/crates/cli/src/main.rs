//! `aosense`: simulate, embed, train, predict and correct from the shell.

mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use aosense::confidence::ConfidenceConfig;
use aosense::corrloop::{self, EvalConfig, LoopSim, TileMap};
use aosense::embedding::FourierEmbedding;
use aosense::model::{self, GradCheckScope, ModelConfig, ParamStore, StopReason};
use aosense::predictor::{ModelPredictor, Oracle, Predictor, ZeroPredictor};
use aosense::synth::{self, DatasetManifest};
use aosense::volume::Volume;
use aosense::{ExperimentConfig, Params, ZernikeCoeffs};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use run::{exit_code, Run, EXIT_NUMERIC, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "aosense", version, about = "Fourier-embedding aberration sensing")]
struct Cli {
    /// Experiment configuration (JSON); every section falls back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "AOSENSE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: `<out>/samples/<seed>.vol` plus a manifest.
    SimulateDataset {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed0: u64,
    },
    /// Compute the Fourier embedding of a volume.
    Embed {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict Zernike coefficients, optionally with the rotation confidence test.
    Predict {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        ckpt: PathBuf,
        /// 0 for the raw prediction, otherwise the number of sweep angles (361 = 1°).
        #[arg(long, default_value_t = 0)]
        rotations: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a freshly initialized checkpoint (zero head, so it predicts zeros).
    InitModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a simulated dataset, checkpointing after every epoch.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint at `--out` when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Compare backpropagated gradients with central differences.
    GradCheck {
        #[arg(long, value_enum, default_value_t = ModelPreset::GradCheck)]
        model: ModelPreset,
        #[arg(long, value_enum, default_value_t = Scope::Full)]
        scope: Scope,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exit with the numeric-failure code above this relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Residual heatmap of the correction loop as CSV.
    Evaluate {
        #[command(flatten)]
        predictor: PredictorArgs,
        /// Evaluation grid (JSON); defaults to the `eval` config section.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative correction of one known aberration.
    CorrectLoop {
        /// Ground-truth coefficients: a JSON array of 15 values in µm.
        #[arg(long)]
        truth: PathBuf,
        #[command(flatten)]
        predictor: PredictorArgs,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        /// Seeds the puncta placement and the camera noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one aberration per tile with the confidence test.
    TileMap {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Tile size: one value for every axis or `z,y,x`; defaults to the
        /// optics grid, which is the only size embedded without resampling.
        #[arg(long, value_parser = parse_triple)]
        tile: Option<[usize; 3]>,
        /// Tile stride; defaults to the tile size.
        #[arg(long, value_parser = parse_triple)]
        stride: Option<[usize; 3]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spatially varying Wiener deconvolution driven by a tile map.
    Deconvolve {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        tilemap: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long)]
    emb: Option<PathBuf>,
    #[arg(long)]
    vol: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PredictorArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Predict the ground truth exactly.
    #[arg(long)]
    oracle: bool,
    /// Always predict a flat wavefront.
    #[arg(long)]
    zero: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelPreset {
    GradCheck,
    Probe,
    Tiny,
    Small,
    /// The `model` section of `--config`.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Full,
    Head,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a] => Ok([a; 3]),
        [z, y, x] => Ok([z, y, x]),
        _ => Err("expected one value or z,y,x".into()),
    }
}

enum Loaded {
    Model(Params),
    Oracle,
    Zero,
}

impl PredictorArgs {
    fn load(&self) -> anyhow::Result<Loaded> {
        Ok(match (&self.ckpt, self.oracle) {
            (Some(p), _) => Loaded::Model(load_ckpt(p)?),
            (None, true) => Loaded::Oracle,
            (None, false) => Loaded::Zero,
        })
    }
}

impl Loaded {
    fn predictor(&self) -> Box<dyn Predictor + '_> {
        match self {
            Loaded::Model(params) => Box::new(ModelPredictor { params }),
            Loaded::Oracle => Box::new(Oracle),
            Loaded::Zero => Box::new(ZeroPredictor),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Loaded::Model(_) => "model",
            Loaded::Oracle => "oracle",
            Loaded::Zero => "zero",
        }
    }
}

fn load_ckpt(path: &Path) -> anyhow::Result<Params> {
    ParamStore::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::read(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default().resolved()?,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(aosense::Error::InvalidArgument("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = load_config(cli.config.as_deref())?;
    let cfg = &config;
    match cli.command {
        Command::SimulateDataset { n, out, seed0 } => {
            let mut run = Run::start("simulate-dataset", cfg);
            run.seed = Some(seed0);
            let m = synth::generate_dataset(&cfg.synth, n, &out, seed0)?;
            eprintln!("wrote {} samples to {}", m.records.len(), out.display());
            run.finish(&out, json!({ "samples": m.records.len() }))?;
        }
        Command::Embed { input, out } => {
            let run = Run::start("embed", cfg);
            let vol = Volume::read(&input)?;
            let e = cfg.embedder()?.embed(&vol)?;
            e.write(&out)?;
            run.finish(&out, json!({ "input": input, "meta": e.meta }))?;
        }
        Command::Predict {
            source,
            ckpt,
            rotations,
            out,
        } => {
            let run = Run::start("predict", cfg);
            let params = load_ckpt(&ckpt)?;
            let e = match (&source.emb, &source.vol) {
                (Some(p), _) => FourierEmbedding::read(p)?,
                (None, Some(p)) => cfg.embedder()?.embed(&Volume::read(p)?)?,
                (None, None) => unreachable!("clap enforces one source"),
            };
            let report = if rotations == 0 {
                json!({ "zernike_um": model::predict_one(&params, &e)? })
            } else {
                if rotations < 2 {
                    bail!(aosense::Error::InvalidArgument("--rotations must be 0 or >= 2".into()));
                }
                let conf = ConfidenceConfig {
                    rotations,
                    ..cfg.confidence.clone()
                };
                let r = aosense::confidence::assess(&e, None, &ModelPredictor { params: &params }, &conf)?;
                serde_json::to_value(r)?
            };
            aosense::io::write_json(&out, &report)?;
            run.finish(&out, json!({ "ckpt": ckpt, "rotations": rotations }))?;
        }
        Command::InitModel { out, seed } => {
            let mut run = Run::start("init-model", cfg);
            let seed = seed.unwrap_or(cfg.train.seed);
            run.seed = Some(seed);
            let p = Params::init(&cfg.model, seed)?;
            p.save(&out)?;
            run.finish(&out, json!({ "parameters": cfg.model.param_count() }))?;
        }
        Command::Train { dataset, out, resume } => return train(cfg, &dataset, &out, resume),
        Command::GradCheck {
            model,
            scope,
            samples,
            seed,
            tolerance,
            out,
        } => {
            let mut run = Run::start("grad-check", cfg);
            run.seed = Some(seed);
            let mc = match model {
                ModelPreset::GradCheck => ModelConfig::grad_check(),
                ModelPreset::Probe => ModelConfig::probe(),
                ModelPreset::Tiny => ModelConfig::tiny(),
                ModelPreset::Small => ModelConfig::small(),
                ModelPreset::Config => cfg.model.clone(),
            };
            let scope = match scope {
                Scope::Full => GradCheckScope::Full,
                Scope::Head => GradCheckScope::HeadOnly,
            };
            let r = model::grad_check(&mc, seed, samples, scope)?;
            let pass = r.max_rel_err < tolerance;
            println!(
                "max relative error {:.3e} at {} over {} parameters: {}",
                r.max_rel_err,
                r.worst,
                r.checked,
                if pass { "ok" } else { "FAILED" }
            );
            let result = json!({
                "max_rel_err": r.max_rel_err,
                "worst": r.worst,
                "checked": r.checked,
                "tolerance": tolerance,
                "pass": pass,
            });
            if let Some(out) = out {
                aosense::io::write_json(&out, &result)?;
                run.finish(&out, result)?;
            }
            if !pass {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::Evaluate { predictor, grid, out } => {
            let mut config = cfg.clone();
            if let Some(g) = &grid {
                config.eval = aosense::io::read_json::<EvalConfig>(g)
                    .with_context(|| format!("reading grid {}", g.display()))?;
                config = config.resolved()?;
            }
            let mut run = Run::start("evaluate", &config);
            run.seed = Some(config.eval.seed);
            let loaded = predictor.load()?;
            let rows = corrloop::evaluate_grid(
                loaded.predictor().as_ref(),
                &config.eval,
                &config.microscope()?,
                &config.embedder()?,
            )?;
            aosense::io::write_atomic(&out, corrloop::grid_csv(&rows).as_bytes())?;
            run.finish(&out, json!({ "predictor": loaded.name(), "rows": rows.len() }))?;
        }
        Command::CorrectLoop {
            truth,
            predictor,
            iters,
            seed,
            out,
        } => {
            let mut run = Run::start("correct-loop", cfg);
            run.seed = Some(seed);
            let truth: ZernikeCoeffs =
                aosense::io::read_json(&truth).with_context(|| format!("reading truth {}", truth.display()))?;
            let loaded = predictor.load()?;
            let scope = cfg.microscope()?;
            let embedder = cfg.embedder()?;
            let sim = LoopSim {
                scope: &scope,
                embedder: &embedder,
                puncta: synth::place_puncta(seed, &cfg.synth)?,
                camera: cfg.synth.camera.clone(),
                seed,
            };
            let state = corrloop::run_loop(&truth, loaded.predictor().as_ref(), &sim, iters)?;
            println!("{}", serde_json::to_string(&state.history)?);
            if let Some(e) = &state.error {
                eprintln!("warning: loop stopped early: {e}");
            }
            if let Some(out) = out {
                aosense::io::write_json(&out, &state)?;
                run.finish(&out, json!({ "predictor": loaded.name(), "iters": iters }))?;
            }
        }
        Command::TileMap {
            vol,
            ckpt,
            tile,
            stride,
            out,
        } => {
            let run = Run::start("tile-map", cfg);
            let params = load_ckpt(&ckpt)?;
            let v = Volume::read(&vol)?;
            let tile = tile.unwrap_or(cfg.optics.shape);
            let map = corrloop::map_aberrations(
                &v,
                &cfg.embedder()?,
                &ModelPredictor { params: &params },
                &cfg.confidence,
                tile,
                stride.unwrap_or(tile),
                None,
            )?;
            map.write(&out)?;
            let fallback = map
                .tiles
                .iter()
                .filter(|t| t.flag == corrloop::TileFlag::IdealFallback)
                .count();
            run.finish(&out, json!({ "tiles": map.tiles.len(), "ideal_fallback": fallback }))?;
        }
        Command::Deconvolve { vol, tilemap, out } => {
            let run = Run::start("deconvolve", cfg);
            let v = Volume::read(&vol)?;
            let map = TileMap::read(&tilemap)?;
            let d = corrloop::sv_deconvolve(&v, &map, &cfg.optics, cfg.light_sheet, &cfg.deconv)?;
            d.write(&out, serde_json::Map::new())?;
            run.finish(&out, json!({ "tilemap": tilemap }))?;
        }
    }
    Ok(0)
}

fn train(cfg: &ExperimentConfig, dataset: &Path, out: &Path, resume: bool) -> anyhow::Result<u8> {
    let mut run = Run::start("train", cfg);
    run.seed = Some(cfg.train.seed);
    let manifest = DatasetManifest::read(dataset)?;
    if manifest.config.optics != cfg.optics || manifest.config.light_sheet != cfg.light_sheet {
        bail!(aosense::Error::InvalidArgument(format!(
            "dataset {} was simulated with different optics than the config",
            dataset.display()
        )));
    }
    let embedder = cfg.embedder()?;
    let embeddings = (0..manifest.records.len())
        .into_par_iter()
        .map(|i| embedder.embed(&Volume::read(&manifest.sample_path(dataset, i))?))
        .collect::<aosense::Result<Vec<_>>>()?;
    let truths: Vec<ZernikeCoeffs> = manifest.records.iter().map(|r| r.zernike_um).collect();
    let data = model::Dataset::<f32>::new(&embeddings, &truths)?;
    let mut params = if resume && out.exists() {
        ParamStore::load_for(out, &cfg.model)?
    } else {
        Params::init(&cfg.model, cfg.train.seed)?
    };
    let report = model::train(&mut params, &data, &cfg.train, |p| {
        let h = p.history.last().expect("epoch recorded");
        eprintln!("epoch {} loss {:.4e} lr {:.3e} steps {}", h.epoch, h.loss, h.lr, h.steps);
        p.save(out)
    })?;
    params.save(out)?;
    let stop = match &report.stop {
        StopReason::Completed => "completed".to_string(),
        StopReason::MaxSteps => "max_steps".to_string(),
        StopReason::TargetLoss => "target_loss".to_string(),
        StopReason::Diverged { step, detail } => format!("diverged at step {step}: {detail}"),
    };
    run.finish(
        out,
        json!({ "samples": data.len(), "steps": report.steps, "stop": stop, "history": params.history }),
    )?;
    if let StopReason::Diverged { .. } = report.stop {
        eprintln!("error: training {stop}; the checkpoint holds the last finite parameters");
        return Ok(EXIT_NUMERIC);
    }
    Ok(0)
}
