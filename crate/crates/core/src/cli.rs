//! Command-line front end. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{model_layout, PipelineConfig};
use crate::error::Result;
use crate::gausshead::GaussianSet;
use crate::gradcheck::check_grad;
use crate::kernels::{init_params, ParamStore};
use crate::manifest::Scene;
use crate::pipeline::{self, InferOptions, Stage, GAUSSIANS_FILE};
use crate::synthetic::{gen_synthetic, SceneKind, SyntheticOptions};

pub const THREADS_ENV: &str = "SPLATFORGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "splatforge", version, about = "Feed-forward Gaussian splatting from sparse posed views")]
struct Cli {
    /// Worker threads; overrides SPLATFORGE_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Scene manifest JSON.
    #[arg(long)]
    scene: PathBuf,
    /// Pipeline config JSON; defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight archive; seeded initialization when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Predict Gaussians for a scene.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Directory of ground-truth depth_{i}.tsf maps.
        #[arg(long)]
        depth_override: Option<PathBuf>,
        /// Also write every intermediate feature map.
        #[arg(long)]
        dump: bool,
    },
    /// Render the target cameras of a scene from a GSP1 file.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to <out>/gaussians.gsp.
        #[arg(long)]
        gaussians: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-view depth maps.
    Depth {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write every intermediate feature map.
    DumpFeatures {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Generate an analytic synthetic scene.
    GenSynthetic {
        /// textured-plane, two-plane-occlusion or photo-consistent-features.
        #[arg(long)]
        kind: SceneKind,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Config whose provider channel counts size the feature fixtures.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize seeded weights.
    InitWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare rasterizer gradients against central differences.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Use a zero upstream gradient.
        #[arg(long)]
        zero_loss: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_weights(path: Option<&Path>, cfg: &PipelineConfig) -> Result<ParamStore> {
    let layout = model_layout(cfg);
    match path {
        Some(p) => {
            let store = ParamStore::load(p)?;
            store.check_layout(&layout)?;
            Ok(store)
        }
        None => init_params(&layout, cfg.seed),
    }
}

fn run_model(model: &ModelArgs, stage: Stage, opts: InferOptions) -> Result<()> {
    let cfg = load_config(model.config.as_deref(), model.seed)?;
    let scene = Scene::load(&model.scene)?;
    let out = if stage == Stage::Gaussians {
        let store = match opts.depth_override {
            Some(_) => ParamStore::empty(cfg.seed),
            None => load_weights(model.weights.as_deref(), &cfg)?,
        };
        pipeline::infer(&scene, &cfg, &store, &opts)?
    } else {
        let store = load_weights(model.weights.as_deref(), &cfg)?;
        pipeline::run(&scene, &cfg, &store, stage, opts.dump)?
    };
    pipeline::write_outputs(&out, &scene, &model.out)?;
    if let Some(g) = &out.gaussians {
        println!("wrote {} Gaussians to {}", g.len(), model.out.join(GAUSSIANS_FILE).display());
    }
    if !out.depths.is_empty() {
        println!("wrote {} depth maps to {}", out.depths.len(), model.out.display());
    }
    if !out.features.is_empty() {
        println!("wrote feature dumps to {}", model.out.join("features").display());
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Infer {
            model,
            depth_override,
            dump,
        } => run_model(&model, Stage::Gaussians, InferOptions { dump, depth_override })?,
        Command::Depth { model } => run_model(&model, Stage::Depth, InferOptions::default())?,
        Command::DumpFeatures { model } => run_model(
            &model,
            Stage::Features,
            InferOptions {
                dump: true,
                depth_override: None,
            },
        )?,
        Command::Render {
            scene,
            config,
            gaussians,
            out,
        } => {
            let scene = Scene::load(&scene)?;
            let cfg = match config {
                Some(p) => load_config(Some(&p), None)?,
                None => {
                    let (h, w) = scene.image_dims();
                    let mut cfg = PipelineConfig::default();
                    cfg.render.width = w;
                    cfg.render.height = h;
                    cfg
                }
            };
            let path = gaussians.unwrap_or_else(|| out.join(GAUSSIANS_FILE));
            let g = GaussianSet::load_gsp1(&path)?;
            g.validate()?;
            let reports = pipeline::render_targets(&g, &scene, &cfg, &out)?;
            for (j, r) in reports.iter().enumerate() {
                match r {
                    Some(r) => println!("target {j}: psnr {:.3} dB, ssim {:.4}", r.psnr_db, r.ssim),
                    None => println!("target {j}: rendered"),
                }
            }
        }
        Command::GenSynthetic {
            kind,
            seed,
            height,
            width,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let mut opts = SyntheticOptions::new(kind, seed, height, width);
            opts.depth_prior_channels = cfg.depth_prior.channels;
            opts.semantic_channels = cfg.semantic.channels;
            let m = gen_synthetic(&opts, &out)?;
            println!("wrote {} views and {} targets to {}", m.views.len(), m.targets.len(), out.display());
        }
        Command::InitWeights { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let store = init_params(&model_layout(&cfg), cfg.seed)?;
            store.save(&out)?;
            println!("wrote {} parameter blocks to {}", store.len(), out.display());
        }
        Command::CheckGrad {
            seed,
            scenes,
            size,
            zero_loss,
            out,
        } => {
            let report = check_grad(seed, scenes, size, zero_loss)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            print!("{json}");
            if let Some(p) = out {
                std::fs::write(p, &json)?;
            }
            return Ok(if report.passed { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match cli.threads {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse() {
                Ok(n) => n,
                Err(_) => {
                    eprintln!("error: {THREADS_ENV}={v:?} is not a thread count");
                    return 2;
                }
            },
            Err(_) => 0,
        },
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

impl clap::ValueEnum for SceneKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[
            SceneKind::TexturedPlane,
            SceneKind::TwoPlaneOcclusion,
            SceneKind::PhotoConsistentFeatures,
        ]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            SceneKind::TexturedPlane => "textured-plane",
            SceneKind::TwoPlaneOcclusion => "two-plane-occlusion",
            SceneKind::PhotoConsistentFeatures => "photo-consistent-features",
        }))
    }
}

