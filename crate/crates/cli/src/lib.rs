//! Command-line front end: builds the toy world, trains the prior and the
//! coarse model, generates posed datasets, refines, and reports metrics.
//!
//! The binary is a thin wrapper over [`run`]; [`run_args`] runs a command
//! line in-process.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dualrefine::config::Config;
use dualrefine::enhancer::{Backend, PosedDataset};
use dualrefine::eval::{evaluate_field, turntable, MetricReport};
use dualrefine::pipeline::{self, AblationInputs};
use dualrefine::prior::{validation_loss, Prior};
use dualrefine::scene::RadianceField;
use dualrefine::trainer::{
    create_exclusive, refine_until, train_coarse_logged, write_losses_csv, AblationMode, Phase, RunOutput, TrainState,
};

const SNAPSHOT: &str = "config.snapshot";
const LOCK: &str = ".lock";

#[derive(Parser, Debug)]
#[command(
    name = "dualrefine",
    version,
    about = "Refine coarse 3D radiance fields with a diffusion prior and a discriminator"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Config file (TOML); a previous run's config.snapshot also works.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given: desk, bench, paper-scale.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override a config value, e.g. --set refine.total_steps=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize the ground-truth toy scene and its degraded coarse model.
    MakeWorld {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy diffusion prior on rendered scenes.
    TrainPrior {
        #[command(flatten)]
        common: Common,
        /// Optimization steps (overrides prior.train.steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score-distillation training from the standard initialization.
    TrainCoarse {
        #[command(flatten)]
        common: Common,
        /// Prior checkpoint.
        #[arg(long)]
        prior: PathBuf,
        /// Generator steps (overrides coarse.steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render the coarse dataset and enhance it into a posed dataset.
    GenDataset {
        #[command(flatten)]
        common: Common,
        /// Field checkpoint to render; defaults to the degraded ground truth.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// toy_i2i, oracle, or remote.
        #[arg(long)]
        backend: Option<String>,
        /// Prior checkpoint for the toy_i2i backend.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Ground-truth field for the oracle backend; defaults to the configured toy scene.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Refine a coarse field against a posed dataset.
    Refine {
        #[command(flatten)]
        common: Common,
        /// Field or training-state checkpoint to start from.
        #[arg(long)]
        init: PathBuf,
        /// Posed dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Prior checkpoint (required when the SDS weight is positive).
        #[arg(long)]
        prior: Option<PathBuf>,
        /// L2_ONLY, GAN_ONLY, SDS_L2, or SDS_GAN.
        #[arg(long)]
        mode: Option<AblationMode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many steps; the saved state can be resumed.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Continue from <out>/state.ckpt.
        #[arg(long)]
        resume: bool,
        /// Ground-truth field; when given, metrics.json is written.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Run the loss ablation on the toy oracle world and report metrics.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', default_value = "L2_ONLY,GAN_ONLY,SDS_L2,SDS_GAN")]
        modes: Vec<AblationMode>,
        /// Number of seeds (0..n).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Prior checkpoint; trained and cached under <out>/cache when omitted.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Print the reports as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Compare a field against the ground truth over the dataset rig.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Dataset whose rig and view means are used; the configured rig otherwise.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Render a strip of evenly spaced azimuth views.
    Turntable {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 20.0)]
        elevation_deg: f64,
    },
}

/// Snapshot written to every run directory: the resolved config and the invocation.
#[derive(Serialize)]
struct RunRecord {
    argv: Vec<String>,
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut table: toml::Table =
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            table.remove("run");
            Config::from_toml(&toml::to_string(&table)?)?
        }
        None => Config::preset(&common.preset)?,
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Holds the run-directory lock; removed on drop.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn open(path: &Path, cfg: &Config, argv: &[String]) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        create_exclusive(&path.join(LOCK), &std::process::id().to_string())
            .with_context(|| format!("run directory {} is in use (remove {LOCK} if stale)", path.display()))?;
        let dir = Self {
            path: path.to_path_buf(),
        };
        let record = RunRecord { argv: argv.to_vec() };
        let mut text = cfg.to_toml()?;
        text.push_str("\n[run]\n");
        text.push_str(&toml::to_string(&record)?);
        dualrefine::ckpt::write_atomic(&path.join(SNAPSHOT), text.as_bytes())?;
        Ok(dir)
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK));
    }
}

fn setup(common: &Common, argv: &[String]) -> Result<(Config, RunDir)> {
    let cfg = load_config(common)?;
    let dir = RunDir::open(&common.out, &cfg, argv)?;
    Ok((cfg, dir))
}

/// Accepts either a training-state checkpoint or a bare field checkpoint.
fn load_start(path: &Path, cfg: &Config) -> Result<TrainState> {
    match TrainState::load(path) {
        Ok(state) => Ok(state),
        Err(_) => {
            let field = RadianceField::load(path).with_context(|| format!("loading {}", path.display()))?;
            Ok(TrainState::new(field, cfg.refine.seed, cfg.refine.field_lr))
        }
    }
}

fn print_table(reports: &[MetricReport]) {
    println!(
        "{:<22} {:>10} {:>10} {:>10}",
        "run", "psnr_gt", "proximity", "laplacian"
    );
    for r in reports {
        println!(
            "{:<22} {:>10.2} {:>10.3} {:>10.4}",
            r.run_id,
            r.mean_psnr_to_gt,
            r.mean_proximity.unwrap_or(f64::NAN),
            r.mean_abs_laplacian
        );
    }
    println!(
        "{:<22} {:>10} {:>10} {:>10}",
        "mode (mean)", "psnr_gt", "proximity", "laplacian"
    );
    for (mode, p, x, l) in pipeline::mode_means(reports) {
        println!("{mode:<22} {p:>10.2} {x:>10.3} {l:>10.4}");
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::MakeWorld { common }
            | Command::TrainPrior { common, .. }
            | Command::TrainCoarse { common, .. }
            | Command::GenDataset { common, .. }
            | Command::Refine { common, .. }
            | Command::Ablate { common, .. }
            | Command::Metrics { common, .. }
            | Command::Turntable { common, .. } => common,
        }
    }
}

/// Runs a parsed command line; `argv` is recorded in the run's config snapshot.
pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command.common().threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .context("configuring worker threads")?
            .install(|| execute(cli.command, argv)),
        None => execute(cli.command, argv),
    }
}

/// Parses and runs `argv` (program name first) in-process.
pub fn run_args<S: AsRef<str>>(argv: &[S]) -> Result<()> {
    let argv: Vec<String> = argv.iter().map(|a| a.as_ref().to_string()).collect();
    let cli = Cli::try_parse_from(&argv)?;
    run(cli, &argv)
}

fn execute(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::MakeWorld { common } => {
            let (cfg, dir) = setup(&common, argv)?;
            let gt = pipeline::ground_truth(&cfg)?;
            let coarse = pipeline::degraded_coarse(&cfg, &gt);
            gt.save(dir.join("ground_truth.field"))?;
            coarse.save(dir.join("coarse.field"))?;
            let fov = cfg.dataset.fov_deg.to_radians();
            for (name, f) in [("ground_truth.png", &gt), ("coarse.png", &coarse)] {
                turntable(f, &cfg.render, 8, 20f64.to_radians(), cfg.dataset.radius, fov)?.save_png(dir.join(name))?;
            }
            println!("wrote {}", dir.path.display());
        }
        Command::TrainPrior { mut common, steps } => {
            if let Some(s) = steps {
                common.overrides.push(format!("prior.train.steps={s}"));
            }
            let (cfg, dir) = setup(&common, argv)?;
            let corpus = pipeline::prior_corpus(&cfg)?;
            let (prior, report) = dualrefine::prior::train_toy_prior(&corpus, &cfg.schedule()?, &cfg.prior.train)?;
            prior.save(dir.join("prior.ckpt"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            fs::write(dir.join("prior_losses.csv"), csv)?;
            let val = validation_loss(&prior, &corpus, 200, cfg.prior.train.seed ^ 0x5eed)?;
            println!("validation denoising loss {val:.4}");
        }
        Command::TrainCoarse {
            mut common,
            prior,
            steps,
        } => {
            if let Some(s) = steps {
                common.overrides.push(format!("coarse.steps={s}"));
            }
            let (cfg, dir) = setup(&common, argv)?;
            let prior = Prior::load(&prior)?;
            let out = RunOutput {
                dir: dir.path.clone(),
                checkpoint_every: cfg.refine.checkpoint_every,
                render_every: cfg.refine.render_every,
            };
            let state = train_coarse_logged(
                &prior,
                cfg.world.scene,
                &cfg.coarse_config(),
                &cfg.coarse.weights,
                Some(&out),
            )?;
            state.field.save(dir.join("field.ckpt"))?;
            println!("trained {} steps", state.step);
        }
        Command::GenDataset {
            mut common,
            field,
            views,
            samples,
            backend,
            prior,
            ground_truth,
            seed,
        } => {
            let pairs = [
                ("dataset.views", views.map(|v| v.to_string())),
                ("dataset.samples", samples.map(|v| v.to_string())),
                ("dataset.backend", backend.map(|b| format!("{b:?}"))),
                ("dataset.seed", seed.map(|v| v.to_string())),
            ];
            for (k, v) in pairs {
                if let Some(v) = v {
                    common.overrides.push(format!("{k}={v}"));
                }
            }
            let (cfg, dir) = setup(&common, argv)?;
            let gt = match &ground_truth {
                Some(p) => RadianceField::load(p)?,
                None => pipeline::ground_truth(&cfg)?,
            };
            let field = match &field {
                Some(p) => RadianceField::load(p)?,
                None => pipeline::degraded_coarse(&cfg, &gt),
            };
            let ds = match cfg.dataset.backend.as_str() {
                "oracle" => {
                    let world = pipeline::oracle_world(&cfg, gt)?;
                    pipeline::build_dataset(&cfg, &field, &Backend::Oracle(&world), &dir.path)?
                }
                "toy_i2i" => {
                    let path = prior.context("--prior is required for the toy_i2i backend")?;
                    let prior = Prior::load(&path)?;
                    pipeline::build_dataset(&cfg, &field, &Backend::ToyI2i(&prior), &dir.path)?
                }
                "remote" => pipeline::build_dataset(&cfg, &field, &Backend::Remote(&cfg.dataset.remote), &dir.path)?,
                other => bail!("unknown backend {other}"),
            };
            println!("{} entries over {} views", ds.entries.len(), ds.view_counts().len());
        }
        Command::Refine {
            mut common,
            init,
            dataset,
            prior,
            mode,
            steps,
            seed,
            stop_after,
            resume,
            ground_truth,
        } => {
            if let Some(m) = mode {
                common.overrides.push(format!("refine.mode={m}"));
            }
            if let Some(s) = steps {
                common.overrides.push(format!("refine.total_steps={s}"));
            }
            if let Some(s) = seed {
                common.overrides.push(format!("refine.seed={s}"));
            }
            let (cfg, dir) = setup(&common, argv)?;
            let ds = PosedDataset::open(&dataset)?.load()?;
            let prior = prior.map(|p| Prior::load(&p)).transpose()?;
            let rcfg = cfg.refine_config(None, cfg.refine.seed)?;
            let state = if resume {
                let s = TrainState::load(dir.join("state.ckpt")).context("--resume needs <out>/state.ckpt")?;
                if s.phase != Phase::Refine {
                    bail!("state in {} is not a refinement state", dir.path.display());
                }
                s
            } else {
                let mut s = load_start(&init, &cfg)?;
                s.phase = Phase::Coarse;
                s
            };
            let out = RunOutput {
                dir: dir.path.clone(),
                checkpoint_every: cfg.refine.checkpoint_every,
                render_every: cfg.refine.render_every,
            };
            let stop = stop_after.unwrap_or(rcfg.total_steps);
            let state = refine_until(state, &ds, prior.as_ref(), &rcfg, &cfg.refine.weights, Some(&out), stop)?;
            state.save(dir.join("state.ckpt"))?;
            write_losses_csv(dir.join("losses.csv"), &state.traces)?;
            state.field.save(dir.join("field.ckpt"))?;
            if let Some(gt) = ground_truth {
                let gt = RadianceField::load(&gt)?;
                let rig = ds_rig(&dataset)?;
                let m = evaluate_field(&state.field, &gt, &rig, &cfg.render, Some(&ds))?;
                let report = MetricReport {
                    run_id: dir.path.display().to_string(),
                    mode: cfg.refine.mode.clone(),
                    seed: cfg.refine.seed,
                    psnr_to_gt: m.psnr_to_gt,
                    mean_psnr_to_gt: m.mean_psnr_to_gt,
                    mean_proximity: m.mean_proximity,
                    mean_abs_laplacian: m.mean_abs_laplacian,
                    losses: pipeline::loss_summaries(&state.traces),
                };
                fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
                println!("psnr to ground truth {:.2} dB", report.mean_psnr_to_gt);
            }
            println!("refined to step {} of {}", state.step, rcfg.total_steps);
        }
        Command::Ablate {
            common,
            modes,
            seeds,
            prior,
            json,
        } => {
            let (cfg, dir) = setup(&common, argv)?;
            let prior = match prior {
                Some(p) => Prior::load(&p)?,
                None => pipeline::cached_prior(&cfg, &dir.join("cache"))?,
            };
            let gt = pipeline::ground_truth(&cfg)?;
            let coarse = pipeline::degraded_coarse(&cfg, &gt);
            let world = pipeline::oracle_world(&cfg, gt.clone())?;
            let ds_dir = dir.join("dataset");
            let ds = pipeline::build_dataset(&cfg, &coarse, &Backend::Oracle(&world), &ds_dir)?.load()?;
            let inputs = AblationInputs {
                config: &cfg,
                prior: &prior,
                coarse: &coarse,
                ground_truth: &gt,
                dataset: &ds,
                out_dir: Some(dir.join("runs")),
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let reports = pipeline::run_ablation(&inputs, &modes, &seeds)?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&reports)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                print_table(&reports);
            }
        }
        Command::Metrics {
            common,
            field,
            ground_truth,
            dataset,
        } => {
            let (cfg, dir) = setup(&common, argv)?;
            let f = RadianceField::load(&field)?;
            let gt = RadianceField::load(&ground_truth)?;
            let (rig, ds) = match &dataset {
                Some(d) => (ds_rig(d)?, Some(PosedDataset::open(d)?.load()?)),
                None => (cfg.dataset.rig()?, None),
            };
            let m = evaluate_field(&f, &gt, &rig, &cfg.render, ds.as_ref())?;
            let report = MetricReport {
                run_id: field.display().to_string(),
                mode: String::new(),
                seed: 0,
                psnr_to_gt: m.psnr_to_gt,
                mean_psnr_to_gt: m.mean_psnr_to_gt,
                mean_proximity: m.mean_proximity,
                mean_abs_laplacian: m.mean_abs_laplacian,
                losses: Default::default(),
            };
            report.validate()?;
            let text = serde_json::to_string_pretty(&report)?;
            fs::write(dir.join("metrics.json"), &text)?;
            println!("{text}");
        }
        Command::Turntable {
            common,
            field,
            views,
            elevation_deg,
        } => {
            let (cfg, dir) = setup(&common, argv)?;
            let f = RadianceField::load(&field)?;
            let strip = turntable(
                &f,
                &cfg.render,
                views,
                elevation_deg.to_radians(),
                cfg.dataset.radius,
                cfg.dataset.fov_deg.to_radians(),
            )?;
            let path = dir.join("turntable.png");
            strip.save_png(&path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn ds_rig(dataset: &Path) -> Result<dualrefine::camera::PoseSet> {
    Ok(PosedDataset::open(dataset)?.header.rig)
}
