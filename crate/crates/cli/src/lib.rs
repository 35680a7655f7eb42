//! Command implementations behind the `unipre3d` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use unipre3d_core::config::RunConfig;
use unipre3d_core::data::{generate_object_sample, generate_scene_sample, load_dataset, save_dataset, Mode};
use unipre3d_core::gradcheck::{decode_gradcheck, renderer_gradcheck, tape_gradcheck, GradcheckConfig, GradcheckReport};
use unipre3d_core::io::{write_gaussians_ply, write_png, write_ppm};
use unipre3d_core::probe::{probe, ProbeConfig};
use unipre3d_core::render::render;
use unipre3d_core::train::{eval_split, predict, Trainer};
use unipre3d_core::Error as CoreError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(name = "unipre3d", version, about = "Gaussian-splatting pre-training for point cloud backbones")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; omitted keys take the defaults of its mode.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Mode whose defaults apply when no configuration file is given.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing output.
    #[arg(long, global = true)]
    pub force: bool,
    /// Overrides `paths.dataset`.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Overrides `paths.output`.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Object,
    Scene,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset under `paths.dataset`.
    Synth {
        /// Number of samples (defaults to `data.n_samples`).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train on `paths.dataset`, writing metrics and checkpoints under `paths.output`.
    Pretrain {
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Render one view of one sample with a checkpoint.
    Render {
        /// Checkpoint directory (defaults to `<output>/checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Image path; `.png` writes PNG, anything else binary PPM.
        #[arg(long)]
        out: PathBuf,
        /// Also write the predicted primitives as PLY.
        #[arg(long)]
        gaussians: Option<PathBuf>,
    },
    /// Finite-difference checks of the renderer, decoder and tape gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 8)]
        gaussians: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long)]
        json: bool,
    },
    /// PSNR of rendered views on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Linear per-point classification probe: pretrained against fresh weights.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// Configuration utilities.
    Config {
        /// Print the complete default configuration for `--mode`.
        #[arg(long)]
        print_defaults: bool,
    },
}

/// Maps an error chain to the documented process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Numeric(_) => EXIT_NUMERIC,
                CoreError::Io { .. } | CoreError::Format { .. } => EXIT_IO,
                _ => EXIT_CONFIG,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if cause.downcast_ref::<NumericFailure>().is_some() {
            return EXIT_NUMERIC;
        }
    }
    1
}

#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

pub fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::defaults(match g.mode.unwrap_or(ModeArg::Object) {
            ModeArg::Object => Mode::Object,
            ModeArg::Scene => Mode::Scene,
        }),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &g.dataset {
        cfg.paths.dataset = d.clone();
    }
    if let Some(o) = &g.output {
        cfg.paths.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let g = &cli.global;
    if let Command::Config { print_defaults } = &cli.command {
        let cfg = load_config(g)?;
        if !print_defaults {
            writeln!(out, "configuration is valid")?;
        }
        write!(out, "{}", cfg.to_toml_string())?;
        return Ok(());
    }
    let cfg = load_config(g)?;
    match &cli.command {
        Command::Synth { samples } => cmd_synth(&cfg, samples.unwrap_or(cfg.data.n_samples), g.force, out),
        Command::Pretrain { max_steps } => cmd_pretrain(cfg, *max_steps, g.force, out),
        Command::Render {
            checkpoint,
            sample,
            view,
            out: path,
            gaussians,
        } => cmd_render(&cfg, checkpoint.as_deref(), *sample, *view, path, gaussians.as_deref(), out),
        Command::Gradcheck {
            instances,
            gaussians,
            size,
            json,
        } => {
            let gc = GradcheckConfig {
                instances: *instances,
                n_gaussians: *gaussians,
                image_size: *size,
                seed: cfg.seed,
                ..GradcheckConfig::default()
            };
            cmd_gradcheck(&gc, *json, out)
        }
        Command::Eval { checkpoint, json } => cmd_eval(&cfg, checkpoint.as_deref(), *json, out),
        Command::Probe { checkpoint, steps } => cmd_probe(&cfg, checkpoint.as_deref(), *steps, out),
        Command::Config { .. } => unreachable!("handled above"),
    }
}

pub fn cmd_synth(cfg: &RunConfig, n: usize, force: bool, out: &mut dyn Write) -> Result<()> {
    let samples = (0..n as u64)
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i);
            match cfg.mode {
                Mode::Object => generate_object_sample(seed, &cfg.data.object),
                Mode::Scene => generate_scene_sample(seed, &cfg.data.scene),
            }
        })
        .collect::<unipre3d_core::Result<Vec<_>>>()?;
    save_dataset(&cfg.paths.dataset, &samples, force)?;
    let mode = match cfg.mode {
        Mode::Object => "object",
        Mode::Scene => "scene",
    };
    writeln!(out, "wrote {n} {mode} samples to {}", cfg.paths.dataset.display())?;
    Ok(())
}

fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir).with_context(|| dir.display().to_string())?.next().is_some() {
        if !force {
            return Err(CoreError::Config(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            ))
            .into());
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn cmd_pretrain(mut cfg: RunConfig, max_steps: Option<u64>, force: bool, out: &mut dyn Write) -> Result<()> {
    if max_steps.is_some() {
        cfg.optimizer.max_steps = max_steps;
    }
    let (_, data) = load_dataset(&cfg.paths.dataset)?;
    let root = cfg.paths.output.clone();
    prepare_output(&root, force)?;
    std::fs::write(root.join("config.toml"), cfg.to_toml_string()).with_context(|| root.display().to_string())?;
    let metrics_path = root.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| metrics_path.display().to_string())?);
    let mut trainer = Trainer::new(cfg)?;
    let mut last = None;
    let result = trainer.fit(
        &data,
        |m| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(metrics, "{line}").map_err(|e| CoreError::Io {
                path: metrics_path.clone(),
                source: e,
            })?;
            last = Some(m.clone());
            Ok(())
        },
        Some(&root.join(CHECKPOINT_DIR)),
    );
    metrics.flush().with_context(|| metrics_path.display().to_string())?;
    result?;
    if trainer.step == 0 {
        trainer.save(&root.join(CHECKPOINT_DIR))?;
    }
    match last {
        Some(m) => writeln!(out, "trained {} steps; last loss {:.6}, psnr {:.2} dB", trainer.step, m.loss, m.psnr)?,
        None => writeln!(out, "no steps run; wrote the initial checkpoint")?,
    }
    Ok(())
}

fn open_trainer(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Trainer> {
    let dir = checkpoint.map_or_else(|| cfg.paths.output.join(CHECKPOINT_DIR), Path::to_path_buf);
    Trainer::from_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

pub fn cmd_render(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    sample: usize,
    view: usize,
    path: &Path,
    gaussians: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let trainer = open_trainer(cfg, checkpoint)?;
    let (_, data) = load_dataset(&cfg.paths.dataset)?;
    let s = data
        .get(sample)
        .ok_or_else(|| CoreError::Config(format!("sample {sample} out of range ({} samples)", data.len())))?;
    let cam = s
        .cameras
        .get(view)
        .ok_or_else(|| CoreError::Config(format!("view {view} out of range ({} views)", s.num_views())))?;
    let split = eval_split(&trainer.config, s)?;
    let set = predict(&trainer.model, &trainer.store, &trainer.config, s, &split.reference)?;
    let mut img = render(&set, cam, trainer.config.loss.background)?.image;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        write_png(path, &img)?;
    } else {
        unipre3d_core::io::quantize_8bit(&mut img);
        write_ppm(path, &img)?;
    }
    if let Some(p) = gaussians {
        write_gaussians_ply(p, &set)?;
    }
    writeln!(
        out,
        "rendered {} primitives into {}x{} image {}",
        set.len(),
        cam.width(),
        cam.height(),
        path.display()
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradcheckOutput<'a> {
    passed: bool,
    suites: &'a [GradcheckReport],
}

pub fn cmd_gradcheck(gc: &GradcheckConfig, json: bool, out: &mut dyn Write) -> Result<()> {
    let reports = vec![renderer_gradcheck(gc)?, decode_gradcheck(gc)?, tape_gradcheck(gc)?];
    let passed = reports.iter().all(GradcheckReport::passed);
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&GradcheckOutput { passed, suites: &reports })?)?;
    } else {
        for r in &reports {
            writeln!(out, "{} ({} instances, {} rejected)", r.suite, r.instances, r.rejected)?;
            for b in &r.blocks {
                writeln!(
                    out,
                    "  {:<10} checked {:>5}  failed {:>3}  max abs {:.3e}  max rel {:.3e}",
                    b.block, b.checked, b.failed, b.max_abs_err, b.max_rel_err
                )?;
            }
        }
        writeln!(out, "{}", if passed { "PASS" } else { "FAIL" })?;
    }
    if !passed {
        return Err(NumericFailure("gradient check failed".into()).into());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, json: bool, out: &mut dyn Write) -> Result<()> {
    let trainer = open_trainer(cfg, checkpoint)?;
    let (_, data) = load_dataset(&cfg.paths.dataset)?;
    let report = trainer.evaluate(&data)?;
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        writeln!(out, "{:>12} {:>6} {:>10}", "sample_seed", "view", "psnr_db")?;
        for r in &report.rows {
            writeln!(out, "{:>12} {:>6} {:>10.4}", r.sample_seed, r.view, r.psnr)?;
        }
        writeln!(out, "mean psnr {:.4} dB, mean loss {:.6}", report.mean_psnr, report.mean_loss)?;
    }
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig, checkpoint: Option<&Path>, steps: usize, out: &mut dyn Write) -> Result<()> {
    let trainer = open_trainer(cfg, checkpoint)?;
    let (_, data) = load_dataset(&cfg.paths.dataset)?;
    if data.len() < 2 {
        bail!(CoreError::Config("probe needs a dataset with at least two samples".into()));
    }
    let report = probe(
        &trainer,
        &data,
        &ProbeConfig {
            steps,
            seed: cfg.seed,
            ..ProbeConfig::default()
        },
    )?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}
