//! `gsocc`: scene generation, direct fitting, training, evaluation and
//! benchmarking for semantic Gaussian occupancy.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use gsocc::harness::{self, BenchOptions, BenchPreset, EvalSource, RunConfig, TrainOptions};
use gsocc::model::write_gaussians_binary;
use gsocc::scenes::{occlusion_preset, SceneSpec};

#[derive(Parser)]
#[command(name = "gsocc", version, about = "Semantic 3D Gaussian occupancy with multi-sensor fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a set of synthetic scene bundles.
    GenScenes(GenScenesArgs),
    /// Fit Gaussians directly to one scene's ground truth.
    Fit(FitArgs),
    /// Train the fusion pipeline on a scene set.
    Train(TrainArgs),
    /// Evaluate predictions against scene ground truth.
    Eval(EvalArgs),
    /// Time splatting and pipeline stages.
    Bench(BenchArgs),
    /// Print a run configuration with every key filled in.
    PrintConfig {
        /// Print the small toy pipeline instead of the full-size defaults.
        #[arg(long)]
        toy: bool,
    },
}

#[derive(Args)]
struct GenScenesArgs {
    /// Scene spec file (TOML, or JSON with a `.json` extension); omitted keys take defaults.
    #[arg(long, conflicts_with = "toy")]
    spec: Option<PathBuf>,
    /// Use the 32×32×8 toy spec instead of the 64×64×8 default.
    #[arg(long)]
    toy: bool,
    /// Add wall-occluded objects that cameras cannot see.
    #[arg(long)]
    occlusion: bool,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Seed of the first scene (scene i uses seed + i); defaults to the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Scene bundle directory.
    #[arg(long)]
    scene: PathBuf,
    /// Number of Gaussians (overrides fit.gaussians).
    #[arg(long)]
    gaussians: Option<usize>,
    /// Adam steps (overrides fit.steps).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene set directory (defaults to paths.scenes).
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (defaults to paths.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total steps (overrides train.steps).
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "gaussians", "grid", "ground_truth"])))]
struct EvalArgs {
    /// Pipeline checkpoint. Without `--config` the run config is read from
    /// the `config.toml` next to it.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Gaussian set ("GOCC", or JSON with a `.json` extension).
    #[arg(long)]
    gaussians: Option<PathBuf>,
    /// Saved "GVOX" label grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Evaluate each scene's ground truth against itself.
    #[arg(long)]
    ground_truth: bool,
    /// Scene set or bundle directory.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// paper (200×200×16, P = 6400), desk or toy.
    #[arg(long, default_value = "paper")]
    preset: String,
    /// Timed runs per stage; the median is reported.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Skip the brute-force dense splat.
    #[arg(long)]
    no_dense: bool,
    /// Output directory for `bench.json`.
    #[arg(long)]
    out: PathBuf,
}

/// Failure that maps to exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let is_usage = e.chain().any(|c| {
        c.is::<UsageError>() || matches!(c.downcast_ref::<gsocc::Error>(), Some(gsocc::Error::Config(_)))
    });
    if is_usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenScenes(a) => gen_scenes(a),
        Command::Fit(a) => fit(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::PrintConfig { toy } => {
            let cfg = if toy { RunConfig::toy() } else { RunConfig::default() };
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn load_spec(path: &Path) -> Result<SceneSpec> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let spec: SceneSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    };
    Ok(spec)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_scenes(a: GenScenesArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => load_spec(p)?,
        None if a.toy => SceneSpec::toy(),
        None => SceneSpec::default(),
    };
    if a.occlusion {
        spec = occlusion_preset(&spec);
    }
    spec.validate().map_err(usage)?;
    let base_seed = a.seed.unwrap_or(spec.seed);
    let bundles = harness::gen_scene_set(&spec, a.count, base_seed)?;
    harness::write_scene_set(&a.out, &spec, base_seed, &bundles)?;
    println!("wrote {} scene(s) to {}", bundles.len(), a.out.display());
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = a.gaussians {
        cfg.fit.gaussians = p;
    }
    if let Some(s) = a.steps {
        cfg.fit.steps = s;
    }
    cfg.validate()?;
    let bundle = gsocc::scenes::read_bundle(&a.scene).with_context(|| format!("reading scene {}", a.scene.display()))?;
    fs::create_dir_all(&a.out)?;
    let mut log = BufWriter::new(File::create(a.out.join("log.jsonl"))?);
    let result = harness::fit_scene(&bundle, &cfg, Some(&mut log));
    log.flush()?;
    let outcome = result?;
    let mut w = BufWriter::new(File::create(a.out.join("gaussians.gocc"))?);
    write_gaussians_binary(&mut w, &outcome.set)?;
    w.flush()?;
    harness::write_label_grid(&a.out.join("grid.gvox"), &outcome.grid)?;
    let report = outcome.evaluation.report(&harness::class_names(bundle.gt.num_classes));
    write_json(&a.out.join(harness::METRICS_FILE), &report)?;
    println!(
        "loss {:.5} -> {:.5}; IoU {:.4}, mIoU {:.4}",
        outcome.initial_loss, outcome.final_loss, report.iou, report.miou
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let scenes_dir = a
        .scenes
        .or_else(|| cfg.paths.scenes.clone())
        .ok_or_else(|| usage("no scene set: pass --scenes or set paths.scenes"))?;
    let out = a
        .out
        .or_else(|| cfg.paths.out.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set paths.out"))?;
    cfg.validate()?;
    let scenes: Vec<_> = harness::load_scenes(&scenes_dir)?.into_iter().map(|(_, b)| b).collect();
    let report = harness::train(&cfg, &scenes, TrainOptions { out: &out, resume: a.resume })?;
    println!(
        "{} steps; smoothed loss {:?} -> {:?}",
        report.steps, report.initial_smoothed_loss, report.final_smoothed_loss
    );
    let (u, f) = (&report.untrained, &report.final_eval);
    match u {
        Some(u) => println!("held-out mIoU {:.4} -> {:.4} (IoU {:.4} -> {:.4})", u.miou, f.miou, u.iou, f.iou),
        None => println!("held-out mIoU {:.4}, IoU {:.4}", f.miou, f.iou),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let source = if let Some(path) = a.checkpoint {
        let cfg_path = a
            .config
            .clone()
            .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join(harness::CONFIG_FILE));
        EvalSource::Checkpoint {
            config: RunConfig::load(&cfg_path)?,
            path,
        }
    } else if let Some(path) = a.gaussians {
        EvalSource::Gaussians {
            config: load_config(a.config.as_deref())?,
            path,
        }
    } else if let Some(path) = a.grid {
        EvalSource::Grid(path)
    } else {
        EvalSource::GroundTruth
    };
    let cfg = match &source {
        EvalSource::Checkpoint { config, .. } | EvalSource::Gaussians { config, .. } => config.clone(),
        _ => load_config(a.config.as_deref())?,
    };
    let scenes = harness::load_scenes(&a.scenes)?;
    let report = harness::eval(&source, &scenes, &cfg, &a.out)?;
    println!(
        "{} scene(s): IoU {:.4}, mIoU {:.4}",
        report.scenes.len(),
        report.aggregate.iou,
        report.aggregate.miou
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let preset = BenchPreset::parse(&a.preset).map_err(usage)?;
    if a.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let report = harness::bench(
        preset,
        BenchOptions {
            repeats: a.repeats,
            dense: !a.no_dense,
        },
    )?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("bench.json"), &report)?;
    print!("{}", report.table());
    Ok(())
}
