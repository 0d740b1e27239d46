//! Command-line front end: dataset generation, the three training stages,
//! evaluation, and trajectory export. Every command is driven by one TOML
//! config (all keys optional, `camreloc config` prints the defaults) plus
//! repeatable `--set section.key=value` overrides, and is deterministic
//! for a fixed master seed.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or checkpoint,
//! 3 runtime failure (excessive sampling skips).

use camreloc::config::{apply_override, load_config, ConfigError, PipelineConfig};
use camreloc::data::{
    generate_scene, load_dataset, load_training_set, render_view, sample_view_pose, save_frame,
    write_intrinsics, DataError, TrainingSet, GRID_STRIDE,
};
use camreloc::eval::{
    evaluate, trajectory_rows, write_report_csv, write_trajectory, EvalError, EvaluationReport,
};
use camreloc::exec;
use camreloc::geometry::CameraIntrinsics;
use camreloc::regressor::{
    default_architecture, estimate_scene_center, load_checkpoint, save_checkpoint,
    CheckpointError, Regressor, RegressorError,
};
use camreloc::training::{
    train_end_to_end, train_init, train_reprojection, InitMode, TrainingError, TrainingLog,
};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "camreloc", version, about = "Camera relocalization pipeline")]
struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set scoring.alpha=0.2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration (defaults, file, overrides) as TOML.
    Config,
    /// Render a synthetic dataset into the documented directory layout.
    Generate {
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: fit the regressor to initialization targets.
    TrainInit {
        /// Dataset root (uses the train split).
        #[arg(long)]
        data: PathBuf,
        /// Where initialization targets come from.
        #[arg(long, value_enum, default_value = "rendered")]
        mode: ModeArg,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Append per-iteration log lines to this file.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write intermediate checkpoints into this directory.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Stage 2: minimize reprojection error under ground-truth poses.
    TrainRepro {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Stage 3: train end to end through the full pipeline.
    TrainE2e {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Localize every test frame and report pose errors.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Write the per-frame CSV report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write a trajectory file here.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Localize every test frame and write only the trajectory file.
    ExportTrajectory {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Rendered,
    Heuristic,
}

impl From<ModeArg> for InitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rendered => InitMode::Rendered,
            ModeArg::Heuristic => InitMode::Heuristic,
        }
    }
}

// ======================== error & exit plumbing ========================

enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Runtime(m) => write!(f, "runtime: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RegressorError> for CliError {
    fn from(e: RegressorError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::TooManySkips { .. } => CliError::Runtime(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are successes; anything else is a
            // usage problem.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    for spec in &cli.overrides {
        apply_override(&mut cfg, spec)?;
    }
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Generate { out } => cmd_generate(&cfg, &out),
        Command::TrainInit { data, mode, out, log, checkpoint_dir } => {
            cmd_train_init(&cfg, &data, mode.into(), &out, log.as_deref(), checkpoint_dir.as_deref())
        }
        Command::TrainRepro { data, model, out, log, checkpoint_dir } => cmd_train_repro(
            &cfg,
            &data,
            &model,
            &out,
            log.as_deref(),
            checkpoint_dir.as_deref(),
        ),
        Command::TrainE2e { data, model, out, log, checkpoint_dir } => cmd_train_e2e(
            &cfg,
            &data,
            &model,
            &out,
            log.as_deref(),
            checkpoint_dir.as_deref(),
        ),
        Command::Eval { data, model, report, trajectory } => {
            cmd_eval(&cfg, &data, &model, report.as_deref(), trajectory.as_deref())
        }
        Command::ExportTrajectory { data, model, out } => {
            cmd_export_trajectory(&cfg, &data, &model, &out)
        }
    }
}

// ======================== commands ========================

fn cmd_generate(cfg: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    let g = &cfg.generation;
    if g.width % GRID_STRIDE != 0 || g.height % GRID_STRIDE != 0 {
        return Err(CliError::Config(format!(
            "generation.width and height must be multiples of {GRID_STRIDE}, got {}x{}",
            g.width, g.height
        )));
    }
    if !(g.focal > 0.0) || !(g.extent > 0.0) {
        return Err(CliError::Config("generation.focal and extent must be positive".into()));
    }
    let scene = generate_scene(g.scene_seed, g.extent, g.style);
    let camera =
        CameraIntrinsics::new(g.focal, g.width as f64 / 2.0, g.height as f64 / 2.0);
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    write_intrinsics(out, &camera)?;
    let mut rng = exec::derive_rng(g.view_seed, 0);
    // Depth maps accompany only the train split: they are training-time
    // supervision, never test-time input.
    for (split, count, keep_depth) in
        [("train", g.train_views, true), ("test", g.test_views, false)]
    {
        for index in 0..count {
            let pose = sample_view_pose(&scene, &mut rng);
            let view = render_view(&scene, &pose, &camera, g.width, g.height)?;
            save_frame(out, split, index, &view.image, &pose, keep_depth.then_some(&view.depth))?;
        }
    }
    println!(
        "wrote {} train and {} test frames under {}",
        g.train_views,
        g.test_views,
        out.display()
    );
    Ok(())
}

fn load_split(root: &Path, split: &str) -> Result<TrainingSet, CliError> {
    let index = load_dataset(root, split)?;
    let set = load_training_set(&index)?;
    if set.samples.is_empty() {
        return Err(CliError::Data(format!("{split} split under {} is empty", root.display())));
    }
    Ok(set)
}

fn open_log(path: Option<&Path>) -> Result<TrainingLog, CliError> {
    match path {
        Some(p) => TrainingLog::with_file(p).map_err(CliError::from),
        None => Ok(TrainingLog::in_memory()),
    }
}

fn cmd_train_init(
    cfg: &PipelineConfig,
    data: &Path,
    mode: InitMode,
    out: &Path,
    log: Option<&Path>,
    checkpoint_dir: Option<&Path>,
) -> Result<(), CliError> {
    let set = load_split(data, "train")?;
    let center = estimate_scene_center(&set, cfg.training.depth_prior)?;
    let mut model =
        Regressor::new(&default_architecture(), &center, cfg.training.master_seed);
    let mut log = open_log(log)?;
    train_init(&set, &mut model, &cfg.training, mode, &mut log, checkpoint_dir)?;
    save_checkpoint(out, &model, None)?;
    println!("saved initialized model to {}", out.display());
    Ok(())
}

fn cmd_train_repro(
    cfg: &PipelineConfig,
    data: &Path,
    model_path: &Path,
    out: &Path,
    log: Option<&Path>,
    checkpoint_dir: Option<&Path>,
) -> Result<(), CliError> {
    let set = load_split(data, "train")?;
    let (mut model, _) = load_checkpoint(model_path)?;
    let mut log = open_log(log)?;
    train_reprojection(&set, &mut model, &cfg.training, &mut log, checkpoint_dir)?;
    save_checkpoint(out, &model, None)?;
    println!("saved reprojection-trained model to {}", out.display());
    Ok(())
}

fn cmd_train_e2e(
    cfg: &PipelineConfig,
    data: &Path,
    model_path: &Path,
    out: &Path,
    log: Option<&Path>,
    checkpoint_dir: Option<&Path>,
) -> Result<(), CliError> {
    let set = load_split(data, "train")?;
    let (mut model, _) = load_checkpoint(model_path)?;
    let mut log = open_log(log)?;
    let alpha = train_end_to_end(
        &set,
        &mut model,
        &cfg.training,
        &cfg.sampling,
        &cfg.scoring,
        &cfg.refinement,
        &mut log,
        checkpoint_dir,
    )?;
    save_checkpoint(out, &model, None)?;
    println!("saved end-to-end-trained model to {}", out.display());
    println!("final_alpha={alpha}");
    Ok(())
}

fn run_evaluation(
    cfg: &PipelineConfig,
    data: &Path,
    model_path: &Path,
) -> Result<EvaluationReport, CliError> {
    let set = load_split(data, "test")?;
    let (model, _) = load_checkpoint(model_path)?;
    let report = evaluate(
        &model,
        &set,
        &cfg.sampling,
        &cfg.scoring,
        &cfg.refinement,
        &cfg.evaluation,
        cfg.training.master_seed,
    )?;
    Ok(report)
}

fn check_skip_rate(cfg: &PipelineConfig, report: &EvaluationReport) -> Result<(), CliError> {
    let skip = report.skip_fraction();
    if skip > cfg.evaluation.max_skip_fraction {
        return Err(CliError::Runtime(format!(
            "sampling failed on {:.1}% of frames (limit {:.1}%)",
            100.0 * skip,
            100.0 * cfg.evaluation.max_skip_fraction
        )));
    }
    Ok(())
}

fn cmd_eval(
    cfg: &PipelineConfig,
    data: &Path,
    model_path: &Path,
    report_path: Option<&Path>,
    trajectory_path: Option<&Path>,
) -> Result<(), CliError> {
    let report = run_evaluation(cfg, data, model_path)?;
    println!(
        "frames={} median_rotation_deg={:.4} median_translation_m={:.4} within_thresholds={:.3} skip_fraction={:.3}",
        report.frames.len(),
        report.median_rotation_deg(),
        report.median_translation_m(),
        report.fraction_within_thresholds(),
        report.skip_fraction(),
    );
    if let Some(path) = report_path {
        write_report_csv(path, &report)?;
        println!("wrote report to {}", path.display());
    }
    if let Some(path) = trajectory_path {
        write_trajectory(path, &trajectory_rows(&report))?;
        println!("wrote trajectory to {}", path.display());
    }
    check_skip_rate(cfg, &report)
}

fn cmd_export_trajectory(
    cfg: &PipelineConfig,
    data: &Path,
    model_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let report = run_evaluation(cfg, data, model_path)?;
    write_trajectory(out, &trajectory_rows(&report))?;
    println!("wrote trajectory to {}", out.display());
    check_skip_rate(cfg, &report)
}
