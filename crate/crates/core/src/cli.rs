//! The `bodylift` command line. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 1 for usage
//! or input errors, 2 when training or fitting diverges.
//!
//! Settings come from built-in defaults, then an optional TOML file given
//! with `--config` (sections `sampler`, `mixer`, `train`, `fit`, `synth`),
//! then explicit flags.

use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::body_model::{
    load_model, save_model, toy_model, KinematicModel, PoseState, ToyModelConfig,
};
use crate::fitting::{
    self, problem_json, save_report, synthesize_problem, FitError, FitReportFile, SynthConfig,
};
use crate::mixer::{self, load_checkpoint, save_checkpoint, MixerConfig};
use crate::obj::{write_posed_obj, write_rest_obj};
use crate::sampling::{generate_dataset, Dataset, SamplerConfig};
use crate::trainer::{self, split_indices, write_metrics_csv, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Diverged(_) => 2,
        }
    }
}

fn input<E: Display>(context: impl Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Input(format!("{context}: {e}"))
}

#[derive(Debug, Parser)]
#[command(
    name = "bodylift",
    version,
    about = "Body model lifting, training and fitting"
)]
struct Cli {
    /// TOML file with `sampler`, `mixer`, `train`, `fit` or `synth` tables.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the procedural toy body model.
    Model(ModelArgs),
    /// Sample a synthetic training dataset.
    Generate(GenerateArgs),
    /// Train a lifter on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Synthesize a fitting problem from a random state.
    Problem(ProblemArgs),
    /// Fit the model to a problem file.
    Fit(FitArgs),
    /// Write a mesh as OBJ.
    ExportObj(ExportArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    vertices: Option<usize>,
    #[arg(long)]
    shape_dim: Option<usize>,
    #[arg(long)]
    pose_dim: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Landmark noise std in meters.
    #[arg(long)]
    noise: Option<f64>,
    /// Also write the text form of the dataset here.
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint with the best held-out MPJPE.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Lifter input token count (must match the dataset).
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Score every example instead of the held-out split.
    #[arg(long)]
    all: bool,
    /// Write the evaluation as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProblemArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    constraints: Option<usize>,
    #[arg(long)]
    pixel_noise: Option<f64>,
    #[arg(long)]
    distance: Option<f64>,
    /// Leave the ground-truth state out of the file.
    #[arg(long)]
    no_truth: bool,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    problem: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the problem's ordinal constraints.
    #[arg(long)]
    no_constraints: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON pose state; without it (and without a checkpoint) the rest mesh is written.
    #[arg(long, conflicts_with = "checkpoint")]
    state: Option<PathBuf>,
    /// Lifter checkpoint; requires `--landmarks`.
    #[arg(long, requires = "landmarks")]
    checkpoint: Option<PathBuf>,
    /// JSON array of hip-centered `[x, y, z]` landmarks in meters.
    #[arg(long, requires = "checkpoint")]
    landmarks: Option<PathBuf>,
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(input(path.display()))?;
            text.parse::<toml::Table>().map_err(input(path.display()))?
        }
        None => toml::Table::new(),
    };
    match cli.command {
        Command::Model(a) => cmd_model(a),
        Command::Generate(a) => cmd_generate(a, &config),
        Command::Train(a) => cmd_train(a, &config),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Problem(a) => cmd_problem(a, &config),
        Command::Fit(a) => cmd_fit(a, &config),
        Command::ExportObj(a) => cmd_export_obj(a),
    }
}

fn merge(base: &mut toml::Table, overlay: &toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(key.clone(), value.clone());
            }
        }
    }
}

/// `base` with the config file's `section` table laid over it.
fn layered<T: Serialize + DeserializeOwned>(
    base: &T,
    config: &toml::Table,
    section: &str,
) -> Result<T, CliError> {
    let context = || format!("config section [{section}]");
    let mut table = toml::Table::try_from(base).map_err(input(context()))?;
    if let Some(overlay) = config.get(section) {
        let overlay = overlay
            .as_table()
            .ok_or_else(|| CliError::Input(format!("{} must be a table", context())))?;
        merge(&mut table, overlay);
    }
    table.try_into().map_err(input(context()))
}

fn read_model(path: &Path) -> Result<KinematicModel, CliError> {
    load_model(path).map_err(input(format!("model {}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(input(path.display()))?;
    serde_json::from_str(&text).map_err(input(path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(input(path.display()))
}

fn cmd_model(a: ModelArgs) -> Result<(), CliError> {
    let defaults = ToyModelConfig::default();
    let config = ToyModelConfig {
        seed: a.seed,
        vertex_count: a.vertices.unwrap_or(defaults.vertex_count),
        shape_dim: a.shape_dim.unwrap_or(defaults.shape_dim),
        pose_dim: a.pose_dim.unwrap_or(defaults.pose_dim),
        ..defaults
    };
    let model = toy_model(&config).map_err(input("toy model"))?;
    save_model(&model, &a.out).map_err(input(a.out.display()))?;
    println!(
        "model {}: {} joints, {} vertices, {} faces, S={}, hash {}",
        a.out.display(),
        model.joint_count(),
        model.vertex_count(),
        model.faces.len(),
        model.landmark_count(),
        model.short_hash()
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs, config: &toml::Table) -> Result<(), CliError> {
    let model = read_model(&a.model)?;
    let mut sampler: SamplerConfig = layered(&SamplerConfig::default(), config, "sampler")?;
    if let Some(seed) = a.seed {
        sampler.seed = seed;
    }
    if let Some(noise) = a.noise {
        sampler.noise_sigma = noise;
    }
    let dataset = generate_dataset(&model, &sampler, a.count).map_err(input("generate"))?;
    dataset.save(&a.out).map_err(input(a.out.display()))?;
    if let Some(path) = &a.text {
        let mut w = create(path)?;
        dataset.write_text(&mut w).map_err(input(path.display()))?;
        w.flush().map_err(input(path.display()))?;
    }
    println!(
        "dataset {}: count {}, S={}, noise {} m, seed {}, model {}",
        a.out.display(),
        dataset.len(),
        dataset.header.landmarks,
        sampler.noise_sigma,
        sampler.seed,
        model.short_hash()
    );
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn cmd_train(a: TrainArgs, config: &toml::Table) -> Result<(), CliError> {
    let model = read_model(&a.model)?;
    let dataset = Dataset::load(&a.dataset).map_err(input(a.dataset.display()))?;
    let mut mixer_config: MixerConfig = layered(&MixerConfig::for_model(&model), config, "mixer")?;
    let mut train_config: TrainConfig = layered(&TrainConfig::default(), config, "train")?;
    if let Some(v) = a.tokens {
        mixer_config.tokens = v;
    }
    if let Some(v) = a.channels {
        mixer_config.channels = v;
    }
    if let Some(v) = a.layers {
        mixer_config.layers = v;
    }
    if let Some(v) = a.steps {
        train_config.steps = v;
    }
    if let Some(v) = a.batch_size {
        train_config.batch_size = v;
    }
    if let Some(v) = a.lr {
        train_config.adam.learning_rate = v;
    }
    if let Some(v) = a.seed {
        train_config.seed = v;
    }
    if let Some(v) = a.eval_every {
        train_config.eval_every = v;
    }
    if mixer_config.tokens != dataset.header.landmarks as usize {
        return Err(CliError::Input(format!(
            "dataset has S={} landmarks but the lifter takes S={}",
            dataset.header.landmarks, mixer_config.tokens
        )));
    }
    dataset
        .check_model(&model)
        .map_err(input(a.dataset.display()))?;

    let outcome =
        trainer::train_with_progress(&model, &dataset, &mixer_config, &train_config, |row| {
            eprintln!(
                "step {:>7}  loss {:.4e}  mpjpe {:.2} mm  pa {:.2} mm",
                row.step, row.train_loss, row.eval_mpjpe_mm, row.eval_mpjpe_pa_mm
            )
        })
        .map_err(train_error)?;

    save_checkpoint(&outcome.best, &a.out).map_err(input(a.out.display()))?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("csv"));
    let mut w = create(&log_path)?;
    write_metrics_csv(&outcome.log, &mut w)
        .and_then(|_| w.flush())
        .map_err(input(log_path.display()))?;
    let ev = &outcome.final_eval;
    println!(
        "held-out MPJPE {:.2} mm, MPJPE-PA {:.2} mm over {} examples (checkpoint step {})",
        ev.mpjpe_mm, ev.mpjpe_pa_mm, ev.count, outcome.best.step
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let model = read_model(&a.model)?;
    let dataset = Dataset::load(&a.dataset).map_err(input(a.dataset.display()))?;
    let ckpt = load_checkpoint(&a.checkpoint).map_err(input(a.checkpoint.display()))?;
    let examples = if a.all {
        &dataset.examples[..]
    } else {
        &dataset.examples[split_indices(dataset.len()).1]
    };
    let ev = trainer::evaluate(&model, &ckpt.params, examples).map_err(train_error)?;
    if let Some(path) = &a.out {
        let text = serde_json::to_string_pretty(&ev).map_err(input(path.display()))?;
        fs::write(path, text + "\n").map_err(input(path.display()))?;
    }
    println!(
        "MPJPE {:.2} mm, MPJPE-PA {:.2} mm, rotation {:.2} deg, translation {:.2} mm over {} examples",
        ev.mpjpe_mm, ev.mpjpe_pa_mm, ev.rot_err_deg, ev.t_err_mm, ev.count
    );
    Ok(())
}

fn cmd_problem(a: ProblemArgs, config: &toml::Table) -> Result<(), CliError> {
    let model = read_model(&a.model)?;
    let mut synth: SynthConfig = layered(&SynthConfig::default(), config, "synth")?;
    if let Some(v) = a.constraints {
        synth.constraints = v;
    }
    if let Some(v) = a.pixel_noise {
        synth.pixel_noise = v;
    }
    if let Some(v) = a.distance {
        synth.distance = v;
    }
    let (problem, truth) =
        synthesize_problem(&model, &synth, a.seed).map_err(input("synthesize"))?;
    let text = problem_json(&problem, (!a.no_truth).then_some(&truth));
    fs::write(&a.out, text + "\n").map_err(input(a.out.display()))?;
    println!(
        "problem {}: {} observations, {} constraints",
        a.out.display(),
        problem.observed_count(),
        problem.constraints.len()
    );
    Ok(())
}

fn fit_error(e: FitError) -> CliError {
    match e {
        FitError::Diverged { .. } => CliError::Diverged(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn cmd_fit(a: FitArgs, config: &toml::Table) -> Result<(), CliError> {
    let model = read_model(&a.model)?;
    let (problem, truth) = fitting::load_problem(&a.problem).map_err(fit_error)?;
    // the problem file's own settings are the base the [fit] table overrides
    let mut problem = match config.get("fit") {
        Some(_) => layered(&problem, config, "fit")?,
        None => problem,
    };
    if let Some(v) = a.iterations {
        problem.iterations = v;
    }
    if let Some(v) = a.restarts {
        problem.restarts = v;
    }
    if let Some(v) = a.seed {
        problem.seed = v;
    }
    if a.no_constraints {
        problem.constraints.clear();
    }
    let report = fitting::fit(&model, &problem, None).map_err(fit_error)?;
    let file = FitReportFile::new(&model, report, truth.as_ref()).map_err(fit_error)?;
    save_report(&file, &a.out).map_err(fit_error)?;

    let r = &file.report;
    let ordinal = r
        .loss
        .ordinal
        .map_or("absent".to_string(), |v| format!("{v:.4e}"));
    println!(
        "loss {:.4e} -> {:.4e} (reprojection {:.4e}, ordinal {ordinal}), restart {}",
        r.initial_loss.total, r.loss.total, r.loss.reprojection, r.chosen_restart
    );
    if let (Some(before), Some(after)) = (r.depth_order_error_initial, r.depth_order_error) {
        println!(
            "depth order error {:.1}% -> {:.1}%",
            100.0 * before,
            100.0 * after
        );
    }
    if let Some(t) = &file.truth {
        println!(
            "to truth: MPJPE {:.2} mm, MPJPE-PA {:.2} mm",
            t.mpjpe_mm, t.mpjpe_pa_mm
        );
    }
    Ok(())
}

fn cmd_export_obj(a: ExportArgs) -> Result<(), CliError> {
    let model = read_model(&a.model)?;
    let state: Option<PoseState> = match (&a.state, &a.checkpoint, &a.landmarks) {
        (Some(path), _, _) => Some(read_json(path)?),
        (None, Some(ckpt_path), Some(lm_path)) => {
            let ckpt = load_checkpoint(ckpt_path).map_err(input(ckpt_path.display()))?;
            let points: Vec<[f64; 3]> = read_json(lm_path)?;
            let points: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p)).collect();
            Some(mixer::predict(&ckpt.params, &points).map_err(input(lm_path.display()))?)
        }
        _ => None,
    };
    let mut w = create(&a.out)?;
    match &state {
        Some(s) => write_posed_obj(&mut w, &model, s),
        None => write_rest_obj(&mut w, &model),
    }
    .map_err(input(a.out.display()))?;
    w.flush().map_err(input(a.out.display()))?;
    println!(
        "mesh {}: {} vertices, {} faces",
        a.out.display(),
        model.vertex_count(),
        model.faces.len()
    );
    Ok(())
}
