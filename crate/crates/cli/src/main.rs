use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gsfm::data_assoc::Landmark;
use gsfm::executor::Executor;
use gsfm::metrics::evaluate;
use gsfm::pipeline::io::{read_poses, write_json};
use gsfm::pipeline::{
    run_on_input, run_view_graph, synthetic_input, write_outputs, PipelineConfig, PipelineError, SceneInput,
};
use gsfm::synth::{generate_orbit_scene, inject_outlier_edges, OutlierMode, SceneConfig};
use gsfm::view_graph::write_cycle_csv;

#[derive(Parser)]
#[command(name = "gsfm", version, about = "Global structure-from-motion back-end")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a scene directory.
    Run(RunArgs),
    /// Write a synthetic oracle scene and a matching config file.
    Synth(SynthArgs),
    /// Score estimated poses against ground truth.
    Eval(EvalArgs),
    /// Run up to the view graph and write the cycle diagnostics CSV.
    DumpViewgraph(DumpArgs),
}

/// Config sources, applied in order: defaults, `--config`, `--set`, flags.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set rotation.sigma=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Scene directory (io.input_dir).
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Worker threads; defaults to GSFM_WORKERS or 1.
    #[arg(short = 'j', long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cycle-consistency threshold in degrees.
    #[arg(long)]
    cycle_threshold: Option<f64>,
    /// Rotation measurement uncertainty.
    #[arg(long)]
    sigma: Option<f64>,
    /// Verify every matched pair instead of retrieving candidates.
    #[arg(long)]
    exhaustive: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (io.output_dir).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Doppelganger,
    Random,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene directory to create.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 20)]
    cameras: usize,
    #[arg(long, default_value_t = 500)]
    points: usize,
    /// Keypoint noise in pixels.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of matched pairs replaced by outlier correspondences.
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
    #[arg(long, value_enum, default_value_t = Mode::Doppelganger)]
    outlier_mode: Mode,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated poses (`id qw qx qy qz tx ty tz`, missing ids unregistered).
    #[arg(short, long)]
    estimated: PathBuf,
    /// Ground-truth poses in the same format, every image listed.
    #[arg(short, long)]
    ground_truth: PathBuf,
    /// landmarks.json from a run, for track statistics.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Comma-separated AUC thresholds in degrees.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Write the metrics here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// CSV path; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Pipeline(PipelineError),
    Usage(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Pipeline(PipelineError::Config(_)) => 2,
            CliError::Pipeline(PipelineError::Input(_)) => 3,
            CliError::Pipeline(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Pipeline(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::DumpViewgraph(a) => dump_viewgraph(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Parses `a.b=value`, reading the value as TOML and falling back to a bare
/// string.
fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, CliError> {
    let mut table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for s in &args.set {
        apply_set(&mut table, s)?;
    }
    let text = toml::to_string(&table).map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut cfg = PipelineConfig::from_toml_str(&text)?;
    if let Some(dir) = &args.input {
        cfg.io.input_dir = Some(dir.clone());
    }
    if let Some(n) = args.workers {
        cfg.n_workers = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.cycle_threshold {
        cfg.view_graph.cycle_threshold_deg = t;
    }
    if let Some(s) = args.sigma {
        cfg.rotation.sigma = s;
    }
    if args.exhaustive {
        cfg.retrieval.exhaustive = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_input(cfg: &PipelineConfig) -> Result<SceneInput, CliError> {
    let dir = cfg
        .io
        .input_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("no input directory: pass --input or set io.input_dir".into()))?;
    Ok(SceneInput::read_dir(dir)?)
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(dir) = args.output {
        cfg.io.output_dir = Some(dir);
    }
    let out_dir = cfg
        .io
        .output_dir
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --output or set io.output_dir".into()))?;
    let input = read_input(&cfg)?;
    let out = run_on_input(&input, &cfg, &Executor::new(cfg.n_workers))?;
    write_outputs(&out, &out_dir)?;
    let r = &out.report;
    println!(
        "registered {}/{} cameras, {} landmarks, {:.2} s",
        r.n_registered_cameras,
        r.n_images,
        out.result.landmarks.len(),
        out.timing.total_s
    );
    if let Some(m) = &r.metrics {
        let aucs: Vec<String> = m
            .pose_auc
            .iter()
            .map(|a| format!("{}°: {:.2}", a.threshold_deg, a.auc_percent))
            .collect();
        println!("pose AUC {}", aucs.join(", "));
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), CliError> {
    let scene_cfg = SceneConfig {
        n_cameras: args.cameras,
        n_points: args.points,
        noise_px: args.noise,
        seed: args.seed,
        ..Default::default()
    };
    let out = generate_orbit_scene(&scene_cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut input = synthetic_input(&out);
    if args.outlier_fraction > 0.0 {
        let mode = match args.outlier_mode {
            Mode::Doppelganger => OutlierMode::Doppelganger,
            Mode::Random => OutlierMode::Random,
        };
        let inj = inject_outlier_edges(
            &out.scene,
            &out.keypoints,
            &out.matches,
            args.outlier_fraction,
            mode,
            args.noise,
            args.seed,
        );
        input.keypoints = inj.keypoints;
        input.matches = inj.matches;
    }
    input.write_dir(&args.output)?;
    let mut cfg = PipelineConfig::for_synthetic(args.noise);
    cfg.seed = args.seed;
    cfg.io.input_dir = Some(args.output.clone());
    cfg.io.output_dir = Some(args.output.join("out"));
    let cfg_path = args.output.join("pipeline.toml");
    // Leave the worker count to GSFM_WORKERS or -j.
    let mut table: toml::Table = toml::from_str(&cfg.to_toml_string()).expect("config is a table");
    table.remove("n_workers");
    std::fs::write(&cfg_path, toml::to_string_pretty(&table).expect("table serializes"))
        .map_err(|e| PipelineError::Output(format!("{}: {e}", cfg_path.display())))?;
    println!(
        "wrote {} cameras, {} points, {} matched pairs to {}",
        args.cameras,
        args.points,
        input.matches.len(),
        args.output.display()
    );
    Ok(())
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn to_stdout(f: impl FnOnce(&mut std::io::StdoutLock) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match f(&mut out).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(PipelineError::Output(format!("stdout: {e}")).into())
        }
        _ => Ok(()),
    }
}

fn read_landmarks(path: &Path) -> Result<Vec<Landmark>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Pipeline(PipelineError::Input(format!("{}: {e}", path.display()))))
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let estimated = read_poses(&args.estimated)?;
    let gt: Vec<_> = read_poses(&args.ground_truth)?;
    if gt.iter().any(Option::is_none) {
        return Err(PipelineError::Input(format!("{}: ground truth must list every image", args.ground_truth.display())).into());
    }
    let gt: Vec<_> = gt.into_iter().flatten().collect();
    let landmarks = match &args.landmarks {
        Some(p) => read_landmarks(p)?,
        None => Vec::new(),
    };
    let thresholds = args.thresholds.unwrap_or_else(|| PipelineConfig::default().auc_thresholds_deg);
    if thresholds.is_empty() || thresholds.iter().any(|&t| !(t > 0.0)) {
        return Err(CliError::Usage("AUC thresholds must be positive".into()));
    }
    let report = evaluate(&estimated, &gt, &landmarks, &thresholds).map_err(PipelineError::from)?;
    match &args.output {
        Some(path) => write_json(path, &report)?,
        None => {
            let text = serde_json::to_string_pretty(&report).expect("metrics serialize");
            to_stdout(|out| writeln!(out, "{text}"))?;
        }
    }
    Ok(())
}

fn dump_viewgraph(args: DumpArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let input = read_input(&cfg)?;
    let vg = run_view_graph(&input, &cfg, &Executor::new(cfg.n_workers))?;
    let io_err = |p: &Path, e: std::io::Error| CliError::Pipeline(PipelineError::Output(format!("{}: {e}", p.display())));
    match &args.output {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
            write_cycle_csv(&vg.cycle_records, std::io::BufWriter::new(file)).map_err(|e| io_err(path, e))?;
        }
        None => to_stdout(|out| write_cycle_csv(&vg.cycle_records, out))?,
    }
    log::info!(
        "{} verified pairs, {} edges after filtering, {} in the largest component",
        vg.n_verified_pairs,
        vg.n_edges_after_cycle_filter,
        vg.graph.n_edges()
    );
    Ok(())
}
