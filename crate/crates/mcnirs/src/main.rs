//! Command-line surface: single-cell simulation, grid sweeps, analysis,
//! plot emission, and the physics validation battery.
//!
//! Exit codes: 0 success, 1 validation/physics failure, 2 config error,
//! 3 partial sweep failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use mcnirs::analysis::{
    build_metric_table, metric_table_from_csv, metric_table_to_csv, MetricsDocument,
};
use mcnirs::medium::{load_scene, SceneConfig, Wavelength};
use mcnirs::plot::{emit_plot_data, FigureKind};
use mcnirs::sweep::{
    load_run_set, parse_grid, run_seed_for, run_sweep, scene_for_cell, Pairing, RunDescriptor,
    SweepError, SweepGrid,
};
use mcnirs::transport::{run_simulation, RunMode, RunSpec, TraceParams};
use mcnirs::validate;

const EXIT_OK: i32 = 0;
const EXIT_FAILURE: i32 = 1;
const EXIT_CONFIG: i32 = 2;
const EXIT_PARTIAL: i32 = 3;

/// Worker-count env override honored when --workers is absent.
const WORKERS_ENV: &str = "MCNIRS_WORKERS";

#[derive(Parser)]
#[command(
    name = "mcnirs",
    about = "Monte Carlo photon transport in layered media with a wavelength/depth/detector design-space harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single simulation cell and write its tally record.
    Simulate(SimulateArgs),
    /// Run the full wavelength x depth grid and persist tallies + manifest.
    Sweep(SweepArgs),
    /// Turn a sweep directory into the metric table.
    Analyze(AnalyzeArgs),
    /// Emit per-series plot data and an SVG chart from a metric table.
    Plot(PlotArgs),
    /// Run the built-in physics checks.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliMode {
    /// Depth-tagging run (absorber plane ignored; depths binned post hoc).
    Tag,
    /// Absorber-plane run (photons crossing the plane terminate).
    Sal,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene config file.
    #[arg(long)]
    config: PathBuf,
    /// Run wavelength in nm (must have a row in every layer).
    #[arg(long)]
    wavelength: f64,
    /// Absorber/tag depths in mm (comma separated). Sal mode takes exactly
    /// one; tag mode bins all of them (default: 10-40 every 5).
    #[arg(long, value_delimiter = ',')]
    sal_depth: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    photons: u64,
    /// Base seed; the cell seed is derived exactly as in a sweep, so a
    /// simulate call reproduces the matching sweep cell byte for byte.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CliMode::Tag)]
    mode: CliMode,
    /// Output tally path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Scene config file.
    #[arg(long)]
    config: PathBuf,
    /// Grid config file (defaults: 7 wavelengths 650-950, depths 10-40,
    /// tag mode, 1e6 photons/run).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Override the grid's photons-per-run.
    #[arg(long)]
    photons: Option<u64>,
    /// Override the grid's base seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Complete only the cells missing from an existing manifest.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Sweep output directory (manifest + tallies).
    #[arg(long)]
    runs_dir: PathBuf,
    /// Minimum sensible output power in watts (detector floor).
    #[arg(long, default_value_t = 1e-9)]
    min_output_power: f64,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliFigure {
    Fig2,
    Fig3,
    Fig4,
}

#[derive(Args)]
struct PlotArgs {
    /// Metric table file (.csv or .json) produced by `analyze`.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long, value_enum)]
    kind: CliFigure,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Smoke-test scale (1e4 photons per check).
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
}

fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn read_scene(path: &Path) -> Result<SceneConfig, i32> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_CONFIG
    })?;
    load_scene(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_CONFIG
    })
}

fn cmd_simulate(args: SimulateArgs) -> i32 {
    let scene = match read_scene(&args.config) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let wavelength = match Wavelength::new(args.wavelength) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let depths = if args.sal_depth.is_empty() {
        SweepGrid::default().sal_depths_mm
    } else {
        args.sal_depth.clone()
    };
    let (descriptor_depth, mode) = match args.mode {
        CliMode::Tag => (None, RunMode::Tag { depth_grid: depths }),
        CliMode::Sal => {
            if args.sal_depth.len() != 1 {
                eprintln!("error: sal mode takes exactly one --sal-depth value");
                return EXIT_CONFIG;
            }
            (Some(args.sal_depth[0]), RunMode::Sal)
        }
    };
    let descriptor = RunDescriptor {
        wavelength_nm: args.wavelength,
        sal_depth_mm: descriptor_depth,
        mode,
        photons: args.photons,
        run_seed: run_seed_for(
            args.seed,
            args.wavelength,
            descriptor_depth,
            Pairing::CommonRandomNumbers,
        ),
    };
    let cell_scene = scene_for_cell(&scene, &descriptor);
    if descriptor.sal_depth_mm.is_some() {
        if let Err(e) = cell_scene.validate() {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    }
    let spec = RunSpec {
        wavelength,
        mode: descriptor.mode.clone(),
        photons: descriptor.photons,
        seed: descriptor.run_seed,
        workers: args.workers.unwrap_or_else(default_workers),
        params: TraceParams::default(),
    };
    match run_simulation(&cell_scene, &spec) {
        Ok(tally) => {
            let json = tally.to_json();
            match &args.out {
                Some(path) => {
                    if let Err(e) = fs::write(path, json) {
                        eprintln!("error: {}: {e}", path.display());
                        return EXIT_FAILURE;
                    }
                    println!("wrote {}", path.display());
                }
                None => print!("{json}"),
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                mcnirs::transport::RunError::Scene(_)
                | mcnirs::transport::RunError::MissingSal => EXIT_CONFIG,
                mcnirs::transport::RunError::Pool(_) => EXIT_FAILURE,
            }
        }
    }
}

fn sweep_config_exit(e: &SweepError) -> i32 {
    match e {
        SweepError::GridParse { .. }
        | SweepError::GridInvalid(_)
        | SweepError::Scene(_)
        | SweepError::ResumeMismatch(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn cmd_sweep(args: SweepArgs) -> i32 {
    let scene = match read_scene(&args.config) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let mut grid = match &args.grid {
        Some(path) => {
            let text = match fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    return EXIT_CONFIG;
                }
            };
            match parse_grid(&text) {
                Ok(g) => g,
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    return EXIT_CONFIG;
                }
            }
        }
        None => SweepGrid::default(),
    };
    if let Some(photons) = args.photons {
        grid.photons_per_run = photons;
    }
    if let Some(seed) = args.seed {
        grid.seed = seed;
    }
    let workers = args.workers.unwrap_or_else(default_workers);
    match run_sweep(
        &scene,
        &grid,
        workers,
        &args.out_dir,
        args.resume,
        TraceParams::default(),
    ) {
        Ok(outcome) => {
            println!(
                "sweep complete: {} run(s) executed, {} skipped, {} failed",
                outcome.completed,
                outcome.skipped,
                outcome.failed.len()
            );
            if outcome.failed.is_empty() {
                EXIT_OK
            } else {
                for cell in &outcome.failed {
                    eprintln!("failed cell: {cell}");
                }
                EXIT_PARTIAL
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            sweep_config_exit(&e)
        }
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> i32 {
    let (run_set, header) = match load_run_set(&args.runs_dir) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return sweep_config_exit(&e);
        }
    };
    let rows = match build_metric_table(&run_set, args.min_output_power) {
        Ok(rows) => rows,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    let (name, text) = match args.format {
        OutputFormat::Csv => ("metrics.csv", metric_table_to_csv(&rows)),
        OutputFormat::Json => (
            "metrics.json",
            MetricsDocument::new(header.grid.mode, args.min_output_power, rows.clone()).to_json(),
        ),
    };
    let path = args.runs_dir.join(name);
    if let Err(e) = fs::write(&path, text) {
        eprintln!("error: {}: {e}", path.display());
        return EXIT_FAILURE;
    }
    println!("wrote {} ({} rows)", path.display(), rows.len());
    EXIT_OK
}

fn cmd_plot(args: PlotArgs) -> i32 {
    let text = match fs::read_to_string(&args.metrics) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", args.metrics.display());
            return EXIT_CONFIG;
        }
    };
    let rows = if args.metrics.extension().is_some_and(|e| e == "json") {
        match MetricsDocument::from_json(&text) {
            Ok(doc) => doc.rows,
            Err(e) => {
                eprintln!("error: {}: {e}", args.metrics.display());
                return EXIT_CONFIG;
            }
        }
    } else {
        match metric_table_from_csv(&text) {
            Ok(rows) => rows,
            Err(e) => {
                eprintln!("error: {}: {e}", args.metrics.display());
                return EXIT_CONFIG;
            }
        }
    };
    let kind = match args.kind {
        CliFigure::Fig2 => FigureKind::Fig2,
        CliFigure::Fig3 => FigureKind::Fig3,
        CliFigure::Fig4 => FigureKind::Fig4,
    };
    match emit_plot_data(&rows, kind, &args.out_dir) {
        Ok(paths) => {
            println!("wrote {} file(s) to {}", paths.len(), args.out_dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn cmd_validate(args: ValidateArgs) -> i32 {
    let workers = args.workers.unwrap_or_else(default_workers);
    let checks = validate::run_all(args.quick, workers, args.seed);
    let mut failed = 0;
    for check in &checks {
        println!("{}", check.line());
        if !check.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("all {} checks passed", checks.len());
        EXIT_OK
    } else {
        eprintln!("{failed} of {} checks failed", checks.len());
        EXIT_FAILURE
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Plot(args) => cmd_plot(args),
        Command::Validate(args) => cmd_validate(args),
    };
    std::process::exit(code);
}
