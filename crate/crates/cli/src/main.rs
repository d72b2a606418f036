use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prism_core::extraction::{reconstruct_3d, ReconstructionOptions, Smoother, Variant};
use prism_core::floquet::{fibonacci_sphere, stability_map, DEFAULT_MAP_POINTS};
use prism_core::metrics::Window;
use prism_forge::runner::{
    compute_metrics, extract, read_record, write_extraction, write_json, write_reconstruction,
    write_spectrum, write_stability_map,
};
use prism_forge::spec::{CalibrationTone, MetricsOptions};
use prism_forge::{
    run_experiment, thread_pool, validate, CliError, ExperimentSpec, Outcome, Overrides, Result,
};

#[derive(Parser)]
#[command(
    name = "prism-forge",
    version,
    about = "Prethermal spin-sensor simulator and analysis pipeline"
)]
struct Cli {
    /// Worker threads; falls back to PRISM_FORGE_THREADS, then one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario's noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the target waveform with a `time_s,value` table.
    #[arg(long)]
    target_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Plain,
    Normalized,
    Extended,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Plain => Variant::Plain,
            VariantArg::Normalized => Variant::Normalized,
            VariantArg::Extended => Variant::Extended,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowArg {
    Rectangular,
    Hann,
}

#[derive(Subcommand)]
enum Command {
    /// Run the spec's base point.
    Simulate(RunArgs),
    /// Run every sweep point; a spec without a sweep runs once.
    Sweep(RunArgs),
    /// Differential extraction, optionally with 3D reconstruction, from a record CSV.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "plain")]
        variant: VariantArg,
        #[arg(long, default_value_t = 201)]
        baseline_window: usize,
        #[arg(long, default_value_t = 100)]
        envelope_window: usize,
        /// Record index where calibration ends; enables reconstruction.
        #[arg(long)]
        calibration_end: Option<usize>,
        /// Frame-0 M_z is negative after calibration.
        #[arg(long)]
        frame0_negative: bool,
        #[arg(long)]
        local_quadratic: bool,
    },
    /// Spectrum, response and sensitivity of a record CSV.
    Metrics {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "plain")]
        variant: VariantArg,
        #[arg(long, default_value_t = 201)]
        baseline_window: usize,
        #[arg(long)]
        test_frequency: Option<f64>,
        #[arg(long)]
        mask: Vec<f64>,
        #[arg(long, requires = "calibration_amplitude")]
        calibration_frequency: Option<f64>,
        #[arg(long, requires = "calibration_frequency")]
        calibration_amplitude: Option<f64>,
        #[arg(long, value_enum, default_value = "rectangular")]
        window: WindowArg,
    },
    /// Per-frame one-cycle displacement over a sphere grid.
    StabilityMap {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAP_POINTS)]
        points: usize,
    },
    /// Check a spec without running it; exits 1 when violations exist.
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(&args.spec)?;
    Overrides {
        seed: args.seed,
        target_csv: args.target_csv.clone(),
    }
    .apply(&mut spec)?;
    Ok(spec)
}

fn out_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn report(outcome: &Outcome, out: &Path) {
    match outcome {
        Outcome::Single(s) => println!("{} samples written to {}", s.samples, out.display()),
        Outcome::Sweep(i) => println!(
            "{} sweep points written to {}",
            i.points.len(),
            out.display()
        ),
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    let pool = thread_pool(cli.threads)?;
    match cli.command {
        Command::Simulate(args) => {
            let mut spec = load(&args)?;
            if spec.sweep.take().is_some() {
                log::info!("simulate ignores the sweep block; use `sweep` to run it");
            }
            let outcome = run_experiment(&spec, &args.out, &pool)?;
            report(&outcome, &args.out);
        }
        Command::Sweep(args) => {
            let spec = load(&args)?;
            let outcome = run_experiment(&spec, &args.out, &pool)?;
            report(&outcome, &args.out);
        }
        Command::Extract {
            input,
            out,
            variant,
            baseline_window,
            envelope_window,
            calibration_end,
            frame0_negative,
            local_quadratic,
        } => {
            let rec = read_record(&input)?;
            out_dir(&out)?;
            let d = extract(&rec, variant.into(), baseline_window)?;
            write_extraction(&out.join("extraction.csv"), &d)?;
            if let Some(end) = calibration_end {
                let opts = ReconstructionOptions {
                    calibration_end: end,
                    envelope_window,
                    smoother: if local_quadratic {
                        Smoother::LocalQuadratic
                    } else {
                        Smoother::MovingAverage
                    },
                    frame0_positive: !frame0_negative,
                    ..ReconstructionOptions::default()
                };
                write_reconstruction(
                    &out.join("reconstruction.csv"),
                    &reconstruct_3d(&rec, &opts)?,
                )?;
            }
        }
        Command::Metrics {
            input,
            out,
            variant,
            baseline_window,
            test_frequency,
            mask,
            calibration_frequency,
            calibration_amplitude,
            window,
        } => {
            let rec = read_record(&input)?;
            out_dir(&out)?;
            let d = extract(&rec, variant.into(), baseline_window)?;
            let opts = MetricsOptions {
                test_frequency,
                mask_frequencies: mask,
                calibration: calibration_frequency.zip(calibration_amplitude).map(
                    |(frequency, amplitude)| CalibrationTone {
                        frequency,
                        amplitude,
                    },
                ),
                window: match window {
                    WindowArg::Rectangular => Window::Rectangular,
                    WindowArg::Hann => Window::Hann,
                },
                ..MetricsOptions::default()
            };
            let protocol = rec.meta.as_ref().map(|m| m.protocol.clone());
            let (metrics, spectrum) = compute_metrics(&rec, &d, &opts, protocol.as_ref(), None)?;
            write_json(&out.join("metrics.json"), &metrics)?;
            write_spectrum(&out.join("spectrum.csv"), &spectrum)?;
        }
        Command::StabilityMap { spec, out, points } => {
            let spec = ExperimentSpec::load(&spec)?;
            spec.protocol.validate()?;
            out_dir(&out)?;
            let map = pool.install(|| stability_map(&spec.protocol, &fibonacci_sphere(points)))?;
            write_stability_map(&out.join("stability_map.csv"), &map)?;
        }
        Command::Validate { spec } => {
            let spec = ExperimentSpec::load(&spec)?;
            let r = validate(&spec);
            println!(
                "{}",
                serde_json::to_string_pretty(&r).expect("report serializes")
            );
            return Ok(if r.is_valid() { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
