use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use catenary::fitter::FitOptions;
use catenary::harness::{
    cmd_fit, cmd_generate, cmd_identify, cmd_roundtrip, cmd_simulate, non_convergence, read_input,
    write_output, ExperimentConfig, GridSpec, IdentifyInput, OrderRange,
};
use catenary::model::{CatenaryModel, PositiveRange};
use catenary::simulator::{MeasurementSeries, NoiseModel};
use catenary::{Error, Result};

/// Identify reversible catenary compartmental systems from primary-compartment data.
#[derive(Parser, Debug)]
#[command(name = "catenary", version)]
struct Cli {
    /// Seed for model generation, noise and fit restarts.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress and summary messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a random reversible model and write it as JSON.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "0.1,2.0")]
        rate_range: PositiveRange,
        #[arg(long, default_value = "0.5,2.0")]
        dose_range: PositiveRange,
    },
    /// Sample the primary compartment of a model and write `t,x1` CSV.
    Simulate {
        /// Model JSON written by `generate`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Relative standard deviation of multiplicative Gaussian noise.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Fit a sum of exponentials to a `t,x1` CSV and write the fit as JSON.
    Fit {
        /// Measurement CSV.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        order: usize,
        /// Administered dose; defaults to the `t = 0` sample when present.
        #[arg(long)]
        dose: Option<f64>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Recover every rate constant from a fit, spectral data or model JSON.
    Identify {
        #[arg(long)]
        input: PathBuf,
        /// Administered dose; amplitudes are rescaled when it differs from the input's.
        #[arg(long)]
        dose: Option<f64>,
    },
    /// Generate, simulate, fit and identify over many seeds and report errors.
    Roundtrip {
        /// Compartment count or range such as `3..6`.
        #[arg(long, default_value = "3..6")]
        n: OrderRange,
        /// Number of replicates; replicate r uses seed + r.
        #[arg(long, default_value_t = 20)]
        replicates: usize,
        #[arg(long, default_value = "0.1,2.0")]
        rate_range: PositiveRange,
        #[arg(long, default_value = "0.5,2.0")]
        dose_range: PositiveRange,
        /// Identify from exact spectral data, skipping sampling and fitting.
        #[arg(long)]
        exact_spectral: bool,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Relative error counted as degraded.
        #[arg(long)]
        tolerance: Option<f64>,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Number of samples m; defaults to 4n.
    #[arg(long)]
    count: Option<usize>,
    /// Use a uniform grid instead of the geometric default.
    #[arg(long)]
    uniform: bool,
    /// Last sample time; defaults to six slowest time constants.
    #[arg(long)]
    horizon: Option<f64>,
    /// Geometric ratio; defaults to one that resolves the fastest decay.
    #[arg(long)]
    ratio: Option<f64>,
    /// Prepend the exact t = 0 row x1(0) = a.
    #[arg(long)]
    include_zero: bool,
}

impl GridArgs {
    fn spec(&self) -> GridSpec {
        GridSpec {
            count: self.count,
            geometric: !self.uniform,
            horizon: self.horizon,
            ratio: self.ratio,
            include_zero: self.include_zero,
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Enforce that the amplitudes sum to the dose.
    #[arg(long)]
    constrain_sum: bool,
    /// Perturbed multi-starts.
    #[arg(long, default_value_t = 8)]
    starts: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol_grad: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
}

impl FitArgs {
    fn options(&self, seed: u64) -> FitOptions {
        FitOptions {
            constrain_sum: self.constrain_sum,
            starts: self.starts,
            seed,
            tol_grad: self.tol_grad,
            max_iter: self.max_iter,
            ..FitOptions::default()
        }
    }
}

fn noise_model(sigma: f64) -> Result<NoiseModel> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Validation(format!(
            "noise sigma {sigma} must be non-negative"
        )));
    }
    Ok(if sigma == 0.0 {
        NoiseModel::None
    } else {
        NoiseModel::Gaussian { sigma_rel: sigma }
    })
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_deref();
    let say = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Generate {
            n,
            rate_range,
            dose_range,
        } => {
            let model = cmd_generate(*n, cli.seed, *rate_range, *dose_range)?;
            write_output(out, &model.to_json()?)
        }
        Command::Simulate { model, grid, noise } => {
            let model = CatenaryModel::<f64>::from_json(&read_input(model)?)?;
            let series = cmd_simulate(&model, &grid.spec(), noise_model(*noise)?, cli.seed)?;
            let mut buf = Vec::new();
            series.write_csv(&mut buf)?;
            write_output(out, &String::from_utf8_lossy(&buf))
        }
        Command::Fit {
            data,
            order,
            dose,
            fit,
        } => {
            let text = read_input(data)?;
            // the dose is not in the CSV; read once to find a t = 0 row
            let probe = MeasurementSeries::<f64>::read_csv(text.as_bytes(), 1.0)?;
            let dose = match dose {
                Some(a) => *a,
                None if probe.times()[0] == 0.0 => probe.values()[0],
                None => {
                    return Err(Error::Validation(
                        "--dose is required when the data has no t = 0 row".into(),
                    ))
                }
            };
            let series = MeasurementSeries::read_csv(text.as_bytes(), dose)?;
            let result = cmd_fit(&series, *order, &fit.options(cli.seed))?;
            write_output(out, &result.to_json()?)?;
            match non_convergence(&result) {
                Some(error) => Err(error),
                None => {
                    say(format!(
                        "converged in {} iterations, J = {:e}",
                        result.iterations, result.j_value
                    ));
                    Ok(())
                }
            }
        }
        Command::Identify { input, dose } => {
            let input = IdentifyInput::from_json(&read_input(input)?)?;
            let id = cmd_identify(&input, *dose)?;
            say(format!(
                "max spectral-relation residual {:e}",
                id.max_relation_residual
            ));
            write_output(out, &id.to_json()?)
        }
        Command::Roundtrip {
            n,
            replicates,
            rate_range,
            dose_range,
            exact_spectral,
            noise,
            tolerance,
            grid,
            fit,
        } => {
            let config = ExperimentConfig {
                n: *n,
                seed: cli.seed,
                replicates: *replicates,
                rate_range: *rate_range,
                dose_range: *dose_range,
                grid: grid.spec(),
                noise: noise_model(*noise)?,
                fit: fit.options(cli.seed),
                exact_spectral: *exact_spectral,
                tolerance: *tolerance,
            };
            let report = cmd_roundtrip(&config)?;
            say(report.table());
            write_output(out, &report.to_json()?)?;
            report.verdict()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
