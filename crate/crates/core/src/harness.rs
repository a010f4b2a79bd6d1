//! Command implementations behind the `catenary` binary.
//!
//! Each `cmd_*` function does the work of one subcommand and returns the
//! artifact it produces; the binary decides where it is written. Failures
//! carry an [`Error`] whose [`Error::exit_code`] is the process status.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{fit_exponential_sum, FitOptions, FitResult};
use crate::identifier::{identify_all, IdentifiedSystem};
use crate::model::{random_model, CatenaryModel, PositiveRange};
use crate::simulator::{
    sample_primary, spectral_solve, GridScheme, MeasurementSeries, NoiseModel, SamplingGrid,
    SpectralData,
};

/// Default horizon in units of the slowest time constant `1/|λ_n|`.
pub const HORIZON_TIME_CONSTANTS: f64 = 6.0;
/// Default first geometric sample in units of the fastest time constant `1/|λ_1|`.
pub const FIRST_SAMPLE_TIME_CONSTANTS: f64 = 0.2;
/// Relative tolerance of a noiseless round trip through the fitter.
pub const FIT_TOLERANCE: f64 = 1e-4;
/// Relative tolerance of a noiseless round trip from exact spectral data.
pub const EXACT_TOLERANCE: f64 = 1e-8;

/// `lo..=hi` compartment counts; parses `"4"` or `"3..6"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderRange {
    pub lo: usize,
    pub hi: usize,
}

impl OrderRange {
    pub fn single(n: usize) -> Self {
        Self { lo: n, hi: n }
    }

    /// Order used by replicate `r`: cycles through the range.
    pub fn order_for(&self, r: usize) -> usize {
        self.lo + r % (self.hi - self.lo + 1)
    }
}

impl std::str::FromStr for OrderRange {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| Error::Validation(format!("bad compartment count '{v}': {e}")))
        };
        let range = match s.split_once("..") {
            Some((lo, hi)) => Self {
                lo: parse(lo)?,
                hi: parse(hi.trim_start_matches('='))?,
            },
            None => Self::single(parse(s)?),
        };
        if range.hi < range.lo {
            return Err(Error::Validation(format!("empty compartment range '{s}'")));
        }
        Ok(range)
    }
}

/// Sampling design. Unset fields are derived from the model's spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Sample count `m`; defaults to `4n`.
    pub count: Option<usize>,
    pub geometric: bool,
    /// Defaults to `HORIZON_TIME_CONSTANTS / |λ_n|`.
    pub horizon: Option<f64>,
    /// Geometric ratio; defaults to the one placing the first sample at
    /// `FIRST_SAMPLE_TIME_CONSTANTS / |λ_1|`.
    pub ratio: Option<f64>,
    /// Prepend the exact `t = 0` row `x_1(0) = a`.
    pub include_zero: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            count: None,
            geometric: true,
            horizon: None,
            ratio: None,
            include_zero: false,
        }
    }
}

impl GridSpec {
    pub fn resolve(&self, spectrum: &SpectralData<f64>) -> Result<SamplingGrid> {
        let n = spectrum.n();
        let count = self.count.unwrap_or(4 * n);
        let fastest = spectrum.eigenvalues[0].abs();
        let slowest = spectrum.eigenvalues[n - 1].abs();
        let horizon = self.horizon.unwrap_or(HORIZON_TIME_CONSTANTS / slowest);
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Validation(format!(
                "horizon {horizon} must be positive"
            )));
        }
        if !self.geometric {
            return Ok(SamplingGrid {
                count,
                scheme: GridScheme::Uniform,
                horizon,
            });
        }
        match self.ratio {
            Some(ratio) => Ok(SamplingGrid {
                count,
                scheme: GridScheme::Geometric { ratio },
                horizon,
            }),
            None => {
                // fall back to a gentle ratio when the spectrum is too narrow
                let first =
                    (FIRST_SAMPLE_TIME_CONSTANTS / fastest).min(0.5 * horizon / count as f64);
                SamplingGrid::geometric_with_first(count, first, horizon)
            }
        }
    }
}

/// Full description of a generate → simulate → fit → identify experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: OrderRange,
    pub seed: u64,
    pub replicates: usize,
    pub rate_range: PositiveRange,
    pub dose_range: PositiveRange,
    pub grid: GridSpec,
    pub noise: NoiseModel,
    pub fit: FitOptions,
    /// Skip sampling and fitting; identify from the exact spectral data.
    pub exact_spectral: bool,
    /// Relative error above which a coefficient counts as degraded; defaults
    /// to `EXACT_TOLERANCE` or `FIT_TOLERANCE`.
    pub tolerance: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: OrderRange { lo: 3, hi: 6 },
            seed: 0,
            replicates: 20,
            rate_range: PositiveRange { lo: 0.1, hi: 2.0 },
            dose_range: PositiveRange { lo: 0.5, hi: 2.0 },
            grid: GridSpec::default(),
            noise: NoiseModel::None,
            fit: FitOptions::default(),
            exact_spectral: false,
            tolerance: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n.lo < 3 {
            return Err(Error::Validation(format!(
                "a catenary system needs n >= 3 compartments, got n = {}",
                self.n.lo
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Validation(
                "at least one replicate is required".into(),
            ));
        }
        if let Some(h) = self.grid.horizon {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Validation(format!("horizon {h} must be positive")));
            }
        }
        if !self.exact_spectral {
            if let Some(m) = self.grid.count {
                let samples = m + usize::from(self.grid.include_zero);
                if samples < 2 * self.n.hi {
                    return Err(Error::InsufficientData {
                        samples,
                        params: 2 * self.n.hi,
                    });
                }
            }
        }
        if let NoiseModel::Gaussian { sigma_rel } = self.noise {
            if !(sigma_rel.is_finite() && sigma_rel >= 0.0) {
                return Err(Error::Validation(format!(
                    "noise sigma {sigma_rel} must be non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance.unwrap_or(if self.exact_spectral {
            EXACT_TOLERANCE
        } else {
            FIT_TOLERANCE
        })
    }

    fn noiseless(&self) -> bool {
        match self.noise {
            NoiseModel::None => true,
            NoiseModel::Gaussian { sigma_rel } => sigma_rel == 0.0,
        }
    }
}

pub fn cmd_generate(
    n: usize,
    seed: u64,
    rate_range: PositiveRange,
    dose_range: PositiveRange,
) -> Result<CatenaryModel<f64>> {
    random_model(n, seed, rate_range, dose_range)
}

/// Samples the primary compartment of `model` on the resolved grid.
pub fn cmd_simulate(
    model: &CatenaryModel<f64>,
    grid: &GridSpec,
    noise: NoiseModel,
    seed: u64,
) -> Result<MeasurementSeries<f64>> {
    let spectrum = spectral_solve(&model.ode_matrix(), model.dose())?;
    simulate_spectrum(&spectrum, grid, noise, seed)
}

fn simulate_spectrum(
    spectrum: &SpectralData<f64>,
    grid: &GridSpec,
    noise: NoiseModel,
    seed: u64,
) -> Result<MeasurementSeries<f64>> {
    let times: Vec<f64> = grid.resolve(spectrum)?.times()?;
    let series = sample_primary(spectrum, &times, noise, seed)?;
    if !grid.include_zero {
        return Ok(series);
    }
    let mut t = vec![0.0];
    t.extend_from_slice(series.times());
    let mut x = vec![spectrum.a];
    x.extend_from_slice(series.values());
    MeasurementSeries::new(t, x, spectrum.a)
}

/// Fits `order` exponentials. An unconverged fit is still returned so it
/// can be written out; [`non_convergence`] turns it into the status-3 error.
pub fn cmd_fit(
    data: &MeasurementSeries<f64>,
    order: usize,
    options: &FitOptions,
) -> Result<FitResult<f64>> {
    fit_exponential_sum(data, order, options)
}

pub fn non_convergence(fit: &FitResult<f64>) -> Option<Error> {
    (!fit.converged).then_some(Error::NotConverged {
        iterations: fit.iterations,
        j_value: fit.j_value,
        gradient: fit.gradient_norm,
    })
}

/// What `identify` was handed: a fit, exact spectral data, or a model to be
/// solved exactly first.
#[derive(Debug, Clone, PartialEq)]
pub enum IdentifyInput {
    Fit(FitResult<f64>),
    Spectral(SpectralData<f64>),
    Model(CatenaryModel<f64>),
}

impl IdentifyInput {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let has = |k: &str| value.get(k).is_some();
        if has("beta1") && has("lambdas") {
            Ok(Self::Fit(serde_json::from_value(value)?))
        } else if has("eigenvalues") && has("B") {
            Ok(Self::Spectral(serde_json::from_value(value)?))
        } else if has("forward") && has("backward") {
            Ok(Self::Model(serde_json::from_value(value)?))
        } else {
            Err(Error::Format(
                "expected a fit result, spectral data or model JSON document".into(),
            ))
        }
    }

    /// Primary amplitudes, exponents and dose carried by the input.
    fn primary(&self) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        match self {
            Self::Fit(f) => Ok((f.beta1.clone(), f.lambdas.clone(), f.a)),
            Self::Spectral(s) => Ok((s.primary_amplitudes(), s.eigenvalues.clone(), s.a)),
            Self::Model(m) => {
                let s = spectral_solve(&m.ode_matrix(), m.dose())?;
                Ok((s.primary_amplitudes(), s.eigenvalues, s.a))
            }
        }
    }
}

/// Identifies every rate from the input. A `dose` different from the one in
/// the input rescales the amplitudes, which leaves the rates unchanged.
pub fn cmd_identify(input: &IdentifyInput, dose: Option<f64>) -> Result<IdentifiedSystem<f64>> {
    let (mut beta1, lambdas, stated) = input.primary()?;
    let a = match dose {
        Some(a) if !(a.is_finite() && a > 0.0) => {
            return Err(Error::Validation(format!("dose a = {a} must be positive")))
        }
        Some(a) => {
            let scale = a / stated;
            beta1.iter_mut().for_each(|b| *b *= scale);
            a
        }
        None => stated,
    };
    identify_all(&beta1, &lambdas, a, lambdas.len())
}

/// One coefficient's recovery in a round-trip run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientError {
    pub name: String,
    pub truth: f64,
    pub recovered: f64,
    pub relative_error: f64,
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub n: usize,
    pub samples: usize,
    pub max_relative_error: Option<f64>,
    pub coefficients: Vec<CoefficientError>,
    pub j_value: Option<f64>,
    pub fit_converged: Option<bool>,
    pub fit_iterations: Option<usize>,
    pub max_relation_residual: Option<f64>,
    /// Largest `Σ|terms| / |numerator|` among the identification divisions.
    pub worst_cancellation: Option<f64>,
    /// Smallest denominator magnitude among the identification divisions.
    pub smallest_denominator: Option<f64>,
    /// Coefficients whose relative error exceeds the tolerance.
    pub degraded: Vec<String>,
    pub error: Option<String>,
    pub exit_code: Option<u8>,
}

/// Aggregate of all replicates, sorted by seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub config: ExperimentConfig,
    pub tolerance: f64,
    pub noiseless: bool,
    pub runs: Vec<RunReport>,
    /// Worst relative error per coefficient name over all runs that have it.
    pub max_relative_error_by_coefficient: BTreeMap<String, f64>,
    pub max_relative_error: f64,
    pub max_j_value: Option<f64>,
    pub max_relation_residual: f64,
    pub worst_cancellation: f64,
    /// Runs that failed or exceeded the tolerance.
    pub flagged_runs: usize,
}

impl RoundTripReport {
    /// Err when the experiment is noiseless and any run failed or exceeded the
    /// tolerance. With noise, degraded coefficients are only flagged.
    pub fn verdict(&self) -> Result<()> {
        if !self.noiseless || self.flagged_runs == 0 {
            return Ok(());
        }
        // report the most specific cause: breakdown, then non-convergence
        for code in [4, 3, 2, 1] {
            if let Some(run) = self.runs.iter().find(|r| r.exit_code == Some(code)) {
                return Err(Error::Replicate {
                    seed: run.seed,
                    code,
                    message: run.error.clone().unwrap_or_default(),
                });
            }
        }
        Err(Error::ToleranceExceeded {
            failed: self.flagged_runs,
            total: self.runs.len(),
            tolerance: self.tolerance,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table: one row per run, then per-coefficient maxima.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6} {:>3} {:>4} {:>11} {:>11} {:>5} {:>11} {:>11}  status",
            "seed", "n", "m", "max_rel_err", "J", "conv", "relation", "cancel"
        );
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
        for r in &self.runs {
            let status = match (&r.error, r.degraded.is_empty()) {
                (Some(e), _) => format!("FAILED: {e}"),
                (None, true) => "ok".to_string(),
                (None, false) => format!("degraded: {}", r.degraded.join(" ")),
            };
            let _ = writeln!(
                out,
                "{:>6} {:>3} {:>4} {:>11} {:>11} {:>5} {:>11} {:>11}  {}",
                r.seed,
                r.n,
                r.samples,
                fmt(r.max_relative_error),
                fmt(r.j_value),
                r.fit_converged.map_or("-".to_string(), |c| c.to_string()),
                fmt(r.max_relation_residual),
                fmt(r.worst_cancellation),
                status
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>8} {:>11}", "coef", "max_rel_err");
        for (name, err) in &self.max_relative_error_by_coefficient {
            let flag = if *err > self.tolerance { "  *" } else { "" };
            let _ = writeln!(out, "{name:>8} {err:>11.3e}{flag}");
        }
        let _ = writeln!(
            out,
            "\n{} runs, {} flagged, worst relative error {:.3e} (tolerance {:.1e})",
            self.runs.len(),
            self.flagged_runs,
            self.max_relative_error,
            self.tolerance
        );
        out
    }
}

fn relative_error(truth: f64, recovered: f64) -> f64 {
    ((recovered - truth) / truth).abs()
}

/// True and recovered coefficients, named `k_ij` with donor `i`, receiver `j`.
pub fn compare_rates(
    truth: &CatenaryModel<f64>,
    id: &IdentifiedSystem<f64>,
) -> Vec<CoefficientError> {
    let n = truth.n();
    let mut out = Vec::with_capacity(2 * n - 1);
    let mut push = |name: String, t: f64, r: f64| {
        out.push(CoefficientError {
            name,
            truth: t,
            recovered: r,
            relative_error: relative_error(t, r),
        })
    };
    push("k_1e".into(), truth.k1e(), id.k1e);
    for i in 0..n - 1 {
        push(
            rate_name(i + 1, i + 2),
            truth.forward()[i],
            id.matrix.forward(i),
        );
        push(
            rate_name(i + 2, i + 1),
            truth.backward()[i],
            id.matrix.backward(i),
        );
    }
    out
}

fn rate_name(donor: usize, receiver: usize) -> String {
    if donor < 10 && receiver < 10 {
        format!("k_{donor}{receiver}")
    } else {
        format!("k_{donor},{receiver}")
    }
}

fn run_one(config: &ExperimentConfig, r: usize) -> RunReport {
    let seed = config.seed.wrapping_add(r as u64);
    let n = config.n.order_for(r);
    let mut report = RunReport {
        seed,
        n,
        samples: 0,
        max_relative_error: None,
        coefficients: Vec::new(),
        j_value: None,
        fit_converged: None,
        fit_iterations: None,
        max_relation_residual: None,
        worst_cancellation: None,
        smallest_denominator: None,
        degraded: Vec::new(),
        error: None,
        exit_code: None,
    };
    let fail = |mut report: RunReport, e: Error| {
        report.exit_code = Some(e.exit_code());
        report.error = Some(e.to_string());
        report
    };

    let model = match random_model::<f64>(n, seed, config.rate_range, config.dose_range) {
        Ok(m) => m,
        Err(e) => return fail(report, e),
    };
    let spectrum = match spectral_solve(&model.ode_matrix(), model.dose()) {
        Ok(s) => s,
        Err(e) => return fail(report, e),
    };
    let (beta1, lambdas) = if config.exact_spectral {
        (spectrum.primary_amplitudes(), spectrum.eigenvalues.clone())
    } else {
        // noise stream distinct from the model stream of the same seed
        let noise_seed = seed ^ 0x6e6f_6973_6500_0000;
        let data = match simulate_spectrum(&spectrum, &config.grid, config.noise, noise_seed) {
            Ok(d) => d,
            Err(e) => return fail(report, e),
        };
        report.samples = data.len();
        let fit = match fit_exponential_sum(&data, n, &config.fit) {
            Ok(f) => f,
            Err(e) => return fail(report, e),
        };
        report.j_value = Some(fit.j_value);
        report.fit_converged = Some(fit.converged);
        report.fit_iterations = Some(fit.iterations);
        (fit.beta1, fit.lambdas)
    };
    let id = match identify_all(&beta1, &lambdas, model.dose(), n) {
        Ok(id) => id,
        Err(e) => return fail(report, e),
    };
    let tolerance = config.tolerance();
    report.coefficients = compare_rates(&model, &id);
    report.max_relative_error = Some(
        report
            .coefficients
            .iter()
            .fold(0.0, |m, c| m.max(c.relative_error)),
    );
    report.degraded = report
        .coefficients
        .iter()
        .filter(|c| c.relative_error > tolerance || c.relative_error.is_nan())
        .map(|c| c.name.clone())
        .collect();
    report.max_relation_residual = Some(id.max_relation_residual);
    report.worst_cancellation = id
        .condition_report
        .iter()
        .map(|d| d.cancellation)
        .reduce(f64::max);
    report.smallest_denominator = id
        .condition_report
        .iter()
        .map(|d| d.denominator.abs())
        .reduce(f64::min);
    report
}

/// Runs `config.replicates` independent experiments in parallel; replicate
/// `r` uses seed `config.seed + r`.
pub fn cmd_roundtrip(config: &ExperimentConfig) -> Result<RoundTripReport> {
    config.validate()?;
    let mut runs: Vec<RunReport> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_one(config, r))
        .collect();
    runs.sort_by_key(|r| r.seed);

    let mut by_coefficient: BTreeMap<String, f64> = BTreeMap::new();
    for c in runs.iter().flat_map(|r| &r.coefficients) {
        let entry = by_coefficient.entry(c.name.clone()).or_insert(0.0);
        *entry = entry.max(c.relative_error);
    }
    let flagged_runs = runs
        .iter()
        .filter(|r| r.error.is_some() || !r.degraded.is_empty())
        .count();
    let max_of = |f: &dyn Fn(&RunReport) -> Option<f64>| runs.iter().filter_map(f).reduce(f64::max);
    Ok(RoundTripReport {
        config: config.clone(),
        tolerance: config.tolerance(),
        noiseless: config.noiseless(),
        max_relative_error_by_coefficient: by_coefficient,
        max_relative_error: max_of(&|r| r.max_relative_error).unwrap_or(f64::NAN),
        max_j_value: max_of(&|r| r.j_value),
        max_relation_residual: max_of(&|r| r.max_relation_residual).unwrap_or(f64::NAN),
        worst_cancellation: max_of(&|r| r.worst_cancellation).unwrap_or(f64::NAN),
        flagged_runs,
        runs,
    })
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut body = text.to_string();
            if !body.ends_with('\n') {
                body.push('\n');
            }
            std::fs::write(p, body)?
        }
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

pub fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_range_parses_both_forms() {
        assert_eq!("4".parse::<OrderRange>().unwrap(), OrderRange::single(4));
        let r: OrderRange = "3..6".parse().unwrap();
        assert_eq!((r.lo, r.hi), (3, 6));
        assert_eq!(
            (0..5).map(|i| r.order_for(i)).collect::<Vec<_>>(),
            vec![3, 4, 5, 6, 3]
        );
        assert!("6..3".parse::<OrderRange>().is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let r = PositiveRange::new(0.1, 2.0).unwrap();
        let d = PositiveRange::new(0.5, 2.0).unwrap();
        let a = cmd_generate(4, 7, r, d).unwrap().to_json().unwrap();
        let b = cmd_generate(4, 7, r, d).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let e = cmd_generate(2, 7, r, d).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("n >= 3"));
    }

    #[test]
    fn simulated_zero_row_is_the_dose() {
        let model = CatenaryModel::new(1.5, vec![1.0, 0.4], vec![0.5, 0.2], 0.3).unwrap();
        let grid = GridSpec {
            include_zero: true,
            ..GridSpec::default()
        };
        let s = cmd_simulate(&model, &grid, NoiseModel::None, 0).unwrap();
        assert_eq!(s.len(), 13);
        assert_eq!((s.times()[0], s.values()[0]), (0.0, 1.5));
    }

    #[test]
    fn identify_accepts_all_three_inputs() {
        let model = CatenaryModel::new(1.0, vec![1.0, 0.4], vec![0.5, 0.2], 0.3).unwrap();
        let s = spectral_solve(&model.ode_matrix(), 1.0).unwrap();
        for text in [model.to_json().unwrap(), s.to_json().unwrap()] {
            let input = IdentifyInput::from_json(&text).unwrap();
            let id = cmd_identify(&input, None).unwrap();
            let worst = compare_rates(&model, &id)
                .iter()
                .fold(0.0f64, |m, c| m.max(c.relative_error));
            assert!(worst < 1e-10, "{worst:e}");
        }
        assert!(IdentifyInput::from_json("{\"x\": 1}").is_err());
    }

    #[test]
    fn dose_override_leaves_rates_unchanged() {
        let model = CatenaryModel::new(1.0, vec![1.0, 0.4], vec![0.5, 0.2], 0.3).unwrap();
        let input = IdentifyInput::Model(model);
        let base = cmd_identify(&input, None).unwrap();
        let scaled = cmd_identify(&input, Some(3.7)).unwrap();
        assert_eq!(scaled.a, 3.7);
        for (x, y) in base
            .matrix
            .entries()
            .to_rows()
            .iter()
            .flatten()
            .zip(scaled.matrix.entries().to_rows().iter().flatten())
        {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn exact_roundtrip_report_is_sorted_and_clean() {
        let config = ExperimentConfig {
            replicates: 8,
            exact_spectral: true,
            ..ExperimentConfig::default()
        };
        let report = cmd_roundtrip(&config).unwrap();
        assert!(report.runs.windows(2).all(|w| w[0].seed < w[1].seed));
        assert_eq!(report.flagged_runs, 0);
        assert!(report.max_relative_error < EXACT_TOLERANCE);
        assert!(report.verdict().is_ok());
        assert!(report.table().contains("k_1e"));
    }
}
