//! Least-squares fit of `x̄_1(t) ≈ Σ_i β_i exp(λ_i t)`.
//!
//! The fit minimizes `J = Σ_j (Σ_i β_i exp(λ_i t_j) − x̄_1(t_j))²` by variable
//! projection: the amplitudes are eliminated by linear least squares (with the
//! optional equality `Σ β_i = a`) and Levenberg–Marquardt runs on the
//! exponents alone. The exponents are parameterized as
//! `λ_n = −exp(θ_n)`, `λ_i = λ_(i+1) − exp(θ_i)`, which keeps them strictly
//! negative, distinct and sorted ascending.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, Matrix, Qr};
use crate::prony;
use crate::scalar::Scalar;
use crate::simulator::MeasurementSeries;

/// Number of uniform points used for initialization and the Hankel profile.
const RESAMPLE_POINTS: usize = 64;
const RECURSIVE_ITER: usize = 200;
const ACCEL_RATIO: f64 = 0.75;
const ROUNDING_ULPS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Enforce `Σ β_i = a` exactly.
    pub constrain_sum: bool,
    /// Perturbed starts in addition to the Prony and log-spaced starts.
    pub starts: usize,
    pub seed: u64,
    /// Convergence threshold on the scaled gradient.
    pub tol_grad: f64,
    pub max_iter: usize,
    /// When set, convergence also requires `J` at or below this value.
    pub residual_target: Option<f64>,
    /// Replaces the automatic starts with a single start at these exponents.
    pub initial_lambdas: Option<Vec<f64>>,
    /// Report the Hankel singular-value profile of the resampled data.
    pub hankel_diagnostic: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            constrain_sum: false,
            starts: 8,
            seed: 0,
            tol_grad: 1e-10,
            max_iter: 500,
            residual_target: None,
            initial_lambdas: None,
            hankel_diagnostic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct FitResult<T: Scalar> {
    pub beta1: Vec<T>,
    pub lambdas: Vec<T>,
    pub j_value: T,
    pub iterations: usize,
    pub converged: bool,
    /// Scaled gradient at the returned point.
    pub gradient_norm: T,
    /// Dose of the fitted series.
    pub a: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hankel_singular_values: Option<Vec<T>>,
}

impl<T: Scalar> FitResult<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_params<T: Scalar>(beta1: &[T], lambdas: &[T], data: &MeasurementSeries<T>) -> Result<()> {
    if beta1.len() != lambdas.len() {
        return Err(Error::InvalidInput(format!(
            "{} amplitudes but {} exponents",
            beta1.len(),
            lambdas.len()
        )));
    }
    if beta1.iter().chain(lambdas).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite fit parameter".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("empty measurement series".into()));
    }
    Ok(())
}

fn model_residuals<T: Scalar>(beta1: &[T], lambdas: &[T], data: &MeasurementSeries<T>) -> Vec<T> {
    data.times()
        .iter()
        .zip(data.values())
        .map(|(&t, &y)| {
            compensated_sum(
                beta1
                    .iter()
                    .zip(lambdas)
                    .map(|(&b, &l)| b * (l * t).exp())
                    .chain([-y]),
            )
        })
        .collect()
}

/// `J(β, λ) = Σ_j (Σ_i β_i exp(λ_i t_j) − x̄_1(t_j))²`.
pub fn objective_j<T: Scalar>(
    beta1: &[T],
    lambdas: &[T],
    data: &MeasurementSeries<T>,
) -> Result<T> {
    check_params(beta1, lambdas, data)?;
    Ok(compensated_sum(
        model_residuals(beta1, lambdas, data)
            .into_iter()
            .map(|r| r * r),
    ))
}

/// Gradient of `J` with respect to `(β, λ)`.
pub fn objective_gradient<T: Scalar>(
    beta1: &[T],
    lambdas: &[T],
    data: &MeasurementSeries<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    check_params(beta1, lambdas, data)?;
    let r = model_residuals(beta1, lambdas, data);
    let two = T::lit(2.0);
    let mut grad_beta = Vec::with_capacity(beta1.len());
    let mut grad_lambda = Vec::with_capacity(beta1.len());
    for (&b, &l) in beta1.iter().zip(lambdas) {
        let (gb, gl): (Vec<T>, Vec<T>) = data
            .times()
            .iter()
            .zip(&r)
            .map(|(&t, &rj)| {
                let e = (l * t).exp();
                (rj * e, rj * b * t * e)
            })
            .unzip();
        grad_beta.push(two * compensated_sum(gb));
        grad_lambda.push(two * compensated_sum(gl));
    }
    Ok((grad_beta, grad_lambda))
}

/// Maps gap parameters to sorted strictly negative exponents.
pub fn lambdas_from_theta<T: Scalar>(theta: &[T]) -> Vec<T> {
    let n = theta.len();
    let mut lambdas = vec![T::zero(); n];
    let mut acc = T::zero();
    for i in (0..n).rev() {
        acc = acc - theta[i].exp();
        lambdas[i] = acc;
    }
    lambdas
}

/// Inverse of [`lambdas_from_theta`] for strictly negative ascending input.
pub fn theta_from_lambdas<T: Scalar>(lambdas: &[T]) -> Result<Vec<T>> {
    let n = lambdas.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if lambdas[n - 1] >= T::zero() || lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(
            "exponents must be strictly negative and strictly ascending".into(),
        ));
    }
    Ok((0..n)
        .map(|i| {
            if i + 1 == n {
                (-lambdas[i]).ln()
            } else {
                (lambdas[i + 1] - lambdas[i]).ln()
            }
        })
        .collect())
}

/// Variable-projection residual of one data set, as a function of the gap
/// parameters `θ`.
#[derive(Debug, Clone)]
pub struct Projection<'a, T: Scalar> {
    data: &'a MeasurementSeries<T>,
    constrain_sum: bool,
}

/// Residual, amplitudes and Jacobian at one `θ`.
#[derive(Debug, Clone)]
pub struct ProjectedPoint<T: Scalar> {
    pub lambdas: Vec<T>,
    pub beta: Vec<T>,
    /// `y − Φ β`.
    pub residual: Vec<T>,
    pub cost: T,
    /// `∂ residual / ∂θ`, m × n.
    pub jacobian: Option<Matrix<T>>,
}

impl<'a, T: Scalar> Projection<'a, T> {
    pub fn new(data: &'a MeasurementSeries<T>, constrain_sum: bool) -> Self {
        Self {
            data,
            constrain_sum,
        }
    }

    /// Projected objective `min_β J(β, λ(θ))` and optionally its Jacobian.
    pub fn evaluate(&self, theta: &[T], with_jacobian: bool) -> Result<ProjectedPoint<T>> {
        let n = theta.len();
        let times = self.data.times();
        let y = self.data.values();
        let m = times.len();
        let lambdas = lambdas_from_theta(theta);
        let phi = Matrix::from_fn(m, n, |j, i| (lambdas[i] * times[j]).exp());
        let a = self.data.dose();

        // y' = y − a φ_n and Ψ = [φ_i − φ_n] under the sum constraint
        let p = if self.constrain_sum { n - 1 } else { n };
        let target: Vec<T> = if self.constrain_sum {
            (0..m).map(|j| y[j] - a * phi[(j, n - 1)]).collect()
        } else {
            y.to_vec()
        };
        let psi = Matrix::from_fn(m, p, |j, i| {
            if self.constrain_sum {
                phi[(j, i)] - phi[(j, n - 1)]
            } else {
                phi[(j, i)]
            }
        });

        let (gamma, qr) = if p > 0 {
            let qr = Qr::new(&psi)?;
            (qr.solve_least_squares(&target)?, Some(qr))
        } else {
            (Vec::new(), None)
        };
        let beta: Vec<T> = if self.constrain_sum {
            let rest = a - compensated_sum(gamma.iter().copied());
            gamma.iter().copied().chain([rest]).collect()
        } else {
            gamma.clone()
        };
        let residual: Vec<T> = (0..m)
            .map(|j| compensated_sum((0..n).map(|i| -beta[i] * phi[(j, i)]).chain([y[j]])))
            .collect();
        let cost = compensated_sum(residual.iter().map(|&r| r * r));

        let jacobian = if with_jacobian {
            let mut jl = Matrix::zeros(m, n);
            for k in 0..n {
                let tphi: Vec<T> = (0..m).map(|j| times[j] * phi[(j, k)]).collect();
                let w: Vec<T> = tphi.iter().map(|&v| -beta[k] * v).collect();
                let tphi_rho = compensated_sum(tphi.iter().zip(&residual).map(|(&u, &r)| u * r));
                let mut col = w;
                if let Some(qr) = &qr {
                    let mut g = vec![T::zero(); p];
                    if self.constrain_sum && k == n - 1 {
                        g.iter_mut().for_each(|gi| *gi = -tphi_rho);
                    } else {
                        g[k] = tphi_rho;
                    }
                    let rtg = qr.solve_rt(&g)?;
                    qr.apply_qt(&mut col);
                    for (c, v) in col.iter_mut().zip(&rtg) {
                        *c = -*v;
                    }
                    qr.apply_q(&mut col);
                }
                for j in 0..m {
                    jl[(j, k)] = col[j];
                }
            }
            // ∂λ_i/∂θ_k = −exp(θ_k) for k ≥ i
            let mut jt = Matrix::zeros(m, n);
            for k in 0..n {
                let dk = -theta[k].exp();
                for j in 0..m {
                    let s = compensated_sum((0..=k).map(|i| jl[(j, i)]));
                    jt[(j, k)] = s * dk;
                }
            }
            Some(jt)
        } else {
            None
        };
        Ok(ProjectedPoint {
            lambdas,
            beta,
            residual,
            cost,
            jacobian,
        })
    }

    /// Scaled gradient `max_k |J_kᵀ ρ| / (‖J_k‖ ‖ρ‖)`, the cosine between the
    /// residual and each Jacobian column. Zero when the residual vanishes.
    pub fn scaled_gradient(&self, point: &ProjectedPoint<T>) -> T {
        let jac = match &point.jacobian {
            Some(j) => j,
            None => return T::infinity(),
        };
        let rnorm = point
            .residual
            .iter()
            .fold(T::zero(), |acc, &v| acc.hypot(v));
        if rnorm == T::zero() {
            return T::zero();
        }
        (0..jac.cols())
            .map(|k| {
                let col = jac.column(k);
                let norm = col.iter().fold(T::zero(), |acc, &v| acc.hypot(v));
                let dot = compensated_sum(col.iter().zip(&point.residual).map(|(&a, &b)| a * b));
                if norm == T::zero() {
                    T::zero()
                } else {
                    dot.abs() / (norm * rnorm)
                }
            })
            .fold(T::zero(), |m, v| m.max(v))
    }

    /// Cost at which every residual is within a few ulps of its sample.
    pub fn rounding_floor(&self) -> T {
        let y2 = compensated_sum(self.data.values().iter().map(|&v| v * v));
        let eps = T::epsilon() * T::lit(ROUNDING_ULPS);
        y2 * eps * eps
    }
}

#[derive(Debug, Clone)]
struct Run<T: Scalar> {
    point: ProjectedPoint<T>,
    iterations: usize,
    gradient: T,
}

fn geodesic_correction<T: Scalar>(
    projection: &Projection<'_, T>,
    theta: &[T],
    point: &ProjectedPoint<T>,
    jac: &Matrix<T>,
    step: &[T],
    qr: &Qr<T>,
) -> Option<Vec<T>> {
    let h = T::lit(0.1);
    let probe: Vec<T> = theta.iter().zip(step).map(|(&t, &s)| t + h * s).collect();
    let shifted = projection.evaluate(&probe, false).ok()?;
    let m = point.residual.len();
    let n = step.len();
    let rhs: Vec<T> = (0..m)
        .map(|r| {
            let jv = (0..n).fold(T::zero(), |acc, c| acc + jac[(r, c)] * step[c]);
            let second = T::lit(2.0) / h * ((shifted.residual[r] - point.residual[r]) / h - jv);
            -second
        })
        .chain(std::iter::repeat_n(T::zero(), n))
        .collect();
    let accel = qr.solve_least_squares(&rhs).ok()?;
    if accel.iter().all(|a| a.is_finite()) {
        Some(accel.into_iter().map(|a| a * T::lit(0.5)).collect())
    } else {
        None
    }
}

fn sum_squares<T: Scalar>(v: &[T]) -> T {
    compensated_sum(v.iter().map(|&x| x * x))
}

fn levenberg_marquardt<T: Scalar>(
    projection: &Projection<'_, T>,
    theta0: Vec<T>,
    options: &FitOptions,
) -> Result<Run<T>> {
    let n = theta0.len();
    let mut theta = theta0;
    let mut point = projection.evaluate(&theta, true)?;
    let mut gradient = projection.scaled_gradient(&point);
    let mut diag = vec![T::zero(); n];
    let mut mu = T::lit(1e-3);
    let mut nu = T::lit(2.0);
    let tol = T::lit(options.tol_grad);
    let mut iterations = 0;
    let mut stalls = 0;

    let floor = projection.rounding_floor();
    while iterations < options.max_iter && gradient > tol && point.cost > floor {
        iterations += 1;
        let jac = point.jacobian.as_ref().expect("jacobian requested");
        let m = jac.rows();
        for (k, d) in diag.iter_mut().enumerate() {
            let norm = jac.column(k).iter().fold(T::zero(), |acc, &v| acc.hypot(v));
            *d = d.max(norm).max(T::lit(1e-30));
        }
        let mut improved = false;
        for _ in 0..40 {
            // min ‖J δ + ρ‖² + μ ‖D δ‖², with ρ = y − Φβ so J = ∂ρ/∂θ
            let sqrt_mu = mu.sqrt();
            let aug = Matrix::from_fn(m + n, n, |r, c| {
                if r < m {
                    jac[(r, c)]
                } else if r - m == c {
                    sqrt_mu * diag[c]
                } else {
                    T::zero()
                }
            });
            let rhs: Vec<T> = point
                .residual
                .iter()
                .map(|&r| -r)
                .chain(std::iter::repeat_n(T::zero(), n))
                .collect();
            let qr = match Qr::new(&aug) {
                Ok(qr) => qr,
                Err(_) => {
                    mu = mu * T::lit(10.0);
                    continue;
                }
            };
            let Ok(mut step) = qr.solve_least_squares(&rhs) else {
                mu = mu * T::lit(10.0);
                continue;
            };
            // geodesic acceleration from a finite-difference second directional derivative
            if let Some(accel) = geodesic_correction(projection, &theta, &point, jac, &step, &qr) {
                let scaled = |v: &[T]| {
                    v.iter()
                        .zip(&diag)
                        .fold(T::zero(), |acc, (&x, &d)| acc.hypot(x * d))
                };
                if T::lit(2.0) * scaled(&accel) <= T::lit(ACCEL_RATIO) * scaled(&step) {
                    step.iter_mut().zip(&accel).for_each(|(s, &a)| *s = *s + a);
                } else {
                    mu = mu * nu;
                    nu = nu * T::lit(2.0);
                    continue;
                }
            }
            let trial: Vec<T> = theta.iter().zip(&step).map(|(&t, &s)| t + s).collect();
            if trial
                .iter()
                .any(|t| !t.is_finite() || t.abs() > T::lit(700.0))
            {
                mu = mu * T::lit(10.0);
                continue;
            }
            // gain ratio of actual to predicted reduction in ‖ρ‖²
            let predicted = {
                let linear: Vec<T> = (0..m)
                    .map(|r| {
                        point.residual[r]
                            + (0..n).fold(T::zero(), |acc, c| acc + jac[(r, c)] * step[c])
                    })
                    .collect();
                sum_squares(&point.residual) - sum_squares(&linear)
            };
            match projection.evaluate(&trial, true) {
                Ok(candidate) if candidate.cost < point.cost => {
                    let actual = sum_squares(&point.residual) - sum_squares(&candidate.residual);
                    let gain = if predicted > T::zero() {
                        actual / predicted
                    } else {
                        T::one()
                    };
                    let factor = T::one() - (T::lit(2.0) * gain - T::one()).powi(3);
                    mu = (mu * factor.max(T::lit(1.0 / 3.0))).max(T::lit(1e-20));
                    nu = T::lit(2.0);
                    let step_small = step
                        .iter()
                        .zip(&theta)
                        .all(|(s, t)| s.abs() <= T::epsilon() * (T::one() + t.abs()));
                    theta = trial;
                    point = candidate;
                    improved = true;
                    if step_small {
                        stalls += 1;
                    } else {
                        stalls = 0;
                    }
                    break;
                }
                _ => {
                    mu = mu * nu;
                    nu = nu * T::lit(2.0);
                }
            }
            if mu > T::lit(1e30) {
                break;
            }
        }
        gradient = projection.scaled_gradient(&point);
        if !improved || stalls >= 3 {
            break;
        }
    }
    if point.cost <= floor {
        gradient = T::zero();
    }
    Ok(Run {
        point,
        iterations,
        gradient,
    })
}

fn starting_points<T: Scalar>(
    data: &MeasurementSeries<T>,
    n: usize,
    options: &FitOptions,
) -> Result<Vec<Vec<T>>> {
    if let Some(init) = &options.initial_lambdas {
        if init.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} initial exponents for order {n}",
                init.len()
            )));
        }
        let mut l: Vec<T> = init.iter().map(|&v| T::lit(v)).collect();
        l.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        return Ok(vec![theta_from_lambdas(&l)?]);
    }
    let times = data.times();
    let span = times[times.len() - 1] - times[0];
    let (step, uniform) = prony::resample_uniform(times, data.values(), RESAMPLE_POINTS);

    let mut starts = Vec::new();
    if let Ok(l) = prony::prony_exponents(&uniform, step, n) {
        starts.push(theta_from_lambdas(&l)?);
    }
    // log-spaced exponents between the slowest and fastest resolvable rate
    let first_gap = times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(T::infinity(), |m, v| m.min(v));
    let slow = T::lit(0.5) / span;
    let fast = (T::lit(1.0) / first_gap).max(slow * T::lit(10.0));
    let grid: Vec<T> = (0..n)
        .map(|i| {
            let w = if n == 1 {
                T::lit(0.5)
            } else {
                T::lit(i as f64 / (n - 1) as f64)
            };
            -(fast.ln() * (T::one() - w) + slow.ln() * w).exp()
        })
        .collect();
    let grid = prony::separate(grid, T::lit(0.05));
    starts.push(theta_from_lambdas(&grid)?);

    let base = starts.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let normal = Normal::new(0.0, 0.7).expect("valid normal");
    for s in 0..options.starts {
        let origin = &base[s % base.len()];
        starts.push(
            origin
                .iter()
                .map(|&t| t + T::lit(normal.sample(&mut rng)))
                .collect(),
        );
    }
    Ok(starts)
}

fn best_run<T: Scalar>(runs: Vec<Run<T>>) -> Option<Run<T>> {
    runs.into_iter().min_by(|x, y| {
        x.point
            .cost
            .partial_cmp(&y.point.cost)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                x.point
                    .lambdas
                    .partial_cmp(&y.point.lambdas)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    })
}

/// Order-recursive starts: fit one exponential, then repeatedly insert a new
/// exponent below, between or above the current ones and refit.
/// Returns the insertion candidates for order `n`.
fn recursive_starts<T: Scalar>(
    projection: &Projection<'_, T>,
    n: usize,
    options: &FitOptions,
) -> Vec<Vec<T>> {
    let inner = FitOptions {
        max_iter: options.max_iter.min(RECURSIVE_ITER),
        ..options.clone()
    };
    let times = projection.data.times();
    let span = times[times.len() - 1] - times[0];
    let mut current = vec![-T::one() / span];
    for order in 2..=n {
        let candidates = insertions(&current);
        if order == n {
            return candidates
                .into_iter()
                .filter_map(|l| theta_from_lambdas(&l).ok())
                .collect();
        }
        let runs: Vec<Run<T>> = candidates
            .into_par_iter()
            .filter_map(|l| {
                let theta = theta_from_lambdas(&l).ok()?;
                levenberg_marquardt(projection, theta, &inner).ok()
            })
            .collect();
        match best_run(runs) {
            Some(run) => current = run.point.lambdas,
            None => return Vec::new(),
        }
    }
    Vec::new()
}

fn insertions<T: Scalar>(sorted: &[T]) -> Vec<Vec<T>> {
    let k = sorted.len();
    let mut out = Vec::with_capacity(k + 1);
    for pos in 0..=k {
        let new = if pos == 0 {
            sorted[0] * T::lit(3.0)
        } else if pos == k {
            sorted[k - 1] / T::lit(3.0)
        } else {
            -(sorted[pos - 1] * sorted[pos]).sqrt()
        };
        let mut l = sorted.to_vec();
        l.insert(pos, new);
        out.push(prony::separate(l, T::lit(0.05)));
    }
    out
}

/// Fits `n` exponentials to the primary-compartment series.
pub fn fit_exponential_sum<T: Scalar>(
    data: &MeasurementSeries<T>,
    n: usize,
    options: &FitOptions,
) -> Result<FitResult<T>> {
    if n == 0 {
        return Err(Error::InvalidInput("model order must be at least 1".into()));
    }
    let params = if options.constrain_sum {
        2 * n - 1
    } else {
        2 * n
    };
    if data.len() < 2 * n {
        return Err(Error::InsufficientData {
            samples: data.len(),
            params,
        });
    }
    let projection = Projection::new(data, options.constrain_sum);
    let mut starts = starting_points(data, n, options)?;
    if options.initial_lambdas.is_none() {
        starts.extend(recursive_starts(&projection, n, options));
    }
    let runs: Vec<Run<T>> = starts
        .into_par_iter()
        .filter_map(|theta| levenberg_marquardt(&projection, theta, options).ok())
        .collect();
    // lowest J wins; ties go to the lexicographically smaller sorted exponents
    let best =
        best_run(runs).ok_or_else(|| Error::LinearAlgebra("every fit start failed".into()))?;

    let within_target = options
        .residual_target
        .is_none_or(|target| best.point.cost <= T::lit(target));
    let converged = best.gradient <= T::lit(options.tol_grad) && within_target;
    let hankel = if options.hankel_diagnostic {
        let (_, uniform) = prony::resample_uniform(data.times(), data.values(), RESAMPLE_POINTS);
        Some(prony::hankel_singular_values(&uniform)?)
    } else {
        None
    };
    Ok(FitResult {
        beta1: best.point.beta,
        lambdas: best.point.lambdas,
        j_value: best.point.cost,
        iterations: best.iterations,
        converged,
        gradient_norm: best.gradient,
        a: data.dose(),
        hankel_singular_values: hankel,
    })
}
