//! Closed-form solution of the catenary ODE after a bolus into compartment 1,
//! and sampled measurements of the primary compartment.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, symmetric_tridiagonal_eigen, Matrix};
use crate::model::OdeMatrix;
use crate::scalar::Scalar;

/// Relative pairwise eigenvalue gap below which a spectrum counts as degenerate.
pub const SEPARATION_TOLERANCE: f64 = 1e-10;

/// Eigenvalues and elementary masses of a solved system.
///
/// `b[(i, j)]` is the amplitude of `exp(λ_i t)` in compartment `j`, so
/// `x_j(t) = Σ_i b[(i, j)] exp(λ_i t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct SpectralData<T: Scalar> {
    pub a: T,
    pub eigenvalues: Vec<T>,
    #[serde(rename = "B")]
    pub b: Matrix<T>,
}

impl<T: Scalar> SpectralData<T> {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Column `j` (0-based compartment) of the elementary-masses matrix.
    pub fn column(&self, j: usize) -> Vec<T> {
        self.b.column(j)
    }

    /// Amplitudes seen in the primary compartment.
    pub fn primary_amplitudes(&self) -> Vec<T> {
        self.b.column(0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Errors unless the spectrum is strictly negative with relative gaps above
/// `SEPARATION_TOLERANCE`. Expects `values` ascending.
pub fn check_spectrum<T: Scalar>(values: &[T]) -> Result<()> {
    let scale = values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let tol = T::lit(SEPARATION_TOLERANCE) * scale;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSpectrum("non-finite eigenvalue".into()));
    }
    if let Some(v) = values.iter().find(|&&v| v >= -tol) {
        return Err(Error::DegenerateSpectrum(format!(
            "eigenvalue {v:e} is not strictly negative"
        )));
    }
    for w in values.windows(2) {
        if w[1] - w[0] <= tol {
            return Err(Error::DegenerateSpectrum(format!(
                "eigenvalues {:e} and {:e} are not separated",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Solves `x' = M x`, `x(0) = (a, 0, …, 0)` spectrally.
///
/// The eigenvalues come from the symmetric tridiagonal matrix with the same
/// diagonal and off-diagonal entries `sqrt(M[i+1][i]·M[i][i+1])`, which has
/// the same characteristic polynomial. When every product is positive the
/// eigenvectors follow from the diagonal similarity `M = D T D⁻¹`; otherwise
/// (a chain with a zeroed rate) the amplitudes come from spectral projectors.
pub fn spectral_solve<T: Scalar>(m: &OdeMatrix<T>, a: T) -> Result<SpectralData<T>> {
    let n = m.n();
    if !(a.is_finite() && a > T::zero()) {
        return Err(Error::Validation(format!("dose a = {a} must be positive")));
    }
    let products = m.off_diagonal_products();
    let diagonal: Vec<T> = (0..n).map(|i| m.diagonal(i)).collect();
    let off: Vec<T> = products.iter().map(|p| p.max(T::zero()).sqrt()).collect();
    let (values, q) = symmetric_tridiagonal_eigen(&diagonal, &off)
        .map_err(|e| Error::DegenerateSpectrum(e.to_string()))?;
    check_spectrum(&values)?;

    let b = if products.iter().all(|&p| p > T::zero()) {
        // d_1 = 1, d_{j+1} = d_j sqrt(M[j+1][j] / M[j][j+1])
        let mut d = vec![T::one(); n];
        for j in 0..n - 1 {
            d[j + 1] = d[j] * (m.forward(j) / m.backward(j)).sqrt();
        }
        Matrix::from_fn(n, n, |i, j| a * d[j] * q[(j, i)] * q[(0, i)])
    } else {
        projector_amplitudes(m, &values, a)
    };
    Ok(SpectralData {
        a,
        eigenvalues: values,
        b,
    })
}

/// Row `i` is `a · Π_{k≠i} (M − λ_k I) / (λ_i − λ_k) e_1`.
fn projector_amplitudes<T: Scalar>(m: &OdeMatrix<T>, values: &[T], a: T) -> Matrix<T> {
    let n = m.n();
    let mut b = Matrix::zeros(n, n);
    for i in 0..n {
        let mut v = vec![T::zero(); n];
        v[0] = a;
        for (k, &lk) in values.iter().enumerate() {
            if k == i {
                continue;
            }
            let mut w = m.entries().mul_vec(&v);
            let denom = values[i] - lk;
            for (wj, vj) in w.iter_mut().zip(&v) {
                *wj = (*wj - lk * *vj) / denom;
            }
            v = w;
        }
        for (j, vj) in v.into_iter().enumerate() {
            b[(i, j)] = vj;
        }
    }
    b
}

fn check_times<T: Scalar>(times: &[T]) -> Result<()> {
    if let Some(t) = times.iter().find(|t| !t.is_finite() || **t < T::zero()) {
        return Err(Error::InvalidInput(format!(
            "sampling time {t} must be finite and nonnegative"
        )));
    }
    Ok(())
}

/// Compartment masses: entry `(j, k)` is `x_j(times[k])`.
pub fn evaluate_trajectory<T: Scalar>(s: &SpectralData<T>, times: &[T]) -> Result<Matrix<T>> {
    check_times(times)?;
    let n = s.n();
    Ok(Matrix::from_fn(n, times.len(), |j, k| {
        compensated_sum(
            s.eigenvalues
                .iter()
                .enumerate()
                .map(|(i, &l)| s.b[(i, j)] * (l * times[k]).exp()),
        )
    }))
}

/// Time derivative of every compartment: entry `(j, k)` is `x_j'(times[k])`.
pub fn evaluate_derivative<T: Scalar>(s: &SpectralData<T>, times: &[T]) -> Result<Matrix<T>> {
    check_times(times)?;
    let n = s.n();
    Ok(Matrix::from_fn(n, times.len(), |j, k| {
        compensated_sum(
            s.eigenvalues
                .iter()
                .enumerate()
                .map(|(i, &l)| l * s.b[(i, j)] * (l * times[k]).exp()),
        )
    }))
}

/// Measurement noise applied to primary-compartment samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    /// `x̄ = x (1 + ε)`, `ε ~ N(0, sigma_rel²)`.
    Gaussian {
        sigma_rel: f64,
    },
}

/// Time-stamped samples of the primary compartment.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSeries<T> {
    times: Vec<T>,
    values: Vec<T>,
    dose: T,
}

impl<T: Scalar> MeasurementSeries<T> {
    pub fn new(times: Vec<T>, values: Vec<T>, dose: T) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidInput("measurement series is empty".into()));
        }
        if times.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "{} times but {} values",
                times.len(),
                values.len()
            )));
        }
        check_times(&times)?;
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "times must be strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "measurement values must be finite".into(),
            ));
        }
        if !(dose.is_finite() && dose > T::zero()) {
            return Err(Error::Validation(format!(
                "dose a = {dose} must be positive"
            )));
        }
        Ok(Self {
            times,
            values,
            dose,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dose(&self) -> T {
        self.dose
    }

    /// Writes the `t,x1` CSV form. The dose is not part of the file.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "x1"])?;
        for (t, x) in self.times.iter().zip(&self.values) {
            out.write_record([t.to_string(), x.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, dose: T) -> Result<Self> {
        let mut input = csv::Reader::from_reader(r);
        let headers = input.headers()?.clone();
        if headers.len() != 2 || headers.get(0) != Some("t") || headers.get(1) != Some("x1") {
            return Err(Error::Format(format!(
                "expected header 't,x1', found '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (line, record) in input.records().enumerate() {
            let record = record?;
            let parse = |k: usize| -> Result<T> {
                let v: f64 = record
                    .get(k)
                    .unwrap_or("")
                    .trim()
                    .parse()
                    .map_err(|e| Error::Format(format!("row {}: {e}", line + 2)))?;
                Ok(T::lit(v))
            };
            times.push(parse(0)?);
            values.push(parse(1)?);
        }
        Self::new(times, values, dose)
    }
}

/// Samples `x_1` at `times`, optionally with multiplicative Gaussian noise.
pub fn sample_primary<T: Scalar>(
    s: &SpectralData<T>,
    times: &[T],
    noise: NoiseModel,
    seed: u64,
) -> Result<MeasurementSeries<T>> {
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "times must be strictly increasing".into(),
        ));
    }
    let traj = evaluate_trajectory(s, times)?;
    let mut values = traj.row(0).to_vec();
    if let NoiseModel::Gaussian { sigma_rel } = noise {
        let normal = Normal::new(0.0, sigma_rel)
            .map_err(|e| Error::InvalidInput(format!("noise sigma {sigma_rel}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut values {
            *v = *v * (T::one() + T::lit(normal.sample(&mut rng)));
        }
    }
    MeasurementSeries::new(times.to_vec(), values, s.a)
}

/// Placement of `m` sample times in `(0, horizon]`; the last one is the horizon.
/// Uniform places `t_k = T k / m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum GridScheme {
    Uniform,
    /// `t_k = T (r^k − 1) / (r^m − 1)` for `k = 1..=m`.
    Geometric {
        ratio: f64,
    },
}

/// Sample count, scheme and horizon of a sampling design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    pub count: usize,
    pub scheme: GridScheme,
    pub horizon: f64,
}

impl SamplingGrid {
    /// Geometric grid whose first sample falls at `first`.
    pub fn geometric_with_first(count: usize, first: f64, horizon: f64) -> Result<Self> {
        if !(first > 0.0 && first * (count as f64) < horizon) {
            return Err(Error::Validation(format!(
                "first sample {first} must lie in (0, horizon / m) for m = {count}, horizon {horizon}"
            )));
        }
        // t_1 / T = (r − 1) / (r^m − 1) falls monotonically from 1/m as r grows
        let target = first / horizon;
        let ratio_of = |r: f64| (r - 1.0) / (r.powi(count as i32) - 1.0);
        let (mut lo, mut hi) = (1.0 + 1e-12, 2.0);
        while ratio_of(hi) > target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ratio_of(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self {
            count,
            scheme: GridScheme::Geometric {
                ratio: 0.5 * (lo + hi),
            },
            horizon,
        })
    }

    pub fn times<T: Scalar>(&self) -> Result<Vec<T>> {
        let m = self.count;
        if m < 2 {
            return Err(Error::Validation(
                "a sampling grid needs at least 2 points".into(),
            ));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Validation(format!(
                "horizon {} must be positive",
                self.horizon
            )));
        }
        let count = m as f64;
        let times: Vec<f64> = match self.scheme {
            GridScheme::Uniform => (1..=m).map(|k| self.horizon * k as f64 / count).collect(),
            GridScheme::Geometric { ratio } => {
                if !(ratio.is_finite() && ratio > 1.0) {
                    return Err(Error::Validation(format!(
                        "geometric ratio {ratio} must exceed 1"
                    )));
                }
                let denom = ratio.powf(count) - 1.0;
                (1..=m)
                    .map(|k| self.horizon * (ratio.powi(k as i32) - 1.0) / denom)
                    .collect()
            }
        };
        if times.windows(2).any(|w| w[1] <= w[0]) || times[0] <= 0.0 {
            return Err(Error::Validation(format!(
                "grid of {m} points over horizon {} is not strictly increasing",
                self.horizon
            )));
        }
        Ok(times.into_iter().map(T::lit).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_model, CatenaryModel, PositiveRange};

    fn example() -> SpectralData<f64> {
        let model = CatenaryModel::new(1.0, vec![1.0, 0.4], vec![0.5, 0.2], 0.3).unwrap();
        spectral_solve(&model.ode_matrix(), 1.0).unwrap()
    }

    fn random(n: usize, seed: u64) -> (CatenaryModel<f64>, SpectralData<f64>) {
        let model = random_model(
            n,
            seed,
            PositiveRange::new(0.1, 2.0).unwrap(),
            PositiveRange::new(0.5, 2.0).unwrap(),
        )
        .unwrap();
        let s = spectral_solve(&model.ode_matrix(), model.dose()).unwrap();
        (model, s)
    }

    #[test]
    fn column_sums_match_injection() {
        for seed in 0..30 {
            let (model, s) = random(3 + seed as usize % 6, seed);
            let a = model.dose();
            let sums: Vec<f64> = (0..s.n()).map(|j| s.column(j).iter().sum()).collect();
            assert!((sums[0] - a).abs() < 1e-10 * a);
            assert!(sums[1..].iter().all(|x| x.abs() < 1e-10 * a));
        }
    }

    #[test]
    fn spectral_relations_hold_row_by_row() {
        for seed in 0..30 {
            let (model, s) = random(3 + seed as usize % 6, seed);
            let m = model.ode_matrix();
            let n = s.n();
            for i in 0..n {
                let row = s.b.row(i).to_vec();
                let mrow = m.entries().mul_vec(&row);
                let scale =
                    row.iter().fold(0.0f64, |acc, x| acc.max(x.abs())) * s.eigenvalues[0].abs();
                for j in 0..n {
                    let r = s.eigenvalues[i] * row[j] - mrow[j];
                    assert!(r.abs() <= 1e-10 * scale, "seed {seed} i {i} j {j}: {r:e}");
                }
            }
        }
    }

    #[test]
    fn eigenvalues_sorted_negative_distinct() {
        let s = example();
        assert!(s.eigenvalues.windows(2).all(|w| w[0] < w[1]));
        assert!(s.eigenvalues.iter().all(|&v| v < 0.0));
        // trace is preserved
        let trace: f64 = s.eigenvalues.iter().sum();
        assert!((trace - (-1.3 - 0.9 - 0.2)).abs() < 1e-14);
    }

    #[test]
    fn trajectory_at_zero_is_injection() {
        let (model, s) = random(6, 3);
        let x = evaluate_trajectory(&s, &[0.0]).unwrap();
        assert!((x[(0, 0)] - model.dose()).abs() <= 1e-12 * model.dose());
        for j in 1..6 {
            assert!(x[(j, 0)].abs() <= 1e-12 * model.dose());
        }
    }

    #[test]
    fn tail_decays_monotonically() {
        let s = example();
        let slowest = s.eigenvalues.last().unwrap().abs();
        let times: Vec<f64> = (0..40).map(|k| (5.0 + k as f64) / slowest).collect();
        let x = evaluate_trajectory(&s, &times).unwrap();
        for j in 0..s.n() {
            for k in 1..times.len() {
                assert!(x[(j, k)] <= x[(j, k - 1)] && x[(j, k)] >= 0.0);
            }
        }
    }

    #[test]
    fn projector_path_agrees_with_similarity_path() {
        let (model, s) = random(5, 9);
        let m = model.ode_matrix();
        let b = projector_amplitudes(&m, &s.eigenvalues, model.dose());
        for i in 0..5 {
            for j in 0..5 {
                assert!((b[(i, j)] - s.b[(i, j)]).abs() < 1e-9, "({i},{j})");
            }
        }
    }

    #[test]
    fn zeroed_backward_rate_still_synthesizes() {
        let (model, _) = random(5, 4);
        let mut backward = model.backward().to_vec();
        backward[2] = 0.0;
        let m = OdeMatrix::from_rates_unchecked(model.forward(), &backward, model.k1e());
        // k_43 = 0 with k_44 recomputed traps mass in compartments 4..5
        assert!(matches!(
            spectral_solve(&m, 1.0),
            Err(Error::DegenerateSpectrum(_))
        ));
        let mut entries = model.ode_matrix().entries().clone();
        entries[(2, 3)] = 0.0;
        let leaky = OdeMatrix::from_entries(entries).unwrap();
        let s = spectral_solve(&leaky, 1.0).unwrap();
        let x0 = evaluate_trajectory(&s, &[0.0]).unwrap();
        assert!((x0[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn noiseless_samples_equal_trajectory() {
        let s = example();
        let times = [0.0, 0.5, 1.0, 4.0];
        let series = sample_primary(&s, &times, NoiseModel::None, 0).unwrap();
        let x = evaluate_trajectory(&s, &times).unwrap();
        assert_eq!(series.values(), x.row(0));
    }

    #[test]
    fn noisy_samples_are_seeded() {
        let s = example();
        let times: Vec<f64> = (0..50).map(|k| k as f64 * 0.2).collect();
        let noise = NoiseModel::Gaussian { sigma_rel: 0.05 };
        let a = sample_primary(&s, &times, noise, 5).unwrap();
        let b = sample_primary(&s, &times, noise, 5).unwrap();
        let c = sample_primary(&s, &times, noise, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_has_declared_relative_spread() {
        let s = example();
        let times: Vec<f64> = (0..10_000).map(|k| k as f64 * 1e-3).collect();
        let clean = sample_primary(&s, &times, NoiseModel::None, 0).unwrap();
        let noisy =
            sample_primary(&s, &times, NoiseModel::Gaussian { sigma_rel: 0.01 }, 17).unwrap();
        let dev: Vec<f64> = noisy
            .values()
            .iter()
            .zip(clean.values())
            .map(|(y, x)| y / x - 1.0)
            .collect();
        let mean = dev.iter().sum::<f64>() / dev.len() as f64;
        let var = dev.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (dev.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - 0.01).abs() < 0.001, "std {std}");
    }

    #[test]
    fn rejects_non_increasing_times() {
        let s = example();
        assert!(sample_primary(&s, &[0.0, 1.0, 1.0], NoiseModel::None, 0).is_err());
        assert!(evaluate_trajectory(&s, &[f64::NAN]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = example();
        let times = [0.0, 0.1, 0.7, 3.0];
        let series = sample_primary(&s, &times, NoiseModel::None, 0).unwrap();
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t,x1\n"));
        let back = MeasurementSeries::read_csv(buf.as_slice(), 1.0).unwrap();
        assert_eq!(back, series);
    }

    #[test]
    fn geometric_grid_spans_horizon() {
        let grid = SamplingGrid {
            count: 12,
            scheme: GridScheme::Geometric { ratio: 1.5 },
            horizon: 10.0,
        };
        let t: Vec<f64> = grid.times().unwrap();
        assert!((t[0] - 10.0 * 0.5 / (1.5f64.powi(12) - 1.0)).abs() < 1e-12);
        assert!((t[11] - 10.0).abs() < 1e-12);
        assert!(t.windows(3).all(|w| w[2] - w[1] > w[1] - w[0]));
    }

    #[test]
    fn uniform_grid_excludes_origin() {
        let grid = SamplingGrid {
            count: 4,
            scheme: GridScheme::Uniform,
            horizon: 2.0,
        };
        assert_eq!(grid.times::<f64>().unwrap(), vec![0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn geometric_ratio_hits_requested_first_sample() {
        let grid = SamplingGrid::geometric_with_first(20, 0.05, 25.0).unwrap();
        let t: Vec<f64> = grid.times().unwrap();
        assert!((t[0] - 0.05).abs() < 1e-12, "{}", t[0]);
        assert!((t[19] - 25.0).abs() < 1e-12);
        assert!(SamplingGrid::geometric_with_first(20, 2.0, 25.0).is_err());
    }
}
