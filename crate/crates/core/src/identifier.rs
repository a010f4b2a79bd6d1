//! Recovery of every rate constant of a reversible catenary system from the
//! amplitudes `β_i^1` and exponents `λ_i` of the primary compartment.
//!
//! The recurrence works on the power sums `Δ_j^l = Σ_i λ_i^l β_i^j`. With
//! the first column of `B` known, `k_11`, `k_12` (through `k_1e`) and `k_21`
//! follow and the second column of `B` is solved from the spectral relation
//! of compartment 1. Each later step `j` uses columns `j-1` and `j` to get
//! `k_jj`, `k_j(j+1)`, `k_(j+1)j` and then column `j+1`. The denominator
//! `Δ_(j+1)^j` of the backward rate is taken from the product identity
//! `Δ_(l+1)^l = a Π_{i≤l} k_i(i+1)` because column `j+1` is not available yet.

// threshold checks are written `!(x > floor)` so that NaN also fails them
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, compensated_sum_with_magnitude, Matrix};
use crate::model::OdeMatrix;
use crate::scalar::Scalar;

/// `Σ_i λ_i^l β_i`, compensated.
pub fn delta<T: Scalar>(column: &[T], lambdas: &[T], l: usize) -> T {
    delta_with_magnitude(column, lambdas, l).0
}

/// `Δ` together with `Σ_i |λ_i^l β_i|`.
pub fn delta_with_magnitude<T: Scalar>(column: &[T], lambdas: &[T], l: usize) -> (T, T) {
    assert_eq!(
        column.len(),
        lambdas.len(),
        "column and spectrum lengths differ"
    );
    compensated_sum_with_magnitude(
        column
            .iter()
            .zip(lambdas)
            .map(|(&b, &lam)| lam.powi(l as i32) * b),
    )
}

/// Lazily populated table of `Δ_j^l` for the columns of `B` known so far.
/// Compartments `j` are 1-based as in the recurrences.
#[derive(Debug, Clone)]
pub struct DeltaTable<T: Scalar> {
    lambdas: Vec<T>,
    columns: Vec<Vec<T>>,
    cache: BTreeMap<(usize, usize), (T, T)>,
}

impl<T: Scalar> DeltaTable<T> {
    pub fn new(lambdas: Vec<T>) -> Self {
        Self {
            lambdas,
            columns: Vec::new(),
            cache: BTreeMap::new(),
        }
    }

    /// Builds the table with every column of `b` already known.
    pub fn from_columns(lambdas: Vec<T>, b: &Matrix<T>) -> Self {
        let mut table = Self::new(lambdas);
        for j in 0..b.cols() {
            table.push_column(b.column(j));
        }
        table
    }

    pub fn n(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[T] {
        &self.lambdas
    }

    pub fn known_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[T] {
        &self.columns[j - 1]
    }

    pub fn push_column(&mut self, column: Vec<T>) {
        assert_eq!(column.len(), self.n());
        self.columns.push(column);
    }

    /// `(Δ_j^l, Σ|terms|)`; panics if column `j` is not known yet.
    pub fn entry(&mut self, j: usize, l: usize) -> (T, T) {
        assert!(
            j >= 1 && j <= self.columns.len(),
            "column {j} of B is not identified"
        );
        let lambdas = &self.lambdas;
        let column = &self.columns[j - 1];
        *self
            .cache
            .entry((j, l))
            .or_insert_with(|| delta_with_magnitude(column, lambdas, l))
    }

    pub fn get(&mut self, j: usize, l: usize) -> T {
        self.entry(j, l).0
    }

    /// Largest `|Δ_j^l| / (a max|λ|^l)` over the zero triangle
    /// `3 ≤ j ≤ n`, `1 ≤ l ≤ n−2`, `j − l ≥ 2`, restricted to known columns.
    /// Returns zero when the triangle is empty.
    pub fn zero_triangle_violation(&mut self, a: T) -> T {
        let n = self.n();
        let scale = self.lambdas.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let mut worst = T::zero();
        for j in 3..=self.known_columns() {
            for l in 1..=n.saturating_sub(2) {
                if j >= l + 2 {
                    let v = self.get(j, l).abs() / (a * scale.powi(l as i32));
                    worst = worst.max(v);
                }
            }
        }
        worst
    }
}

/// Thresholds for the identifiability checks. All are relative to the
/// natural scale of the quantity they guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentifyOptions {
    /// Rescale time by `|λ_1|` before running the recurrence.
    pub rescale_time: bool,
    /// A quotient whose numerator is below `cancellation_floor` times the sum
    /// of its terms' magnitudes is treated as zero.
    pub cancellation_floor: f64,
    /// Off-diagonal rates must exceed `rate_floor · max|λ|`.
    pub rate_floor: f64,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self {
            rescale_time: true,
            cancellation_floor: 1e-11,
            rate_floor: 1e-12,
        }
    }
}

/// Magnitude of one division performed during identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivisionReport {
    /// 1-based step index; 1 is the initialization.
    pub step: usize,
    pub quantity: String,
    pub denominator: f64,
    /// `Σ|terms| / |numerator|` of the numerator.
    pub cancellation: f64,
}

/// Consistency diagnostics of an identification, in original time units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `Σ_i β_i^j − x_j(0)` for each compartment.
    pub column_sums: Vec<f64>,
    /// Largest spectral-relation residual `|λ_i β_i^j − (M β_i)_j|` per compartment.
    pub relation_by_compartment: Vec<f64>,
    /// `|Δ_(l+1)^l − a Π k_i(i+1)| / |a Π k_i(i+1)|` for `l = 1..n−1`.
    pub product_identity: Vec<f64>,
    /// Largest normalized `|Δ_j^l|` over the zero triangle.
    pub zero_triangle: f64,
}

/// Rates and elementary masses recovered from primary-compartment data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
#[serde(try_from = "IdentifiedRecord<T>", into = "IdentifiedRecord<T>")]
pub struct IdentifiedSystem<T: Scalar> {
    pub matrix: OdeMatrix<T>,
    pub b: Matrix<T>,
    pub lambdas: Vec<T>,
    pub a: T,
    pub k1e: T,
    pub residuals: Residuals,
    /// Time unit `τ` the recurrence ran in; the condition report is in these units.
    pub time_scale: T,
    pub condition_report: Vec<DivisionReport>,
    pub max_relation_residual: T,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
struct IdentifiedRecord<T: Scalar> {
    matrix: Matrix<T>,
    #[serde(rename = "B")]
    b: Matrix<T>,
    lambdas: Vec<T>,
    a: T,
    k1e: T,
    residuals: Residuals,
    time_scale: T,
    condition_report: Vec<DivisionReport>,
    #[serde(rename = "max_eq22_residual")]
    max_relation_residual: T,
}

impl<T: Scalar> From<IdentifiedSystem<T>> for IdentifiedRecord<T> {
    fn from(s: IdentifiedSystem<T>) -> Self {
        Self {
            matrix: s.matrix.entries().clone(),
            b: s.b,
            lambdas: s.lambdas,
            a: s.a,
            k1e: s.k1e,
            residuals: s.residuals,
            time_scale: s.time_scale,
            condition_report: s.condition_report,
            max_relation_residual: s.max_relation_residual,
        }
    }
}

impl<T: Scalar> TryFrom<IdentifiedRecord<T>> for IdentifiedSystem<T> {
    type Error = Error;
    fn try_from(r: IdentifiedRecord<T>) -> Result<Self> {
        Ok(Self {
            matrix: OdeMatrix::from_entries(r.matrix)?,
            b: r.b,
            lambdas: r.lambdas,
            a: r.a,
            k1e: r.k1e,
            residuals: r.residuals,
            time_scale: r.time_scale,
            condition_report: r.condition_report,
            max_relation_residual: r.max_relation_residual,
        })
    }
}

impl<T: Scalar> IdentifiedSystem<T> {
    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub fn model(&self) -> Result<crate::model::CatenaryModel<T>> {
        let n = self.n();
        crate::model::CatenaryModel::new(
            self.a,
            (0..n - 1).map(|i| self.matrix.forward(i)).collect(),
            (0..n - 1).map(|i| self.matrix.backward(i)).collect(),
            self.k1e,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Partial identification: columns `1..=known` of `B` and the rates they determine.
#[derive(Debug, Clone)]
pub struct PartialIdentification<T: Scalar> {
    pub a: T,
    pub deltas: DeltaTable<T>,
    /// `k_11, k_22, …` for the compartments identified so far.
    pub diagonal: Vec<T>,
    /// `forward[i] = k_(i+1)(i+2)`.
    pub forward: Vec<T>,
    /// `backward[i] = k_(i+2)(i+1)`.
    pub backward: Vec<T>,
    pub k1e: T,
    pub condition_report: Vec<DivisionReport>,
    options: IdentifyOptions,
}

/// Result of one step of the recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRates<T> {
    pub kjj: T,
    pub kj_next: T,
    pub knext_j: T,
    pub beta_next: Vec<T>,
}

fn breakdown<T: Scalar>(step: usize, quantity: &str, value: T, threshold: T) -> Error {
    Error::Breakdown {
        step,
        quantity: quantity.to_string(),
        value: value.to_f64_lossy(),
        threshold: threshold.to_f64_lossy(),
    }
}

fn check_inputs<T: Scalar>(beta1: &[T], lambdas: &[T], a: T) -> Result<()> {
    if beta1.len() != lambdas.len() || beta1.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} amplitudes but {} exponents",
            beta1.len(),
            lambdas.len()
        )));
    }
    if beta1.iter().chain(lambdas).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "non-finite amplitude or exponent".into(),
        ));
    }
    if !(a.is_finite() && a > T::zero()) {
        return Err(Error::Validation(format!("dose a = {a} must be positive")));
    }
    if lambdas.iter().any(|&l| l >= T::zero()) {
        return Err(Error::InvalidInput(
            "exponents must be strictly negative".into(),
        ));
    }
    Ok(())
}

/// `k_1e = −a / Σ_i β_i/λ_i`.
pub fn identify_k1e<T: Scalar>(beta1: &[T], lambdas: &[T], a: T) -> Result<T> {
    identify_k1e_with(beta1, lambdas, a, &IdentifyOptions::default())
}

fn identify_k1e_with<T: Scalar>(
    beta1: &[T],
    lambdas: &[T],
    a: T,
    options: &IdentifyOptions,
) -> Result<T> {
    if beta1.len() != lambdas.len() || lambdas.iter().any(|l| *l == T::zero() || !l.is_finite()) {
        return Err(Error::InvalidInput(
            "k_1e needs matching, nonzero exponents".into(),
        ));
    }
    let (denominator, magnitude) =
        compensated_sum_with_magnitude(beta1.iter().zip(lambdas).map(|(&b, &l)| b / l));
    if !(denominator.abs() > T::lit(options.cancellation_floor) * magnitude) {
        return Err(Error::NonIdentifiableExcretion {
            denominator: denominator.to_f64_lossy(),
        });
    }
    Ok(-a / denominator)
}

impl<T: Scalar> PartialIdentification<T> {
    fn rate_threshold(&self) -> T {
        let scale = self
            .deltas
            .lambdas()
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()));
        T::lit(self.options.rate_floor) * scale
    }

    /// Records the division and rejects it when the numerator cancels to
    /// noise or the denominator vanishes relative to its scale.
    #[allow(clippy::too_many_arguments)]
    fn divide(
        &mut self,
        step: usize,
        quantity: &str,
        numerator: T,
        numerator_magnitude: T,
        denominator: T,
        denominator_scale: T,
    ) -> Result<T> {
        let floor = T::lit(self.options.cancellation_floor);
        let cancellation = if numerator == T::zero() {
            T::infinity()
        } else {
            numerator_magnitude / numerator.abs()
        };
        self.condition_report.push(DivisionReport {
            step,
            quantity: quantity.to_string(),
            denominator: denominator.to_f64_lossy(),
            cancellation: cancellation.to_f64_lossy(),
        });
        if !(denominator.abs() > floor * denominator_scale) {
            return Err(breakdown(
                step,
                &format!("denominator of {quantity}"),
                denominator,
                floor * denominator_scale,
            ));
        }
        if !(numerator.abs() > floor * numerator_magnitude) {
            return Err(breakdown(
                step,
                &format!("numerator of {quantity}"),
                numerator,
                floor * numerator_magnitude,
            ));
        }
        Ok(numerator / denominator)
    }

    fn check_rate(&self, step: usize, name: &str, value: T) -> Result<()> {
        let threshold = self.rate_threshold();
        if value > threshold && value.is_finite() {
            Ok(())
        } else {
            Err(breakdown(step, name, value, threshold))
        }
    }

    /// Most recent column of `B`.
    pub fn known_columns(&self) -> usize {
        self.deltas.known_columns()
    }
}

/// Initialization. Returns `(k_11, k_12, k_21, β^2)` and the partial state
/// ready for step 2.
pub fn identify_first<T: Scalar>(
    beta1: &[T],
    lambdas: &[T],
    a: T,
) -> Result<(StepRates<T>, PartialIdentification<T>)> {
    identify_first_with(beta1, lambdas, a, IdentifyOptions::default())
}

fn identify_first_with<T: Scalar>(
    beta1: &[T],
    lambdas: &[T],
    a: T,
    options: IdentifyOptions,
) -> Result<(StepRates<T>, PartialIdentification<T>)> {
    check_inputs(beta1, lambdas, a)?;
    let k1e = identify_k1e_with(beta1, lambdas, a, &options)?;
    let mut deltas = DeltaTable::new(lambdas.to_vec());
    deltas.push_column(beta1.to_vec());
    let mut state = PartialIdentification {
        a,
        deltas,
        diagonal: Vec::new(),
        forward: Vec::new(),
        backward: Vec::new(),
        k1e,
        condition_report: Vec::new(),
        options,
    };
    state.check_rate(1, "k_1e", k1e)?;

    let (d11, d11_mag) = state.deltas.entry(1, 1);
    let (d12, d12_mag) = state.deltas.entry(1, 2);
    let k11 = state.divide(1, "k_11", d11, d11_mag, a, a)?;
    let k12 = -(k1e + k11);
    state.check_rate(1, "k_12", k12)?;

    let numerator = d12 - k11 * d11;
    let magnitude = d12_mag + k11.abs() * d11_mag;
    let scale = a * k12.abs();
    let k21 = state.divide(1, "k_21", numerator, magnitude, a * k12, scale)?;
    state.check_rate(1, "k_21", k21)?;

    let beta2: Vec<T> = beta1
        .iter()
        .zip(lambdas)
        .map(|(&b, &l)| (l * b - k11 * b) / k21)
        .collect();
    state.diagonal.push(k11);
    state.forward.push(k12);
    state.backward.push(k21);
    state.deltas.push_column(beta2.clone());
    Ok((
        StepRates {
            kjj: k11,
            kj_next: k12,
            knext_j: k21,
            beta_next: beta2,
        },
        state,
    ))
}

/// Step `j` (1-based, `2 ≤ j ≤ n−1`): identifies `k_jj`, `k_j(j+1)`,
/// `k_(j+1)j` and column `j+1` of `B`, and appends them to `state`.
pub fn identify_step<T: Scalar>(
    j: usize,
    state: &mut PartialIdentification<T>,
) -> Result<StepRates<T>> {
    let n = state.deltas.n();
    if j < 2 || j + 1 > n || state.known_columns() != j || state.forward.len() != j - 1 {
        return Err(Error::InvalidInput(format!(
            "step {j} needs columns 1..={j} of B identified (have {}) in a system of {n}",
            state.known_columns()
        )));
    }
    let a = state.a;
    let k_prev_fwd = state.forward[j - 2]; // k_(j-1)j
    let k_back_prev = state.backward[j - 2]; // k_j(j-1)

    let (d_jj, d_jj_mag) = state.deltas.entry(j, j);
    let (d_prev_prev, d_prev_prev_mag) = state.deltas.entry(j - 1, j - 1);
    let (d_j_jm1, d_j_jm1_mag) = state.deltas.entry(j, j - 1);
    let numerator = d_jj - k_prev_fwd * d_prev_prev;
    let magnitude = d_jj_mag + k_prev_fwd.abs() * d_prev_prev_mag;
    let kjj = state.divide(
        j,
        &format!("k_{j}{j}"),
        numerator,
        magnitude,
        d_j_jm1,
        d_j_jm1_mag,
    )?;

    let kj_next = -(k_back_prev + kjj);
    state.check_rate(j, &format!("k_{}{}", j, j + 1), kj_next)?;

    let (d_j_jp1, d_j_jp1_mag) = state.deltas.entry(j, j + 1);
    let (d_prev_j, d_prev_j_mag) = state.deltas.entry(j - 1, j);
    let numerator = d_j_jp1 - k_prev_fwd * d_prev_j - kjj * d_jj;
    let magnitude = d_j_jp1_mag + k_prev_fwd.abs() * d_prev_j_mag + kjj.abs() * d_jj_mag;
    // Δ_(j+1)^j = a Π_{i=1}^{j} k_i(i+1)
    let product = state.forward.iter().fold(a, |p, &k| p * k) * kj_next;
    let product_scale = state.forward.iter().fold(a, |p, &k| p * k.abs()) * kj_next.abs();
    let knext_j = state.divide(
        j,
        &format!("k_{}{}", j + 1, j),
        numerator,
        magnitude,
        product,
        product_scale,
    )?;
    state.check_rate(j, &format!("k_{}{}", j + 1, j), knext_j)?;

    let lambdas = state.deltas.lambdas().to_vec();
    let col_prev = state.deltas.column(j - 1).to_vec();
    let col_j = state.deltas.column(j).to_vec();
    let beta_next: Vec<T> = (0..n)
        .map(|i| {
            compensated_sum([
                lambdas[i] * col_j[i],
                -(k_prev_fwd * col_prev[i]),
                -(kjj * col_j[i]),
            ]) / knext_j
        })
        .collect();

    state.diagonal.push(kjj);
    state.forward.push(kj_next);
    state.backward.push(knext_j);
    state.deltas.push_column(beta_next.clone());
    Ok(StepRates {
        kjj,
        kj_next,
        knext_j,
        beta_next,
    })
}

/// Full identification with default options.
pub fn identify_all<T: Scalar>(
    beta1: &[T],
    lambdas: &[T],
    a: T,
    n: usize,
) -> Result<IdentifiedSystem<T>> {
    identify_all_with(beta1, lambdas, a, n, &IdentifyOptions::default())
}

/// Runs the initialization and steps `2..n−1`, sets `k_nn = −k_n(n−1)`, and
/// assembles the recovered matrix, `B` and diagnostics.
pub fn identify_all_with<T: Scalar>(
    beta1: &[T],
    lambdas: &[T],
    a: T,
    n: usize,
    options: &IdentifyOptions,
) -> Result<IdentifiedSystem<T>> {
    if n < 3 || beta1.len() != n || lambdas.len() != n {
        return Err(Error::InvalidInput(format!(
            "identification of n = {n} compartments needs n >= 3 and {n} amplitudes and exponents, got {} and {}",
            beta1.len(),
            lambdas.len()
        )));
    }
    check_inputs(beta1, lambdas, a)?;
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite exponents"));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput(
            "exponents must be pairwise distinct".into(),
        ));
    }

    let tau = if options.rescale_time {
        lambdas.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    } else {
        T::one()
    };
    let scaled: Vec<T> = lambdas.iter().map(|&l| l / tau).collect();

    let (_, mut state) = identify_first_with(beta1, &scaled, a, *options)?;
    for j in 2..n {
        identify_step(j, &mut state)?;
    }

    let forward: Vec<T> = state.forward.iter().map(|&k| k * tau).collect();
    let backward: Vec<T> = state.backward.iter().map(|&k| k * tau).collect();
    let k1e = state.k1e * tau;
    let matrix = OdeMatrix::from_rates_unchecked(&forward, &backward, k1e);
    let b = Matrix::from_fn(n, n, |i, j| state.deltas.column(j + 1)[i]);

    let residuals = residuals(&matrix, &b, lambdas, a);
    let max_relation = residuals
        .relation_by_compartment
        .iter()
        .fold(0.0f64, |m, &v| m.max(v));
    Ok(IdentifiedSystem {
        matrix,
        b,
        lambdas: lambdas.to_vec(),
        a,
        k1e,
        residuals,
        time_scale: tau,
        condition_report: state.condition_report,
        max_relation_residual: T::lit(max_relation),
    })
}

/// Diagnostics of a recovered `(M, B)` pair against the spectrum and dose.
pub fn residuals<T: Scalar>(
    matrix: &OdeMatrix<T>,
    b: &Matrix<T>,
    lambdas: &[T],
    a: T,
) -> Residuals {
    let n = matrix.n();
    let column_sums = (0..n)
        .map(|j| {
            let target = if j == 0 { a } else { T::zero() };
            (compensated_sum(b.column(j)) - target).to_f64_lossy()
        })
        .collect();
    let mut relation = vec![0.0f64; n];
    for (i, &lambda) in lambdas.iter().enumerate() {
        let row = b.row(i);
        let mrow = matrix.entries().mul_vec(row);
        for (worst, (&x, &mx)) in relation.iter_mut().zip(row.iter().zip(&mrow)) {
            *worst = worst.max((lambda * x - mx).abs().to_f64_lossy());
        }
    }
    let mut table = DeltaTable::from_columns(lambdas.to_vec(), b);
    let mut product = a;
    let product_identity = (1..n)
        .map(|l| {
            product = product * matrix.forward(l - 1);
            ((table.get(l + 1, l) - product) / product)
                .abs()
                .to_f64_lossy()
        })
        .collect();
    let zero_triangle = table.zero_triangle_violation(a).to_f64_lossy();
    Residuals {
        column_sums,
        relation_by_compartment: relation,
        product_identity,
        zero_triangle,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_model, CatenaryModel, PositiveRange};
    use crate::simulator::{spectral_solve, SpectralData};

    fn example() -> (CatenaryModel<f64>, SpectralData<f64>) {
        let model = CatenaryModel::new(1.0, vec![1.0, 0.4], vec![0.5, 0.2], 0.3).unwrap();
        let s = spectral_solve(&model.ode_matrix(), 1.0).unwrap();
        (model, s)
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

    fn rel(x: f64, y: f64) -> f64 {
        (x - y).abs() / y.abs()
    }

    #[test]
    fn delta_initial_conditions() {
        let (model, s) = random(6, 2);
        let a = model.dose();
        assert!((delta(&s.column(0), &s.eigenvalues, 0) - a).abs() < 1e-12 * a);
        for j in 1..6 {
            assert!(delta(&s.column(j), &s.eigenvalues, 0).abs() < 1e-12 * a);
        }
        // Δ_2^1 = a k_12
        let d21 = delta(&s.column(1), &s.eigenvalues, 1);
        assert!(rel(d21, a * model.forward()[0]) < 1e-10);
    }

    #[test]
    fn k1e_single_term_and_homogeneity() {
        assert!((identify_k1e(&[2.0f64], &[-0.7], 2.0).unwrap() - 0.7).abs() < 1e-15);
        let (model, s) = random(4, 8);
        let beta = s.primary_amplitudes();
        let k = identify_k1e(&beta, &s.eigenvalues, model.dose()).unwrap();
        assert!(rel(k, model.k1e()) < 1e-9);
        let scaled: Vec<f64> = beta.iter().map(|b| b * 3.5).collect();
        let k2 = identify_k1e(&scaled, &s.eigenvalues, model.dose() * 3.5).unwrap();
        assert!(rel(k2, k) < 1e-14);
    }

    #[test]
    fn k1e_rejects_vanishing_denominator() {
        let err = identify_k1e(&[1.0, -1.0], &[-1.0, -1.0 - 1e-16], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonIdentifiableExcretion { .. }));
    }

    #[test]
    fn first_step_of_three_compartment_example() {
        let (_, s) = example();
        let (rates, mut state) =
            identify_first(&s.primary_amplitudes(), &s.eigenvalues, 1.0).unwrap();
        assert!((rates.kjj + 1.3).abs() < 1e-9);
        assert!((rates.kj_next - 1.0).abs() < 1e-9);
        assert!((rates.knext_j - 0.5).abs() < 1e-9);
        assert!(rates.beta_next.iter().sum::<f64>().abs() < 1e-10);
        assert!((state.deltas.get(1, 1) - rates.kjj * 1.0).abs() < 1e-12);
    }

    #[test]
    fn second_step_of_three_compartment_example() {
        let (_, s) = example();
        let (_, mut state) = identify_first(&s.primary_amplitudes(), &s.eigenvalues, 1.0).unwrap();
        let step = identify_step(2, &mut state).unwrap();
        assert!((step.kjj + 0.9).abs() < 1e-9);
        assert!((step.kj_next - 0.4).abs() < 1e-9);
        assert!((step.knext_j - 0.2).abs() < 1e-9);
        assert!(step.beta_next.iter().sum::<f64>().abs() < 1e-10);
        let d32 = delta(&step.beta_next, &s.eigenvalues, 2);
        assert!(rel(d32, 1.0 * 1.0 * 0.4) < 1e-8);
    }

    #[test]
    fn step_rejects_out_of_order_call() {
        let (_, s) = example();
        let (_, mut state) = identify_first(&s.primary_amplitudes(), &s.eigenvalues, 1.0).unwrap();
        assert!(identify_step(3, &mut state).is_err());
    }

    #[test]
    fn unscaled_recurrence_matches_scaled() {
        let (model, s) = random(5, 21);
        let opts = IdentifyOptions {
            rescale_time: false,
            ..IdentifyOptions::default()
        };
        let beta = s.primary_amplitudes();
        let x = identify_all_with(&beta, &s.eigenvalues, model.dose(), 5, &opts).unwrap();
        let y = identify_all(&beta, &s.eigenvalues, model.dose(), 5).unwrap();
        for i in 0..4 {
            assert!(rel(x.matrix.backward(i), y.matrix.backward(i)) < 1e-9);
            assert!(rel(x.matrix.backward(i), model.backward()[i]) < 1e-9);
        }
    }

    #[test]
    fn recovers_random_models() {
        for seed in 0..40 {
            let n = 3 + seed as usize % 6;
            let (model, s) = random(n, seed);
            let id =
                identify_all(&s.primary_amplitudes(), &s.eigenvalues, model.dose(), n).unwrap();
            let truth = model.ode_matrix();
            for i in 0..n {
                for j in 0..n {
                    let t = truth.entries()[(i, j)];
                    let r = id.matrix.entries()[(i, j)];
                    if t == 0.0 {
                        assert_eq!(r, 0.0);
                    } else {
                        assert!(rel(r, t) < 1e-8, "seed {seed} n {n} ({i},{j}) {r} vs {t}");
                    }
                }
            }
            assert!(rel(id.k1e, model.k1e()) < 1e-8);
            for i in 0..n {
                for j in 0..n {
                    assert!((id.b[(i, j)] - s.b[(i, j)]).abs() < 1e-8 * model.dose());
                }
            }
            assert!(id.residuals.zero_triangle < 1e-10);
        }
    }

    #[test]
    fn scale_equivariance_in_dose() {
        let (model, s) = random(6, 5);
        let beta = s.primary_amplitudes();
        let x = identify_all(&beta, &s.eigenvalues, model.dose(), 6).unwrap();
        // power-of-two scaling is exact in binary, so results are bitwise equal
        let scaled: Vec<f64> = beta.iter().map(|b| b * 4.0).collect();
        let y = identify_all(&scaled, &s.eigenvalues, model.dose() * 4.0, 6).unwrap();
        assert_eq!(x.matrix, y.matrix);
        let scaled: Vec<f64> = beta.iter().map(|b| b * 7.3).collect();
        let z = identify_all(&scaled, &s.eigenvalues, model.dose() * 7.3, 6).unwrap();
        for i in 0..5 {
            assert!(rel(x.matrix.forward(i), z.matrix.forward(i)) < 1e-9);
            assert!(rel(x.matrix.backward(i), z.matrix.backward(i)) < 1e-9);
        }
    }

    #[test]
    fn json_output_is_rereadable() {
        let (model, s) = example();
        let id = identify_all(&s.primary_amplitudes(), &s.eigenvalues, model.dose(), 3).unwrap();
        let text = id.to_json().unwrap();
        for key in [
            "\"matrix\"",
            "\"B\"",
            "\"k1e\"",
            "\"condition_report\"",
            "\"max_eq22_residual\"",
        ] {
            assert!(text.contains(key), "missing {key}");
        }
        let back: IdentifiedSystem<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, id);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(identify_all(&[1.0, 0.0, 0.0], &[-1.0, -0.5, 0.1], 1.0, 3).is_err());
        assert!(identify_all(&[1.0, 0.0], &[-1.0, -0.5], 1.0, 2).is_err());
        assert!(identify_all(&[1.0, 0.0, 0.0], &[-1.0, -0.5, -0.5], 1.0, 3).is_err());
    }
}
