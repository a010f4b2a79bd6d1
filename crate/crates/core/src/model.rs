//! Reversible catenary systems and their ODE matrices.
//!
//! A catenary system is a chain of `n` compartments. Compartment `i` sends
//! material forward to `i+1` at rate `k_{i(i+1)}` and back to `i-1` at rate
//! `k_{i(i-1)}`; material leaves the system only from compartment 1, at rate
//! `k_{1e}`.
//!
//! [`OdeMatrix`] stores the matrix `M` of `x'(t) = M x(t)` with receiving
//! compartments on the rows. The donor-by-receiver coefficient matrix
//! `A = (k_{ij})` is its transpose and is available through
//! [`OdeMatrix::coefficient_matrix`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, Matrix};
use crate::scalar::Scalar;

/// Default smallest accepted rate constant.
pub const DEFAULT_RATE_FLOOR: f64 = 1e-12;

/// Ground-truth rate constants and dose of a reversible catenary system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRecord<T>", into = "ModelRecord<T>")]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct CatenaryModel<T: Scalar> {
    a: T,
    forward: Vec<T>,
    backward: Vec<T>,
    k1e: T,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
struct ModelRecord<T: Scalar> {
    n: usize,
    a: T,
    forward: Vec<T>,
    backward: Vec<T>,
    k1e: T,
}

impl<T: Scalar> TryFrom<ModelRecord<T>> for CatenaryModel<T> {
    type Error = Error;
    fn try_from(r: ModelRecord<T>) -> Result<Self> {
        if r.forward.len() + 1 != r.n || r.backward.len() + 1 != r.n {
            return Err(Error::Validation(format!(
                "n = {} requires {} forward and backward rates, got {} and {}",
                r.n,
                r.n.saturating_sub(1),
                r.forward.len(),
                r.backward.len()
            )));
        }
        CatenaryModel::new(r.a, r.forward, r.backward, r.k1e)
    }
}

impl<T: Scalar> From<CatenaryModel<T>> for ModelRecord<T> {
    fn from(m: CatenaryModel<T>) -> Self {
        Self {
            n: m.n(),
            a: m.a,
            forward: m.forward,
            backward: m.backward,
            k1e: m.k1e,
        }
    }
}

fn check_positive<T: Scalar>(name: String, value: T, floor: T) -> Result<()> {
    if value.is_finite() && value > floor {
        Ok(())
    } else {
        Err(Error::NonPositiveRate {
            name,
            value: value.to_f64_lossy(),
            floor: floor.to_f64_lossy(),
        })
    }
}

impl<T: Scalar> CatenaryModel<T> {
    /// Builds a validated model with the default rate floor.
    pub fn new(a: T, forward: Vec<T>, backward: Vec<T>, k1e: T) -> Result<Self> {
        Self::with_floor(a, forward, backward, k1e, T::lit(DEFAULT_RATE_FLOOR))
    }

    /// Builds a validated model; every rate must exceed `floor`.
    pub fn with_floor(a: T, forward: Vec<T>, backward: Vec<T>, k1e: T, floor: T) -> Result<Self> {
        let n = forward.len() + 1;
        if n < 3 {
            return Err(Error::Validation(format!(
                "a catenary system needs n >= 3 compartments, got n = {n}"
            )));
        }
        if backward.len() != forward.len() {
            return Err(Error::Validation(format!(
                "{} forward rates but {} backward rates",
                forward.len(),
                backward.len()
            )));
        }
        if !(a.is_finite() && a > T::zero()) {
            return Err(Error::Validation(format!("dose a = {a} must be positive")));
        }
        for (i, &k) in forward.iter().enumerate() {
            check_positive(format!("k_{}{}", i + 1, i + 2), k, floor)?;
        }
        for (i, &k) in backward.iter().enumerate() {
            check_positive(format!("k_{}{}", i + 2, i + 1), k, floor)?;
        }
        check_positive("k_1e".to_string(), k1e, floor)?;
        Ok(Self {
            a,
            forward,
            backward,
            k1e,
        })
    }

    pub fn n(&self) -> usize {
        self.forward.len() + 1
    }

    pub fn dose(&self) -> T {
        self.a
    }

    /// `forward()[i]` is `k_{(i+1)(i+2)}` in 1-based compartment numbering.
    pub fn forward(&self) -> &[T] {
        &self.forward
    }

    /// `backward()[i]` is `k_{(i+2)(i+1)}` in 1-based compartment numbering.
    pub fn backward(&self) -> &[T] {
        &self.backward
    }

    pub fn k1e(&self) -> T {
        self.k1e
    }

    /// Same rates with a different dose.
    pub fn with_dose(&self, a: T) -> Result<Self> {
        Self::new(a, self.forward.clone(), self.backward.clone(), self.k1e)
    }

    pub fn ode_matrix(&self) -> OdeMatrix<T> {
        build_ode_matrix(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Tridiagonal matrix `M` with `x'(t) = M x(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeMatrix<T: Scalar> {
    entries: Matrix<T>,
}

/// Assembles the ODE matrix of a validated model.
pub fn build_ode_matrix<T: Scalar>(model: &CatenaryModel<T>) -> OdeMatrix<T> {
    OdeMatrix::from_rates_unchecked(model.forward(), model.backward(), model.k1e())
}

impl<T: Scalar> OdeMatrix<T> {
    /// Assembles `M` from chain rates without checking their signs. Used to
    /// synthesize systems outside the reversible class.
    pub fn from_rates_unchecked(forward: &[T], backward: &[T], k1e: T) -> Self {
        let n = forward.len() + 1;
        assert_eq!(backward.len(), forward.len());
        let mut m = Matrix::zeros(n, n);
        for i in 0..n - 1 {
            // row = receiver, column = donor
            m[(i + 1, i)] = forward[i];
            m[(i, i + 1)] = backward[i];
        }
        m[(0, 0)] = -(forward[0] + k1e);
        for j in 1..n - 1 {
            m[(j, j)] = -(backward[j - 1] + forward[j]);
        }
        m[(n - 1, n - 1)] = -backward[n - 2];
        Self { entries: m }
    }

    /// Wraps a dense matrix, checking the tridiagonal pattern and that
    /// off-diagonal entries are nonnegative.
    pub fn from_entries(entries: Matrix<T>) -> Result<Self> {
        let n = entries.rows();
        if entries.cols() != n || n < 2 {
            return Err(Error::Validation(
                "ODE matrix must be square with n >= 2".into(),
            ));
        }
        for i in 0..n {
            for j in 0..n {
                let v = entries[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Validation(format!("entry ({i},{j}) is not finite")));
                }
                let band = i.abs_diff(j);
                if band >= 2 && v != T::zero() {
                    return Err(Error::Validation(format!(
                        "entry ({i},{j}) = {v} breaks the tridiagonal pattern"
                    )));
                }
                if band == 1 && v < T::zero() {
                    return Err(Error::Validation(format!(
                        "off-diagonal entry ({i},{j}) = {v} is negative"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Matrix<T> {
        &self.entries
    }

    /// `k_{(i+1)(i+2)}` for 0-based `i`.
    pub fn forward(&self, i: usize) -> T {
        self.entries[(i + 1, i)]
    }

    /// `k_{(i+2)(i+1)}` for 0-based `i`.
    pub fn backward(&self, i: usize) -> T {
        self.entries[(i, i + 1)]
    }

    pub fn diagonal(&self, i: usize) -> T {
        self.entries[(i, i)]
    }

    /// Coefficient `k_{ij}` with 1-based donor `i` and receiver `j`.
    pub fn k(&self, i: usize, j: usize) -> T {
        self.entries[(j - 1, i - 1)]
    }

    /// Excretion rate implied by the first column: `-Σ_i M[i][0]`.
    pub fn k1e(&self) -> T {
        -self.column_sum(0)
    }

    pub fn column_sum(&self, j: usize) -> T {
        compensated_sum((0..self.n()).map(|i| self.entries[(i, j)]))
    }

    /// The donor-by-receiver matrix `A = (k_{ij})`, i.e. `Mᵀ`.
    pub fn coefficient_matrix(&self) -> Matrix<T> {
        self.entries.transpose()
    }

    /// Products `M[i+1][i]·M[i][i+1]` of opposite off-diagonal entries.
    pub fn off_diagonal_products(&self) -> Vec<T> {
        (0..self.n() - 1)
            .map(|i| self.forward(i) * self.backward(i))
            .collect()
    }

    /// Checks that every chain rate and the excretion rate exceed `floor`.
    pub fn validate_reversible(&self, floor: T) -> Result<()> {
        for i in 0..self.n() - 1 {
            check_positive(format!("k_{}{}", i + 1, i + 2), self.forward(i), floor)?;
            check_positive(format!("k_{}{}", i + 2, i + 1), self.backward(i), floor)?;
        }
        check_positive("k_1e".to_string(), self.k1e(), floor)
    }

    /// Recovers the model (rates and dose) this matrix was built from.
    pub fn to_model(&self, a: T) -> Result<CatenaryModel<T>> {
        let n = self.n();
        CatenaryModel::new(
            a,
            (0..n - 1).map(|i| self.forward(i)).collect(),
            (0..n - 1).map(|i| self.backward(i)).collect(),
            self.k1e(),
        )
    }
}

/// Closed interval `[lo, hi]` of positive reals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveRange {
    pub lo: f64,
    pub hi: f64,
}

impl PositiveRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo {
            Ok(Self { lo, hi })
        } else {
            Err(Error::Validation(format!(
                "range [{lo}, {hi}] must be nonempty and strictly positive"
            )))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi == self.lo {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

impl std::str::FromStr for PositiveRange {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(',')
            .or_else(|| s.split_once(':'))
            .ok_or_else(|| Error::Validation(format!("range '{s}' must look like lo,hi")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Validation(format!("bad range bound '{v}': {e}")))
        };
        Self::new(parse(lo)?, parse(hi)?)
    }
}

/// Draws a reproducible random reversible model. Every rate (forward,
/// backward and excretion) is uniform on `rate_range`; the dose is uniform
/// on `dose_range`.
pub fn random_model<T: Scalar>(
    n: usize,
    seed: u64,
    rate_range: PositiveRange,
    dose_range: PositiveRange,
) -> Result<CatenaryModel<T>> {
    if n < 3 {
        return Err(Error::Validation(format!(
            "a catenary system needs n >= 3 compartments, got n = {n}"
        )));
    }
    let rate_range = PositiveRange::new(rate_range.lo, rate_range.hi)?;
    let dose_range = PositiveRange::new(dose_range.lo, dose_range.hi)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = dose_range.sample(&mut rng);
    let forward: Vec<T> = (0..n - 1)
        .map(|_| T::lit(rate_range.sample(&mut rng)))
        .collect();
    let backward: Vec<T> = (0..n - 1)
        .map(|_| T::lit(rate_range.sample(&mut rng)))
        .collect();
    let k1e = T::lit(rate_range.sample(&mut rng));
    CatenaryModel::new(T::lit(a), forward, backward, k1e)
}
