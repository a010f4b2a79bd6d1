//! Starting values for exponential-sum fits: Prony linear prediction on a
//! uniformly resampled copy of the data, and a Hankel singular-value profile.

use crate::error::{Error, Result};
use crate::linalg::{least_squares, monic_polynomial_roots, symmetric_eigenvalues, Matrix};
use crate::scalar::Scalar;

/// Resamples `(times, values)` onto `count` uniform points spanning the data.
/// Interpolates `ln x` linearly when every value is positive, `x` otherwise.
pub fn resample_uniform<T: Scalar>(times: &[T], values: &[T], count: usize) -> (T, Vec<T>) {
    let m = times.len();
    let t0 = times[0];
    let t1 = times[m - 1];
    let step = (t1 - t0) / T::lit((count - 1) as f64);
    let positive = values.iter().all(|&v| v > T::zero());
    let transformed: Vec<T> = if positive {
        values.iter().map(|v| v.ln()).collect()
    } else {
        values.to_vec()
    };
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let t = if k + 1 == count {
            t1
        } else {
            t0 + step * T::lit(k as f64)
        };
        while seg + 2 < m && times[seg + 1] < t {
            seg += 1;
        }
        let (ta, tb) = (times[seg], times[seg + 1]);
        let w = ((t - ta) / (tb - ta)).max(T::zero()).min(T::one());
        let v = transformed[seg] + w * (transformed[seg + 1] - transformed[seg]);
        out.push(if positive { v.exp() } else { v });
    }
    (step, out)
}

/// Prony estimate of `n` decay rates from uniform samples with spacing `step`.
/// Roots are mapped onto strictly negative, distinct exponents sorted ascending.
pub fn prony_exponents<T: Scalar>(samples: &[T], step: T, n: usize) -> Result<Vec<T>> {
    let m = samples.len();
    if m < 2 * n + 1 {
        return Err(Error::InsufficientData {
            samples: m,
            params: 2 * n,
        });
    }
    // x[k+n] + c_1 x[k+n-1] + … + c_n x[k] = 0
    let rows = m - n;
    let a = Matrix::from_fn(rows, n, |r, c| samples[r + n - 1 - c]);
    let rhs: Vec<T> = (0..rows).map(|r| -samples[r + n]).collect();
    let coeffs = least_squares(&a, &rhs)?;
    let roots = monic_polynomial_roots(&coeffs);
    let mut lambdas: Vec<T> = roots
        .iter()
        .map(|z| {
            let modulus = z.norm().max(T::lit(1e-8)).min(T::one() - T::lit(1e-6));
            modulus.ln() / step
        })
        .collect();
    lambdas.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    Ok(separate(lambdas, T::lit(0.05)))
}

/// Pushes sorted exponents apart so neighbours differ by at least `min_ratio`
/// of their magnitude, keeping all of them strictly negative.
pub fn separate<T: Scalar>(mut lambdas: Vec<T>, min_ratio: T) -> Vec<T> {
    let n = lambdas.len();
    if n == 0 {
        return lambdas;
    }
    let scale = lambdas.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let floor = scale.max(T::lit(1e-12)) * T::lit(1e-6);
    if lambdas[n - 1] > -floor {
        lambdas[n - 1] = -floor;
    }
    for i in (0..n - 1).rev() {
        let limit = lambdas[i + 1] * (T::one() + min_ratio);
        if lambdas[i] > limit {
            lambdas[i] = limit;
        }
    }
    lambdas
}

/// Singular values (descending) of the Hankel matrix of uniform samples,
/// normalized by the largest.
pub fn hankel_singular_values<T: Scalar>(samples: &[T]) -> Result<Vec<T>> {
    let m = samples.len();
    if m < 3 {
        return Err(Error::InsufficientData {
            samples: m,
            params: 3,
        });
    }
    let rows = m.div_ceil(2);
    let cols = m + 1 - rows;
    let h = Matrix::from_fn(rows, cols, |r, c| samples[r + c]);
    let gram = h.transpose().matmul(&h);
    let mut values: Vec<T> = symmetric_eigenvalues(&gram)?
        .into_iter()
        .map(|v| v.max(T::zero()).sqrt())
        .collect();
    values.reverse();
    let top = values[0];
    if top > T::zero() {
        for v in &mut values {
            *v = *v / top;
        }
    }
    Ok(values)
}
