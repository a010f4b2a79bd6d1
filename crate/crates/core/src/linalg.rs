//! Small dense linear algebra kernels: compensated summation, a row-major
//! matrix, Householder least squares, and symmetric eigensolvers.

use std::ops::{Index, IndexMut};

use num_complex::Complex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Neumaier-compensated sum.
pub fn compensated_sum<T: Scalar, I: IntoIterator<Item = T>>(terms: I) -> T {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp = comp + ((sum - t) + x);
        } else {
            comp = comp + ((x - t) + sum);
        }
        sum = t;
    }
    sum + comp
}

/// Compensated sum together with the sum of absolute values of its terms.
pub fn compensated_sum_with_magnitude<T: Scalar, I: IntoIterator<Item = T>>(terms: I) -> (T, T) {
    let mut abs = T::zero();
    let sum = compensated_sum(terms.into_iter().inspect(|x| abs = abs + x.abs()));
    (sum, abs)
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| compensated_sum(self.row(i).iter().zip(v).map(|(&a, &b)| a * b)))
            .collect()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        Self::from_fn(self.rows, other.cols, |i, j| {
            compensated_sum((0..self.cols).map(|k| self[(i, k)] * other[(k, j)]))
        })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Scalar> Serialize for Matrix<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for Matrix<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<T>> = Vec::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Householder QR factorization of a tall matrix (rows >= cols).
#[derive(Debug, Clone)]
pub struct Qr<T> {
    packed: Matrix<T>,
    rdiag: Vec<T>,
}

impl<T: Scalar> Qr<T> {
    pub fn new(a: &Matrix<T>) -> Result<Self> {
        let (m, n) = (a.rows(), a.cols());
        if m < n {
            return Err(Error::LinearAlgebra(format!(
                "QR needs rows >= cols, got {m}x{n}"
            )));
        }
        let mut qr = a.clone();
        let mut rdiag = vec![T::zero(); n];
        for k in 0..n {
            let mut nrm = T::zero();
            for i in k..m {
                nrm = nrm.hypot(qr[(i, k)]);
            }
            if nrm != T::zero() {
                if qr[(k, k)] < T::zero() {
                    nrm = -nrm;
                }
                for i in k..m {
                    qr[(i, k)] = qr[(i, k)] / nrm;
                }
                qr[(k, k)] = qr[(k, k)] + T::one();
                for j in (k + 1)..n {
                    let s = compensated_sum((k..m).map(|i| qr[(i, k)] * qr[(i, j)]));
                    let s = -s / qr[(k, k)];
                    for i in k..m {
                        qr[(i, j)] = qr[(i, j)] + s * qr[(i, k)];
                    }
                }
            }
            rdiag[k] = -nrm;
        }
        Ok(Self { packed: qr, rdiag })
    }

    pub fn cols(&self) -> usize {
        self.rdiag.len()
    }

    /// Ratio of smallest to largest |R_kk|, a cheap rank indicator.
    pub fn rcond_estimate(&self) -> T {
        let max = self.rdiag.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        let min = self.rdiag.iter().fold(T::infinity(), |m, x| m.min(x.abs()));
        if max == T::zero() {
            T::zero()
        } else {
            min / max
        }
    }

    /// Overwrites `b` with Qᵀ b.
    pub fn apply_qt(&self, b: &mut [T]) {
        let m = self.packed.rows();
        for k in 0..self.cols() {
            if self.packed[(k, k)] == T::zero() {
                continue;
            }
            let s = compensated_sum((k..m).map(|i| self.packed[(i, k)] * b[i]));
            let s = -s / self.packed[(k, k)];
            for (i, bi) in b.iter_mut().enumerate().take(m).skip(k) {
                *bi = *bi + s * self.packed[(i, k)];
            }
        }
    }

    /// Overwrites `b` with Q b.
    pub fn apply_q(&self, b: &mut [T]) {
        let m = self.packed.rows();
        for k in (0..self.cols()).rev() {
            if self.packed[(k, k)] == T::zero() {
                continue;
            }
            let s = compensated_sum((k..m).map(|i| self.packed[(i, k)] * b[i]));
            let s = -s / self.packed[(k, k)];
            for (i, bi) in b.iter_mut().enumerate().take(m).skip(k) {
                *bi = *bi + s * self.packed[(i, k)];
            }
        }
    }

    fn r(&self, i: usize, j: usize) -> T {
        if i == j {
            self.rdiag[i]
        } else {
            self.packed[(i, j)]
        }
    }

    fn check_rank(&self) -> Result<()> {
        if self.rcond_estimate() <= T::epsilon() {
            Err(Error::LinearAlgebra(
                "rank-deficient least-squares system".into(),
            ))
        } else {
            Ok(())
        }
    }

    /// Solves R x = y for the leading `cols` entries of y.
    pub fn solve_r(&self, y: &[T]) -> Result<Vec<T>> {
        self.check_rank()?;
        let n = self.cols();
        let mut x = y[..n].to_vec();
        for k in (0..n).rev() {
            let s = compensated_sum(((k + 1)..n).map(|j| self.r(k, j) * x[j]));
            x[k] = (x[k] - s) / self.rdiag[k];
        }
        Ok(x)
    }

    /// Solves Rᵀ x = y.
    pub fn solve_rt(&self, y: &[T]) -> Result<Vec<T>> {
        self.check_rank()?;
        let n = self.cols();
        let mut x = y[..n].to_vec();
        for k in 0..n {
            let s = compensated_sum((0..k).map(|j| self.r(j, k) * x[j]));
            x[k] = (x[k] - s) / self.rdiag[k];
        }
        Ok(x)
    }

    /// Least-squares solution of min ‖A x − b‖.
    pub fn solve_least_squares(&self, b: &[T]) -> Result<Vec<T>> {
        let mut y = b.to_vec();
        self.apply_qt(&mut y);
        self.solve_r(&y)
    }
}

/// Solves the least-squares problem min ‖A x − b‖ by Householder QR.
pub fn least_squares<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    if a.rows() != b.len() {
        return Err(Error::InvalidInput(
            "least-squares dimension mismatch".into(),
        ));
    }
    Qr::new(a)?.solve_least_squares(b)
}

/// Eigen-decomposition of a symmetric tridiagonal matrix by implicit QL with
/// Wilkinson shifts. Returns eigenvalues ascending and the orthogonal matrix
/// whose column `i` is the eigenvector of eigenvalue `i`.
pub fn symmetric_tridiagonal_eigen<T: Scalar>(
    diagonal: &[T],
    off_diagonal: &[T],
) -> Result<(Vec<T>, Matrix<T>)> {
    let n = diagonal.len();
    if n == 0 || off_diagonal.len() + 1 != n {
        return Err(Error::InvalidInput(
            "tridiagonal eigenproblem needs n diagonal and n-1 off-diagonal entries".into(),
        ));
    }
    let mut d = diagonal.to_vec();
    let mut e: Vec<T> = off_diagonal.iter().copied().chain([T::zero()]).collect();
    let mut z = Matrix::identity(n);
    let two = T::lit(2.0);
    let eps = T::epsilon();

    for l in 0..n {
        let mut iterations = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= eps * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > 64 {
                return Err(Error::LinearAlgebra(
                    "tridiagonal QL iteration did not converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (two * e[l]);
            let mut r = g.hypot(T::one());
            g = d[m] - d[l] + e[l] / (g + if g >= T::zero() { r.abs() } else { -r.abs() });
            let (mut s, mut c, mut p) = (T::one(), T::one(), T::zero());
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == T::zero() {
                    d[i + 1] = d[i + 1] - p;
                    e[m] = T::zero();
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + two * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    let f = z[(k, i + 1)];
                    z[(k, i + 1)] = s * z[(k, i)] + c * f;
                    z[(k, i)] = c * z[(k, i)] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] = d[l] - p;
            e[l] = g;
            e[m] = T::zero();
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = Matrix::from_fn(n, n, |row, col| z[(row, order[col])]);
    Ok((values, vectors))
}

/// Eigenvalues (ascending) of a dense symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<T: Scalar>(a: &Matrix<T>) -> Result<Vec<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::InvalidInput(
            "symmetric eigenvalues need a square matrix".into(),
        ));
    }
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let total: T = m.data.iter().map(|&x| x * x).sum();
        if off <= T::epsilon() * T::epsilon() * total {
            let mut values: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            return Ok(values);
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    Err(Error::LinearAlgebra(
        "Jacobi sweeps did not converge".into(),
    ))
}

/// Roots of the monic polynomial zⁿ + c[0] zⁿ⁻¹ + … + c[n−1] (Aberth–Ehrlich).
pub fn monic_polynomial_roots<T: Scalar>(coeffs: &[T]) -> Vec<Complex<T>> {
    let n = coeffs.len();
    if n == 0 {
        return Vec::new();
    }
    let eval = |z: Complex<T>| {
        let mut p = Complex::new(T::one(), T::zero());
        let mut dp = Complex::new(T::zero(), T::zero());
        for &c in coeffs {
            dp = dp * z + p;
            p = p * z + Complex::new(c, T::zero());
        }
        (p, dp)
    };
    let radius = T::one() + coeffs.iter().fold(T::zero(), |m, c| m.max(c.abs()));
    let mut roots: Vec<Complex<T>> = (0..n)
        .map(|k| {
            let angle = T::lit(2.0) * T::PI() * T::lit(k as f64 + 0.25) / T::lit(n as f64);
            Complex::from_polar(radius * T::lit(0.5), angle)
        })
        .collect();
    for _ in 0..500 {
        let mut max_step = T::zero();
        for k in 0..n {
            let (p, dp) = eval(roots[k]);
            if p.norm() == T::zero() {
                continue;
            }
            let ratio = p / dp;
            let mut repulsion = Complex::new(T::zero(), T::zero());
            for (j, &rj) in roots.iter().enumerate() {
                if j != k {
                    repulsion = repulsion + Complex::new(T::one(), T::zero()) / (roots[k] - rj);
                }
            }
            let step = ratio / (Complex::new(T::one(), T::zero()) - ratio * repulsion);
            if step.norm().is_finite() {
                roots[k] = roots[k] - step;
                max_step = max_step.max(step.norm() / (T::one() + roots[k].norm()));
            }
        }
        if max_step <= T::epsilon() * T::lit(4.0) {
            break;
        }
    }
    roots
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let terms = [1.0e16, 1.0, -1.0e16, 1.0];
        assert_eq!(compensated_sum(terms), 2.0);
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let a = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![1.0, 2.0],
            vec![1.0, 3.0],
        ])
        .unwrap();
        let b = [1.0, 3.0, 5.0, 7.5];
        let x: Vec<f64> = least_squares(&a, &b).unwrap();
        // normal equations: [4 6; 6 14] x = [16.5, 35.5]
        let det = 4.0 * 14.0 - 36.0;
        let x0 = (14.0 * 16.5 - 6.0 * 35.5) / det;
        let x1 = (4.0 * 35.5 - 6.0 * 16.5) / det;
        assert!((x[0] - x0).abs() < 1e-13 && (x[1] - x1).abs() < 1e-13);
    }

    #[test]
    fn q_and_qt_are_inverse() {
        let a = Matrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64).sin());
        let qr = Qr::new(&a).unwrap();
        let v = vec![0.3, -1.0, 2.0, 0.5, 0.1];
        let mut w = v.clone();
        qr.apply_qt(&mut w);
        qr.apply_q(&mut w);
        for (x, y) in v.iter().zip(&w) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_deficient_system_is_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(least_squares(&a, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn tridiagonal_eigen_of_path_laplacian() {
        // eigenvalues of tridiag(-1, 2, -1) are 2 - 2 cos(k pi / (n+1))
        let n = 7;
        let (vals, vecs) = symmetric_tridiagonal_eigen(&vec![2.0; n], &vec![-1.0; n - 1]).unwrap();
        for (k, v) in vals.iter().enumerate() {
            let expect = 2.0 - 2.0 * ((k + 1) as f64 * std::f64::consts::PI / (n + 1) as f64).cos();
            assert!((v - expect).abs() < 1e-13, "{v} vs {expect}");
        }
        let qtq = vecs.transpose().matmul(&vecs);
        for i in 0..n {
            for j in 0..n {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[(i, j)] - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn tridiagonal_eigen_handles_split_matrix() {
        let (vals, _) = symmetric_tridiagonal_eigen(&[1.0, 3.0, 5.0], &[0.0, 0.0]).unwrap();
        assert_eq!(vals, vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn jacobi_eigenvalues_of_small_matrix() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let v: Vec<f64> = symmetric_eigenvalues(&a).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn polynomial_roots_of_known_cubic() {
        // (z - 0.5)(z - 0.25)(z + 2) = z^3 + 1.25 z^2 - 1.375 z + 0.25
        let roots = monic_polynomial_roots(&[1.25, -1.375, 0.25]);
        let mut re: Vec<f64> = roots.iter().map(|z| z.re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (r, e) in re.iter().zip([-2.0, 0.25, 0.5]) {
            assert!((r - e).abs() < 1e-12, "{r} vs {e}");
        }
        assert!(roots.iter().all(|z| z.im.abs() < 1e-12));
    }
}
