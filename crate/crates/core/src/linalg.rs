//! Numerically stable linear-algebra and density primitives.
//!
//! Everything downstream (estimators, simulators, asymptotics) evaluates
//! Gaussian densities in log domain through triangular solves against a
//! cached Cholesky factor. Feature dimensions up to a few hundred and
//! bags with thousands of instances make naive density products
//! underflow, so no routine here ever materializes a density or an
//! explicit covariance inverse on the hot path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge schedule tried in order when a factorization fails: powers of
/// ten from 1e-10 to 1e-4, preceded by no ridge at all.
pub const DEFAULT_RIDGE_SCHEDULE: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

const SYMMETRY_TOL: f64 = 1e-8;

/// Cholesky factor of a symmetric positive-definite matrix, possibly
/// after adding `ridge_added * I` to make the factorization succeed.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    dim: usize,
    lower: DMatrix<f64>,
    log_det: f64,
    ridge_added: f64,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// `log |Sigma + ridge*I|`, i.e. twice the log of the factor diagonal.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn ridge_added(&self) -> f64 {
        self.ridge_added
    }

    /// Solves `L y = b` in place; `buf` must have length `dim`.
    pub fn solve_lower_in_place(&self, buf: &mut [f64]) {
        let n = self.dim;
        debug_assert_eq!(buf.len(), n);
        let l = self.lower.as_slice(); // column-major
        for j in 0..n {
            let yj = buf[j] / l[j * n + j];
            buf[j] = yj;
            for i in (j + 1)..n {
                buf[i] -= l[j * n + i] * yj;
            }
        }
    }

    /// Squared Mahalanobis norm `(x-mu)' Sigma^{-1} (x-mu)` via one
    /// forward substitution. `buf` is scratch of length `dim`.
    pub fn mahalanobis_sq(&self, x: &[f64], mu: &[f64], buf: &mut [f64]) -> f64 {
        for i in 0..self.dim {
            buf[i] = x[i] - mu[i];
        }
        self.solve_lower_in_place(buf);
        buf.iter().map(|v| v * v).sum()
    }

    /// Solves `L' y = b` in place (back substitution).
    pub fn solve_upper_in_place(&self, buf: &mut [f64]) {
        let n = self.dim;
        debug_assert_eq!(buf.len(), n);
        let l = self.lower.as_slice();
        for j in (0..n).rev() {
            let mut s = buf[j];
            for i in (j + 1)..n {
                s -= l[j * n + i] * buf[i];
            }
            buf[j] = s / l[j * n + j];
        }
    }

    /// `(Sigma + ridge*I)^{-1} v` via forward and back substitution.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut buf: Vec<f64> = v.as_slice().to_vec();
        self.solve_lower_in_place(&mut buf);
        self.solve_upper_in_place(&mut buf);
        DVector::from_vec(buf)
    }

    /// Explicit inverse `(Sigma + ridge*I)^{-1}`, used only off the hot
    /// path (parameter flattening, posterior coefficients).
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim;
        let linv = self
            .lower
            .clone()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("factor diagonal is positive");
        let mut omega = linv.transpose() * linv;
        symmetrize(&mut omega);
        omega
    }

    /// `L * L'`, i.e. the matrix that was actually factorized.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Averages a matrix with its transpose in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone()).map(|c| c.unpack())
}

/// Factorizes a symmetric matrix, walking the ridge schedule until a
/// Cholesky succeeds. The first succeeding ridge is recorded.
pub fn spd_factorize(matrix: &DMatrix<f64>, ridge_schedule: &[f64]) -> Result<SpdFactor> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: matrix.ncols() });
    }
    let asym = max_asymmetry(matrix);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { max_asym: asym, tol: SYMMETRY_TOL });
    }
    for &ridge in ridge_schedule {
        let candidate = if ridge == 0.0 {
            matrix.clone()
        } else {
            let mut m = matrix.clone();
            for i in 0..n {
                m[(i, i)] += ridge;
            }
            m
        };
        if let Some(lower) = cholesky_lower(&candidate) {
            let log_det = 2.0 * (0..n).map(|i| lower[(i, i)].ln()).sum::<f64>();
            if !log_det.is_finite() {
                continue;
            }
            return Ok(SpdFactor { dim: n, lower, log_det, ridge_added: ridge });
        }
    }
    Err(Error::NotFactorizable {
        max_ridge: ridge_schedule.iter().copied().fold(0.0, f64::max),
    })
}

/// Convenience wrapper using [`DEFAULT_RIDGE_SCHEDULE`].
pub fn spd_factorize_default(matrix: &DMatrix<f64>) -> Result<SpdFactor> {
    spd_factorize(matrix, &DEFAULT_RIDGE_SCHEDULE)
}

/// Log density of `N(mu, Sigma)` at `x` where `factor` holds the
/// Cholesky of `Sigma`. Computed as
/// `-(p/2) log(2 pi) - log|Sigma|/2 - ||L^{-1}(x-mu)||^2 / 2`.
pub fn log_gaussian_density(x: &DVector<f64>, mu: &DVector<f64>, factor: &SpdFactor) -> Result<f64> {
    let p = factor.dim();
    if x.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: x.len() });
    }
    if mu.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: mu.len() });
    }
    let mut buf = vec![0.0; p];
    Ok(log_gaussian_density_buf(x.as_slice(), mu.as_slice(), factor, &mut buf))
}

/// Allocation-free variant used in the EM inner loops.
#[inline]
pub fn log_gaussian_density_buf(x: &[f64], mu: &[f64], factor: &SpdFactor, buf: &mut [f64]) -> f64 {
    let p = factor.dim() as f64;
    let quad = factor.mahalanobis_sq(x, mu, buf);
    -0.5 * p * (2.0 * std::f64::consts::PI).ln() - 0.5 * factor.log_det() - 0.5 * quad
}

/// Duplication matrix `D` with `vec(B) = D * vech(B)` for symmetric `B`.
///
/// `vech` stacks the lower triangle column by column; `vec` stacks full
/// columns. Each row of `D` has exactly one unit entry, so the matrix is
/// stored as the map from `vec` positions to `vech` positions.
#[derive(Debug, Clone)]
pub struct DuplicationMatrix {
    p: usize,
    /// For row `r` of `D` (a position in `vec`), the column holding its 1.
    row_to_vech: Vec<usize>,
}

/// Position of `(i, j)` with `i >= j` (0-based) inside `vech`.
#[inline]
pub fn vech_index(p: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < p);
    // Column-major lower triangle: j full columns of shrinking height.
    j * p + i - j * (j + 1) / 2
}

pub fn duplication_matrix(p: usize) -> DuplicationMatrix {
    assert!(p >= 1, "duplication matrix needs p >= 1");
    let mut row_to_vech = vec![0usize; p * p];
    for j in 0..p {
        for i in 0..p {
            let (lo, hi) = if i >= j { (j, i) } else { (i, j) };
            row_to_vech[j * p + i] = vech_index(p, hi, lo);
        }
    }
    DuplicationMatrix { p, row_to_vech }
}

impl DuplicationMatrix {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn vech_len(&self) -> usize {
        self.p * (self.p + 1) / 2
    }

    pub fn vec_len(&self) -> usize {
        self.p * self.p
    }

    /// `D * vech`: every output entry is a plain copy, hence exact.
    pub fn apply_vech(&self, vech: &[f64]) -> Vec<f64> {
        debug_assert_eq!(vech.len(), self.vech_len());
        self.row_to_vech.iter().map(|&k| vech[k]).collect()
    }

    /// `D' * v` for `v` of length `p^2`.
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.vec_len());
        let mut out = vec![0.0; self.vech_len()];
        for (r, &k) in self.row_to_vech.iter().enumerate() {
            out[k] += v[r];
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.vec_len(), self.vech_len());
        for (r, &k) in self.row_to_vech.iter().enumerate() {
            d[(r, k)] = 1.0;
        }
        d
    }
}

/// `vech` of a symmetric matrix (lower triangle, column-major).
pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    let p = m.nrows();
    let mut out = Vec::with_capacity(p * (p + 1) / 2);
    for j in 0..p {
        for i in j..p {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Symmetric matrix from its `vech`.
pub fn unvech(v: &[f64], p: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), p * (p + 1) / 2);
    let mut m = DMatrix::zeros(p, p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    m
}

/// `log(1 - exp(sum of log-complements))`, the log of
/// `1 - prod_m (1 - pi_m)` evaluated without leaving the log domain.
///
/// Inputs are `log(1 - pi_m) <= 0`. A total of exactly zero (all
/// `pi_m = 0`) yields `-inf`, i.e. probability zero.
pub fn log1m_prod_complement(log_complements: &[f64]) -> f64 {
    let s: f64 = log_complements.iter().sum();
    if s == 0.0 {
        return f64::NEG_INFINITY;
    }
    // log(1 - e^s) with the usual two-branch split at -ln 2.
    if s > -std::f64::consts::LN_2 {
        (-f64::exp_m1(s)).ln()
    } else {
        f64::ln_1p(-s.exp())
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(e^a + e^b)` without overflow.
#[inline]
pub fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + f64::ln_1p((lo - hi).exp())
}

/// Fixed-shape pairwise reduction over `n` leaves.
///
/// The combination tree depends only on `n` (leaves below
/// [`PAIRWISE_LEAF`] are folded left to right, blocks above are merged
/// pairwise), so results are bit-identical no matter how many rayon
/// threads execute the two halves.
pub const PAIRWISE_LEAF: usize = 4;

pub fn pairwise_reduce<T, L, C>(n: usize, leaf: &L, combine: &C) -> Option<T>
where
    T: Send,
    L: Fn(usize) -> T + Sync,
    C: Fn(T, T) -> T + Sync,
{
    fn go<T, L, C>(lo: usize, hi: usize, leaf: &L, combine: &C) -> T
    where
        T: Send,
        L: Fn(usize) -> T + Sync,
        C: Fn(T, T) -> T + Sync,
    {
        if hi - lo <= PAIRWISE_LEAF {
            let mut acc = leaf(lo);
            for i in (lo + 1)..hi {
                acc = combine(acc, leaf(i));
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            let (a, b) = rayon::join(
                || go(lo, mid, leaf, combine),
                || go(mid, hi, leaf, combine),
            );
            combine(a, b)
        }
    }
    if n == 0 {
        None
    } else {
        Some(go(0, n, leaf, combine))
    }
}
