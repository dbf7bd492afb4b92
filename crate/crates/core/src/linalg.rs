//! Dense linear-algebra primitives shared by every estimator.
//!
//! Least-squares problems are solved through a Householder QR factorization of
//! the design; normal equations are never formed for a solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Smallest-to-largest singular value ratio below which a design is treated as
/// rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Eigenvalue floor used for symmetric matrix powers.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Design matrix `X` (n x d) and response `Y` (n) of the mean-shift model
/// `Y = mu + X beta + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vector,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vector) -> Result<Self> {
        let (n, d) = x.shape();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                what: "response length",
                expected: n,
                found: y.len(),
            });
        }
        if d == 0 {
            return Err(Error::InvalidParameter("design has no columns".into()));
        }
        if n <= d {
            return Err(Error::EmptySubset { size: n, dim: d });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response"));
        }
        Ok(Self { x, y })
    }

    /// Builds a dataset from row-major covariate rows.
    pub fn from_rows(rows: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                what: "covariate row",
                expected: d,
                found: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Matrix::from_row_slice(n, d, &flat), Vector::from_column_slice(y))
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Vector {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// `Y - X beta`.
    pub fn residuals(&self, beta: &Vector) -> Result<Vector> {
        check_len("coefficient vector", self.d(), beta.len())?;
        Ok(&self.y - &self.x * beta)
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, found })
    }
}

/// Sorted, distinct observation indices within `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSet {
    indices: Vec<usize>,
}

impl IndexSet {
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= n {
                return Err(Error::InvalidParameter(format!(
                    "index {last} out of range for {n} observations"
                )));
            }
        }
        Ok(Self { indices })
    }

    pub fn all(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
        }
    }

    /// Indices `i < n` for which `keep(i)` holds.
    pub fn from_predicate(n: usize, mut keep: impl FnMut(usize) -> bool) -> Self {
        Self {
            indices: (0..n).filter(|&i| keep(i)).collect(),
        }
    }

    pub fn complement(&self, n: usize) -> Self {
        Self::from_predicate(n, |i| !self.contains(i))
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

/// A QR factorization of a fixed design, reusable across many right-hand
/// sides. The alternating solver refits `Y - mu` against the same `X` on every
/// iteration, so the factorization is computed once per fit.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    qr: nalgebra::linalg::QR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    r: Matrix,
}

impl LeastSquares {
    pub fn new(x: &Matrix) -> Result<Self> {
        let (n, d) = x.shape();
        if n <= d {
            return Err(Error::EmptySubset { size: n, dim: d });
        }
        let qr = x.clone().qr();
        let r = qr.r();
        // X and R share singular values.
        let sv = r.singular_values();
        let max = sv.max();
        let min = sv.min();
        let ratio = if max > 0.0 { min / max } else { 0.0 };
        if !(ratio >= RANK_TOLERANCE) {
            return Err(Error::SingularDesign { ratio });
        }
        Ok(Self { qr, r })
    }

    pub fn nrows(&self) -> usize {
        self.qr.q().nrows()
    }

    /// Minimizer of `||rhs - X beta||^2`.
    pub fn solve(&self, rhs: &Vector) -> Result<Vector> {
        let n = self.nrows();
        check_len("right-hand side", n, rhs.len())?;
        let d = self.r.ncols();
        let mut qtb = Matrix::from_column_slice(n, 1, rhs.as_slice());
        self.qr.q_tr_mul(&mut qtb);
        let head = Vector::from_iterator(d, qtb.column(0).iter().take(d).copied());
        self.r
            .solve_upper_triangular(&head)
            .ok_or(Error::SingularDesign { ratio: 0.0 })
    }

    /// `(X^T X)^{-1} v` via `R^{-1} R^{-T} v`.
    pub fn gram_solve(&self, v: &Vector) -> Result<Vector> {
        check_len("gram right-hand side", self.r.ncols(), v.len())?;
        let w = self
            .r
            .tr_solve_upper_triangular(v)
            .ok_or(Error::SingularDesign { ratio: 0.0 })?;
        self.r
            .solve_upper_triangular(&w)
            .ok_or(Error::SingularDesign { ratio: 0.0 })
    }
}

/// Ordinary least squares of `y` on `x`.
pub fn ols_solve(x: &Matrix, y: &Vector) -> Result<Vector> {
    check_len("response length", x.nrows(), y.len())?;
    LeastSquares::new(x)?.solve(y)
}

/// OLS restricted to the rows in `subset`.
pub fn subset_ols(data: &Dataset, subset: &IndexSet) -> Result<Vector> {
    subset_ols_with(data.x(), data.y(), subset)
}

pub(crate) fn subset_ols_with(x: &Matrix, y: &Vector, subset: &IndexSet) -> Result<Vector> {
    let d = x.ncols();
    if subset.len() <= d {
        return Err(Error::EmptySubset {
            size: subset.len(),
            dim: d,
        });
    }
    if subset.as_slice().last().is_some_and(|&i| i >= x.nrows()) {
        return Err(Error::InvalidParameter("subset index out of range".into()));
    }
    let xs = x.select_rows(subset.as_slice());
    let ys = y.select_rows(subset.as_slice());
    ols_solve(&xs, &ys)
}

/// `(1/n) X^T X`.
pub fn sample_gram(x: &Matrix) -> Result<Matrix> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidParameter("empty design".into()));
    }
    let mut g = x.tr_mul(x) / n as f64;
    // tr_mul accumulates the two triangles identically, but force exact symmetry.
    let d = g.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// `m^p` for a symmetric positive semidefinite `m`, through its eigendecomposition.
///
/// Eigenvalues below `EIGEN_FLOOR * max(1, largest)` are clamped to the floor.
/// Negative powers of a matrix with a clamped eigenvalue are rejected.
pub fn sym_power(m: &Matrix, power: f64) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            what: "square matrix",
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    let eig = m.clone().symmetric_eigen();
    let largest = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let floor = EIGEN_FLOOR * largest.max(1.0);
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < floor && power < 0.0 {
            return Err(Error::SingularGram);
        }
        let f = lam.max(floor).powf(power);
        scaled.column_mut(k).scale_mut(f);
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}

/// Inverse of a symmetric positive definite matrix.
pub fn sym_inverse(m: &Matrix) -> Result<Matrix> {
    sym_power(m, -1.0)
}
