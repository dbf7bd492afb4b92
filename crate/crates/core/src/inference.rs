//! Two-step refitting and Wald-type confidence sets for the structural
//! coefficients.
//!
//! The first-stage fit flags observations with `mu_i != 0`; the two-step
//! estimator refits OLS on the remaining rows `I0 = {i : mu_i = 0}` and the
//! noise scale is estimated from the same rows.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::linalg::{
    check_len, sample_gram, subset_ols, sym_inverse, sym_power, Dataset, IndexSet, Matrix, Vector, RANK_TOLERANCE,
};
use crate::stats::{chi_upper_quantile, z_two_sided};

/// Denominator used for the residual scale of the refit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum SigmaDenominator {
    /// `#(I0)`.
    #[default]
    Selected,
    /// `#(I0) - d`.
    SelectedMinusDim,
}

/// Sample size that scales the interval half-widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum IntervalScale {
    /// `m = #(I0)`, the number of rows the refit actually used.
    #[default]
    Selected,
    /// The full sample size `n`.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepResult {
    pub beta_tilde: Vector,
    /// `I0`: rows whose first-stage `mu_i` is exactly zero.
    pub selected: IndexSet,
    pub m: usize,
    pub n: usize,
    pub sigma_hat: f64,
    /// `(1/n) X^T X` over all rows.
    pub gram_hat: Matrix,
}

impl TwoStepResult {
    fn scale_size(&self, scale: IntervalScale) -> f64 {
        match scale {
            IntervalScale::Selected => self.m as f64,
            IntervalScale::Full => self.n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub center: f64,
    pub half_width: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    /// Closed interval membership.
    pub fn contains(&self, value: f64) -> bool {
        (value - self.center).abs() <= self.half_width
    }
}

/// A fixed `q x d` matrix `A` whose image `A beta` is the inference target.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    a: Matrix,
}

impl LinearMap {
    pub fn new(a: Matrix) -> Result<Self> {
        let (q, d) = a.shape();
        if q == 0 || q > d {
            return Err(Error::RankDeficientMap);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear map"));
        }
        let sv = a.transpose().singular_values();
        let max = sv.max();
        if !(max > 0.0 && sv.min() / max >= RANK_TOLERANCE) {
            return Err(Error::RankDeficientMap);
        }
        Ok(Self { a })
    }

    /// The row selector `e_j^T`.
    pub fn coordinate(j: usize, d: usize) -> Result<Self> {
        if j >= d {
            return Err(Error::InvalidParameter(format!("coordinate {j} >= dimension {d}")));
        }
        let mut a = Matrix::zeros(1, d);
        a[(0, j)] = 1.0;
        Self::new(a)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }
}

/// Outcome of a confidence-region membership query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionTest {
    pub statistic: f64,
    pub critical: f64,
    pub member: bool,
}

pub fn two_step_fit(data: &Dataset, first_stage: &FitResult) -> Result<TwoStepResult> {
    two_step_fit_with(data, first_stage, SigmaDenominator::default())
}

pub fn two_step_fit_with(
    data: &Dataset,
    first_stage: &FitResult,
    denominator: SigmaDenominator,
) -> Result<TwoStepResult> {
    check_len("incidental vector", data.n(), first_stage.mu.len())?;
    let selected = IndexSet::from_predicate(data.n(), |i| first_stage.mu[i] == 0.0);
    let m = selected.len();
    let beta_tilde = subset_ols(data, &selected)?;

    let rss: f64 = selected
        .iter()
        .map(|i| {
            let r = data.y()[i] - data.x().row(i).dot(&beta_tilde.transpose());
            r * r
        })
        .sum();
    let denom = match denominator {
        SigmaDenominator::Selected => m as f64,
        SigmaDenominator::SelectedMinusDim => (m - data.d()) as f64,
    };
    let sigma_hat = (rss / denom).sqrt();
    let gram_hat = sample_gram(data.x())?;

    Ok(TwoStepResult {
        beta_tilde,
        selected,
        m,
        n: data.n(),
        sigma_hat,
        gram_hat,
    })
}

/// `[beta_tilde_j +- m^{-1/2} sigma_hat sqrt((Sigma_hat^{-1})_{jj}) z_{alpha/2}]`.
pub fn component_interval(result: &TwoStepResult, j: usize, alpha: f64) -> Result<ConfidenceInterval> {
    component_interval_with(result, j, alpha, IntervalScale::default())
}

pub fn component_interval_with(
    result: &TwoStepResult,
    j: usize,
    alpha: f64,
    scale: IntervalScale,
) -> Result<ConfidenceInterval> {
    let d = result.beta_tilde.len();
    if j >= d {
        return Err(Error::InvalidParameter(format!("coordinate {j} >= dimension {d}")));
    }
    let z = z_two_sided(alpha)?;
    let inv = sym_inverse(&result.gram_hat)?;
    let half_width = result.sigma_hat * inv[(j, j)].sqrt() * z / result.scale_size(scale).sqrt();
    Ok(ConfidenceInterval {
        center: result.beta_tilde[j],
        half_width,
        level: 1.0 - alpha,
    })
}

/// Membership of `beta0` in `{b : sqrt(m)/sigma_hat ||Sigma_hat^{1/2}(beta_tilde - b)|| <= q_alpha(chi_d)}`.
pub fn chisq_region_test(result: &TwoStepResult, beta0: &Vector, alpha: f64) -> Result<RegionTest> {
    chisq_region_test_with(result, beta0, alpha, IntervalScale::default())
}

pub fn chisq_region_test_with(
    result: &TwoStepResult,
    beta0: &Vector,
    alpha: f64,
    scale: IntervalScale,
) -> Result<RegionTest> {
    let d = result.beta_tilde.len();
    check_len("hypothesized coefficients", d, beta0.len())?;
    let root = sym_power(&result.gram_hat, 0.5)?;
    let norm = (root * (&result.beta_tilde - beta0)).norm();
    let statistic = standardize(norm, result.sigma_hat, result.scale_size(scale));
    let critical = chi_upper_quantile(alpha, d)?;
    Ok(RegionTest {
        statistic,
        critical,
        member: statistic <= critical,
    })
}

/// Plug-in region for `A beta` with scaling `G = A Sigma_hat^{-1} A^T`.
pub fn linear_map_region_test(
    result: &TwoStepResult,
    map: &LinearMap,
    beta0: &Vector,
    alpha: f64,
) -> Result<RegionTest> {
    let d = result.beta_tilde.len();
    check_len("linear map columns", d, map.matrix().ncols())?;
    check_len("hypothesized coefficients", d, beta0.len())?;
    let a = map.matrix();
    let g = a * sym_inverse(&result.gram_hat)? * a.transpose();
    let g_inv_root = sym_power(&g, -0.5)?;
    let norm = (g_inv_root * (a * (&result.beta_tilde - beta0))).norm();
    let statistic = standardize(norm, result.sigma_hat, result.m as f64);
    let critical = chi_upper_quantile(alpha, map.rows())?;
    Ok(RegionTest {
        statistic,
        critical,
        member: statistic <= critical,
    })
}

fn standardize(norm: f64, sigma_hat: f64, size: f64) -> f64 {
    if sigma_hat > 0.0 {
        size.sqrt() * norm / sigma_hat
    } else if norm == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// OLS of `Y - mu*` on the rows where the true incidental parameter is zero.
pub fn oracle_fit(data: &Dataset, mu_true: &Vector) -> Result<Vector> {
    check_len("true incidental vector", data.n(), mu_true.len())?;
    let clean = IndexSet::from_predicate(data.n(), |i| mu_true[i] == 0.0);
    // mu* vanishes on the clean rows, so Y - mu* equals Y there.
    subset_ols(data, &clean)
}

/// Whether the fit flags exactly the observations with `|mu*_i| > threshold`.
/// The threshold defaults to the fit's lambda.
pub fn partial_selection_event(result: &FitResult, mu_true: &Vector, threshold: Option<f64>) -> bool {
    if result.mu.len() != mu_true.len() {
        return false;
    }
    let thr = threshold.unwrap_or_else(|| result.penalty.lambda());
    result
        .mu
        .iter()
        .zip(mu_true.iter())
        .all(|(&est, &truth)| (truth.abs() > thr) == (est != 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{fit, Penalty, SolverConfig};
    use crate::linalg::ols_solve;

    fn data() -> Dataset {
        let x = Matrix::from_row_slice(
            8,
            2,
            &[
                1.0, 0.2, -0.5, 1.0, 0.3, -1.2, 2.0, 0.1, -1.1, -0.7, 0.4, 0.9, -0.2, 1.5, 1.3, -0.4,
            ],
        );
        let beta = Vector::from_vec(vec![1.0, -2.0]);
        let noise = Vector::from_vec(vec![0.05, -0.1, 0.02, 0.08, -0.04, 0.0, 0.07, -0.06]);
        let mut y = &x * beta + noise;
        y[3] += 25.0;
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn zero_mu_reproduces_full_ols() {
        let d = data();
        let res = fit(&d, &Penalty::soft(1e4).unwrap(), &SolverConfig::default()).unwrap();
        let ts = two_step_fit(&d, &res).unwrap();
        assert_eq!(ts.m, 8);
        let ols = ols_solve(d.x(), d.y()).unwrap();
        assert!((&ts.beta_tilde - ols).amax() < 1e-12);
    }

    #[test]
    fn exact_selected_rows_give_zero_sigma() {
        let x = Matrix::from_row_slice(5, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut y = &x * Vector::from_vec(vec![2.0]);
        y[4] += 100.0;
        let d = Dataset::new(x, y).unwrap();
        let res = fit(&d, &Penalty::soft(1.0).unwrap(), &SolverConfig::default()).unwrap();
        let ts = two_step_fit(&d, &res).unwrap();
        assert_eq!(ts.selected.as_slice(), &[0, 1, 2, 3]);
        assert!(ts.sigma_hat < 1e-12);
        assert!((ts.beta_tilde[0] - 2.0).abs() < 1e-12);
        let ci = component_interval(&ts, 0, 0.05).unwrap();
        assert!(ci.half_width < 1e-11);
    }

    fn synthetic(sigma: f64, m: usize, gram: Matrix) -> TwoStepResult {
        TwoStepResult {
            beta_tilde: Vector::from_vec(vec![0.5, -1.0]),
            selected: IndexSet::all(m),
            m,
            n: m,
            sigma_hat: sigma,
            gram_hat: gram,
        }
    }

    #[test]
    fn interval_half_width_arithmetic() {
        let ts = synthetic(1.0, 100, Matrix::identity(2, 2));
        let ci = component_interval(&ts, 0, 0.05).unwrap();
        assert!((ci.half_width - 0.195_996_398_454_005_4).abs() < 1e-10);
        assert_eq!(ci.center, 0.5);
        assert!((ci.level - 0.95).abs() < 1e-15);
        let zero = synthetic(0.0, 100, Matrix::identity(2, 2));
        assert_eq!(component_interval(&zero, 1, 0.05).unwrap().half_width, 0.0);
    }

    #[test]
    fn interval_uses_selected_size_unless_asked() {
        let mut ts = synthetic(1.0, 100, Matrix::identity(2, 2));
        ts.n = 400;
        let m = component_interval(&ts, 0, 0.05).unwrap().half_width;
        let n = component_interval_with(&ts, 0, 0.05, IntervalScale::Full)
            .unwrap()
            .half_width;
        assert!((m / n - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_gram_is_reported() {
        let ts = synthetic(1.0, 10, Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        assert!(matches!(component_interval(&ts, 0, 0.05), Err(Error::SingularGram)));
    }

    #[test]
    fn region_contains_its_center() {
        let ts = synthetic(0.7, 50, Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]));
        let t = chisq_region_test(&ts, &ts.beta_tilde.clone(), 0.05).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!(t.member);
    }

    #[test]
    fn region_boundary_is_closed() {
        // Identity Gram, sigma 1, m 1: statistic is the Euclidean distance.
        let ts = synthetic(1.0, 1, Matrix::identity(2, 2));
        let q = chi_upper_quantile(0.05, 2).unwrap();
        let b0 = &ts.beta_tilde - Vector::from_vec(vec![q, 0.0]);
        let t = chisq_region_test(&ts, &b0, 0.05).unwrap();
        assert_eq!(t.statistic, q);
        assert!(t.member);
    }

    #[test]
    fn identity_map_matches_full_region() {
        let ts = synthetic(0.9, 40, Matrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.8]));
        let b0 = Vector::from_vec(vec![0.2, -0.7]);
        let full = chisq_region_test(&ts, &b0, 0.05).unwrap();
        let map = LinearMap::new(Matrix::identity(2, 2)).unwrap();
        let lm = linear_map_region_test(&ts, &map, &b0, 0.05).unwrap();
        assert!((full.statistic - lm.statistic).abs() < 1e-10 * full.statistic);
        assert_eq!(full.member, lm.member);
    }

    #[test]
    fn coordinate_map_agrees_with_interval() {
        let ts = synthetic(1.3, 60, Matrix::from_row_slice(2, 2, &[1.2, 0.5, 0.5, 2.0]));
        let ci = component_interval(&ts, 1, 0.1).unwrap();
        let map = LinearMap::coordinate(1, 2).unwrap();
        for k in -20..=20 {
            let v = ci.center + ci.half_width * (k as f64) / 10.0 + 1e-7;
            let b0 = Vector::from_vec(vec![0.0, v]);
            let t = linear_map_region_test(&ts, &map, &b0, 0.1).unwrap();
            assert_eq!(t.member, ci.contains(v), "k = {k}");
        }
    }

    #[test]
    fn rank_deficient_maps_are_rejected() {
        assert!(matches!(
            LinearMap::new(Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0])),
            Err(Error::RankDeficientMap)
        ));
        assert!(matches!(
            LinearMap::new(Matrix::zeros(3, 2)),
            Err(Error::RankDeficientMap)
        ));
    }

    #[test]
    fn oracle_ignores_contamination_values() {
        let d = data();
        let mut mu = Vector::zeros(8);
        mu[3] = 25.0;
        let a = oracle_fit(&d, &mu).unwrap();
        let mut y2 = d.y().clone();
        y2[3] -= 1e6;
        let d2 = Dataset::new(d.x().clone(), y2).unwrap();
        let mut mu2 = mu.clone();
        mu2[3] = 25.0 - 1e6;
        let b = oracle_fit(&d2, &mu2).unwrap();
        assert!((a - b).amax() < 1e-12);
        let full = oracle_fit(&d, &Vector::zeros(8)).unwrap();
        assert!((full - ols_solve(d.x(), d.y()).unwrap()).amax() < 1e-14);
    }

    #[test]
    fn selection_event_on_single_outlier() {
        let d = data();
        let res = fit(&d, &Penalty::soft(3.0).unwrap(), &SolverConfig::default()).unwrap();
        let mut mu = Vector::zeros(8);
        mu[3] = 25.0;
        assert!(partial_selection_event(&res, &mu, None));
        assert!(!partial_selection_event(&res, &Vector::zeros(8), None));
        let quiet = fit(&d, &Penalty::soft(1e4).unwrap(), &SolverConfig::default()).unwrap();
        assert!(partial_selection_event(&quiet, &Vector::zeros(8), None));
    }
}
