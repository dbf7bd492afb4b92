//! Penalized least squares for the mean-shift model.
//!
//! Every observation carries its own intercept `mu_i`; the intercepts are
//! penalized so that only a few of them are nonzero. The objective is
//!
//! ```text
//! L(mu, beta) = ||Y - mu - X beta||^2 + sum_i p(|mu_i|)
//! ```
//!
//! with either the soft penalty `p(t) = 2 lambda t` or the hard penalty
//! `p(t) = lambda^2 - (t - lambda)^2 1{t < lambda}`. Minimizing over `mu` for a
//! fixed `beta` is a componentwise thresholding of the residuals, and
//! minimizing over `beta` for a fixed `mu` is an OLS refit of `Y - mu`. The
//! solver alternates the two exact block updates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, Dataset, IndexSet, LeastSquares, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Soft,
    Hard,
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PenaltyKind::Soft => f.write_str("soft"),
            PenaltyKind::Hard => f.write_str("hard"),
        }
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(PenaltyKind::Soft),
            "hard" => Ok(PenaltyKind::Hard),
            other => Err(Error::InvalidParameter(format!(
                "unknown penalty `{other}` (expected soft or hard)"
            ))),
        }
    }
}

/// A penalty family together with its regularization parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    kind: PenaltyKind,
    lambda: f64,
}

impl Penalty {
    pub fn new(kind: PenaltyKind, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive and finite, got {lambda}"
            )));
        }
        Ok(Self { kind, lambda })
    }

    pub fn soft(lambda: f64) -> Result<Self> {
        Self::new(PenaltyKind::Soft, lambda)
    }

    pub fn hard(lambda: f64) -> Result<Self> {
        Self::new(PenaltyKind::Hard, lambda)
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// The minimizer over `mu` of `(v - mu)^2 + p(|mu|)`.
    #[inline]
    pub fn threshold(&self, v: f64) -> f64 {
        match self.kind {
            PenaltyKind::Soft => soft_threshold(v, self.lambda),
            PenaltyKind::Hard => hard_threshold(v, self.lambda),
        }
    }

    /// `p(|mu|)`.
    #[inline]
    pub fn value(&self, mu: f64) -> f64 {
        let t = mu.abs();
        let lam = self.lambda;
        match self.kind {
            PenaltyKind::Soft => 2.0 * lam * t,
            PenaltyKind::Hard => {
                if t < lam {
                    lam * lam - (t - lam) * (t - lam)
                } else {
                    lam * lam
                }
            }
        }
    }
}

/// `(|v| - lambda)_+ sgn(v)`; exactly zero when `|v| == lambda`.
#[inline]
pub fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// `v 1{|v| > lambda}`; ties map to zero.
#[inline]
pub fn hard_threshold(v: f64, lambda: f64) -> f64 {
    if v.abs() > lambda {
        v
    } else {
        0.0
    }
}

/// Huber loss: `x^2` on `[-lambda, lambda]`, `2 lambda |x| - lambda^2` outside.
#[inline]
pub fn huber_rho(x: f64, lambda: f64) -> f64 {
    let a = x.abs();
    if a <= lambda {
        x * x
    } else {
        2.0 * lambda * a - lambda * lambda
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Starting coefficients; `None` starts from zero.
    pub beta_init: Option<Vector>,
    /// Stop once `||beta_(k+1) - beta_k||_2 <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// After the iterations stop, solve the stationarity equations for the
    /// final sign pattern in closed form and keep that solution when it
    /// reproduces the same pattern.
    pub polish: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            beta_init: None,
            tol: 1e-8,
            max_iter: 100,
            polish: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        if let Some(b) = &self.beta_init {
            check_len("initial coefficients", d, b.len())?;
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("initial coefficients"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub penalty: Penalty,
    pub beta: Vector,
    pub mu: Vector,
    /// `{i : mu_i != 0}`.
    pub active_set: IndexSet,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the closed-form stationary point replaced the last iterate.
    pub polished: bool,
    /// `L(mu, beta)` recomputed at the returned estimates.
    pub objective: f64,
    /// `||beta_k - beta_(k-1)||_2` for `k = 1, 2, ...`.
    pub trace: Vec<f64>,
    /// `L(mu_k, beta_k)` after each iteration.
    pub objective_trace: Vec<f64>,
}

/// `mu_i = threshold(Y_i - X_i^T beta)`.
pub fn update_mu(data: &Dataset, beta: &Vector, penalty: &Penalty) -> Result<Vector> {
    let r = data.residuals(beta)?;
    Ok(r.map(|v| penalty.threshold(v)))
}

/// OLS of `Y - mu` on `X`.
pub fn update_beta(data: &Dataset, mu: &Vector) -> Result<Vector> {
    check_len("incidental vector", data.n(), mu.len())?;
    LeastSquares::new(data.x())?.solve(&(data.y() - mu))
}

pub fn objective(data: &Dataset, mu: &Vector, beta: &Vector, penalty: &Penalty) -> Result<f64> {
    check_len("incidental vector", data.n(), mu.len())?;
    let r = data.residuals(beta)?;
    Ok(objective_from_residuals(&r, mu, penalty))
}

fn objective_from_residuals(r: &Vector, mu: &Vector, penalty: &Penalty) -> f64 {
    r.iter()
        .zip(mu.iter())
        .map(|(&ri, &mi)| {
            let e = ri - mi;
            e * e + penalty.value(mi)
        })
        .sum()
}

/// The Huber-profiled soft objective `sum_i rho(Y_i - X_i^T beta)`.
pub fn profiled_loss(data: &Dataset, beta: &Vector, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter("lambda must be positive".into()));
    }
    let r = data.residuals(beta)?;
    Ok(r.iter().map(|&v| huber_rho(v, lambda)).sum())
}

/// `phi(beta) = beta - (X^T X)^{-1} X^T (Y - mu(beta))` with the soft `mu(beta)`.
/// Its roots are exactly the soft-penalty minimizers.
pub fn z_function(data: &Dataset, beta: &Vector, lambda: f64) -> Result<Vector> {
    let penalty = Penalty::soft(lambda)?;
    let mu = update_mu(data, beta, &penalty)?;
    Ok(beta - update_beta(data, &mu)?)
}

/// Alternating minimization of `L(mu, beta)`.
///
/// Each pass thresholds the current residuals to get `mu`, then refits `beta`
/// by OLS on `Y - mu`. Both steps are exact block minimizations, so the
/// objective never increases. Reaching `max_iter` is reported through
/// `converged = false`, not as an error.
///
/// For the hard penalty the result is a local minimizer that depends on the
/// starting point.
pub fn fit(data: &Dataset, penalty: &Penalty, config: &SolverConfig) -> Result<FitResult> {
    config.validate(data.d())?;
    let ls = LeastSquares::new(data.x())?;
    let x = data.x();
    let y = data.y();

    let mut beta = config.beta_init.clone().unwrap_or_else(|| Vector::zeros(data.d()));
    let mut trace = Vec::new();
    let mut objective_trace = Vec::new();
    let mut converged = false;

    for _ in 0..config.max_iter {
        let r = y - x * &beta;
        let mu = r.map(|v| penalty.threshold(v));
        let next = ls.solve(&(y - &mu))?;
        let step = (&next - &beta).norm();
        let prev = std::mem::replace(&mut beta, next);
        let r_new = y - x * &beta;
        objective_trace.push(objective_from_residuals(&r_new, &mu, penalty));
        trace.push(step);
        if !step.is_finite() {
            return Err(Error::NonFinite("solver iterate"));
        }
        if step <= config.tol {
            converged = true;
            break;
        }
        if config.polish && penalty.kind() == PenaltyKind::Soft {
            if let Some(jump) = soft_jump(data, &prev, &beta, penalty.lambda())? {
                beta = jump;
            }
        }
    }

    let mut polished = false;
    if config.polish {
        if let Some(candidate) = stationary_point(data, &beta, penalty)? {
            let current = objective(data, &update_mu(data, &beta, penalty)?, &beta, penalty)?;
            let cand_obj = objective(data, &update_mu(data, &candidate, penalty)?, &candidate, penalty)?;
            if cand_obj <= current + 1e-12 * (1.0 + current.abs()) {
                beta = candidate;
                polished = true;
            }
        }
    }

    let r = y - x * &beta;
    let mu = r.map(|v| penalty.threshold(v));
    let objective = objective_from_residuals(&r, &mu, penalty);
    let active_set = IndexSet::from_predicate(data.n(), |i| mu[i] != 0.0);

    Ok(FitResult {
        penalty: *penalty,
        beta,
        mu,
        active_set,
        iterations: trace.len(),
        converged,
        polished,
        objective,
        trace,
        objective_trace,
    })
}

/// Solves the stationarity equations for the sign pattern induced by `beta`.
///
/// With inactive set `I` (|residual| <= lambda) and active signs `s_i`, the soft
/// fixed point satisfies `X_I^T X_I beta = X_I^T Y_I + lambda sum_{A} s_i X_i`;
/// the hard fixed point is OLS on `I`. The candidate is returned only when it
/// induces the same pattern, in which case it is an exact fixed point.
fn stationary_point(data: &Dataset, beta: &Vector, penalty: &Penalty) -> Result<Option<Vector>> {
    let pattern = sign_pattern(data, beta, penalty.lambda());
    let inactive: Vec<usize> = (0..data.n()).filter(|&i| pattern[i] == 0).collect();
    if inactive.len() <= data.d() {
        return Ok(None);
    }
    let xi = data.x().select_rows(&inactive);
    let yi = data.y().select_rows(&inactive);
    let ls = match LeastSquares::new(&xi) {
        Ok(ls) => ls,
        Err(Error::SingularDesign { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut candidate = ls.solve(&yi)?;
    if penalty.kind() == PenaltyKind::Soft && inactive.len() < data.n() {
        let mut shift = Vector::zeros(data.d());
        for (i, &s) in pattern.iter().enumerate() {
            if s != 0 {
                shift += data.x().row(i).transpose() * (f64::from(s) * penalty.lambda());
            }
        }
        candidate += ls.gram_solve(&shift)?;
    }
    if sign_pattern(data, &candidate, penalty.lambda()) == pattern {
        Ok(Some(candidate))
    } else {
        Ok(None)
    }
}

/// Soft-penalty shortcut once two consecutive iterates share a sign pattern.
///
/// Inside one pattern the profiled loss is a convex quadratic (or linear)
/// function of `beta`. A self-consistent closed-form stationary point is then
/// the global minimizer. Otherwise the last step is extended by exact line
/// search, stopping at the first pattern boundary, so the objective keeps
/// decreasing.
fn soft_jump(data: &Dataset, prev: &Vector, cur: &Vector, lambda: f64) -> Result<Option<Vector>> {
    let pattern = sign_pattern(data, cur, lambda);
    if sign_pattern(data, prev, lambda) != pattern {
        return Ok(None);
    }
    if let Some(point) = stationary_point(data, cur, &Penalty::soft(lambda)?)? {
        return Ok(Some(point));
    }
    let delta = cur - prev;
    let r = data.y() - data.x() * cur;
    let a = data.x() * &delta;
    let (mut slope, mut curvature) = (0.0, 0.0);
    let mut t_kink = f64::INFINITY;
    let mut consider = |t: f64| {
        if t > 0.0 {
            t_kink = t_kink.min(t);
        }
    };
    for ((&ri, &ai), &s) in r.iter().zip(a.iter()).zip(&pattern) {
        if ai == 0.0 {
            continue;
        }
        if s == 0 {
            slope -= ai * ri;
            curvature += ai * ai;
            consider((ri - lambda) / ai);
            consider((ri + lambda) / ai);
        } else {
            let sf = f64::from(s);
            slope -= lambda * sf * ai;
            consider((ri - sf * lambda) / ai);
        }
    }
    if !(slope < 0.0) {
        return Ok(None);
    }
    let t_min = if curvature > 0.0 {
        -slope / curvature
    } else {
        f64::INFINITY
    };
    let t = t_min.min(t_kink);
    if !(t.is_finite() && t > 0.0) {
        return Ok(None);
    }
    Ok(Some(cur + delta * t))
}

fn sign_pattern(data: &Dataset, beta: &Vector, lambda: f64) -> Vec<i8> {
    let r = data.y() - data.x() * beta;
    r.iter()
        .map(|&v| {
            if v > lambda {
                1
            } else if v < -lambda {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// Per-condition maximum violations of the soft-penalty optimality conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// `max_j |beta_j - [(X^T X)^{-1} X^T (Y - mu)]_j|`.
    pub refit_violation: f64,
    /// On the active set: `max |Y_i - mu_i - X_i^T beta - lambda sgn(mu_i)|`.
    pub active_violation: f64,
    /// Off the active set: `max (|Y_i - X_i^T beta| - lambda)_+`.
    pub inactive_violation: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Checks the necessary and sufficient conditions for a soft-penalty minimizer.
pub fn kkt_check(data: &Dataset, result: &FitResult, lambda: f64, tol: f64) -> Result<KktReport> {
    if result.penalty.kind() != PenaltyKind::Soft {
        return Err(Error::WrongPenaltyKind);
    }
    if !(lambda > 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidParameter("lambda and tol must be positive".into()));
    }
    check_len("incidental vector", data.n(), result.mu.len())?;
    let refit = update_beta(data, &result.mu)?;
    let refit_violation = (&result.beta - refit).amax();

    let r = data.residuals(&result.beta)?;
    let mut active_violation = 0.0f64;
    let mut inactive_violation = 0.0f64;
    for (&ri, &mi) in r.iter().zip(result.mu.iter()) {
        if mi != 0.0 {
            let v = (ri - mi - lambda * mi.signum()).abs();
            active_violation = active_violation.max(v);
        } else {
            inactive_violation = inactive_violation.max(ri.abs() - lambda);
        }
    }
    let passed = refit_violation <= tol && active_violation <= tol && inactive_violation <= tol;
    Ok(KktReport {
        refit_violation,
        active_violation,
        inactive_violation,
        tol,
        passed,
    })
}
