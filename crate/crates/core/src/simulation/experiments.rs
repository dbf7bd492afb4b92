use rayon::prelude::*;
use serde::Serialize;

use super::{gen_with_root, lad_fit, psd_sqrt, ExperimentConfig, HardStart, IncidentalSpec, Method, Replicate};
use crate::error::{Error, Result};
use crate::estimator::{fit, FitResult, Penalty, PenaltyKind, SolverConfig};
use crate::inference::{component_interval, oracle_fit, partial_selection_event, two_step_fit};
use crate::lambda::{ci_lambda, data_driven_lambda, LambdaProcedureConfig};
use crate::linalg::{ols_solve, sym_inverse, Matrix, Vector};
use crate::stats::{ks_test_standard_normal, mean, normal_quantile, KsTest};

fn replicates<T, F>(config: &ExperimentConfig, body: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Replicate) -> T + Sync,
{
    config.validate()?;
    let root = psd_sqrt(&config.x_cov_matrix()?);
    // Indexed collection keeps replicate order independent of scheduling.
    (0..config.reps)
        .into_par_iter()
        .map(|rep| gen_with_root(config, rep, &root).map(&body))
        .collect()
}

fn solver(config: &ExperimentConfig, beta_init: Option<Vector>) -> SolverConfig {
    SolverConfig {
        beta_init,
        max_iter: config.max_iter,
        ..SolverConfig::default()
    }
}

/// Solver settings for `kind`, honouring the configured hard-penalty start.
fn solver_for(config: &ExperimentConfig, kind: PenaltyKind, rep: &Replicate) -> Result<SolverConfig> {
    let init = match (kind, config.hard_start) {
        (PenaltyKind::Hard, HardStart::Ols) => Some(ols_solve(rep.data.x(), rep.data.y())?),
        _ => None,
    };
    Ok(solver(config, init))
}

fn penalized_fit(config: &ExperimentConfig, rep: &Replicate, kind: PenaltyKind, lambda: f64) -> Result<FitResult> {
    fit(&rep.data, &Penalty::new(kind, lambda)?, &solver_for(config, kind, rep)?)
}

/// Bias and RMSE of one estimation target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetStats {
    /// `beta1`, `beta2`, ... for components, `beta` for the whole vector.
    pub target: String,
    pub bias: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub lambda: Option<f64>,
    /// Replicates that produced an estimate.
    pub count: usize,
    pub targets: Vec<TargetStats>,
}

impl GridPoint {
    pub fn target(&self, name: &str) -> Option<&TargetStats> {
        self.targets.iter().find(|t| t.target == name)
    }

    /// RMSE of the whole coefficient vector.
    pub fn rmse(&self) -> f64 {
        self.target("beta").map_or(f64::NAN, |t| t.rmse)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    /// One point for plain methods, one per lambda for grid methods.
    pub points: Vec<GridPoint>,
    /// Index of the point with the smallest vector RMSE.
    pub best: usize,
    /// Failed replicate fits, summed over points.
    pub failures: usize,
    /// Mean lambda chosen by the data-driven procedure.
    pub mean_selected_lambda: Option<f64>,
}

impl MethodSummary {
    pub fn best_point(&self) -> &GridPoint {
        &self.points[self.best]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmseReport {
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub beta_star: Vec<f64>,
    pub methods: Vec<MethodSummary>,
}

impl RmseReport {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

struct Accumulator {
    count: usize,
    failures: usize,
    sum: Vector,
    sum_sq: Vector,
    sum_norm_sq: f64,
}

impl Accumulator {
    fn new(d: usize) -> Self {
        Self {
            count: 0,
            failures: 0,
            sum: Vector::zeros(d),
            sum_sq: Vector::zeros(d),
            sum_norm_sq: 0.0,
        }
    }

    fn push(&mut self, estimate: &Option<Vector>, beta_star: &Vector) {
        match estimate {
            Some(b) => {
                let e = b - beta_star;
                self.count += 1;
                self.sum += &e;
                self.sum_sq += e.component_mul(&e);
                self.sum_norm_sq += e.norm_squared();
            }
            None => self.failures += 1,
        }
    }

    fn finish(&self, lambda: Option<f64>) -> GridPoint {
        let k = self.count as f64;
        let d = self.sum.len();
        let mut targets: Vec<TargetStats> = (0..d)
            .map(|j| TargetStats {
                target: format!("beta{}", j + 1),
                bias: self.sum[j] / k,
                rmse: (self.sum_sq[j] / k).sqrt(),
            })
            .collect();
        targets.push(TargetStats {
            target: "beta".into(),
            bias: (&self.sum / k).norm(),
            rmse: (self.sum_norm_sq / k).sqrt(),
        });
        GridPoint {
            lambda,
            count: self.count,
            targets,
        }
    }
}

struct RepEstimates {
    /// `[method][point]`.
    estimates: Vec<Vec<Option<Vector>>>,
    selected_lambda: Vec<Option<f64>>,
}

fn estimate_replicate(
    config: &ExperimentConfig,
    rep: &Replicate,
    soft_grid: &[f64],
    hard_grid: &[f64],
) -> RepEstimates {
    let data = &rep.data;
    let grid_fits = |kind: PenaltyKind, grid: &[f64]| -> Vec<Result<FitResult>> {
        grid.iter().map(|&l| penalized_fit(config, rep, kind, l)).collect()
    };
    let needs = |kind: PenaltyKind| config.methods.iter().any(|m| m.grid_penalty() == Some(kind));
    let soft_fits = if needs(PenaltyKind::Soft) {
        grid_fits(PenaltyKind::Soft, soft_grid)
    } else {
        Vec::new()
    };
    let hard_fits = if needs(PenaltyKind::Hard) {
        grid_fits(PenaltyKind::Hard, hard_grid)
    } else {
        Vec::new()
    };

    let practical = |kind: PenaltyKind| -> Option<(Vector, f64)> {
        let proc = LambdaProcedureConfig {
            seed: rep.aux_seed,
            ..config.lambda_procedure.clone()
        };
        let run = || -> Result<(Vector, f64)> {
            let sel = data_driven_lambda(data, kind, &proc, &solver_for(config, kind, rep)?)?;
            let res = penalized_fit(config, rep, kind, sel.lambda_opt)?;
            Ok((res.beta, sel.lambda_opt))
        };
        run().ok()
    };

    let mut estimates = Vec::with_capacity(config.methods.len());
    let mut selected_lambda = Vec::with_capacity(config.methods.len());
    for method in &config.methods {
        let mut chosen = None;
        let two_step = |fits: &[Result<FitResult>]| -> Vec<Option<Vector>> {
            fits.iter()
                .map(|f| {
                    f.as_ref()
                        .ok()
                        .and_then(|r| two_step_fit(data, r).ok())
                        .map(|t| t.beta_tilde)
                })
                .collect()
        };
        let betas = |fits: &[Result<FitResult>]| -> Vec<Option<Vector>> {
            fits.iter().map(|f| f.as_ref().ok().map(|r| r.beta.clone())).collect()
        };
        let row: Vec<Option<Vector>> = match method {
            Method::Oracle => vec![oracle_fit(data, &rep.mu_true).ok()],
            Method::Ols => vec![ols_solve(data.x(), data.y()).ok()],
            Method::Lad => vec![lad_fit(data).ok().map(|r| r.beta)],
            Method::Soft => betas(&soft_fits),
            Method::Hard => betas(&hard_fits),
            Method::SoftTwoStep => two_step(&soft_fits),
            Method::HardTwoStep => two_step(&hard_fits),
            Method::SoftPractical | Method::HardPractical => {
                let kind = if *method == Method::SoftPractical {
                    PenaltyKind::Soft
                } else {
                    PenaltyKind::Hard
                };
                let out = practical(kind);
                chosen = out.as_ref().map(|o| o.1);
                vec![out.map(|o| o.0)]
            }
        };
        estimates.push(row);
        selected_lambda.push(chosen);
    }
    RepEstimates {
        estimates,
        selected_lambda,
    }
}

/// Bias and RMSE of every configured method over all replicates. Grid methods
/// are evaluated at every lambda of their grid; `best` marks the minimum.
pub fn rmse_experiment(config: &ExperimentConfig) -> Result<RmseReport> {
    let soft_grid = config.soft_lambda_grid.values()?;
    let hard_grid = config.hard_lambda_grid.values()?;
    let per_rep = replicates(config, |rep| estimate_replicate(config, &rep, &soft_grid, &hard_grid))?;

    let beta_star = config.beta_star();
    let d = config.d();
    let mut methods = Vec::with_capacity(config.methods.len());
    for (k, method) in config.methods.iter().enumerate() {
        let lambdas: Vec<Option<f64>> = match method.grid_penalty() {
            Some(PenaltyKind::Soft) => soft_grid.iter().copied().map(Some).collect(),
            Some(PenaltyKind::Hard) => hard_grid.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let mut accs: Vec<Accumulator> = lambdas.iter().map(|_| Accumulator::new(d)).collect();
        let mut chosen = Vec::new();
        for rep in &per_rep {
            for (acc, est) in accs.iter_mut().zip(&rep.estimates[k]) {
                acc.push(est, &beta_star);
            }
            chosen.extend(rep.selected_lambda[k]);
        }
        let failures = accs.iter().map(|a| a.failures).sum();
        let points: Vec<GridPoint> = accs.iter().zip(&lambdas).map(|(a, l)| a.finish(*l)).collect();
        let best = points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.count > 0)
            .min_by(|a, b| a.1.rmse().total_cmp(&b.1.rmse()))
            .map_or(0, |(i, _)| i);
        methods.push(MethodSummary {
            method: *method,
            points,
            best,
            failures,
            mean_selected_lambda: (!chosen.is_empty()).then(|| mean(&chosen)),
        });
    }
    Ok(RmseReport {
        n: config.n,
        reps: config.reps,
        seed: config.seed,
        beta_star: config.beta_star.clone(),
        methods,
    })
}

/// Coverage of one `(p1, p2)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageCell {
    pub p1: f64,
    pub p2: f64,
    /// Replicates that produced an interval.
    pub count: usize,
    pub failures: usize,
    /// Fraction of intervals containing `beta*_j`, per component.
    pub coverage: Vec<f64>,
    /// Monte Carlo standard error of each coverage fraction.
    pub std_error: Vec<f64>,
    pub mean_half_width: Vec<f64>,
    pub mean_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub reps: usize,
    pub seed: u64,
    pub cells: Vec<CoverageCell>,
}

fn mixture_cell(config: &ExperimentConfig, p1: f64, p2: f64) -> Result<ExperimentConfig> {
    let IncidentalSpec::Mixture { mechanism } = &config.mu else {
        return Err(Error::Config("coverage cells need a mixture incidental spec".into()));
    };
    let mut m = *mechanism;
    m.p1 = p1;
    m.p2 = p2;
    m.p0 = 1.0 - p1 - p2;
    m.validate()?;
    Ok(ExperimentConfig {
        mu: IncidentalSpec::mixture(m),
        ..config.clone()
    })
}

/// Per replicate: lambda from the pure-set residual SD, soft fit, two-step
/// refit, then a level `1 - alpha` interval for every coefficient. Cells that
/// are empty use the configured mechanism unchanged.
pub fn coverage_experiment(config: &ExperimentConfig, alpha: f64, cells: &[(f64, f64)]) -> Result<CoverageReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter("alpha must lie in (0, 1)".into()));
    }
    let cells: Vec<(f64, f64)> = if cells.is_empty() {
        match &config.mu {
            IncidentalSpec::Mixture { mechanism } => vec![(mechanism.p1, mechanism.p2)],
            _ => return Err(Error::Config("coverage needs a mixture incidental spec".into())),
        }
    } else {
        cells.to_vec()
    };
    let d = config.d();
    let beta_star = config.beta_star();
    let mut out = Vec::with_capacity(cells.len());
    for (p1, p2) in cells {
        let cell_cfg = mixture_cell(config, p1, p2)?;
        let per_rep = replicates(&cell_cfg, |rep| -> Result<(Vec<bool>, Vec<f64>, f64)> {
            let proc = LambdaProcedureConfig {
                seed: rep.aux_seed,
                ..cell_cfg.lambda_procedure.clone()
            };
            let lambda = ci_lambda(&rep.data, &proc)?;
            let first = fit(&rep.data, &Penalty::soft(lambda)?, &solver(&cell_cfg, None))?;
            let ts = two_step_fit(&rep.data, &first)?;
            let mut hit = Vec::with_capacity(d);
            let mut width = Vec::with_capacity(d);
            for j in 0..d {
                let ci = component_interval(&ts, j, alpha)?;
                hit.push(ci.contains(beta_star[j]));
                width.push(ci.half_width);
            }
            Ok((hit, width, lambda))
        })?;
        let ok: Vec<_> = per_rep.iter().filter_map(|r| r.as_ref().ok()).collect();
        let count = ok.len();
        let k = count.max(1) as f64;
        let coverage: Vec<f64> = (0..d)
            .map(|j| ok.iter().filter(|r| r.0[j]).count() as f64 / k)
            .collect();
        out.push(CoverageCell {
            p1,
            p2,
            count,
            failures: per_rep.len() - count,
            std_error: coverage.iter().map(|c| (c * (1.0 - c) / k).sqrt()).collect(),
            coverage,
            mean_half_width: (0..d).map(|j| ok.iter().map(|r| r.1[j]).sum::<f64>() / k).collect(),
            mean_lambda: ok.iter().map(|r| r.2).sum::<f64>() / k,
        });
    }
    Ok(CoverageReport {
        alpha,
        reps: config.reps,
        seed: config.seed,
        cells: out,
    })
}

/// Standardized draws of one estimator for one coefficient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqSeries {
    /// `beta_hat` (one-step soft) or `beta_tilde` (two-step).
    pub estimator: String,
    pub component: usize,
    /// Sorted standardized values.
    pub sorted: Vec<f64>,
    /// Standard normal quantiles at `(k - 0.5) / count`.
    pub theoretical: Vec<f64>,
    pub ks: KsTest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QqReport {
    pub lambda: f64,
    pub reps: usize,
    pub failures: usize,
    pub series: Vec<QqSeries>,
}

impl QqReport {
    pub fn series(&self, estimator: &str, component: usize) -> Option<&QqSeries> {
        self.series
            .iter()
            .find(|s| s.estimator == estimator && s.component == component)
    }
}

fn qq_series(estimator: &str, component: usize, mut values: Vec<f64>) -> Result<QqSeries> {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    let theoretical = (0..k)
        .map(|i| normal_quantile((i as f64 + 0.5) / k as f64))
        .collect::<Result<Vec<_>>>()?;
    let ks = ks_test_standard_normal(&values)?;
    Ok(QqSeries {
        estimator: estimator.into(),
        component,
        sorted: values,
        theoretical,
        ks,
    })
}

/// Soft fit at a fixed `lambda`, two-step refit, and both estimates
/// standardized as `sqrt(m) (estimate - beta*_j) / (sigma_hat sqrt((Sigma_hat^-1)_jj))`.
pub fn qq_experiment(config: &ExperimentConfig, lambda: f64) -> Result<QqReport> {
    let penalty = Penalty::soft(lambda)?;
    let d = config.d();
    let beta_star = config.beta_star();
    let per_rep = replicates(config, |rep| -> Result<(Vec<f64>, Vec<f64>)> {
        let first = fit(&rep.data, &penalty, &solver(config, None))?;
        let ts = two_step_fit(&rep.data, &first)?;
        let inv = sym_inverse(&ts.gram_hat)?;
        let scale = (ts.m as f64).sqrt() / ts.sigma_hat;
        if !scale.is_finite() {
            return Err(Error::NonFinite("standardization"));
        }
        let z = |b: &Vector| -> Vec<f64> {
            (0..d)
                .map(|j| scale * (b[j] - beta_star[j]) / inv[(j, j)].sqrt())
                .collect()
        };
        Ok((z(&first.beta), z(&ts.beta_tilde)))
    })?;
    let ok: Vec<_> = per_rep.iter().filter_map(|r| r.as_ref().ok()).collect();
    if ok.is_empty() {
        return Err(Error::InvalidParameter("every replicate failed".into()));
    }
    let mut series = Vec::with_capacity(2 * d);
    for j in 0..d {
        series.push(qq_series("beta_hat", j, ok.iter().map(|r| r.0[j]).collect())?);
        series.push(qq_series("beta_tilde", j, ok.iter().map(|r| r.1[j]).collect())?);
    }
    Ok(QqReport {
        lambda,
        reps: config.reps,
        failures: per_rep.len() - ok.len(),
        series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    pub lambda: f64,
    pub reps: usize,
    pub failures: usize,
    /// Fraction of replicates where the soft fit realizes the selection event.
    pub frequency: f64,
    pub std_error: f64,
}

/// Frequency of: every `|mu*_i| > lambda` flagged nonzero and every other
/// row estimated exactly zero, for soft fits at `lambda`.
pub fn selection_experiment(config: &ExperimentConfig, lambda: f64) -> Result<SelectionReport> {
    let penalty = Penalty::soft(lambda)?;
    let per_rep = replicates(config, |rep| -> Result<bool> {
        let res = fit(&rep.data, &penalty, &solver(config, None))?;
        Ok(partial_selection_event(&res, &rep.mu_true, None))
    })?;
    let ok: Vec<bool> = per_rep.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let k = ok.len().max(1) as f64;
    let frequency = ok.iter().filter(|&&e| e).count() as f64 / k;
    Ok(SelectionReport {
        lambda,
        reps: config.reps,
        failures: per_rep.len() - ok.len(),
        frequency,
        std_error: (frequency * (1.0 - frequency) / k).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceReport {
    pub lambda: f64,
    pub reps: usize,
    pub failures: usize,
    /// Empirical covariance of `sqrt(n) (beta_hat - beta*)`, row-major.
    pub empirical: Vec<Vec<f64>>,
    /// Same for the oracle estimator.
    pub oracle: Vec<Vec<f64>>,
    /// `sigma^2 Sigma_X^{-1}`.
    pub theoretical: Vec<Vec<f64>>,
    /// `||empirical - theoretical||_F / ||theoretical||_F`.
    pub relative_to_theory: f64,
    /// `||empirical - oracle||_F / ||oracle||_F`.
    pub relative_to_oracle: f64,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn empirical_cov(draws: &[Vector], d: usize) -> Matrix {
    let k = draws.len() as f64;
    let centre = draws.iter().fold(Vector::zeros(d), |acc, v| acc + v) / k;
    draws.iter().fold(Matrix::zeros(d, d), |acc, v| {
        let c = v - &centre;
        acc + &c * c.transpose()
    }) / (k - 1.0)
}

/// Empirical covariance of `sqrt(n) (beta_hat - beta*)` for soft fits at
/// `lambda`, compared with `sigma^2 Sigma_X^{-1}` and with the oracle.
pub fn covariance_experiment(config: &ExperimentConfig, lambda: f64) -> Result<CovarianceReport> {
    let penalty = Penalty::soft(lambda)?;
    let d = config.d();
    let beta_star = config.beta_star();
    let root_n = (config.n as f64).sqrt();
    let per_rep = replicates(config, |rep| -> Result<(Vector, Vector)> {
        let res = fit(&rep.data, &penalty, &solver(config, None))?;
        let oracle = oracle_fit(&rep.data, &rep.mu_true)?;
        Ok(((res.beta - &beta_star) * root_n, (oracle - &beta_star) * root_n))
    })?;
    let ok: Vec<_> = per_rep.iter().filter_map(|r| r.as_ref().ok()).collect();
    if ok.len() < 2 {
        return Err(Error::InvalidParameter(
            "need at least two successful replicates".into(),
        ));
    }
    let est: Vec<Vector> = ok.iter().map(|r| r.0.clone()).collect();
    let orc: Vec<Vector> = ok.iter().map(|r| r.1.clone()).collect();
    let empirical = empirical_cov(&est, d);
    let oracle = empirical_cov(&orc, d);
    let theoretical = sym_inverse(&config.x_cov_matrix()?)? * (config.sigma * config.sigma);
    Ok(CovarianceReport {
        lambda,
        reps: config.reps,
        failures: per_rep.len() - ok.len(),
        relative_to_theory: (&empirical - &theoretical).norm() / theoretical.norm(),
        relative_to_oracle: (&empirical - &oracle).norm() / oracle.norm(),
        empirical: rows_of(&empirical),
        oracle: rows_of(&oracle),
        theoretical: rows_of(&theoretical),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub lambda: f64,
    pub reps: usize,
    pub failures: usize,
    /// `||beta_k - beta_(k-1)||_2` for `k = 1, 2, 3` per replicate; zero once
    /// the iterates stop moving.
    pub steps: Vec<[f64; 3]>,
}

impl ConvergenceReport {
    /// Fraction of replicates with `||beta_3 - beta_2||_2 <= tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        self.steps.iter().filter(|s| s[2] <= tol).count() as f64 / self.steps.len().max(1) as f64
    }
}

/// The first three raw alternating steps of a soft fit at `lambda`, started
/// from zero and without the closed-form polish.
pub fn convergence_experiment(config: &ExperimentConfig, lambda: f64) -> Result<ConvergenceReport> {
    let penalty = Penalty::soft(lambda)?;
    let solver = SolverConfig {
        beta_init: None,
        tol: f64::MIN_POSITIVE,
        max_iter: 3,
        polish: false,
    };
    let per_rep = replicates(config, |rep| -> Result<[f64; 3]> {
        let res = fit(&rep.data, &penalty, &solver)?;
        let mut s = [0.0; 3];
        for (slot, v) in s.iter_mut().zip(&res.trace) {
            *slot = *v;
        }
        Ok(s)
    })?;
    let steps: Vec<[f64; 3]> = per_rep.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    Ok(ConvergenceReport {
        lambda,
        reps: config.reps,
        failures: per_rep.len() - steps.len(),
        steps,
    })
}
