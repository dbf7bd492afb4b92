//! Choosing the regularization parameter.
//!
//! Two routes are offered: closed-form rates for Gaussian noise, and a
//! data-driven search that tunes lambda on a held-out subset of observations
//! that look uncontaminated.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit, Penalty, PenaltyKind, SolverConfig};
use crate::linalg::{ols_solve, subset_ols, Dataset, IndexSet, Vector};
use crate::stats::{nearest_rank_quantile, sample_sd};

/// Covariate regime for the closed-form rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DesignRegime {
    /// Covariates bounded in norm by `bound` per coordinate, Gaussian errors.
    BoundedX { bound: f64 },
    /// Gaussian covariates with coordinate scale `sigma_x`, Gaussian errors.
    GaussianX { sigma_x: f64 },
}

/// `(gamma_n, kappa_n)`: high-probability bounds on the maximal noise and on
/// the maximal covariate norm. A workable lambda satisfies
/// `kappa_n << lambda`, `alpha gamma_n <= lambda` for some `alpha > 2`, and
/// `lambda << min(|large mu*|, sqrt(n))`.
pub fn gaussian_spec_bounds(n: usize, d: usize, sigma: f64, regime: DesignRegime) -> Result<(f64, f64)> {
    if n < 2 || d == 0 {
        return Err(Error::InvalidParameter("need n >= 2 and d >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter("sigma must be positive".into()));
    }
    Ok(bounds_from_log((n as f64).ln(), d, sigma, regime))
}

fn bounds_from_log(log_n: f64, d: usize, sigma: f64, regime: DesignRegime) -> (f64, f64) {
    let gamma = (2.0 * sigma * sigma * log_n).sqrt();
    let kappa = match regime {
        DesignRegime::BoundedX { bound } => (d as f64).sqrt() * bound,
        DesignRegime::GaussianX { sigma_x } => (2.0 * d as f64 * sigma_x * sigma_x * log_n).sqrt(),
    };
    (gamma, kappa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaProcedureConfig {
    /// `n_pure / n`.
    pub pure_fraction: f64,
    /// Test-set size as a fraction of the updated pure set.
    pub test_fraction: f64,
    /// Quantile level of `|residual|` giving the upper end of the grid.
    pub quantile_q: f64,
    /// Hard penalty: lower end is `alpha_l` times the pure-set residual SD.
    pub alpha_l: f64,
    /// Soft penalty: fixed lower end of the grid.
    pub soft_lambda_l: f64,
    pub grid_size: usize,
    /// Multiplier of the pure-set residual SD used for interval construction.
    pub ci_multiplier: f64,
    pub seed: u64,
}

impl Default for LambdaProcedureConfig {
    fn default() -> Self {
        Self {
            pure_fraction: 0.7,
            test_fraction: 0.2,
            quantile_q: 0.95,
            alpha_l: 5.0,
            soft_lambda_l: 0.5,
            grid_size: 50,
            ci_multiplier: 6.0,
            seed: 0,
        }
    }
}

impl LambdaProcedureConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.pure_fraction) || !in_unit(self.test_fraction) || !in_unit(self.quantile_q) {
            return Err(Error::InvalidParameter(
                "pure_fraction, test_fraction and quantile_q must lie in (0, 1)".into(),
            ));
        }
        if !(self.alpha_l > 0.0) || !(self.soft_lambda_l > 0.0) || !(self.ci_multiplier > 0.0) {
            return Err(Error::InvalidParameter(
                "alpha_l, soft_lambda_l and ci_multiplier must be positive".into(),
            ));
        }
        if self.grid_size < 2 {
            return Err(Error::InvalidParameter("grid_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// The split of observations produced by the residual screening steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PureSplit {
    /// Updated pure set: the `n_pure` smallest `|residual|` after the refit.
    pub pure: IndexSet,
    pub test: IndexSet,
    pub training: IndexSet,
    /// Residuals of the pure-set refit, for all `n` rows.
    pub residuals: Vector,
    /// Sample SD of `residuals` over `pure`.
    pub sigma_pure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub lambda_opt: f64,
    pub lambda_low: f64,
    pub lambda_high: f64,
    /// The configured lower end was not below the upper end and was replaced by
    /// `lambda_high / 10`.
    pub low_clamped: bool,
    /// `(lambda, sum of squared test residuals)`, increasing in lambda.
    pub test_loss_curve: Vec<(f64, f64)>,
    pub split: PureSplit,
}

fn smallest_abs(residuals: &Vector, count: usize) -> IndexSet {
    let mut order: Vec<usize> = (0..residuals.len()).collect();
    order.sort_by(|&a, &b| residuals[a].abs().total_cmp(&residuals[b].abs()).then(a.cmp(&b)));
    order.truncate(count);
    IndexSet::new(order, residuals.len()).expect("indices come from 0..n")
}

/// Residual screening: OLS on everything, keep the `n_pure` best-fitting rows,
/// refit on them, re-rank all rows by the new residuals, then hold out a seeded
/// random part of the updated pure set for testing.
pub fn pure_split(data: &Dataset, config: &LambdaProcedureConfig) -> Result<PureSplit> {
    config.validate()?;
    let n = data.n();
    let n_pure = (config.pure_fraction * n as f64).round() as usize;
    if n_pure <= data.d() {
        return Err(Error::EmptySubset {
            size: n_pure,
            dim: data.d(),
        });
    }
    let beta_ols = ols_solve(data.x(), data.y())?;
    let first = smallest_abs(&data.residuals(&beta_ols)?, n_pure);
    let beta_pure = subset_ols(data, &first)?;
    let residuals = data.residuals(&beta_pure)?;
    let pure = smallest_abs(&residuals, n_pure);

    let n_test = ((config.test_fraction * n_pure as f64).round() as usize).max(1);
    if n_test >= n_pure {
        return Err(Error::InvalidParameter("test set would exhaust the pure set".into()));
    }
    let mut shuffled = pure.as_slice().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffled.shuffle(&mut rng);
    shuffled.truncate(n_test);
    let test = IndexSet::new(shuffled, n)?;
    let training = test.complement(n);
    if training.len() <= data.d() {
        return Err(Error::EmptySubset {
            size: training.len(),
            dim: data.d(),
        });
    }

    let pure_res: Vec<f64> = pure.iter().map(|i| residuals[i]).collect();
    let sigma_pure = sample_sd(&pure_res);
    Ok(PureSplit {
        pure,
        test,
        training,
        residuals,
        sigma_pure,
    })
}

fn rows(data: &Dataset, set: &IndexSet) -> Result<Dataset> {
    Dataset::new(
        data.x().select_rows(set.as_slice()),
        data.y().select_rows(set.as_slice()),
    )
}

/// `n_grid` points, log-spaced from `low` to `high` inclusive.
pub fn log_grid(low: f64, high: f64, n_grid: usize) -> Vec<f64> {
    if n_grid == 1 {
        return vec![low];
    }
    let (a, b) = (low.ln(), high.ln());
    (0..n_grid)
        .map(|k| {
            if k == 0 {
                low
            } else if k == n_grid - 1 {
                high
            } else {
                (a + (b - a) * k as f64 / (n_grid - 1) as f64).exp()
            }
        })
        .collect()
}

/// Data-driven lambda: fit the penalized estimator on the training rows for
/// every grid value and keep the value with the smallest squared prediction
/// error on the test rows. Ties go to the smaller lambda.
pub fn data_driven_lambda(
    data: &Dataset,
    kind: PenaltyKind,
    config: &LambdaProcedureConfig,
    solver: &SolverConfig,
) -> Result<LambdaSelection> {
    let split = pure_split(data, config)?;
    let abs_res: Vec<f64> = split.residuals.iter().map(|v| v.abs()).collect();
    let lambda_high = nearest_rank_quantile(&abs_res, config.quantile_q)?;
    let scale = data.y().amax().max(1.0);
    if !(lambda_high > 1e-12 * scale) {
        return Err(Error::DegenerateInterval {
            low: 0.0,
            high: lambda_high,
        });
    }
    let mut lambda_low = match kind {
        PenaltyKind::Hard => config.alpha_l * split.sigma_pure,
        PenaltyKind::Soft => config.soft_lambda_l,
    };
    let mut low_clamped = false;
    if !(lambda_low < lambda_high) {
        lambda_low = lambda_high / 10.0;
        low_clamped = true;
    }
    if !(lambda_low > 0.0 && lambda_low < lambda_high) {
        return Err(Error::DegenerateInterval {
            low: lambda_low,
            high: lambda_high,
        });
    }

    let train = rows(data, &split.training)?;
    let mut curve = Vec::with_capacity(config.grid_size);
    for lambda in log_grid(lambda_low, lambda_high, config.grid_size) {
        let res = fit(&train, &Penalty::new(kind, lambda)?, solver)?;
        let loss: f64 = split
            .test
            .iter()
            .map(|i| {
                let r = data.y()[i] - data.x().row(i).transpose().dot(&res.beta);
                r * r
            })
            .sum();
        curve.push((lambda, loss));
    }
    let (lambda_opt, _) =
        curve.iter().copied().fold(
            (f64::NAN, f64::INFINITY),
            |best, (l, loss)| {
                if loss < best.1 {
                    (l, loss)
                } else {
                    best
                }
            },
        );
    if !lambda_opt.is_finite() {
        return Err(Error::NonFinite("test loss curve"));
    }
    Ok(LambdaSelection {
        lambda_opt,
        lambda_low,
        lambda_high,
        low_clamped,
        test_loss_curve: curve,
        split,
    })
}

/// Lambda for interval construction: a multiple (six by default) of the
/// residual SD on the updated pure set.
pub fn ci_lambda(data: &Dataset, config: &LambdaProcedureConfig) -> Result<f64> {
    let split = pure_split(data, config)?;
    let lambda = config.ci_multiplier * split.sigma_pure;
    if lambda > 1e-12 * data.y().amax().max(1.0) && lambda.is_finite() {
        Ok(lambda)
    } else {
        Err(Error::DegenerateInterval { low: 0.0, high: lambda })
    }
}
