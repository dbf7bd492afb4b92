//! Monte Carlo engine: synthetic data from the mean-shift model and the
//! estimator comparisons run on it.
//!
//! # Random streams
//!
//! Every replicate owns independent ChaCha8 streams derived from the
//! experiment seed: stream `4 r` draws the incidental parameters of replicate
//! `r`, stream `4 r + 1` the covariates, stream `4 r + 2` the noise, and stream
//! `4 r + 3` any seeds the estimators need (the data-driven lambda split).
//! Frozen incidental vectors are drawn once from stream `u64::MAX` of their own
//! seed. Replicates therefore never share generator state, and results do not
//! depend on how replicates are scheduled across threads.
//!
//! Within the incidental stream, observation `i` consumes one uniform branch
//! selector `u`; if `u < p0` the value is zero, if `u < p0 + p1` it is
//! `W1 (c + W2)` where a second uniform picks the sign (`+1` below `p_w`) and
//! `W2` is exponential with mean `tau`, otherwise a third kind of draw is a
//! uniform on `[-c, c]`.

mod experiments;
mod lad;

pub use experiments::{
    convergence_experiment, covariance_experiment, coverage_experiment, qq_experiment, rmse_experiment,
    selection_experiment, ConvergenceReport, CovarianceReport, CoverageCell, CoverageReport, MethodSummary, QqReport,
    QqSeries, RmseReport, SelectionReport, TargetStats,
};
pub use lad::{lad_fit, LadResult};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::PenaltyKind;
use crate::lambda::LambdaProcedureConfig;
use crate::linalg::{Dataset, Matrix, Vector};

/// Three-branch mixture for the incidental parameters: zero with probability
/// `p0`, `W1 (c + W2)` with probability `p1`, uniform on `[-c, c]` with
/// probability `p2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuMechanism {
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub c: f64,
    pub p_w: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    1.0
}

impl MuMechanism {
    pub fn new(p1: f64, p2: f64, c: f64, p_w: f64, tau: f64) -> Result<Self> {
        let m = Self {
            p0: 1.0 - p1 - p2,
            p1,
            p2,
            c,
            p_w,
            tau,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p0, self.p1, self.p2];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "mixture probabilities must be in [0, 1] and sum to 1, got {probs:?}"
            )));
        }
        if !(self.c >= 0.0) || !(self.tau > 0.0) || !(0.0..=1.0).contains(&self.p_w) {
            return Err(Error::InvalidParameter("need c >= 0, tau > 0 and p_w in [0, 1]".into()));
        }
        Ok(())
    }

    fn draw_large<R: Rng>(c: f64, p_w: f64, exp: &Exp<f64>, rng: &mut R) -> f64 {
        let sign = if rng.random::<f64>() < p_w { 1.0 } else { -1.0 };
        sign * (c + exp.sample(rng))
    }
}

/// How the incidental vector of each replicate is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IncidentalSpec {
    /// Fresh i.i.d. draw from the mixture in every replicate.
    Mixture {
        #[serde(flatten)]
        mechanism: MuMechanism,
    },
    /// One draw from the mixture at a dedicated seed, shared by every replicate.
    Frozen {
        #[serde(flatten)]
        mechanism: MuMechanism,
        freeze_seed: u64,
    },
    /// Exactly `count` large values `W1 (c + W2)` in the leading positions,
    /// zero elsewhere; redrawn per replicate.
    Planted {
        count: usize,
        c: f64,
        p_w: f64,
        #[serde(default = "default_tau")]
        tau: f64,
    },
    /// A fixed vector supplied verbatim.
    Fixed { values: Vec<f64> },
}

impl IncidentalSpec {
    pub fn mixture(mechanism: MuMechanism) -> Self {
        Self::Mixture { mechanism }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Self::Mixture { mechanism } | Self::Frozen { mechanism, .. } => mechanism.validate(),
            Self::Planted { count, c, p_w, tau } => {
                if *count > n || !(*c >= 0.0) || !(*tau > 0.0) || !(0.0..=1.0).contains(p_w) {
                    Err(Error::InvalidParameter("invalid planted incidental spec".into()))
                } else {
                    Ok(())
                }
            }
            Self::Fixed { values } => {
                if values.len() != n {
                    Err(Error::DimensionMismatch {
                        what: "fixed incidental vector",
                        expected: n,
                        found: values.len(),
                    })
                } else if values.iter().any(|v| !v.is_finite()) {
                    Err(Error::NonFinite("fixed incidental vector"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// I.i.d. draws from the three-branch mixture.
pub fn gen_incidental<R: Rng>(mech: &MuMechanism, n: usize, rng: &mut R) -> Vector {
    let exp = Exp::new(1.0 / mech.tau).expect("tau validated positive");
    Vector::from_iterator(
        n,
        (0..n).map(|_| {
            let u: f64 = rng.random();
            if u < mech.p0 {
                0.0
            } else if u < mech.p0 + mech.p1 {
                MuMechanism::draw_large(mech.c, mech.p_w, &exp, rng)
            } else {
                mech.c * (2.0 * rng.random::<f64>() - 1.0)
            }
        }),
    )
}

/// The frozen realization used by `IncidentalSpec::Frozen`.
pub fn freeze_incidental(mech: &MuMechanism, n: usize, freeze_seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(freeze_seed);
    rng.set_stream(u64::MAX);
    gen_incidental(mech, n, &mut rng)
}

/// The estimators compared by the RMSE experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    Ols,
    Hard,
    Soft,
    HardTwoStep,
    SoftTwoStep,
    HardPractical,
    SoftPractical,
    Lad,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Oracle,
        Method::Ols,
        Method::Hard,
        Method::Soft,
        Method::HardTwoStep,
        Method::SoftTwoStep,
        Method::HardPractical,
        Method::SoftPractical,
        Method::Lad,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Oracle => "O",
            Method::Ols => "OLS",
            Method::Hard => "H",
            Method::Soft => "S",
            Method::HardTwoStep => "H.TS",
            Method::SoftTwoStep => "S.TS",
            Method::HardPractical => "H.P",
            Method::SoftPractical => "S.P",
            Method::Lad => "LAD",
        }
    }

    /// Penalized methods evaluated across a lambda grid.
    pub fn grid_penalty(&self) -> Option<PenaltyKind> {
        match self {
            Method::Hard | Method::HardTwoStep => Some(PenaltyKind::Hard),
            Method::Soft | Method::SoftTwoStep => Some(PenaltyKind::Soft),
            _ => None,
        }
    }
}

/// Either an explicit list of lambdas or `points` evenly spaced values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaGrid {
    Values(Vec<f64>),
    Linear { from: f64, to: f64, points: usize },
}

impl LambdaGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        let v = match self {
            LambdaGrid::Values(v) => v.clone(),
            LambdaGrid::Linear { from, to, points } => {
                if *points < 2 || !(from < to) {
                    return Err(Error::Config("lambda grid needs from < to and >= 2 points".into()));
                }
                (0..*points)
                    .map(|k| from + (to - from) * k as f64 / (*points - 1) as f64)
                    .collect()
            }
        };
        if v.is_empty() || v.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Config("lambda grid values must be positive".into()));
        }
        Ok(v)
    }
}

/// Starting point of the hard-penalty solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardStart {
    #[default]
    Zero,
    Ols,
}

/// Full parameterization of a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub beta_star: Vec<f64>,
    #[serde(default = "one")]
    pub sigma: f64,
    /// Covariate covariance; identity when absent.
    #[serde(default)]
    pub x_cov: Option<Vec<Vec<f64>>>,
    pub mu: IncidentalSpec,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_soft_grid")]
    pub soft_lambda_grid: LambdaGrid,
    #[serde(default = "default_hard_grid")]
    pub hard_lambda_grid: LambdaGrid,
    #[serde(default)]
    pub hard_start: HardStart,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub lambda_procedure: LambdaProcedureConfig,
}

fn one() -> f64 {
    1.0
}

fn default_max_iter() -> usize {
    500
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_soft_grid() -> LambdaGrid {
    LambdaGrid::Linear {
        from: 0.1,
        to: 6.0,
        points: 40,
    }
}

fn default_hard_grid() -> LambdaGrid {
    LambdaGrid::Linear {
        from: 0.25,
        to: 6.0,
        points: 40,
    }
}

impl ExperimentConfig {
    /// `n` observations, `beta* = (1, 1)`, identity covariates, unit noise,
    /// 1000 replicates and all methods.
    pub fn standard(mu: IncidentalSpec, seed: u64) -> Self {
        Self {
            n: 200,
            beta_star: vec![1.0, 1.0],
            sigma: 1.0,
            x_cov: None,
            mu,
            reps: 1000,
            seed,
            methods: default_methods(),
            soft_lambda_grid: default_soft_grid(),
            hard_lambda_grid: default_hard_grid(),
            hard_start: HardStart::default(),
            max_iter: default_max_iter(),
            lambda_procedure: LambdaProcedureConfig::default(),
        }
    }

    pub fn d(&self) -> usize {
        self.beta_star.len()
    }

    pub fn beta_star(&self) -> Vector {
        Vector::from_column_slice(&self.beta_star)
    }

    pub fn x_cov_matrix(&self) -> Result<Matrix> {
        let d = self.d();
        match &self.x_cov {
            None => Ok(Matrix::identity(d, d)),
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("x_cov must be {d} x {d}")));
                }
                let m = Matrix::from_fn(d, d, |i, j| rows[i][j]);
                if (&m - m.transpose()).amax() > 1e-12 {
                    return Err(Error::Config("x_cov must be symmetric".into()));
                }
                let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
                if min_eig < -1e-10 {
                    return Err(Error::Config("x_cov must be positive semidefinite".into()));
                }
                Ok(m)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d() == 0 || self.n <= self.d() {
            return Err(Error::Config("need at least one coefficient and n > d".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) || self.beta_star.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("sigma must be >= 0 and beta_star finite".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        self.x_cov_matrix()?;
        self.mu.validate(self.n)?;
        self.soft_lambda_grid.values()?;
        self.hard_lambda_grid.values()?;
        self.lambda_procedure.validate()?;
        Ok(())
    }
}

/// The ChaCha8 stream `stream` of the experiment seed.
pub fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One simulated replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub data: Dataset,
    pub mu_true: Vector,
    /// Seed for estimator-side randomness (the lambda procedure split).
    pub aux_seed: u64,
}

/// Generates replicate `rep`: covariate rows `N(0, x_cov)` through the
/// symmetric square root of `x_cov`, noise `N(0, sigma^2)`, and
/// `Y = mu* + X beta* + eps`.
pub fn gen_dataset(config: &ExperimentConfig, rep: usize) -> Result<Replicate> {
    gen_with_root(config, rep, &psd_sqrt(&config.x_cov_matrix()?))
}

/// Symmetric square root of a PSD matrix; round-off negatives count as zero.
pub(crate) fn psd_sqrt(m: &Matrix) -> Matrix {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Matrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub(crate) fn gen_with_root(config: &ExperimentConfig, rep: usize, root: &Matrix) -> Result<Replicate> {
    let n = config.n;
    let d = config.d();
    let base = 4 * rep as u64;

    let mu_true = match &config.mu {
        IncidentalSpec::Mixture { mechanism } => gen_incidental(mechanism, n, &mut replicate_rng(config.seed, base)),
        IncidentalSpec::Frozen { mechanism, freeze_seed } => freeze_incidental(mechanism, n, *freeze_seed),
        IncidentalSpec::Planted { count, c, p_w, tau } => {
            let mut rng = replicate_rng(config.seed, base);
            let exp = Exp::new(1.0 / tau).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Vector::from_iterator(
                n,
                (0..n).map(|i| {
                    if i < *count {
                        MuMechanism::draw_large(*c, *p_w, &exp, &mut rng)
                    } else {
                        0.0
                    }
                }),
            )
        }
        IncidentalSpec::Fixed { values } => Vector::from_column_slice(values),
    };

    let mut xrng = replicate_rng(config.seed, base + 1);
    let z = Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut xrng));
    // Equal covariance matrices give bitwise equal designs.
    let x = z * root;
    let mut erng = replicate_rng(config.seed, base + 2);
    let eps = Vector::from_fn(n, |_, _| {
        let e: f64 = StandardNormal.sample(&mut erng);
        config.sigma * e
    });
    let y = &mu_true + &x * config.beta_star() + eps;
    let aux_seed = replicate_rng(config.seed, base + 3).random::<u64>();

    let data = Dataset::new(x, y)?;
    Ok(Replicate {
        data,
        mu_true,
        aux_seed,
    })
}
