//! Distribution functions and small sample statistics used by the inference
//! routines and the Monte Carlo reports.

use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Lower-tail quantile of the standard normal.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("probability {p} outside (0, 1)")));
    }
    Ok(-std::f64::consts::SQRT_2 * erfc_inv(2.0 * p))
}

/// Upper `alpha/2` point `z` of the standard normal, `P(Z > z) = alpha/2`.
pub fn z_two_sided(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    normal_quantile(1.0 - alpha / 2.0)
}

/// Upper-`alpha` quantile of the chi-squared distribution with `df` degrees of
/// freedom, `P(X > q) = alpha`, solved by bisection on the regularized upper
/// incomplete gamma function.
pub fn chi_squared_upper_quantile(alpha: f64, df: usize) -> Result<f64> {
    check_alpha(alpha)?;
    if df == 0 {
        return Err(Error::InvalidParameter("degrees of freedom must be positive".into()));
    }
    let a = df as f64 / 2.0;
    let tail = |x: f64| gamma_ur(a, x / 2.0);
    let mut lo = 0.0f64;
    let mut hi = df as f64 + 10.0;
    while tail(hi) > alpha {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Upper-`alpha` quantile of the chi distribution (square root of chi-squared).
pub fn chi_upper_quantile(alpha: f64, df: usize) -> Result<f64> {
    Ok(chi_squared_upper_quantile(alpha, df)?.sqrt())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1)")))
    }
}

/// One-sample Kolmogorov-Smirnov test against N(0, 1).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_test_standard_normal(samples: &[f64]) -> Result<KsTest> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("KS test needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("KS sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            let above = (i as f64 + 1.0) / n - f;
            let below = f - i as f64 / n;
            above.max(below)
        })
        .fold(0.0f64, f64::max);
    Ok(KsTest {
        statistic,
        p_value: kolmogorov_tail(statistic, sorted.len()),
    })
}

/// `P(D_n > d)` from the Kolmogorov limit law with Stephens' finite-n scaling.
pub fn kolmogorov_tail(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let t = d * (sn + 0.12 + 0.11 / sn);
    if t <= 0.0 {
        return 1.0;
    }
    if t < 1.0 {
        // Jacobi form of the CDF converges fast for small t.
        let mut cdf = 0.0;
        for k in (1..=41).step_by(2) {
            let kf = k as f64;
            cdf += (-kf * kf * std::f64::consts::PI.powi(2) / (8.0 * t * t)).exp();
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / t;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * t * t).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the `n - 1` denominator.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Nearest-rank empirical quantile: the `ceil(q n)`-th smallest value.
pub fn nearest_rank_quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidParameter("quantile of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidParameter(format!("quantile level {q} outside (0, 1]")));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}
