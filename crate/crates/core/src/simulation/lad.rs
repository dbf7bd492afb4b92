use crate::error::{Error, Result};
use crate::linalg::{ols_solve, Dataset, Vector};

const WEIGHT_FLOOR: f64 = 1e-6;
const MAX_ITER: usize = 200;
const REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LadResult {
    pub beta: Vector,
    /// `sum_i |Y_i - X_i^T beta|`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn l1(data: &Dataset, beta: &Vector) -> Result<f64> {
    Ok(data.residuals(beta)?.iter().map(|r| r.abs()).sum())
}

/// Least absolute deviations by iteratively reweighted least squares, started
/// at OLS with weights `1 / max(|r_i|, 1e-6)`. The best iterate seen is
/// returned, so the objective never exceeds that of OLS.
pub fn lad_fit(data: &Dataset) -> Result<LadResult> {
    let x = data.x();
    let y = data.y();
    let mut beta = ols_solve(x, y)?;
    let mut obj = l1(data, &beta)?;
    let mut best = (beta.clone(), obj);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITER {
        iterations += 1;
        let r = data.residuals(&beta)?;
        let sw = r.map(|v| 1.0 / v.abs().max(WEIGHT_FLOOR).sqrt());
        let mut xw = x.clone();
        for (mut row, w) in xw.row_iter_mut().zip(sw.iter()) {
            row *= *w;
        }
        let yw = y.component_mul(&sw);
        beta = match ols_solve(&xw, &yw) {
            Ok(b) => b,
            Err(Error::SingularDesign { .. }) => break,
            Err(e) => return Err(e),
        };
        let next = l1(data, &beta)?;
        if next < best.1 {
            best = (beta.clone(), next);
        }
        let change = (obj - next).abs();
        obj = next;
        if change <= REL_TOL * obj.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    Ok(LadResult {
        beta: best.0,
        objective: best.1,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn intercept_only_gives_median() {
        let y = [3.0, -1.0, 7.5, 2.0, 100.0, 0.5, 4.0];
        let data = Dataset::new(Matrix::from_element(7, 1, 1.0), Vector::from_column_slice(&y)).unwrap();
        let res = lad_fit(&data).unwrap();
        assert!((res.beta[0] - 3.0).abs() < 1e-4, "{}", res.beta[0]);
    }

    #[test]
    fn never_worse_than_ols() {
        let x = Matrix::from_fn(40, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let y = Vector::from_fn(40, |i, _| {
            let base = x[(i, 0)] - 0.5 * x[(i, 1)];
            if i % 9 == 0 {
                base + 50.0
            } else {
                base + ((i * 13 % 7) as f64 - 3.0) * 0.1
            }
        });
        let data = Dataset::new(x, y).unwrap();
        let res = lad_fit(&data).unwrap();
        let ols = ols_solve(data.x(), data.y()).unwrap();
        assert!(res.objective <= l1(&data, &ols).unwrap());
        assert!((res.beta[0] - 1.0).abs() < 0.1 && (res.beta[1] + 0.5).abs() < 0.1);
    }
}
