use proptest::prelude::*;

use incidental::simulation::lad_fit;
use incidental::{
    fit, hard_threshold, huber_rho, kkt_check, objective, ols_solve, profiled_loss, soft_threshold, update_mu, Dataset,
    Matrix, Penalty, PenaltyKind, SolverConfig, Vector,
};

fn dataset(max_n: usize, max_d: usize) -> impl Strategy<Value = Dataset> {
    (1..=max_d)
        .prop_flat_map(move |d| (Just(d), d + 2..=max_n))
        .prop_flat_map(|(d, n)| {
            (
                prop::collection::vec(-3.0f64..3.0, n * d),
                prop::collection::vec(-2.0f64..2.0, d),
                prop::collection::vec((-1.0f64..1.0, 0.0f64..1.0, -20.0f64..20.0), n),
            )
                .prop_map(move |(xs, beta, noise)| {
                    let x = Matrix::from_row_slice(n, d, &xs);
                    let shift =
                        Vector::from_iterator(n, noise.iter().map(|&(e, u, big)| if u < 0.15 { e + big } else { e }));
                    let y = &x * Vector::from_vec(beta) + shift;
                    Dataset::new(x, y).unwrap()
                })
        })
        .prop_filter("well conditioned", |data| {
            let sv = data.x().clone().svd(false, false).singular_values;
            sv.min() > 1e-2 * sv.max()
        })
}

fn solver() -> SolverConfig {
    SolverConfig {
        max_iter: 2000,
        ..SolverConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn soft_threshold_shrinks_toward_zero(v in -50.0f64..50.0, lambda in 0.01f64..10.0) {
        let s = soft_threshold(v, lambda);
        prop_assert!(s.abs() <= v.abs());
        prop_assert!(s == 0.0 || s.signum() == v.signum());
        prop_assert!((v - s).abs() <= lambda + 1e-12);
    }

    #[test]
    fn hard_threshold_keeps_or_kills(v in -50.0f64..50.0, lambda in 0.01f64..10.0) {
        let h = hard_threshold(v, lambda);
        prop_assert!(h == 0.0 || h == v);
        prop_assert_eq!(h == 0.0, v.abs() <= lambda);
    }

    #[test]
    fn profiled_loss_matches_joint_objective(data in dataset(40, 4), lambda in 0.05f64..5.0, b in -5.0f64..5.0) {
        let penalty = Penalty::soft(lambda).unwrap();
        let beta = Vector::from_element(data.d(), b);
        let mu = update_mu(&data, &beta, &penalty).unwrap();
        let joint = objective(&data, &mu, &beta, &penalty).unwrap();
        let profiled = profiled_loss(&data, &beta, lambda).unwrap();
        prop_assert!((joint - profiled).abs() <= 1e-10 * (1.0 + profiled.abs()));
    }

    #[test]
    fn huber_is_continuous_at_the_knot(lambda in 0.01f64..10.0) {
        let eps = 1e-9;
        prop_assert!((huber_rho(lambda - eps, lambda) - huber_rho(lambda + eps, lambda)).abs() < 1e-6 * (1.0 + lambda));
    }

    #[test]
    fn objective_never_increases(data in dataset(60, 3), lambda in 0.1f64..4.0, hard in any::<bool>()) {
        let kind = if hard { PenaltyKind::Hard } else { PenaltyKind::Soft };
        let res = fit(&data, &Penalty::new(kind, lambda).unwrap(), &solver()).unwrap();
        for w in res.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()), "{} -> {}", w[0], w[1]);
        }
        let last = *res.objective_trace.last().unwrap();
        prop_assert!(res.objective <= last + 1e-9 * (1.0 + last.abs()));
    }

    #[test]
    fn converged_soft_fits_satisfy_kkt(data in dataset(60, 4), lambda in 0.1f64..4.0) {
        let res = fit(&data, &Penalty::soft(lambda).unwrap(), &solver()).unwrap();
        prop_assume!(res.converged);
        let report = kkt_check(&data, &res, lambda, 1e-8).unwrap();
        prop_assert!(report.passed, "{report:?}");
    }

    #[test]
    fn soft_fit_is_scale_equivariant(data in dataset(40, 3), lambda in 0.2f64..3.0, c in 0.1f64..10.0) {
        let base = fit(&data, &Penalty::soft(lambda).unwrap(), &solver()).unwrap();
        let scaled = Dataset::new(data.x().clone(), data.y() * c).unwrap();
        let res = fit(&scaled, &Penalty::soft(c * lambda).unwrap(), &solver()).unwrap();
        prop_assume!(base.converged && res.converged);
        let gap = (&res.beta - &base.beta * c).amax();
        prop_assert!(gap <= 1e-6 * (1.0 + c * base.beta.amax()), "gap {gap}");
    }

    #[test]
    fn soft_fit_is_regression_equivariant(data in dataset(40, 3), lambda in 0.2f64..3.0, shift in -3.0f64..3.0) {
        let base = fit(&data, &Penalty::soft(lambda).unwrap(), &solver()).unwrap();
        let b = Vector::from_element(data.d(), shift);
        let moved = Dataset::new(data.x().clone(), data.y() + data.x() * &b).unwrap();
        let res = fit(&moved, &Penalty::soft(lambda).unwrap(), &solver()).unwrap();
        prop_assume!(base.converged && res.converged);
        prop_assert!((&res.beta - (&base.beta + b)).amax() <= 1e-6);
    }

    #[test]
    fn lad_never_worse_than_ols(data in dataset(50, 3)) {
        let res = lad_fit(&data).unwrap();
        let ols = ols_solve(data.x(), data.y()).unwrap();
        let l1: f64 = data.residuals(&ols).unwrap().iter().map(|r| r.abs()).sum();
        prop_assert!(res.objective <= l1);
    }

    #[test]
    fn huge_lambda_gives_ols(data in dataset(40, 3)) {
        let lambda = 1e3 * (1.0 + data.y().amax());
        let res = fit(&data, &Penalty::soft(lambda).unwrap(), &SolverConfig::default()).unwrap();
        let ols = ols_solve(data.x(), data.y()).unwrap();
        prop_assert!(res.active_set.is_empty());
        prop_assert!((&res.beta - ols).amax() <= 1e-9 * (1.0 + res.beta.amax()));
    }
}
