use incidental::inference::{chisq_region_test, two_step_fit};
use incidental::io::{parse_experiment_file, rmse_tsv};
use incidental::lambda::{data_driven_lambda, LambdaProcedureConfig};
use incidental::simulation::{
    covariance_experiment, coverage_experiment, gen_dataset, qq_experiment, rmse_experiment, selection_experiment,
    ExperimentConfig, IncidentalSpec, Method, MuMechanism,
};
use incidental::{fit, Penalty, PenaltyKind, SolverConfig};

fn mech(p1: f64, p2: f64, c: f64, p_w: f64) -> MuMechanism {
    MuMechanism::new(p1, p2, c, p_w, 1.0).unwrap()
}

fn clean() -> IncidentalSpec {
    IncidentalSpec::mixture(mech(0.0, 0.0, 1.0, 0.5))
}

#[test]
fn exact_data_gives_zero_rmse() {
    let mut cfg = ExperimentConfig::standard(clean(), 3);
    cfg.sigma = 0.0;
    cfg.reps = 20;
    let report = rmse_experiment(&cfg).unwrap();
    for m in &report.methods {
        match m.method {
            // The data-driven lambda has no residual spread to work with.
            Method::HardPractical | Method::SoftPractical => assert_eq!(m.failures, 20),
            _ => {
                assert_eq!(m.failures, 0, "{:?}", m.method);
                assert!(m.best_point().rmse() < 1e-9, "{:?}", m.method);
            }
        }
    }
}

#[test]
fn rmse_bounds_bias_everywhere() {
    let mut cfg = ExperimentConfig::standard(IncidentalSpec::mixture(mech(0.1, 0.1, 3.0, 0.75)), 8);
    cfg.reps = 60;
    let report = rmse_experiment(&cfg).unwrap();
    for m in &report.methods {
        for p in &m.points {
            for t in &p.targets {
                assert!(
                    t.rmse + 1e-15 >= t.bias.abs(),
                    "{:?} {} {:?}",
                    m.method,
                    t.target,
                    p.lambda
                );
            }
        }
    }
    let tsv = rmse_tsv(&report);
    let rows = report.methods.iter().map(|m| m.points.len() * 3).sum::<usize>();
    assert_eq!(tsv.lines().count(), rows + 1);
}

#[test]
fn large_contamination_ordering() {
    let mut cfg = ExperimentConfig::standard(IncidentalSpec::mixture(mech(0.1, 0.1, 5.0, 0.75)), 21);
    cfg.reps = 400;
    cfg.methods = vec![Method::Oracle, Method::Ols, Method::Hard, Method::Soft];
    let report = rmse_experiment(&cfg).unwrap();
    let rmse = |m| report.method(m).unwrap().best_point().rmse();
    let best = rmse(Method::Hard).min(rmse(Method::Soft));
    assert!(rmse(Method::Oracle) <= best + 0.01);
    assert!(best < rmse(Method::Ols));
}

#[test]
fn selection_extremes() {
    let mut cfg = ExperimentConfig::standard(clean(), 4);
    cfg.reps = 100;
    assert_eq!(selection_experiment(&cfg, 10.0).unwrap().frequency, 1.0);
    assert!(selection_experiment(&cfg, 0.1).unwrap().frequency < 0.05);
}

#[test]
fn selection_with_theory_sized_lambda() {
    let mut cfg = ExperimentConfig::standard(
        IncidentalSpec::Planted {
            count: 10,
            c: 45.0,
            p_w: 0.5,
            tau: 1.0,
        },
        5,
    );
    cfg.n = 500;
    cfg.reps = 300;
    let report = selection_experiment(&cfg, 4.5).unwrap();
    assert!(report.frequency >= 0.95, "{}", report.frequency);
}

#[test]
fn near_exact_data_covers() {
    let mut cfg = ExperimentConfig::standard(clean(), 6);
    cfg.sigma = 1e-3;
    cfg.reps = 300;
    let report = coverage_experiment(&cfg, 0.05, &[]).unwrap();
    let cell = &report.cells[0];
    assert_eq!(cell.failures, 0);
    assert!(
        cell.coverage[0] >= 0.95 - 3.0 * cell.std_error[0],
        "{:?}",
        cell.coverage
    );
}

#[test]
fn uncontaminated_draws_look_normal() {
    let mut cfg = ExperimentConfig::standard(clean(), 7);
    cfg.n = 3000;
    cfg.reps = 300;
    let report = qq_experiment(&cfg, 4.0).unwrap();
    for s in &report.series {
        assert!(s.ks.statistic < 0.1, "{} {}", s.estimator, s.ks.statistic);
        assert_eq!(s.sorted.len(), 300);
        assert!(s.sorted.windows(2).all(|w| w[0] <= w[1]));
    }
    assert_eq!(report, qq_experiment(&cfg, 4.0).unwrap());
}

#[test]
fn sigma_hat_is_consistent() {
    let mut cfg = ExperimentConfig::standard(IncidentalSpec::mixture(mech(0.005, 0.0, 20.0, 0.75)), 9);
    cfg.n = 5000;
    let sigmas: Vec<f64> = (0..100)
        .map(|rep| {
            let r = gen_dataset(&cfg, rep).unwrap();
            let first = fit(&r.data, &Penalty::soft(3.0).unwrap(), &SolverConfig::default()).unwrap();
            two_step_fit(&r.data, &first).unwrap().sigma_hat
        })
        .collect();
    let mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    assert!((mean - 1.0).abs() <= 0.02, "{mean}");
}

#[test]
fn penalized_covariance_tracks_oracle() {
    let mut cfg = ExperimentConfig::standard(IncidentalSpec::mixture(mech(0.005, 0.0, 20.0, 0.75)), 10);
    cfg.n = 2000;
    cfg.reps = 1000;
    let report = covariance_experiment(&cfg, 3.0).unwrap();
    assert!(report.relative_to_oracle <= 0.15, "{}", report.relative_to_oracle);
}

#[test]
fn chi_square_region_covers() {
    let cfg = ExperimentConfig::standard(IncidentalSpec::mixture(mech(0.01, 0.01, 5.0, 0.75)), 12);
    let beta_star = cfg.beta_star();
    let reps = 600;
    let mut hits = 0;
    for rep in 0..reps {
        let r = gen_dataset(&cfg, rep).unwrap();
        let first = fit(&r.data, &Penalty::soft(3.5).unwrap(), &SolverConfig::default()).unwrap();
        let ts = two_step_fit(&r.data, &first).unwrap();
        if chisq_region_test(&ts, &beta_star, 0.05).unwrap().member {
            hits += 1;
        }
    }
    let rate = hits as f64 / reps as f64;
    let se = (0.95f64 * 0.05 / reps as f64).sqrt();
    assert!((rate - 0.95).abs() <= 3.5 * se, "{rate}");
}

#[test]
fn data_driven_lambda_on_simulated_data() {
    let cfg = ExperimentConfig::standard(IncidentalSpec::mixture(mech(0.1, 0.1, 5.0, 0.5)), 14);
    let r = gen_dataset(&cfg, 0).unwrap();
    let proc = LambdaProcedureConfig {
        seed: 3,
        ..LambdaProcedureConfig::default()
    };
    for kind in [PenaltyKind::Soft, PenaltyKind::Hard] {
        let sel = data_driven_lambda(&r.data, kind, &proc, &SolverConfig::default()).unwrap();
        assert!(sel.lambda_low <= sel.lambda_opt && sel.lambda_opt <= sel.lambda_high);
        assert_eq!(sel.test_loss_curve.len(), 50);
        let again = data_driven_lambda(&r.data, kind, &proc, &SolverConfig::default()).unwrap();
        assert_eq!(sel.lambda_opt, again.lambda_opt);
    }
}

#[test]
fn bundled_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            parse_experiment_file(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            count += 1;
        }
    }
    assert!(count >= 10);
}
