mod support;

use cdekf_core::experiment::{generate_run_data, render_plot, run_variants, write_csv};
use cdekf_core::models::lti_oracle_model;
use cdekf_core::sim::{euler_maruyama, synthesize_measurements};
use cdekf_core::*;
use support::lti_oracle::exact_kalman;

fn small(scenario: Scenario) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(scenario);
    c.runs = 6;
    c.timing = false;
    c
}

fn csv_of(reports: &[RunReport]) -> String {
    let mut buf = Vec::new();
    write_csv(reports, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn variants_share_one_data_set_per_run() {
    let config = small(Scenario::CstrAccuracy);
    let model = config.scenario.model(2.0).unwrap();
    for r in 0..3 {
        let data = generate_run_data(&config, 2.0, r).unwrap();
        let again = generate_run_data(&config, 2.0, r).unwrap();
        assert_eq!(data.checksum, again.checksum);
        let outcomes = run_variants(&config, model.as_ref(), &data, r).unwrap();
        assert_eq!(outcomes.len(), FilterVariant::ALL.len());
        assert!(outcomes.iter().all(|o| o.checksum == data.checksum && o.instants == 15));
    }
    let a = generate_run_data(&config, 2.0, 0).unwrap();
    let b = generate_run_data(&config, 2.0, 1).unwrap();
    assert_ne!(a.checksum, b.checksum, "distinct runs must draw distinct noise");
}

#[test]
fn reports_do_not_depend_on_the_thread_count() {
    let mut config = small(Scenario::CstrIllCond);
    config.sweep = vec![1e-2, 1e-6];
    let parallel = run_experiment(&config).unwrap();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_experiment(&config))
        .unwrap();
    assert_eq!(parallel.reports, serial.reports);
    let csv = csv_of(&parallel.reports);
    assert_eq!(csv, csv_of(&serial.reports));
    assert!(csv.starts_with(CSV_HEADER));
    assert_eq!(csv.lines().count(), 1 + 2 * FilterVariant::ALL.len());
    // Timing disabled leaves the cpu column empty rather than zero.
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(4) == Some("")));
}

#[test]
fn armse_on_the_linear_model_matches_the_exact_filter() {
    let mut config = small(Scenario::LtiOracle);
    config.runs = 12;
    config.let_tol = 1e-8;
    config.variants = vec![FilterVariant::StdEkf, FilterVariant::Mde, FilterVariant::SrMdeBlockQr];
    let model = LtiModel::reference();
    let mut truth = Vec::new();
    let mut kf = Vec::new();
    for r in 0..config.runs {
        let data = generate_run_data(&config, 0.5, r).unwrap();
        kf.push(exact_kalman(&model, &data.measurements).into_iter().map(|s| s.mean).collect::<Vec<_>>());
        truth.push(data.truth_at_measurements);
    }
    let oracle = armse(&truth, &kf).unwrap();
    let outcome = run_experiment(&config).unwrap();
    for r in &outcome.reports {
        let got = r.armse.expect("linear model never diverges");
        assert!(((got - oracle) / oracle).abs() <= 1e-6, "{}: {got} vs {oracle}", r.variant);
    }
}

#[test]
fn armse_sums_components_and_averages_runs_and_instants() {
    let truth = vec![vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![vec![0.0, 0.0], vec![0.0, 0.0]]];
    let est = vec![vec![vec![3.0, 4.0], vec![1.0, 1.0]], vec![vec![0.0, 0.0], vec![0.0, 0.0]]];
    // One error vector of squared norm 25 over M K = 4 instants.
    assert_eq!(armse(&truth, &est).unwrap(), 2.5);
    assert!(armse(&truth, &est[..1]).is_err());
}

#[test]
fn euler_maruyama_matches_ornstein_uhlenbeck_moments() {
    let sigma2 = 0.5;
    let model = lti_oracle_model(
        Matrix::from_rows(&[&[-1.0]]),
        Matrix::from_rows(&[&[1.0]]),
        NoiseSpec {
            diffusion: Matrix::identity(1),
            intensity: Matrix::from_rows(&[&[sigma2]]),
            meas_cov: Matrix::from_rows(&[&[0.09]]),
            x0_mean: vec![2.0],
            x0_cov: Matrix::identity(1),
        },
    )
    .unwrap();
    let runs = 4000;
    let (mut sum, mut sum2, mut resid2) = (0.0, 0.0, 0.0);
    let mut count = 0;
    for seed in 0..runs {
        let traj = euler_maruyama(&model, &[2.0], 1e-2, 1.0, seed).unwrap();
        let x = traj.last_state()[0];
        sum += x;
        sum2 += x * x;
        for m in synthesize_measurements(&traj, &model, 0.25, seed).unwrap() {
            let e = m.value[0] - traj.state_at(m.time).unwrap()[0];
            resid2 += e * e;
            count += 1;
        }
    }
    let n = runs as f64;
    let mean = sum / n;
    let var = sum2 / n - mean * mean;
    // Exact moments of the Euler recursion, which differ from the continuous ones at O(dt).
    let (a, steps) = (1.0 - 1e-2, 100);
    let exact_mean = 2.0 * f64::powi(a, steps);
    let exact_var = sigma2 * 1e-2 * (1.0 - a.powi(2 * steps)) / (1.0 - a * a);
    assert!((mean - exact_mean).abs() < 4.0 * (exact_var / n).sqrt(), "{mean} vs {exact_mean}");
    assert!((var / exact_var - 1.0).abs() < 0.08, "{var} vs {exact_var}");
    let r = resid2 / count as f64;
    assert!((r / 0.09 - 1.0).abs() < 0.05, "measurement noise variance {r}");
}

#[test]
fn plots_render_every_variant() {
    let mut config = small(Scenario::CstrAccuracy);
    config.runs = 2;
    config.sweep = vec![1.0, 2.0];
    let outcome = run_experiment(&config).unwrap();
    let svg = render_plot(&outcome.reports, PlotKind::ArmseVsDelta).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    for v in FilterVariant::ALL {
        assert!(svg.contains(&format!(r#"data-variant="{}""#, v.id())));
    }
    assert_eq!(svg.matches(r#"class="mark""#).count(), 2 * FilterVariant::ALL.len());
}
