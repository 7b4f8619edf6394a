use std::convert::Infallible;

use cdekf_core::odesolve::{integrate, integrate_observed, OdeMethod, OdeOptions};

const METHODS: [OdeMethod; 2] = [OdeMethod::NonstiffRK45, OdeMethod::StiffImplicit];

fn stiff_rhs(t: f64, y: &[f64]) -> Result<Vec<f64>, Infallible> {
    Ok(vec![-1e4 * (y[0] - t.cos())])
}

fn decay_error(tol: f64, method: OdeMethod) -> f64 {
    let opts = OdeOptions::with_tolerance(tol, method);
    let (y, _) = integrate(|_, y: &[f64]| Ok::<_, Infallible>(vec![-y[0]]), &[1.0], (0.0, 1.0), &opts).unwrap();
    (y[0] - (-1f64).exp()).abs()
}

#[test]
fn implicit_method_handles_stiff_relaxation() {
    let stiff = OdeOptions::with_tolerance(1e-4, OdeMethod::StiffImplicit);
    let (y_s, s) = integrate(stiff_rhs, &[0.0], (0.0, 1.0), &stiff).unwrap();
    let explicit = OdeOptions::with_tolerance(1e-4, OdeMethod::NonstiffRK45);
    let (y_e, e) = integrate(stiff_rhs, &[0.0], (0.0, 1.0), &explicit).unwrap();
    // y(1) = (lambda^2 cos 1 + lambda sin 1) / (lambda^2 + 1) up to a negligible transient.
    let lambda: f64 = 1e4;
    let exact = (lambda * lambda * 1f64.cos() + lambda * 1f64.sin()) / (lambda * lambda + 1.0);
    assert!((y_s[0] - exact).abs() < 1e-3);
    assert!((y_e[0] - exact).abs() < 1e-3);
    assert!(s.accepted_steps < 500, "{s:?}");
    // The explicit pair is pinned to its stability bound h ~ 3.3 / lambda.
    assert!(e.accepted_steps > 2500, "{e:?}");
    assert!(e.rhs_evaluations > 10_000, "{e:?}");
    assert!(e.accepted_steps > 10 * s.accepted_steps);
}

#[test]
fn halving_tolerance_never_hurts_much() {
    for method in METHODS {
        let errs: Vec<f64> = (3..=10).map(|p| decay_error(10f64.powi(-p), method)).collect();
        for w in errs.windows(2) {
            assert!(w[1] <= 2.0 * w[0], "{method:?}: {errs:?}");
        }
    }
}

#[test]
fn decay_error_within_hundred_tol() {
    for method in METHODS {
        for tol in [1e-4, 1e-6, 1e-8] {
            let err = decay_error(tol, method);
            assert!(err <= 100.0 * tol, "{method:?} tol {tol}: {err}");
        }
    }
}

#[test]
fn accepted_steps_respect_max_step() {
    for method in METHODS {
        for max_step in [0.1, 0.03] {
            let opts = OdeOptions::with_tolerance(1e-3, method).max_step(max_step);
            let mut longest: f64 = 0.0;
            let (_, stats) = integrate_observed(
                |_, y: &[f64]| Ok::<_, Infallible>(vec![y[1], -y[0]]),
                &[1.0, 0.0],
                (0.0, 5.0),
                &opts,
                |r| {
                    if r.accepted {
                        longest = longest.max(r.h);
                    }
                },
            )
            .unwrap();
            assert!(longest <= max_step, "{method:?}: {longest}");
            assert!(stats.accepted_steps as f64 >= 5.0 / max_step - 1e-9);
        }
    }
}

#[test]
fn integration_is_deterministic() {
    for method in METHODS {
        let opts = OdeOptions::with_tolerance(1e-6, method);
        let run = || {
            integrate(
                |t, y: &[f64]| Ok::<_, Infallible>(vec![y[1], (1.0 - y[0] * y[0]) * y[1] - y[0] + t.sin()]),
                &[2.0, 0.0],
                (0.0, 3.0),
                &opts,
            )
            .unwrap()
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}
