//! Adaptive integration of `y' = f(t, y)` over a single interval.
//!
//! Two methods share one mixed absolute/relative error control:
//! an explicit Dormand-Prince 5(4) pair for nonstiff problems and an
//! L-stable Rosenbrock 2(3) triple (the formula behind MATLAB's `ode23s`)
//! with a forward-difference Jacobian for stiff ones. Only the terminal
//! state is returned; there is no dense output.

use thiserror::Error;

use crate::linalg::{LuFactors, Matrix};

/// Integrator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OdeMethod {
    NonstiffRK45,
    StiffImplicit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
    pub initial_step: Option<f64>,
    pub method: OdeMethod,
}

impl OdeOptions {
    pub const DEFAULT_TOLERANCE: f64 = 1e-4;
    pub const DEFAULT_MAX_STEP: f64 = 0.1;

    /// `AbsTol = RelTol = tol`, `MaxStep = 0.1`.
    pub fn with_tolerance(tol: f64, method: OdeMethod) -> Self {
        OdeOptions {
            abs_tol: tol,
            rel_tol: tol,
            max_step: Self::DEFAULT_MAX_STEP,
            initial_step: None,
            method,
        }
    }

    pub fn max_step(mut self, max_step: f64) -> Self {
        self.max_step = max_step;
        self
    }

    fn validate(&self) -> Result<(), String> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.abs_tol) || !positive(self.rel_tol) {
            return Err(format!(
                "tolerances must be positive (abs {}, rel {})",
                self.abs_tol, self.rel_tol
            ));
        }
        if !positive(self.max_step) {
            return Err(format!("max step must be positive, got {}", self.max_step));
        }
        if let Some(h) = self.initial_step {
            if !positive(h) {
                return Err(format!("initial step must be positive, got {h}"));
            }
        }
        Ok(())
    }
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions::with_tolerance(Self::DEFAULT_TOLERANCE, OdeMethod::NonstiffRK45)
    }
}

/// Work counters for one or more integrations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OdeStats {
    pub accepted_steps: u64,
    pub rejected_steps: u64,
    pub rhs_evaluations: u64,
    pub jacobian_evaluations: u64,
}

impl std::ops::AddAssign for OdeStats {
    fn add_assign(&mut self, rhs: Self) {
        self.accepted_steps += rhs.accepted_steps;
        self.rejected_steps += rhs.rejected_steps;
        self.rhs_evaluations += rhs.rhs_evaluations;
        self.jacobian_evaluations += rhs.jacobian_evaluations;
    }
}

/// One attempted step, reported to an observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
    pub error_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError<E> {
    #[error("right-hand side failed at t = {t}")]
    RhsFailure { t: f64, source: E },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("invalid integration request: {0}")]
    Invalid(String),
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
const UNDERFLOW_FRACTION: f64 = 1e-14;

/// Integrates from `t_span.0` to `t_span.1` and returns the terminal state.
pub fn integrate<E, F>(
    rhs: F,
    y0: &[f64],
    t_span: (f64, f64),
    opts: &OdeOptions,
) -> Result<(Vec<f64>, OdeStats), OdeError<E>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
{
    integrate_observed(rhs, y0, t_span, opts, |_| {})
}

/// [`integrate`] with a callback invoked after every attempted step.
pub fn integrate_observed<E, F, O>(
    rhs: F,
    y0: &[f64],
    t_span: (f64, f64),
    opts: &OdeOptions,
    observer: O,
) -> Result<(Vec<f64>, OdeStats), OdeError<E>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
    O: FnMut(StepRecord),
{
    opts.validate().map_err(OdeError::Invalid)?;
    let (ta, tb) = t_span;
    if !(ta.is_finite() && tb.is_finite()) || tb < ta {
        return Err(OdeError::Invalid(format!("bad time span [{ta}, {tb}]")));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::Invalid("initial state is not finite".into()));
    }
    if tb == ta {
        return Ok((y0.to_vec(), OdeStats::default()));
    }
    let driver = Driver {
        rhs,
        observer,
        opts: *opts,
        stats: OdeStats::default(),
    };
    match opts.method {
        OdeMethod::NonstiffRK45 => driver.dormand_prince(y0, ta, tb),
        OdeMethod::StiffImplicit => driver.rosenbrock(y0, ta, tb),
    }
}

struct Driver<F, O> {
    rhs: F,
    observer: O,
    opts: OdeOptions,
    stats: OdeStats,
}

/// Weighted RMS of `err_i / (atol + rtol * max(|y_i|, |y_new_i|))`.
fn error_norm(err: &[f64], y: &[f64], y_new: &[f64], opts: &OdeOptions) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let sum: f64 = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(e, (a, b))| {
            let sc = opts.abs_tol + opts.rel_tol * a.abs().max(b.abs());
            (e / sc) * (e / sc)
        })
        .sum();
    (sum / err.len() as f64).sqrt()
}

fn axpy(y: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for &(c, k) in terms {
        if c == 0.0 {
            continue;
        }
        for (o, kv) in out.iter_mut().zip(k) {
            *o += h * c * kv;
        }
    }
    out
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Rosenbrock 2(3) constants.
const ROS_D: f64 = 0.292_893_218_813_452_5; // 1 / (2 + sqrt 2)
const ROS_E32: f64 = 7.414_213_562_373_095; // 6 + sqrt 2

impl<E, F, O> Driver<F, O>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
    O: FnMut(StepRecord),
{
    fn eval(&mut self, t: f64, y: &[f64]) -> Result<Vec<f64>, OdeError<E>> {
        self.stats.rhs_evaluations += 1;
        (self.rhs)(t, y).map_err(|source| OdeError::RhsFailure { t, source })
    }

    /// A trial-stage evaluation; `None` when the stage state or its derivative is not finite,
    /// which rejects the step instead of handing garbage to the right-hand side.
    fn stage(&mut self, t: f64, y: &[f64]) -> Result<Option<Vec<f64>>, OdeError<E>> {
        if y.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        let f = self.eval(t, y)?;
        Ok(f.iter().all(|v| v.is_finite()).then_some(f))
    }

    fn first_step(&self, span: f64) -> f64 {
        self.opts
            .initial_step
            .unwrap_or(0.01 * span)
            .min(self.opts.max_step)
            .min(span)
    }

    /// Clips a trial step to the interval end and checks for underflow.
    fn clip(&self, t: f64, h: f64, tb: f64, span: f64) -> Result<f64, OdeError<E>> {
        if h < UNDERFLOW_FRACTION * span {
            return Err(OdeError::StepUnderflow { t, h });
        }
        let h = h.min(self.opts.max_step);
        Ok(if t + h >= tb { tb - t } else { h })
    }

    fn dormand_prince(mut self, y0: &[f64], ta: f64, tb: f64) -> Result<(Vec<f64>, OdeStats), OdeError<E>> {
        let span = tb - ta;
        let mut t = ta;
        let mut y = y0.to_vec();
        let mut h = self.first_step(span);
        let mut k1 = self.eval(t, &y)?;
        let mut last_rejected = false;
        while t < tb {
            h = self.clip(t, h, tb, span)?;
            let attempt = 'attempt: {
                macro_rules! stage {
                    ($t:expr, $y:expr) => {
                        match self.stage($t, $y)? {
                            Some(k) => k,
                            None => break 'attempt None,
                        }
                    };
                }
                let k2 = stage!(t + C2 * h, &axpy(&y, h, &[(A21, &k1)]));
                let k3 = stage!(t + C3 * h, &axpy(&y, h, &[(A31, &k1), (A32, &k2)]));
                let k4 = stage!(t + C4 * h, &axpy(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
                let k5 = stage!(
                    t + C5 * h,
                    &axpy(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)])
                );
                let k6 = stage!(
                    t + h,
                    &axpy(
                        &y,
                        h,
                        &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
                    )
                );
                let y_new = axpy(
                    &y,
                    h,
                    &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
                );
                let k7 = stage!(t + h, &y_new);
                let err: Vec<f64> = (0..y.len())
                    .map(|i| {
                        h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i])
                    })
                    .collect();
                let en = error_norm(&err, &y, &y_new, &self.opts);
                Some((y_new, k7, en))
            };
            let en = attempt.as_ref().map_or(f64::INFINITY, |a| a.2);
            let accepted = en <= 1.0;
            (self.observer)(StepRecord {
                t,
                h,
                error_norm: en,
                accepted,
            });
            let factor = step_factor(en, 5.0);
            if let (true, Some((y_new, k7, _))) = (accepted, attempt) {
                self.stats.accepted_steps += 1;
                t = if t + h >= tb { tb } else { t + h };
                y = y_new;
                k1 = k7;
                h *= if last_rejected { factor.min(1.0) } else { factor };
                last_rejected = false;
            } else {
                self.stats.rejected_steps += 1;
                h *= factor.min(1.0);
                last_rejected = true;
            }
        }
        Ok((y, self.stats))
    }

    fn jacobian(&mut self, t: f64, y: &[f64], f0: &[f64]) -> Result<Matrix, OdeError<E>> {
        self.stats.jacobian_evaluations += 1;
        let n = y.len();
        let sqrt_ulp = f64::EPSILON.sqrt();
        let mut jac = Matrix::zeros(n, n);
        let mut yp = y.to_vec();
        for j in 0..n {
            let delta = sqrt_ulp * y[j].abs().max(1.0);
            yp[j] = y[j] + delta;
            let dy = yp[j] - y[j];
            let fj = self.eval(t, &yp)?;
            for (i, (a, b)) in fj.iter().zip(f0).enumerate() {
                jac[(i, j)] = (a - b) / dy;
            }
            yp[j] = y[j];
        }
        Ok(jac)
    }

    fn rosenbrock(mut self, y0: &[f64], ta: f64, tb: f64) -> Result<(Vec<f64>, OdeStats), OdeError<E>> {
        let n = y0.len();
        let span = tb - ta;
        let mut t = ta;
        let mut y = y0.to_vec();
        let mut h = self.first_step(span);
        let mut f0 = self.eval(t, &y)?;
        let mut last_rejected = false;
        let mut linearization: Option<(Matrix, Vec<f64>)> = None;
        while t < tb {
            h = self.clip(t, h, tb, span)?;
            let (jac, dfdt) = match linearization.take() {
                Some(lin) => lin,
                None => {
                    let jac = self.jacobian(t, &y, &f0)?;
                    let dt = f64::EPSILON.sqrt() * t.abs().max(1.0);
                    let ft = self.eval(t + dt, &y)?;
                    let dfdt: Vec<f64> = ft.iter().zip(&f0).map(|(a, b)| (a - b) / dt).collect();
                    (jac, dfdt)
                }
            };
            let hd = h * ROS_D;
            let w = Matrix::from_fn(n, n, |i, j| {
                let id = if i == j { 1.0 } else { 0.0 };
                id - hd * jac[(i, j)]
            });
            let lu = match LuFactors::new(&w) {
                Ok(lu) => lu,
                Err(_) => {
                    self.stats.rejected_steps += 1;
                    (self.observer)(StepRecord {
                        t,
                        h,
                        error_norm: f64::INFINITY,
                        accepted: false,
                    });
                    linearization = Some((jac, dfdt));
                    h *= 0.5;
                    last_rejected = true;
                    continue;
                }
            };
            let attempt = 'attempt: {
                let rhs1: Vec<f64> = f0.iter().zip(&dfdt).map(|(f, d)| f + hd * d).collect();
                let k1 = lu.solve(&rhs1);
                let Some(f1) = self.stage(t + 0.5 * h, &axpy(&y, h, &[(0.5, &k1)]))? else {
                    break 'attempt None;
                };
                let rhs2: Vec<f64> = f1.iter().zip(&k1).map(|(f, k)| f - k).collect();
                let k2: Vec<f64> = lu.solve(&rhs2).iter().zip(&k1).map(|(a, k)| a + k).collect();
                let y_new = axpy(&y, h, &[(1.0, &k2)]);
                let Some(f2) = self.stage(t + h, &y_new)? else {
                    break 'attempt None;
                };
                let rhs3: Vec<f64> = (0..n)
                    .map(|i| f2[i] - ROS_E32 * (k2[i] - f1[i]) - 2.0 * (k1[i] - f0[i]) + hd * dfdt[i])
                    .collect();
                let k3 = lu.solve(&rhs3);
                let err: Vec<f64> = (0..n)
                    .map(|i| h / 6.0 * (k1[i] - 2.0 * k2[i] + k3[i]))
                    .collect();
                let en = error_norm(&err, &y, &y_new, &self.opts);
                Some((y_new, f2, en))
            };
            let en = attempt.as_ref().map_or(f64::INFINITY, |a| a.2);
            let accepted = en <= 1.0;
            (self.observer)(StepRecord {
                t,
                h,
                error_norm: en,
                accepted,
            });
            let factor = step_factor(en, 3.0);
            if let (true, Some((y_new, f2, _))) = (accepted, attempt) {
                self.stats.accepted_steps += 1;
                t = if t + h >= tb { tb } else { t + h };
                y = y_new;
                f0 = f2;
                h *= if last_rejected { factor.min(1.0) } else { factor };
                last_rejected = false;
            } else {
                self.stats.rejected_steps += 1;
                linearization = Some((jac, dfdt));
                h *= factor.min(1.0);
                last_rejected = true;
            }
        }
        Ok((y, self.stats))
    }
}

/// `0.9 * err^(-1/order)` clamped to `[0.2, 5]`; NaN and infinite errors shrink maximally.
fn step_factor(err: f64, order: f64) -> f64 {
    if err.is_nan() {
        return MIN_FACTOR;
    }
    if err == 0.0 {
        return MAX_FACTOR;
    }
    (SAFETY * err.powf(-1.0 / order)).clamp(MIN_FACTOR, MAX_FACTOR)
}
