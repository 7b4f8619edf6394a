//! Continuous-discrete models `dx = f(t, x) dt + G dβ`, `z_k = h(k, x(t_k)) + v_k`.

use thiserror::Error;

use crate::linalg::{cholesky_lower, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("inconsistent dimensions: {0}")]
    Dimension(String),
    #[error("{0} must be symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Stochastic ingredients shared by every model: `G`, `Q`, `R` and the initial law.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub diffusion: Matrix,
    pub intensity: Matrix,
    pub meas_cov: Matrix,
    pub x0_mean: Vec<f64>,
    pub x0_cov: Matrix,
}

/// A continuous-discrete stochastic model.
///
/// Jacobians are optional; callers that need them fall back to
/// [`fd_drift_jacobian`] / [`fd_measurement_jacobian`].
pub trait Model: Send + Sync {
    fn name(&self) -> &str;
    fn dim_x(&self) -> usize;
    fn dim_z(&self) -> usize;
    fn drift(&self, t: f64, x: &[f64]) -> Vec<f64>;
    fn measurement(&self, k: usize, x: &[f64]) -> Vec<f64>;
    fn noise(&self) -> &NoiseSpec;

    fn drift_jacobian(&self, _t: f64, _x: &[f64]) -> Option<Matrix> {
        None
    }

    fn measurement_jacobian(&self, _k: usize, _x: &[f64]) -> Option<Matrix> {
        None
    }

    fn diffusion(&self) -> &Matrix {
        &self.noise().diffusion
    }

    fn noise_intensity(&self) -> &Matrix {
        &self.noise().intensity
    }

    fn meas_cov(&self) -> &Matrix {
        &self.noise().meas_cov
    }

    fn x0_mean(&self) -> &[f64] {
        &self.noise().x0_mean
    }

    fn x0_cov(&self) -> &Matrix {
        &self.noise().x0_cov
    }

    /// `G Q G^T`.
    fn process_noise_cov(&self) -> Matrix {
        let g = self.diffusion();
        &(g * self.noise_intensity()) * &g.transpose()
    }
}

/// Checks the dimension and definiteness invariants of a model.
pub fn validate(model: &dyn Model) -> Result<(), ModelError> {
    let n = model.dim_x();
    let m = model.dim_z();
    let noise = model.noise();
    let (gr, q) = noise.diffusion.shape();
    if gr != n {
        return Err(ModelError::Dimension(format!("G has {gr} rows, state has {n}")));
    }
    if noise.intensity.shape() != (q, q) {
        return Err(ModelError::Dimension(format!(
            "Q is {:?}, G has {q} columns",
            noise.intensity.shape()
        )));
    }
    if noise.meas_cov.shape() != (m, m) {
        return Err(ModelError::Dimension(format!("R is {:?}, expected {m}x{m}", noise.meas_cov.shape())));
    }
    if noise.x0_mean.len() != n || noise.x0_cov.shape() != (n, n) {
        return Err(ModelError::Dimension("initial mean/covariance".into()));
    }
    // Q may be zero for deterministic test models; otherwise it must factor.
    if noise.intensity.max_abs() != 0.0 {
        spd(&noise.intensity, "Q")?;
    }
    spd(&noise.meas_cov, "R")?;
    spd(&noise.x0_cov, "initial covariance")?;
    let x0 = &noise.x0_mean;
    if model.drift(0.0, x0).len() != n || model.measurement(1, x0).len() != m {
        return Err(ModelError::Dimension("drift/measurement output sizes".into()));
    }
    Ok(())
}

fn spd(a: &Matrix, what: &'static str) -> Result<(), ModelError> {
    let sym = (a - &a.transpose()).max_abs() <= 1e-12 * a.max_abs();
    if !sym || cholesky_lower(a).is_err() {
        return Err(ModelError::NotPositiveDefinite(what));
    }
    Ok(())
}

fn fd_step(v: f64) -> f64 {
    f64::EPSILON.sqrt() * v.abs().max(1.0)
}

/// Forward-difference Jacobian of the drift.
pub fn fd_drift_jacobian(model: &dyn Model, t: f64, x: &[f64]) -> Matrix {
    let f0 = model.drift(t, x);
    forward_difference(x, &f0, |xp| model.drift(t, xp))
}

/// Forward-difference Jacobian of the measurement function.
pub fn fd_measurement_jacobian(model: &dyn Model, k: usize, x: &[f64]) -> Matrix {
    let h0 = model.measurement(k, x);
    forward_difference(x, &h0, |xp| model.measurement(k, xp))
}

fn forward_difference(x: &[f64], f0: &[f64], mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Matrix {
    let mut jac = Matrix::zeros(f0.len(), x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + fd_step(x[j]);
        let dx = xp[j] - x[j];
        for (i, (a, b)) in f(&xp).iter().zip(f0).enumerate() {
            jac[(i, j)] = (a - b) / dx;
        }
        xp[j] = x[j];
    }
    jac
}

/// Drift Jacobian from the model if it has one, forward differences otherwise.
pub fn drift_jacobian_or_fd(model: &dyn Model, t: f64, x: &[f64]) -> Matrix {
    model
        .drift_jacobian(t, x)
        .unwrap_or_else(|| fd_drift_jacobian(model, t, x))
}

pub fn measurement_jacobian_or_fd(model: &dyn Model, k: usize, x: &[f64]) -> Matrix {
    model
        .measurement_jacobian(k, x)
        .unwrap_or_else(|| fd_measurement_jacobian(model, k, x))
}

// ---------------------------------------------------------------------------
// CSTR
// ---------------------------------------------------------------------------

/// Continuous-time process noise intensity of the CSTR examples.
///
/// With the truth step `1e-3` this gives a per-step increment variance of `1e-6`.
pub const CSTR_PROCESS_NOISE_INTENSITY: f64 = 1e-3;

/// Rate constants and reactor coefficients for `A <-> B + C`, `2B <-> B + C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CstrParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub qf: f64,
    pub q0: f64,
    pub vr: f64,
    pub rt: f64,
    pub cf: [f64; 3],
}

impl Default for CstrParams {
    fn default() -> Self {
        CstrParams {
            k1: 0.5,
            k2: 0.05,
            k3: 0.2,
            k4: 0.01,
            qf: 1.0,
            q0: 1.0,
            vr: 100.0,
            rt: 32.84,
            cf: [0.5, 0.05, 0.0],
        }
    }
}

impl CstrParams {
    /// Reaction rates `r = [k1 cA - k2 cB cC, k3 cB^2 - k4 cC]`.
    pub fn rates(&self, x: &[f64]) -> [f64; 2] {
        [
            self.k1 * x[0] - self.k2 * x[1] * x[2],
            self.k3 * x[1] * x[1] - self.k4 * x[2],
        ]
    }
}

/// `(Qf/VR) cf - (Q0/VR) x + nu^T r(x)` with `nu = [[-1, 1, 1], [0, -2, 1]]`.
pub fn cstr_drift(p: &CstrParams, x: &[f64]) -> [f64; 3] {
    let [r1, r2] = p.rates(x);
    let inflow = p.qf / p.vr;
    let outflow = p.q0 / p.vr;
    [
        inflow * p.cf[0] - outflow * x[0] - r1,
        inflow * p.cf[1] - outflow * x[1] + r1 - 2.0 * r2,
        inflow * p.cf[2] - outflow * x[2] + r1 + r2,
    ]
}

fn cstr_drift_jacobian(p: &CstrParams, x: &[f64]) -> Matrix {
    let dr1 = [p.k1, -p.k2 * x[2], -p.k2 * x[1]];
    let dr2 = [0.0, 2.0 * p.k3 * x[1], -p.k4];
    let out = p.q0 / p.vr;
    Matrix::from_fn(3, 3, |i, j| {
        let diag = if i == j { -out } else { 0.0 };
        diag + match i {
            0 => -dr1[j],
            1 => dr1[j] - 2.0 * dr2[j],
            _ => dr1[j] + dr2[j],
        }
    })
}

/// `RT (x1 + x2 + x3)`.
pub fn cstr_measurement(p: &CstrParams, x: &[f64]) -> f64 {
    p.rt * (x[0] + x[1] + x[2])
}

/// `RT [[1, 1, 1], [1, 1, 1 + delta]] x`.
pub fn cstr_illcond_measurement(p: &CstrParams, x: &[f64], delta: f64) -> [f64; 2] {
    let s = x[0] + x[1] + x[2];
    [p.rt * s, p.rt * (x[0] + x[1] + (1.0 + delta) * x[2])]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CstrMeasurement {
    /// Scalar total-pressure reading with `R = 0.25^2`.
    TotalPressure,
    /// Two nearly collinear readings with `R = delta^2 I`.
    IllConditioned { delta: f64 },
}

#[derive(Debug, Clone)]
pub struct CstrModel {
    pub params: CstrParams,
    pub sensor: CstrMeasurement,
    noise: NoiseSpec,
    name: String,
}

impl CstrModel {
    pub fn new() -> Self {
        Self::build(CstrMeasurement::TotalPressure).expect("stock CSTR model is valid")
    }

    pub fn ill_conditioned(delta: f64) -> Result<Self, ModelError> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(ModelError::Parameter(format!("delta must be positive, got {delta}")));
        }
        Self::build(CstrMeasurement::IllConditioned { delta })
    }

    fn build(sensor: CstrMeasurement) -> Result<Self, ModelError> {
        let params = CstrParams::default();
        let (meas_cov, name) = match sensor {
            CstrMeasurement::TotalPressure => (Matrix::from_diagonal(&[0.25 * 0.25]), "cstr".to_string()),
            CstrMeasurement::IllConditioned { delta } => {
                (Matrix::identity(2).scale(delta * delta), "cstr-ill".to_string())
            }
        };
        let model = CstrModel {
            params,
            sensor,
            noise: NoiseSpec {
                diffusion: Matrix::identity(3),
                intensity: Matrix::identity(3).scale(CSTR_PROCESS_NOISE_INTENSITY),
                meas_cov,
                x0_mean: params.cf.to_vec(),
                x0_cov: Matrix::identity(3),
            },
            name,
        };
        validate(&model)?;
        Ok(model)
    }

    fn measurement_matrix(&self) -> Matrix {
        let rt = self.params.rt;
        match self.sensor {
            CstrMeasurement::TotalPressure => Matrix::from_rows(&[&[rt, rt, rt]]),
            CstrMeasurement::IllConditioned { delta } => {
                Matrix::from_rows(&[&[rt, rt, rt], &[rt, rt, rt * (1.0 + delta)]])
            }
        }
    }
}

impl Default for CstrModel {
    fn default() -> Self {
        Self::new()
    }
}

impl Model for CstrModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim_x(&self) -> usize {
        3
    }

    fn dim_z(&self) -> usize {
        match self.sensor {
            CstrMeasurement::TotalPressure => 1,
            CstrMeasurement::IllConditioned { .. } => 2,
        }
    }

    fn drift(&self, _t: f64, x: &[f64]) -> Vec<f64> {
        cstr_drift(&self.params, x).to_vec()
    }

    fn drift_jacobian(&self, _t: f64, x: &[f64]) -> Option<Matrix> {
        Some(cstr_drift_jacobian(&self.params, x))
    }

    fn measurement(&self, _k: usize, x: &[f64]) -> Vec<f64> {
        match self.sensor {
            CstrMeasurement::TotalPressure => vec![cstr_measurement(&self.params, x)],
            CstrMeasurement::IllConditioned { delta } => cstr_illcond_measurement(&self.params, x, delta).to_vec(),
        }
    }

    fn measurement_jacobian(&self, _k: usize, _x: &[f64]) -> Option<Matrix> {
        Some(self.measurement_matrix())
    }

    fn noise(&self) -> &NoiseSpec {
        &self.noise
    }
}

// ---------------------------------------------------------------------------
// Van der Pol
// ---------------------------------------------------------------------------

/// `[x2, lambda ((1 - x1^2) x2 - x1)]`.
pub fn vdp_drift(x: &[f64], lambda: f64) -> [f64; 2] {
    [x[1], lambda * ((1.0 - x[0] * x[0]) * x[1] - x[0])]
}

/// Stochastic Van der Pol oscillator, noise entering the second component only.
#[derive(Debug, Clone)]
pub struct VanDerPolModel {
    pub lambda: f64,
    noise: NoiseSpec,
}

impl VanDerPolModel {
    pub fn new(lambda: f64) -> Result<Self, ModelError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(ModelError::Parameter(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let model = VanDerPolModel {
            lambda,
            noise: NoiseSpec {
                diffusion: Matrix::from_diagonal(&[0.0, 1.0]),
                intensity: Matrix::identity(2),
                meas_cov: Matrix::from_diagonal(&[0.04]),
                x0_mean: vec![2.0, 0.0],
                x0_cov: Matrix::from_diagonal(&[0.1, 0.1]),
            },
        };
        validate(&model)?;
        Ok(model)
    }
}

impl Model for VanDerPolModel {
    fn name(&self) -> &str {
        "vdp"
    }

    fn dim_x(&self) -> usize {
        2
    }

    fn dim_z(&self) -> usize {
        1
    }

    fn drift(&self, _t: f64, x: &[f64]) -> Vec<f64> {
        vdp_drift(x, self.lambda).to_vec()
    }

    fn drift_jacobian(&self, _t: f64, x: &[f64]) -> Option<Matrix> {
        let l = self.lambda;
        Some(Matrix::from_rows(&[
            &[0.0, 1.0],
            &[l * (-2.0 * x[0] * x[1] - 1.0), l * (1.0 - x[0] * x[0])],
        ]))
    }

    fn measurement(&self, _k: usize, x: &[f64]) -> Vec<f64> {
        vec![x[0] + x[1]]
    }

    fn measurement_jacobian(&self, _k: usize, _x: &[f64]) -> Option<Matrix> {
        Some(Matrix::from_rows(&[&[1.0, 1.0]]))
    }

    fn noise(&self) -> &NoiseSpec {
        &self.noise
    }
}

// ---------------------------------------------------------------------------
// Linear time-invariant oracle model
// ---------------------------------------------------------------------------

/// `dx = A x dt + G dβ`, `z = H x + v`. Every filter variant is exact on it up to integration error.
#[derive(Debug, Clone)]
pub struct LtiModel {
    pub a: Matrix,
    pub h: Matrix,
    noise: NoiseSpec,
}

/// Builds a validated linear model.
pub fn lti_oracle_model(a: Matrix, h: Matrix, noise: NoiseSpec) -> Result<LtiModel, ModelError> {
    if !a.is_square() || h.cols() != a.rows() {
        return Err(ModelError::Dimension(format!("A is {:?}, H is {:?}", a.shape(), h.shape())));
    }
    let model = LtiModel { a, h, noise };
    validate(&model)?;
    Ok(model)
}

impl LtiModel {
    /// Lightly damped oscillator observed through its position.
    pub fn reference() -> Self {
        lti_oracle_model(
            Matrix::from_rows(&[&[0.0, 1.0], &[-1.0, -0.2]]),
            Matrix::from_rows(&[&[1.0, 0.0]]),
            NoiseSpec {
                diffusion: Matrix::identity(2),
                intensity: Matrix::from_diagonal(&[0.01, 0.04]),
                meas_cov: Matrix::from_diagonal(&[0.04]),
                x0_mean: vec![3.0, -1.0],
                x0_cov: Matrix::from_diagonal(&[0.5, 0.5]),
            },
        )
        .expect("reference LTI model is valid")
    }
}

impl Model for LtiModel {
    fn name(&self) -> &str {
        "lti-test"
    }

    fn dim_x(&self) -> usize {
        self.a.rows()
    }

    fn dim_z(&self) -> usize {
        self.h.rows()
    }

    fn drift(&self, _t: f64, x: &[f64]) -> Vec<f64> {
        self.a.mul_vec(x)
    }

    fn drift_jacobian(&self, _t: f64, _x: &[f64]) -> Option<Matrix> {
        Some(self.a.clone())
    }

    fn measurement(&self, _k: usize, x: &[f64]) -> Vec<f64> {
        self.h.mul_vec(x)
    }

    fn measurement_jacobian(&self, _k: usize, _x: &[f64]) -> Option<Matrix> {
        Some(self.h.clone())
    }

    fn noise(&self) -> &NoiseSpec {
        &self.noise
    }
}
