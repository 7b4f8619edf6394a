//! Continuous-discrete EKF variants: the Jacobian-based baseline and six derivative-free forms.
//!
//! Every variant integrates a defining ODE between measurements and then applies one of three
//! measurement-update kernels. Derivative-free variants replace Jacobians with `n` sample points
//! `X = x 1^T + (sqrt(n)/alpha) S`, one per column, where `S` is a lower Cholesky factor of `P`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::linalg::{
    block_triangularize, cholesky_lower, phi, solve_lower, solve_right_lower, solve_right_lower_transpose,
    triangularize_lower, LinalgError, LowerTriangular, Matrix,
};
use crate::models::{drift_jacobian_or_fd, measurement_jacobian_or_fd, Model};
use crate::odesolve::{integrate, OdeError, OdeOptions, OdeStats};
use crate::sim::MeasurementRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterVariant {
    StdEkf,
    Mde,
    Spde,
    SrMdeTwoQr,
    SrMdeBlockQr,
    SrSpdeTwoQr,
    SrSpdeBlockQr,
}

/// How a variant encodes its second moment between measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionEncoding {
    /// `[x | P]` with the Jacobian-based covariance equation.
    JacobianCovariance,
    /// `[x | P]` with the sample-point covariance equation.
    MomentCovariance,
    /// `[x | S]` with `S' = S Phi(S^-1 M S^-T)`.
    MomentFactor,
    /// `[x | X]`, the sample points themselves.
    SamplePoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKernel {
    Jacobian,
    Conventional,
    TwoQr,
    BlockQr,
}

impl FilterVariant {
    pub const ALL: [FilterVariant; 7] = [
        FilterVariant::StdEkf,
        FilterVariant::Mde,
        FilterVariant::Spde,
        FilterVariant::SrMdeTwoQr,
        FilterVariant::SrMdeBlockQr,
        FilterVariant::SrSpdeTwoQr,
        FilterVariant::SrSpdeBlockQr,
    ];

    pub fn id(self) -> &'static str {
        match self {
            FilterVariant::StdEkf => "std-ekf",
            FilterVariant::Mde => "mde",
            FilterVariant::Spde => "spde",
            FilterVariant::SrMdeTwoQr => "sr-mde-a",
            FilterVariant::SrMdeBlockQr => "sr-mde-b",
            FilterVariant::SrSpdeTwoQr => "sr-spde-a",
            FilterVariant::SrSpdeBlockQr => "sr-spde-b",
        }
    }

    pub fn encoding(self) -> PredictionEncoding {
        match self {
            FilterVariant::StdEkf => PredictionEncoding::JacobianCovariance,
            FilterVariant::Mde => PredictionEncoding::MomentCovariance,
            FilterVariant::SrMdeTwoQr | FilterVariant::SrMdeBlockQr => PredictionEncoding::MomentFactor,
            FilterVariant::Spde | FilterVariant::SrSpdeTwoQr | FilterVariant::SrSpdeBlockQr => {
                PredictionEncoding::SamplePoints
            }
        }
    }

    pub fn kernel(self) -> UpdateKernel {
        match self {
            FilterVariant::StdEkf => UpdateKernel::Jacobian,
            FilterVariant::Mde | FilterVariant::Spde => UpdateKernel::Conventional,
            FilterVariant::SrMdeTwoQr | FilterVariant::SrSpdeTwoQr => UpdateKernel::TwoQr,
            FilterVariant::SrMdeBlockQr | FilterVariant::SrSpdeBlockQr => UpdateKernel::BlockQr,
        }
    }

    pub fn is_square_root(self) -> bool {
        matches!(self.kernel(), UpdateKernel::TwoQr | UpdateKernel::BlockQr)
    }
}

impl fmt::Display for FilterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("unknown filter variant '{0}' (expected one of std-ekf, mde, spde, sr-mde-a, sr-mde-b, sr-spde-a, sr-spde-b)")]
pub struct UnknownVariant(pub String);

impl FromStr for FilterVariant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FilterVariant::ALL
            .into_iter()
            .find(|v| v.id() == s.trim())
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

/// Second moment carried either in full or as a lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(Matrix),
    Factor(LowerTriangular),
}

impl Covariance {
    pub fn to_full(&self) -> Matrix {
        match self {
            Covariance::Full(p) => p.clone(),
            Covariance::Factor(s) => s.gram(),
        }
    }

    /// A lower factor: the stored one, or a fresh Cholesky factorization.
    pub fn factor(&self) -> Result<LowerTriangular, LinalgError> {
        match self {
            Covariance::Full(p) => cholesky_lower(p),
            Covariance::Factor(s) => Ok(s.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(p) => p.rows(),
            Covariance::Factor(s) => s.order(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub time: f64,
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

impl GaussianBelief {
    /// Initial belief from the model prior, in the form the variant carries.
    pub fn initial(variant: FilterVariant, model: &dyn Model) -> Result<Self, LinalgError> {
        let p0 = model.x0_cov().clone();
        let cov = if variant.is_square_root() {
            Covariance::Factor(cholesky_lower(&p0)?)
        } else {
            Covariance::Full(p0)
        };
        Ok(GaussianBelief { time: 0.0, mean: model.x0_mean().to_vec(), cov })
    }

    pub fn covariance(&self) -> Matrix {
        self.cov.to_full()
    }
}

/// The matrix of sample points about `mean`, one point per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePointSet {
    pub points: Matrix,
    pub mean: Vec<f64>,
    pub alpha: f64,
}

impl SamplePointSet {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(alpha/sqrt n) tril(X - x 1^T)`.
    pub fn recover_factor(&self) -> LowerTriangular {
        LowerTriangular::from_tril(&center_scale_x(self))
    }
}

fn spread(n: usize, alpha: f64) -> f64 {
    (n as f64).sqrt() / alpha
}

pub fn generate_sample_points(mean: &[f64], chol: &LowerTriangular, alpha: f64) -> SamplePointSet {
    let n = mean.len();
    assert_eq!(chol.order(), n, "factor order must match the mean");
    let c = spread(n, alpha);
    let s = chol.as_matrix();
    SamplePointSet {
        points: Matrix::from_fn(n, n, |i, j| mean[i] + c * s[(i, j)]),
        mean: mean.to_vec(),
        alpha,
    }
}

/// `(alpha/sqrt n) [X_1 - x | ... | X_n - x]`.
pub fn center_scale_x(points: &SamplePointSet) -> Matrix {
    center_scale_z(&points.points, &points.mean, points.alpha)
}

/// `(alpha/sqrt n) [Z_1 - z | ... | Z_n - z]` where `n` is the number of points (columns).
pub fn center_scale_z(z_points: &Matrix, z_mean: &[f64], alpha: f64) -> Matrix {
    let (m, n) = z_points.shape();
    assert_eq!(z_mean.len(), m, "mean length must match point dimension");
    let c = alpha / (n as f64).sqrt();
    Matrix::from_fn(m, n, |i, j| c * (z_points[(i, j)] - z_mean[i]))
}

/// Applies the measurement function to every sample point.
pub fn measure_points(model: &dyn Model, k: usize, points: &SamplePointSet) -> Matrix {
    let n = points.dim();
    let m = model.dim_z();
    let mut out = Matrix::zeros(m, n);
    for j in 0..n {
        out.column_mut(j).copy_from_slice(&model.measurement(k, points.points.column(j)));
    }
    out
}

// ---------------------------------------------------------------------------
// Failures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DivergenceCause {
    NotPositiveDefinite,
    RankDeficient,
    SingularFactor,
    NonFinite,
    StepUnderflow,
}

impl DivergenceCause {
    pub fn as_str(self) -> &'static str {
        match self {
            DivergenceCause::NotPositiveDefinite => "not-positive-definite",
            DivergenceCause::RankDeficient => "rank-deficient",
            DivergenceCause::SingularFactor => "singular-factor",
            DivergenceCause::NonFinite => "non-finite",
            DivergenceCause::StepUnderflow => "step-underflow",
        }
    }
}

impl fmt::Display for DivergenceCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<LinalgError> for DivergenceCause {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NotPositiveDefinite { .. } => DivergenceCause::NotPositiveDefinite,
            LinalgError::RankDeficient { .. } => DivergenceCause::RankDeficient,
            LinalgError::SingularFactor { .. } => DivergenceCause::SingularFactor,
            LinalgError::NonFinite | LinalgError::DimensionMismatch { .. } => DivergenceCause::NonFinite,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("filter diverged at t = {time}: {cause}")]
pub struct Divergence {
    pub time: f64,
    pub cause: DivergenceCause,
}

impl Divergence {
    fn at(time: f64, e: LinalgError) -> Self {
        Divergence { time, cause: e.into() }
    }

    fn from_ode(e: OdeError<LinalgError>) -> Result<Self, FilterError> {
        match e {
            OdeError::RhsFailure { t, source } => Ok(Divergence::at(t, source)),
            OdeError::StepUnderflow { t, .. } => Ok(Divergence { time: t, cause: DivergenceCause::StepUnderflow }),
            OdeError::Invalid(msg) => Err(FilterError::Invalid(msg)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error(transparent)]
    Diverged(#[from] Divergence),
    #[error("invalid filter input: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Prediction right-hand sides
// ---------------------------------------------------------------------------

/// `S Phi(S^-1 M S^-T)`: the factor derivative whose product-rule square is `M`.
pub fn factor_derivative(s: &LowerTriangular, m: &Matrix) -> Result<Matrix, LinalgError> {
    let inner = solve_right_lower_transpose(&solve_lower(s, m)?, s)?;
    Ok(s.as_matrix() * phi(&inner).as_matrix())
}

/// Precomputed pieces shared by every right-hand-side evaluation of one prediction.
struct Dynamics<'a> {
    model: &'a dyn Model,
    alpha: f64,
    process_noise: Matrix,
}

impl<'a> Dynamics<'a> {
    fn new(model: &'a dyn Model, alpha: f64) -> Self {
        let mut process_noise = model.process_noise_cov();
        process_noise.symmetrize();
        Dynamics { model, alpha, process_noise }
    }

    fn n(&self) -> usize {
        self.model.dim_x()
    }

    /// Unscaled centred drift `[f(X_1) - f(x) | ... ]` for the given point columns.
    fn centred_drift(&self, t: f64, fx: &[f64], points: &Matrix) -> Matrix {
        let n = self.n();
        let mut out = Matrix::zeros(n, n);
        for j in 0..n {
            let fj = self.model.drift(t, points.column(j));
            for (o, (a, b)) in out.column_mut(j).iter_mut().zip(fj.iter().zip(fx)) {
                *o = a - b;
            }
        }
        out
    }

    /// `M = (alpha/sqrt n)(S FX^T + FX S^T) + G Q G^T`.
    fn moment_matrix(&self, s: &Matrix, fxbar: &Matrix) -> Matrix {
        let c = self.alpha / (self.n() as f64).sqrt();
        let sym = &s.mul_transpose(fxbar) + &fxbar.mul_transpose(s);
        &sym.scale(c) + &self.process_noise
    }

    fn mde(&self, t: f64, mean: &[f64], cov: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
        let s = cholesky_lower(cov)?;
        let fx = self.model.drift(t, mean);
        let pts = generate_sample_points(mean, &s, self.alpha);
        let fxbar = self.centred_drift(t, &fx, &pts.points);
        Ok((fx, self.moment_matrix(s.as_matrix(), &fxbar)))
    }

    fn sr_mde(&self, t: f64, mean: &[f64], s: &LowerTriangular) -> Result<(Vec<f64>, Matrix), LinalgError> {
        let fx = self.model.drift(t, mean);
        let pts = generate_sample_points(mean, s, self.alpha);
        let fxbar = self.centred_drift(t, &fx, &pts.points);
        let m = self.moment_matrix(s.as_matrix(), &fxbar);
        Ok((fx, factor_derivative(s, &m)?))
    }

    fn spde(&self, t: f64, mean: &[f64], points: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
        let n = self.n();
        let set = SamplePointSet { points: points.clone(), mean: mean.to_vec(), alpha: self.alpha };
        let s = set.recover_factor();
        let fx = self.model.drift(t, mean);
        let fxbar = self.centred_drift(t, &fx, points);
        let m = self.moment_matrix(s.as_matrix(), &fxbar);
        let ds = factor_derivative(&s, &m)?;
        let c = spread(n, self.alpha);
        let dpoints = Matrix::from_fn(n, n, |i, j| fx[i] + c * ds[(i, j)]);
        Ok((fx, dpoints))
    }

    fn std_ekf(&self, t: f64, mean: &[f64], cov: &Matrix) -> (Vec<f64>, Matrix) {
        let f = drift_jacobian_or_fd(self.model, t, mean);
        let fp = &f * cov;
        let dp = &(&fp + &fp.transpose()) + &self.process_noise;
        (self.model.drift(t, mean), dp)
    }

    fn rhs(&self, encoding: PredictionEncoding, t: f64, y: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let (mean, block) = unpack(self.n(), y)?;
        let (dmean, dblock) = match encoding {
            PredictionEncoding::JacobianCovariance => self.std_ekf(t, &mean, &block),
            PredictionEncoding::MomentCovariance => self.mde(t, &mean, &block)?,
            PredictionEncoding::MomentFactor => self.sr_mde(t, &mean, &LowerTriangular::from_tril(&block))?,
            PredictionEncoding::SamplePoints => self.spde(t, &mean, &block)?,
        };
        Ok(pack(&dmean, &dblock))
    }
}

/// Mean and covariance derivatives of the sample-point moment equations.
pub fn mde_rhs(t: f64, mean: &[f64], cov: &Matrix, model: &dyn Model, alpha: f64) -> Result<(Vec<f64>, Matrix), LinalgError> {
    Dynamics::new(model, alpha).mde(t, mean, cov)
}

/// Mean and Cholesky-factor derivatives; the factor derivative is lower triangular.
pub fn sr_mde_rhs(
    t: f64,
    mean: &[f64],
    chol: &LowerTriangular,
    model: &dyn Model,
    alpha: f64,
) -> Result<(Vec<f64>, Matrix), LinalgError> {
    Dynamics::new(model, alpha).sr_mde(t, mean, chol)
}

/// Derivative of the stacked `[x | X]` sample-point state, returned in the same layout.
pub fn spde_rhs(t: f64, stacked: &Matrix, model: &dyn Model, alpha: f64) -> Result<Matrix, LinalgError> {
    let n = model.dim_x();
    if stacked.shape() != (n, n + 1) {
        return Err(LinalgError::DimensionMismatch { expected: (n, n + 1), found: stacked.shape() });
    }
    let (dmean, dpoints) = Dynamics::new(model, alpha).spde(t, stacked.column(0), &stacked.block(0, 1, n, n))?;
    Ok(Matrix::column_vector(&dmean).hcat(&dpoints))
}

pub fn std_ekf_rhs(t: f64, mean: &[f64], cov: &Matrix, model: &dyn Model) -> (Vec<f64>, Matrix) {
    Dynamics::new(model, 1.0).std_ekf(t, mean, cov)
}

/// Column-major `[mean | block]`.
pub fn pack(mean: &[f64], block: &Matrix) -> Vec<f64> {
    let mut y = Vec::with_capacity(mean.len() + block.as_slice().len());
    y.extend_from_slice(mean);
    y.extend_from_slice(block.as_slice());
    y
}

pub fn unpack(n: usize, y: &[f64]) -> Result<(Vec<f64>, Matrix), LinalgError> {
    if y.len() != n * (n + 1) {
        return Err(LinalgError::DimensionMismatch { expected: (n, n + 1), found: (y.len(), 1) });
    }
    Ok((y[..n].to_vec(), Matrix::from_col_major(n, n, y[n..].to_vec())?))
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Prediction {
    pub belief: GaussianBelief,
    /// Integrated sample points, present for the sample-point variants.
    pub points: Option<SamplePointSet>,
    /// Largest strictly-upper entry discarded when recovering `S` from the points.
    pub upper_residue: f64,
    pub stats: OdeStats,
}

/// Integrates the variant's moment equations from `belief.time` to `t_end`.
pub fn predict(
    variant: FilterVariant,
    belief: &GaussianBelief,
    t_end: f64,
    model: &dyn Model,
    alpha: f64,
    opts: &OdeOptions,
) -> Result<Prediction, FilterError> {
    let n = model.dim_x();
    let t0 = belief.time;
    let encoding = variant.encoding();
    let block = match encoding {
        PredictionEncoding::JacobianCovariance | PredictionEncoding::MomentCovariance => belief.cov.to_full(),
        PredictionEncoding::MomentFactor => belief.cov.factor().map_err(|e| Divergence::at(t0, e))?.into_matrix(),
        PredictionEncoding::SamplePoints => {
            let s = belief.cov.factor().map_err(|e| Divergence::at(t0, e))?;
            generate_sample_points(&belief.mean, &s, alpha).points
        }
    };
    let dynamics = Dynamics::new(model, alpha);
    let y0 = pack(&belief.mean, &block);
    let (y, stats) = integrate(|t, y| dynamics.rhs(encoding, t, y), &y0, (t0, t_end), opts)
        .map_err(|e| Divergence::from_ode(e).map_or_else(|inv| inv, FilterError::Diverged))?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Divergence { time: t_end, cause: DivergenceCause::NonFinite }.into());
    }
    let (mean, block) = unpack(n, &y).map_err(|e| Divergence::at(t_end, e))?;

    let mut upper_residue = 0.0;
    let mut points = None;
    let cov = match encoding {
        PredictionEncoding::JacobianCovariance | PredictionEncoding::MomentCovariance => Covariance::Full(block),
        PredictionEncoding::MomentFactor => {
            let mut s = LowerTriangular::from_tril(&block);
            s.normalize_signs();
            Covariance::Factor(s)
        }
        PredictionEncoding::SamplePoints => {
            let set = SamplePointSet { points: block, mean: mean.clone(), alpha };
            upper_residue = center_scale_x(&set).strict_upper_max_abs();
            let mut s = set.recover_factor();
            s.normalize_signs();
            points = Some(set);
            if variant.is_square_root() {
                Covariance::Factor(s)
            } else {
                Covariance::Full(s.gram())
            }
        }
    };
    Ok(Prediction {
        belief: GaussianBelief { time: t_end, mean, cov },
        points,
        upper_residue,
        stats,
    })
}

// ---------------------------------------------------------------------------
// Measurement updates
// ---------------------------------------------------------------------------

fn innovation(z: &[f64], zhat: &[f64]) -> Vec<f64> {
    z.iter().zip(zhat).map(|(a, b)| a - b).collect()
}

fn shifted(mean: &[f64], gain: &Matrix, nu: &[f64]) -> Vec<f64> {
    mean.iter().zip(gain.mul_vec(nu)).map(|(x, d)| x + d).collect()
}

fn check_dims(model: &dyn Model, mean: &[f64], z: &[f64]) -> Result<(), FilterError> {
    if mean.len() != model.dim_x() || z.len() != model.dim_z() {
        return Err(FilterError::Invalid(format!(
            "state/measurement sizes {}/{} do not match the model ({}/{})",
            mean.len(),
            z.len(),
            model.dim_x(),
            model.dim_z()
        )));
    }
    Ok(())
}

/// `K = Pxz Re^{-1}`, `x+ = x + K (z - zhat)`, `P+ = P - K Re K^T`, symmetrized and checked.
fn conventional_kernel(
    time: f64,
    mean: &[f64],
    prior_cov: &Matrix,
    zhat: &[f64],
    pxz: &Matrix,
    re: &Matrix,
    z: &[f64],
) -> Result<GaussianBelief, Divergence> {
    let fail = |e| Divergence::at(time, e);
    let re_sqrt = cholesky_lower(re).map_err(fail)?;
    let gain = solve_right_lower(&solve_right_lower_transpose(pxz, &re_sqrt).map_err(fail)?, &re_sqrt).map_err(fail)?;
    let mean = shifted(mean, &gain, &innovation(z, zhat));
    let mut cov = prior_cov - &(&(&gain * re) * &gain.transpose());
    cov.symmetrize();
    if !cov.is_finite() || mean.iter().any(|v| !v.is_finite()) {
        return Err(Divergence { time, cause: DivergenceCause::NonFinite });
    }
    // Only a negative variance is a definite loss of positivity here. Marginal indefiniteness
    // surfaces wherever a variant next needs a Cholesky factor of this matrix.
    if let Some(pivot) = cov.diagonal().iter().position(|d| *d < 0.0) {
        return Err(Divergence::at(time, LinalgError::NotPositiveDefinite { pivot }));
    }
    Ok(GaussianBelief { time, mean, cov: Covariance::Full(cov) })
}

/// Derivative-free update in covariance form.
pub fn mu_conventional(
    prior: &GaussianBelief,
    points: &SamplePointSet,
    k: usize,
    z: &[f64],
    model: &dyn Model,
) -> Result<GaussianBelief, FilterError> {
    check_dims(model, &prior.mean, z)?;
    let zhat = model.measurement(k, &prior.mean);
    let xbar = center_scale_x(points);
    let zbar = center_scale_z(&measure_points(model, k, points), &zhat, points.alpha);
    let mut re = &zbar.mul_transpose(&zbar) + model.meas_cov();
    re.symmetrize();
    let pxz = xbar.mul_transpose(&zbar);
    Ok(conventional_kernel(prior.time, &prior.mean, &prior.cov.to_full(), &zhat, &pxz, &re, z)?)
}

/// Jacobian-based update of the standard EKF, sharing the covariance-form kernel.
pub fn mu_std_ekf(prior: &GaussianBelief, k: usize, z: &[f64], model: &dyn Model) -> Result<GaussianBelief, FilterError> {
    check_dims(model, &prior.mean, z)?;
    let zhat = model.measurement(k, &prior.mean);
    let h = measurement_jacobian_or_fd(model, k, &prior.mean);
    let p = prior.cov.to_full();
    let pxz = p.mul_transpose(&h);
    let mut re = &(&h * &pxz) + model.meas_cov();
    re.symmetrize();
    Ok(conventional_kernel(prior.time, &prior.mean, &p, &zhat, &pxz, &re, z)?)
}

fn meas_sqrt(model: &dyn Model, time: f64) -> Result<LowerTriangular, Divergence> {
    cholesky_lower(model.meas_cov()).map_err(|e| Divergence::at(time, e))
}

fn check_factor_finite(time: f64, mean: &[f64], s: &LowerTriangular) -> Result<(), Divergence> {
    if !s.as_matrix().is_finite() || mean.iter().any(|v| !v.is_finite()) {
        return Err(Divergence { time, cause: DivergenceCause::NonFinite });
    }
    Ok(())
}

/// Square-root update with two separate triangularizations.
pub fn mu_sr_two_qr(
    prior: &GaussianBelief,
    points: &SamplePointSet,
    k: usize,
    z: &[f64],
    model: &dyn Model,
) -> Result<GaussianBelief, FilterError> {
    check_dims(model, &prior.mean, z)?;
    let time = prior.time;
    let fail = |e| Divergence::at(time, e);
    let zhat = model.measurement(k, &prior.mean);
    let xbar = center_scale_x(points);
    let zbar = center_scale_z(&measure_points(model, k, points), &zhat, points.alpha);
    let r_sqrt = meas_sqrt(model, time)?;
    let re_sqrt = triangularize_lower(&zbar.hcat(r_sqrt.as_matrix())).map_err(fail)?;
    let pxz = xbar.mul_transpose(&zbar);
    let gain = solve_right_lower(&solve_right_lower_transpose(&pxz, &re_sqrt).map_err(fail)?, &re_sqrt).map_err(fail)?;
    let residual = &xbar - &(&gain * &zbar);
    let p_sqrt = triangularize_lower(&residual.hcat(&(&gain * r_sqrt.as_matrix()))).map_err(fail)?;
    let mean = shifted(&prior.mean, &gain, &innovation(z, &zhat));
    check_factor_finite(time, &mean, &p_sqrt)?;
    Ok(GaussianBelief { time, mean, cov: Covariance::Factor(p_sqrt) })
}

/// Square-root update reading every quantity off one block triangularization.
pub fn mu_sr_block_qr(
    prior: &GaussianBelief,
    points: &SamplePointSet,
    k: usize,
    z: &[f64],
    model: &dyn Model,
) -> Result<GaussianBelief, FilterError> {
    check_dims(model, &prior.mean, z)?;
    let time = prior.time;
    let fail = |e| Divergence::at(time, e);
    let zhat = model.measurement(k, &prior.mean);
    let xbar = center_scale_x(points);
    let zbar = center_scale_z(&measure_points(model, k, points), &zhat, points.alpha);
    let r_sqrt = meas_sqrt(model, time)?;
    let post = block_triangularize(&zbar, &xbar, &r_sqrt).map_err(fail)?;
    let gain = solve_right_lower(&post.pxz_bar, &post.re_sqrt).map_err(fail)?;
    let mean = shifted(&prior.mean, &gain, &innovation(z, &zhat));
    check_factor_finite(time, &mean, &post.p_sqrt)?;
    Ok(GaussianBelief { time, mean, cov: Covariance::Factor(post.p_sqrt) })
}

/// Applies the variant's measurement update to a prediction.
pub fn update(
    variant: FilterVariant,
    prior: &Prediction,
    k: usize,
    z: &[f64],
    model: &dyn Model,
    alpha: f64,
) -> Result<GaussianBelief, FilterError> {
    let belief = &prior.belief;
    if variant.kernel() == UpdateKernel::Jacobian {
        return mu_std_ekf(belief, k, z, model);
    }
    let generated;
    let points = match &prior.points {
        Some(p) => p,
        None => {
            let s = belief.cov.factor().map_err(|e| Divergence::at(belief.time, e))?;
            generated = generate_sample_points(&belief.mean, &s, alpha);
            &generated
        }
    };
    match variant.kernel() {
        UpdateKernel::Conventional => mu_conventional(belief, points, k, z, model),
        UpdateKernel::TwoQr => mu_sr_two_qr(belief, points, k, z, model),
        UpdateKernel::BlockQr => mu_sr_block_qr(belief, points, k, z, model),
        UpdateKernel::Jacobian => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Full filter loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub variant: FilterVariant,
    /// Initial belief followed by one posterior per processed measurement.
    pub beliefs: Vec<GaussianBelief>,
    pub divergence: Option<Divergence>,
    pub stats: OdeStats,
    pub max_upper_residue: f64,
}

impl FilterRun {
    pub fn completed(&self) -> bool {
        self.divergence.is_none()
    }

    /// Posterior means, one per processed measurement.
    pub fn posterior_means(&self) -> impl Iterator<Item = &[f64]> {
        self.beliefs.iter().skip(1).map(|b| b.mean.as_slice())
    }
}

/// Runs one variant over a measurement record starting from the model prior at `t = 0`.
///
/// A divergence ends the run early and is reported in [`FilterRun::divergence`]; only malformed
/// inputs produce `Err`.
pub fn run_filter(
    variant: FilterVariant,
    model: &dyn Model,
    measurements: &[MeasurementRecord],
    alpha: f64,
    opts: &OdeOptions,
) -> Result<FilterRun, FilterError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FilterError::Invalid(format!("alpha must be positive, got {alpha}")));
    }
    if measurements.windows(2).any(|w| w[1].time <= w[0].time) || measurements.first().is_some_and(|m| m.time < 0.0) {
        return Err(FilterError::Invalid("measurement times must be nonnegative and strictly increasing".into()));
    }
    let mut run = FilterRun {
        variant,
        beliefs: Vec::with_capacity(measurements.len() + 1),
        divergence: None,
        stats: OdeStats::default(),
        max_upper_residue: 0.0,
    };
    let initial = match GaussianBelief::initial(variant, model) {
        Ok(b) => b,
        Err(e) => {
            run.divergence = Some(Divergence::at(0.0, e));
            return Ok(run);
        }
    };
    run.beliefs.push(initial);
    for (idx, record) in measurements.iter().enumerate() {
        let current = run.beliefs.last().expect("initial belief is present");
        let step = predict(variant, current, record.time, model, alpha, opts).and_then(|prediction| {
            run.stats += prediction.stats;
            run.max_upper_residue = run.max_upper_residue.max(prediction.upper_residue);
            update(variant, &prediction, idx + 1, &record.value, model, alpha)
        });
        match step {
            Ok(posterior) => run.beliefs.push(posterior),
            Err(FilterError::Diverged(d)) => {
                run.divergence = Some(d);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{lti_oracle_model, CstrModel, LtiModel, NoiseSpec};

    fn max_rel(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).max_abs() / b.max_abs().max(1e-300)
    }

    fn scalar_model(a: f64, q: f64, h: f64, r: f64) -> LtiModel {
        lti_oracle_model(
            Matrix::from_diagonal(&[a]),
            Matrix::from_diagonal(&[h]),
            NoiseSpec {
                diffusion: Matrix::identity(1),
                intensity: Matrix::from_diagonal(&[q]),
                meas_cov: Matrix::from_diagonal(&[r]),
                x0_mean: vec![0.0],
                x0_cov: Matrix::identity(1),
            },
        )
        .unwrap()
    }

    #[test]
    fn variant_ids_round_trip() {
        for v in FilterVariant::ALL {
            assert_eq!(v.id().parse::<FilterVariant>().unwrap(), v);
        }
        assert!("ukf".parse::<FilterVariant>().is_err());
        assert_eq!(FilterVariant::SrSpdeBlockQr.to_string(), "sr-spde-b");
    }

    #[test]
    fn sample_point_examples() {
        let degenerate = generate_sample_points(&[1.0, -2.0], &LowerTriangular::from_tril(&Matrix::zeros(2, 2)), 5.0);
        for j in 0..2 {
            assert_eq!(degenerate.points.column(j), &[1.0, -2.0]);
        }
        assert_eq!(center_scale_x(&degenerate), Matrix::zeros(2, 2));

        let one = generate_sample_points(&[0.0], &LowerTriangular::from_diagonal(&[2.0]), 1.0);
        assert_eq!(one.points, Matrix::from_diagonal(&[2.0]));

        let s = LowerTriangular::from_tril(&Matrix::from_rows(&[&[1.5, 0.0, 0.0], &[-0.3, 0.7, 0.0], &[0.2, 0.9, 2.1]]));
        let set = generate_sample_points(&[0.4, -1.0, 3.0], &s, 1e3);
        let back = set.recover_factor();
        assert!((back.as_matrix() - s.as_matrix()).max_abs() <= 1e-12);
    }

    #[test]
    fn linear_z_block_is_h_times_x_block() {
        let model = LtiModel::reference();
        let s = LowerTriangular::from_tril(&Matrix::from_rows(&[&[0.8, 0.0], &[0.1, 0.3]]));
        let set = generate_sample_points(&[1.0, 2.0], &s, 1e3);
        let zhat = model.measurement(1, &set.mean);
        let zbar = center_scale_z(&measure_points(&model, 1, &set), &zhat, set.alpha);
        let hx = &model.h * &center_scale_x(&set);
        assert!((&zbar - &hx).max_abs() <= 1e-12);
    }

    #[test]
    fn mde_rhs_scalar_and_pure_diffusion() {
        let model = scalar_model(-1.0, 1.0, 1.0, 1.0);
        let (dm, dp) = mde_rhs(0.0, &[0.3], &Matrix::from_diagonal(&[4.0]), &model, 10.0).unwrap();
        assert!((dm[0] + 0.3).abs() < 1e-15);
        assert!((dp[(0, 0)] + 7.0).abs() < 1e-12);

        let walk = scalar_model(0.0, 2.5, 1.0, 1.0);
        let (_, dp) = mde_rhs(0.0, &[1.0], &Matrix::from_diagonal(&[3.0]), &walk, 1e3).unwrap();
        assert_eq!(dp[(0, 0)], 2.5);
        let (_, dp) = std_ekf_rhs(0.0, &[1.0], &Matrix::from_diagonal(&[3.0]), &walk);
        assert_eq!(dp[(0, 0)], 2.5);
    }

    #[test]
    fn sr_mde_rhs_scalar_and_identity() {
        let model = scalar_model(-1.0, 1.0, 1.0, 1.0);
        let s = LowerTriangular::from_diagonal(&[2.0]);
        let (_, ds) = sr_mde_rhs(0.0, &[0.3], &s, &model, 10.0).unwrap();
        // d(s^2)/dt = m with m = -7
        assert!((ds[(0, 0)] - (-7.0 / 4.0)).abs() < 1e-12);

        let walk = lti_oracle_model(
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            NoiseSpec {
                diffusion: Matrix::identity(2),
                intensity: Matrix::identity(2),
                meas_cov: Matrix::identity(2),
                x0_mean: vec![0.0; 2],
                x0_cov: Matrix::identity(2),
            },
        )
        .unwrap();
        let (_, ds) = sr_mde_rhs(0.0, &[0.0, 0.0], &LowerTriangular::identity(2), &walk, 1e3).unwrap();
        assert_eq!(ds, Matrix::identity(2).scale(0.5));
    }

    #[test]
    fn spde_frozen_dynamics() {
        let frozen = lti_oracle_model(
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            NoiseSpec {
                diffusion: Matrix::identity(2),
                intensity: Matrix::zeros(2, 2),
                meas_cov: Matrix::identity(2),
                x0_mean: vec![0.0; 2],
                x0_cov: Matrix::identity(2),
            },
        )
        .unwrap();
        let s = LowerTriangular::from_tril(&Matrix::from_rows(&[&[1.0, 0.0], &[0.5, 2.0]]));
        let set = generate_sample_points(&[1.0, 1.0], &s, 100.0);
        let stacked = Matrix::column_vector(&set.mean).hcat(&set.points);
        assert_eq!(spde_rhs(0.0, &stacked, &frozen, 100.0).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn linear_drift_gives_lyapunov_form() {
        let model = LtiModel::reference();
        let p = Matrix::from_rows(&[&[0.9, 0.2], &[0.2, 0.5]]);
        let q = model.process_noise_cov();
        let ap = &model.a * &p;
        let lyap = &(&ap + &ap.transpose()) + &q;
        for alpha in [1.0, 1e3, 1e6] {
            let (_, dp) = mde_rhs(0.0, &[0.4, -0.1], &p, &model, alpha).unwrap();
            assert!(max_rel(&dp, &lyap) <= 1e-9, "alpha {alpha}");
        }
        let (_, dp) = std_ekf_rhs(0.0, &[0.4, -0.1], &p, &model);
        assert!(max_rel(&dp, &lyap) <= 1e-12);
    }

    #[test]
    fn zero_innovation_and_uninformative_measurement() {
        let model = LtiModel::reference();
        let prior = GaussianBelief {
            time: 1.0,
            mean: vec![0.5, 0.25],
            cov: Covariance::Factor(LowerTriangular::from_tril(&Matrix::from_rows(&[&[0.7, 0.0], &[0.2, 0.4]]))),
        };
        let s = prior.cov.factor().unwrap();
        let pts = generate_sample_points(&prior.mean, &s, 1e3);
        let z = model.measurement(1, &prior.mean);
        for post in [
            mu_conventional(&prior, &pts, 1, &z, &model).unwrap(),
            mu_sr_two_qr(&prior, &pts, 1, &z, &model).unwrap(),
            mu_sr_block_qr(&prior, &pts, 1, &z, &model).unwrap(),
        ] {
            assert_eq!(post.mean, prior.mean);
        }

        // With H = 0 the measurement carries no information.
        let blind = lti_oracle_model(model.a.clone(), Matrix::zeros(1, 2), model.noise().clone()).unwrap();
        let post = mu_sr_two_qr(&prior, &pts, 1, &[7.0], &blind).unwrap();
        assert_eq!(post.mean, prior.mean);
        assert!((&post.covariance() - &prior.covariance()).max_abs() <= 1e-14);
        let post = mu_sr_block_qr(&prior, &pts, 1, &[7.0], &blind).unwrap();
        assert!((&post.covariance() - &prior.covariance()).max_abs() <= 1e-14);
    }

    #[test]
    fn scalar_update_matches_hand_algebra() {
        // p = 4, h = 2, r = 1: re = 17, k = 8/17, p+ = 4 - 64/17 = 4/17
        let model = scalar_model(0.0, 1.0, 2.0, 1.0);
        let prior = GaussianBelief { time: 0.0, mean: vec![1.0], cov: Covariance::Factor(LowerTriangular::from_diagonal(&[2.0])) };
        let pts = generate_sample_points(&prior.mean, &prior.cov.factor().unwrap(), 1e3);
        for post in [
            mu_conventional(&prior, &pts, 1, &[4.0], &model).unwrap(),
            mu_sr_two_qr(&prior, &pts, 1, &[4.0], &model).unwrap(),
            mu_sr_block_qr(&prior, &pts, 1, &[4.0], &model).unwrap(),
            mu_std_ekf(&prior, 1, &[4.0], &model).unwrap(),
        ] {
            assert!((post.mean[0] - (1.0 + 16.0 / 17.0)).abs() < 1e-12);
            assert!((post.covariance()[(0, 0)] - 4.0 / 17.0).abs() < 1e-12);
        }
    }

    #[test]
    fn larger_noise_shrinks_gain() {
        let base = LtiModel::reference();
        let mut noisy = base.noise().clone();
        noisy.meas_cov = noisy.meas_cov.scale(1e6);
        let noisy = lti_oracle_model(base.a.clone(), base.h.clone(), noisy).unwrap();
        let prior = GaussianBelief { time: 0.0, mean: vec![0.0, 0.0], cov: Covariance::Full(Matrix::identity(2).scale(0.01)) };
        let pts = generate_sample_points(&prior.mean, &LowerTriangular::from_diagonal(&[0.1, 0.1]), 1e3);
        let shift = |m: &LtiModel| mu_conventional(&prior, &pts, 1, &[1.0], m).unwrap().mean[0].abs();
        assert!(shift(&base) >= 1e5 * shift(&noisy));
    }

    #[test]
    fn zero_length_prediction_is_identity() {
        let model = CstrModel::new();
        let opts = OdeOptions::default();
        for v in FilterVariant::ALL {
            let b = GaussianBelief::initial(v, &model).unwrap();
            let p = predict(v, &b, 0.0, &model, 1e3, &opts).unwrap();
            assert_eq!(p.belief.mean, b.mean, "{v}");
            // Sample-point encodings lose about alpha/sqrt(n) ulps when re-centring.
            assert!((&p.belief.covariance() - &b.covariance()).max_abs() <= 1e-12, "{v}");
        }
    }

    #[test]
    fn empty_record_returns_initial_belief() {
        let model = CstrModel::new();
        for v in FilterVariant::ALL {
            let run = run_filter(v, &model, &[], 1e3, &OdeOptions::default()).unwrap();
            assert_eq!(run.beliefs.len(), 1);
            assert!(run.completed());
        }
    }

    #[test]
    fn rejects_unordered_measurements() {
        let model = CstrModel::new();
        let recs = [
            MeasurementRecord { time: 2.0, value: vec![18.0] },
            MeasurementRecord { time: 1.0, value: vec![18.0] },
        ];
        assert!(matches!(
            run_filter(FilterVariant::Mde, &model, &recs, 1e3, &OdeOptions::default()),
            Err(FilterError::Invalid(_))
        ));
    }
}
