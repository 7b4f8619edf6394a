//! Closed-form references for linear time-invariant models, built on nalgebra so that they share
//! no code with the crate under test.

#![allow(dead_code)]

use cdekf_core::{LtiModel, Matrix, MeasurementRecord, Model};
use nalgebra::DMatrix;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

/// Transition matrix and discrete process noise over `dt` (Van Loan's block exponential).
pub fn discretize(a: &DMatrix<f64>, gqg: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(-a));
    block.view_mut((0, n), (n, n)).copy_from(gqg);
    block.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let e = (block * dt).exp();
    let phi = e.view((n, n), (n, n)).transpose();
    let qd = &phi * e.view((0, n), (n, n));
    let qd = (&qd + qd.transpose()) * 0.5;
    (phi, qd)
}

/// `exp(A t) P0 exp(A t)^T + Qd(t)`.
pub fn lyapunov_covariance(a: &DMatrix<f64>, gqg: &DMatrix<f64>, p0: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let (phi, qd) = discretize(a, gqg, t);
    &phi * p0 * phi.transpose() + qd
}

#[derive(Debug, Clone)]
pub struct KfStep {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Exact discrete Kalman filter for the sampled LTI model, posterior after every record.
pub fn exact_kalman(model: &LtiModel, records: &[MeasurementRecord]) -> Vec<KfStep> {
    let a = to_na(&model.a);
    let h = to_na(&model.h);
    let gqg = to_na(&model.process_noise_cov());
    let r = to_na(model.meas_cov());
    let mut x = nalgebra::DVector::from_column_slice(model.x0_mean());
    let mut p = to_na(model.x0_cov());
    let mut t = 0.0;
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let (phi, qd) = discretize(&a, &gqg, rec.time - t);
        x = &phi * x;
        p = &phi * &p * phi.transpose() + qd;
        let z = nalgebra::DVector::from_column_slice(&rec.value);
        let s = &h * &p * h.transpose() + &r;
        let k = &p * h.transpose() * s.try_inverse().expect("innovation covariance is invertible");
        x = &x + &k * (z - &h * &x);
        let ikh = DMatrix::identity(p.nrows(), p.nrows()) - &k * &h;
        // Joseph form keeps the reference symmetric and positive.
        p = &ikh * &p * ikh.transpose() + &k * &r * k.transpose();
        t = rec.time;
        out.push(KfStep { mean: x.iter().copied().collect(), cov: p.clone() });
    }
    out
}

/// `max_i |a_i - b_i| / max(|b|_inf, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
