//! Truth trajectories by Euler-Maruyama and noisy measurement records.
//!
//! Randomness comes from `xoshiro256++` seeded through SplitMix64 with polar Box-Muller normals,
//! computed with pure-Rust `libm` so a seed yields the same bits on every platform. The state
//! stream uses `seed` directly; the measurement stream uses the same seed advanced by one
//! `jump()` (2^128 draws), so the two never overlap.

use std::io::{self, Write};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::linalg::{cholesky_lower, LowerTriangular, Matrix};
use crate::models::Model;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
}

/// Standard normal deviates from a seeded generator.
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        NormalStream { rng: Xoshiro256PlusPlus::seed_from_u64(seed), spare: None }
    }

    /// The stream `2^128` draws ahead of [`NormalStream::new`].
    pub fn jumped(seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        rng.jump();
        NormalStream { rng, spare: None }
    }

    fn symmetric_uniform(&mut self) -> f64 {
        let u = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        2.0 * u - 1.0
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        loop {
            let u = self.symmetric_uniform();
            let v = self.symmetric_uniform();
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = libm::sqrt(-2.0 * libm::log(s) / s);
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_normal();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    /// State on the grid point nearest to `t`.
    pub fn state_at(&self, t: f64) -> Option<&[f64]> {
        let j = (t / self.dt).round();
        if j < 0.0 || (t - j * self.dt).abs() > 1e-9 * self.dt.max(t.abs()) {
            return None;
        }
        self.states.get(j as usize).map(Vec::as_slice)
    }

    /// Writes `t,x1,...,xn` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=n).map(|i| format!("x{i}"))).collect();
        writeln!(out, "{}", header.join(","))?;
        for (t, x) in self.times.iter().zip(&self.states) {
            write!(out, "{t}")?;
            for v in x {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub time: f64,
    pub value: Vec<f64>,
}

fn steps_in(span: f64, dt: f64, what: &str) -> Result<usize, SimError> {
    if !(dt > 0.0 && dt.is_finite() && span >= 0.0 && span.is_finite()) {
        return Err(SimError::Grid(format!("{what}: span {span} with step {dt}")));
    }
    let steps = (span / dt).round();
    if (steps * dt - span).abs() > 1e-9 * span.max(dt) {
        return Err(SimError::Grid(format!("{what}: step {dt} does not divide {span}")));
    }
    Ok(steps as usize)
}

/// Lower factor of a covariance that may be identically zero (`None` then).
fn noise_factor(cov: &Matrix, what: &'static str) -> Result<Option<LowerTriangular>, SimError> {
    if cov.max_abs() == 0.0 {
        return Ok(None);
    }
    cholesky_lower(cov).map(Some).map_err(|_| SimError::NotPositiveDefinite(what))
}

/// `x_{j+1} = x_j + f(t_j, x_j) dt + G chol(Q dt) w_j` on `t_j = j dt`, `j = 0..=horizon/dt`.
pub fn euler_maruyama(model: &dyn Model, x0: &[f64], dt: f64, horizon: f64, seed: u64) -> Result<Trajectory, SimError> {
    let steps = steps_in(horizon, dt, "truth grid")?;
    let q_sqrt = noise_factor(&model.noise_intensity().scale(dt), "Q dt")?;
    let g = model.diffusion();
    let mut normals = NormalStream::new(seed);
    let mut w = vec![0.0; g.cols()];

    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x0.to_vec();
    times.push(0.0);
    states.push(x.clone());
    for j in 0..steps {
        let t = j as f64 * dt;
        let f = model.drift(t, &x);
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi * dt;
        }
        if let Some(l) = &q_sqrt {
            normals.fill(&mut w);
            let kick = g.mul_vec(&l.as_matrix().mul_vec(&w));
            for (xi, ki) in x.iter_mut().zip(&kick) {
                *xi += ki;
            }
        }
        let t_next = (j + 1) as f64 * dt;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteState { t: t_next });
        }
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory { dt, times, states })
}

/// `z_k = h(k, x(t_k)) + chol(R) v_k` at `t_k = k * period`, `k = 1, 2, ...` up to the truth horizon.
pub fn synthesize_measurements(
    truth: &Trajectory,
    model: &dyn Model,
    period: f64,
    seed: u64,
) -> Result<Vec<MeasurementRecord>, SimError> {
    let stride = steps_in(period, truth.dt, "sampling period")?;
    if stride == 0 {
        return Err(SimError::Grid("sampling period must be positive".into()));
    }
    let r_sqrt = noise_factor(model.meas_cov(), "R")?;
    let mut normals = NormalStream::jumped(seed);
    let mut v = vec![0.0; model.dim_z()];
    let mut out = Vec::new();
    let mut idx = stride;
    let mut k = 1;
    while idx < truth.len() {
        let mut z = model.measurement(k, &truth.states[idx]);
        if let Some(l) = &r_sqrt {
            normals.fill(&mut v);
            for (zi, ni) in z.iter_mut().zip(l.as_matrix().mul_vec(&v)) {
                *zi += ni;
            }
        }
        out.push(MeasurementRecord { time: truth.times[idx], value: z });
        idx += stride;
        k += 1;
    }
    Ok(out)
}

/// FNV-1a over the bit patterns of a truth trajectory and its measurements.
pub fn checksum(truth: &Trajectory, measurements: &[MeasurementRecord]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (t, x) in truth.times.iter().zip(&truth.states) {
        eat(*t);
        x.iter().copied().for_each(&mut eat);
    }
    for m in measurements {
        eat(m.time);
        m.value.iter().copied().for_each(&mut eat);
    }
    h
}
