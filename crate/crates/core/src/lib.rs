//! Continuous-discrete derivative-free extended Kalman filtering.
//!
//! The crate is layered bottom-up: [`linalg`] kernels, the adaptive [`odesolve`] integrators,
//! [`models`], the [`filters`] themselves, the [`sim`] truth generator and the Monte Carlo
//! [`experiment`] harness used by the command-line front end.

pub mod experiment;
pub mod filters;
pub mod linalg;
pub mod models;
pub mod odesolve;
pub mod sim;

pub use experiment::{
    armse, emit_plot, run_experiment, ExperimentConfig, ExperimentError, ExperimentOutcome, PlotKind, RunReport, Scenario,
    CSV_HEADER,
};
pub use filters::{
    predict, run_filter, update, Covariance, Divergence, DivergenceCause, FilterError, FilterRun, FilterVariant,
    GaussianBelief, SamplePointSet,
};
pub use linalg::{LinalgError, LowerTriangular, Matrix};
pub use models::{CstrModel, LtiModel, Model, ModelError, NoiseSpec, VanDerPolModel};
pub use odesolve::{OdeMethod, OdeOptions, OdeStats};
pub use sim::{MeasurementRecord, Trajectory};
