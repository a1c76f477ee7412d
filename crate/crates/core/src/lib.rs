//! LPV-embedded model predictive control with Gaussian-process prediction of
//! the scheduling-induced forward error.
//!
//! The numerical core is generic over the scalar type through [`Real`]; the
//! `*F64` aliases below are what the experiment runner uses.

pub mod errorbank;
pub mod gp;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod scalar;
pub mod stabilizer;

mod error;

pub use error::{Error, Result};
pub use scalar::Real;

pub use errorbank::{BankSettings, ErrorBank, ErrorPrediction};
pub use gp::{FitOptions, GpModel, HyperBounds, Kernel, KernelVariant, Posterior};
pub use model::{ContinuousModel, DiskParameters, Interval, LpvModel, SchedulingMap};
pub use mpc::{
    InputConstraint, MpcConfig, MpcStep, PhatUpdateSource, Reference, RunStatus, StepRecord,
    Trajectory,
};
pub use qp::{QpProblem, QpSettings, QpSolution, QpStatus};
pub use stabilizer::StabilizedModel;

pub type LpvModelF64 = LpvModel<f64>;
pub type ContinuousModelF64 = ContinuousModel<f64>;
pub type StabilizedModelF64 = StabilizedModel<f64>;
pub type QpProblemF64 = QpProblem<f64>;
pub type QpSolutionF64 = QpSolution<f64>;
pub type GpModelF64 = GpModel<f64>;
pub type ErrorBankF64 = ErrorBank<f64>;
pub type MpcConfigF64 = MpcConfig<f64>;
pub type TrajectoryF64 = Trajectory<f64>;

pub type LpvModelF32 = LpvModel<f32>;
pub type StabilizedModelF32 = StabilizedModel<f32>;
pub type GpModelF32 = GpModel<f32>;
