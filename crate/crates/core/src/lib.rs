//! Hybrid energy management for a shipboard DC microgrid.
//!
//! Two ramp-limited generators and one energy storage device serve a
//! propulsion load and a pulsed-power load. Each control step the
//! [`dispatch`] layer compares the aggregate load ramp with the generators'
//! ramp capability: when the load outruns them the generators saturate and
//! the storage absorbs the difference, otherwise an [`mpc`] controller,
//! solved with the Hildreth dual method in [`qp`], steers the storage back to
//! its state-of-charge reference within the generators' ramp budget.
//!
//! The numeric core ([`linalg`], [`qp`], [`mpc`]) is generic over the float
//! type; the aliases below fix it to `f64` or `f32`.

pub mod dispatch;
pub mod linalg;
pub mod mission;
pub mod mpc;
pub mod plant;
pub mod qp;
mod scalar;
pub mod scenario;
pub mod selftest;
pub mod telemetry;

pub use scalar::Scalar;

pub use dispatch::{DispatchCommand, DispatchMode, Dispatcher, GeneratorRating, StorageRating};
pub use mission::{compute_metrics, run_mission, MissionMetrics, MissionRunner};
pub use plant::{LoadModel, PlantState};
pub use scenario::{parse_scenario, Action, MissionEvent, Scenario};
pub use telemetry::{write_trace, TelemetryFrame};

pub type Matrix64 = linalg::Matrix<f64>;
pub type QuadraticProgram64 = qp::QuadraticProgram<f64>;
pub type QpSolution64 = qp::QpSolution<f64>;
pub type DualProblem64 = qp::DualProblem<f64>;
pub type PredictionModel64 = mpc::PredictionModel<f64>;
pub type AugmentedState64 = mpc::AugmentedState<f64>;
pub type StorageEnvelope64 = mpc::StorageEnvelope<f64>;

pub type Matrix32 = linalg::Matrix<f32>;
pub type QuadraticProgram32 = qp::QuadraticProgram<f32>;
pub type QpSolution32 = qp::QpSolution<f32>;
pub type PredictionModel32 = mpc::PredictionModel<f32>;
pub type AugmentedState32 = mpc::AugmentedState<f32>;
pub type StorageEnvelope32 = mpc::StorageEnvelope<f32>;
