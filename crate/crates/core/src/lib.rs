//! Blocked matrix multiplication on a reconfigurable array of linear
//! processing-element arrays: a cycle-level simulator, a work-queue manager
//! with stealing, a memory-access model, and an analytical performance model
//! with a design-space explorer.

pub mod analytic;
pub mod blockmm;
pub mod error;
pub mod mac;
pub mod pe;
pub mod presets;
pub mod run;
pub mod scalar;
pub mod wqm;

pub use analytic::{explore, DesignPoint, ModelEstimate, ModelParams, ProblemShape};
pub use blockmm::{blocked_gemm, partition, reference_gemm, Matrix, TileGrid};
pub use error::{Error, Result};
pub use mac::{BandwidthModel, CalibrationTable};
pub use pe::{run_mpe, simulate_gemm, MpeLayout, PortMode, SimConfig, SimReport};
pub use run::{run, RunConfig, RunReport};
pub use scalar::Scalar;
pub use wqm::{WorkItem, Wqm};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type SimReport32 = SimReport<f32>;
pub type SimReport64 = SimReport<f64>;
