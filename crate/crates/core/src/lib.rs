//! Collective solar-current forecasting on simulated sensor-node groups.
//!
//! The crate implements a multiple-linear-regression (MLR) forecasting
//! pipeline whose calibration step — the least-squares solve for the
//! coefficient vector — runs distributed across a group of nodes, each
//! holding a contiguous block of the feature-matrix columns:
//!
//! 1. a column-partitioned modified Gram-Schmidt QR decomposition driven
//!    by per-node column broadcasts ([`distqr`]),
//! 2. a cyclic two-sided Jacobi SVD of the small triangular factor,
//!    computed at the controlling node ([`jacobisvd`]),
//! 3. a pseudoinverse combination step that assembles the coefficients
//!    from per-node `Qᵀb` contributions ([`calibrate`]).
//!
//! Around that core sit feature-matrix construction from lagged time
//! series ([`features`]), the recalibrating prediction loop
//! ([`predictor`]), Persistence/EWMA baselines ([`baselines`]), a
//! deterministic discrete-tick node-group simulator with fault injection
//! ([`simnet`]), data ingestion and a synthetic generator ([`dataio`]),
//! evaluation metrics and operation counters ([`metrics`]), and the
//! experiment runner behind the CLI ([`config`], [`experiment`]).

pub mod baselines;
pub mod calibrate;
pub mod config;
pub mod dataio;
pub mod distqr;
pub mod experiment;
pub mod features;
pub mod jacobisvd;
pub mod linalg;
pub mod metrics;
pub mod predictor;
pub mod simnet;

/// Identifier of a node in the group. Node 0 is the master/controlling node.
pub type NodeId = u32;

pub use calibrate::{calibrate_centralized, calibrate_distributed, CoefficientVector};
pub use linalg::{ColumnPartition, Matrix, Vector};
