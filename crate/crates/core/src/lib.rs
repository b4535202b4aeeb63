//! Factor graph optimization for GNSS state estimation.
//!
//! Observations are preprocessed into per-epoch residuals and line-of-sight
//! vectors ([`factors::EpochRecord`]); factor constructors turn them into
//! pre-linearized residual blocks over error states anchored at per-epoch
//! positions. The batch Levenberg-Marquardt [`solver`] handles robust (Huber)
//! weighting by IRLS and exposes marginal covariances, which feed the
//! integer least-squares [`ambiguity`] resolution.
//!
//! The [`scenario`] module synthesizes epoch records with ground truth and
//! [`pipeline`] assembles the two reference pipelines: robust single-point
//! positioning with a clock-constancy constraint, and double-differenced
//! carrier-phase positioning with and without Doppler/motion constraints.

pub mod ambiguity;
pub mod error;
pub mod factors;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod robust;
pub mod scenario;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use graph::{Factor, FactorGraph, FactorKind, Values, VarKind, VariableKey};
pub use robust::RobustKernel;
pub use solver::{solve, SolutionReport, SolverConfig};
