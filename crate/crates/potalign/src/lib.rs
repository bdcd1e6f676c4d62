//! Partial optimal transport alignment library.
//!
//! Building blocks, bottom to top:
//!
//! - [`tensor`] / [`tape`] — dense f64 tensors and a minimal reverse-mode
//!   autodiff engine over an explicit per-pass computation tape.
//! - [`metric`] — Euclidean and Mahalanobis cost matrices, plus projection of
//!   the learnable interaction matrix onto the PSD cone.
//! - [`solver`] — entropic OT (Sinkhorn) and entropic partial OT (Dykstra-style
//!   Bregman projections in the log domain), with a dummy-point cross-check
//!   route and an exact small-instance LP oracle in [`lp`].
//! - [`loss`] — the KL-to-identity-plan alignment loss over two transport
//!   plans, an InfoNCE contrastive baseline, and the reconstruction term.
//! - [`psat`] — toy volume encoder/decoder and the plane-slice-aware
//!   query-transformer projecting volume features into the frozen 2D space.
//! - [`synth`] — deterministic synthetic (volume, slice, text) triplets with a
//!   controllable misalignment rate.
//! - [`train`] — the full training loop (solve plans, descend, re-project the
//!   metric), retrieval and modality-gap evaluation, metrics emission.

pub mod bench;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod lp;
pub mod metric;
pub mod psat;
pub mod rng;
pub mod solver;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Errors surfaced by the numeric layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("loss node must hold a scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("interaction matrix is not PSD (quadratic form {value:.6e} below -1e-10)")]
    NotPsd { value: f64 },

    #[error("eigensolver did not converge within {sweeps} Jacobi sweeps")]
    EigenFailed { sweeps: usize },

    #[error("transport mass {mass} outside feasible range [0, {max}]")]
    InfeasibleMass { mass: f64, max: f64 },

    #[error("exact LP oracle limited to n,m <= {limit}, got {n}x{m}")]
    OracleLimit { limit: usize, n: usize, m: usize },

    #[error("marginals must carry equal total mass, got sum p = {sum_p}, sum q = {sum_q}")]
    MarginalMismatch { sum_p: f64, sum_q: f64 },

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },

    #[error("mini-batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("index out of range in {op}: {detail}")]
    IndexOutOfRange { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Version string embedded in every emitted artifact.
pub const TOOL_VERSION: &str = concat!("potalign ", env!("CARGO_PKG_VERSION"));

pub use tape::{Gradients, NodeId, OpKind, Tape};
pub use tensor::DenseTensor;
