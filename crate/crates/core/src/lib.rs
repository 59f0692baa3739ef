//! Transient-stability certification and stability-constrained dispatch for
//! DC microgrids with constant power loads (CPLs).
//!
//! The crate is organised as a pipeline:
//!
//! - [`netmodel`] parses a network description and assembles the averaged
//!   RLC dynamics `D ẋ = A x + B2 (u ⊙ g) + B1 (p ⊘ C1 x)` together with the
//!   nodal conductance blocks used by the power-flow equations.
//! - [`conic`] is a small dense interior-point engine for LMI, max-log-det and
//!   second-order-cone programs.
//! - [`certify`] builds a common quadratic Lyapunov function for the
//!   linear-parameter-varying form of the shifted dynamics, sizes an
//!   ellipsoidal sub-level set that covers the operating box, and turns it into
//!   a per-bus steady-state voltage floor.
//! - [`steadystate`] solves power flow, the baseline OPF and the
//!   floor-constrained synthesis problem (SOCP relaxation plus Newton polish),
//!   and runs the whole pipeline end to end.
//! - [`sim`] integrates the nonlinear dynamics to falsify certificates,
//!   traces Lyapunov decay and computes the simulation-based borderline design.
//! - [`report`] holds the serialisable document types shared with the CLI and
//!   the Python bindings.

// `!(x > 0.0)` is used on purpose so that NaN fails positivity checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod conic;
pub mod error;
pub mod linalg;
pub mod netmodel;
pub mod report;
pub mod sim;
pub mod steadystate;

pub use error::{Error, Result};
