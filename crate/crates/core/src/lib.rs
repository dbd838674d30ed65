//! Streaming recovery of second-order linear models `y = x^T w* + x^T M* x + noise`
//! with a low-rank symmetric `M*`, by a moment-estimation sequence (MES).
//!
//! Each iteration draws a fresh mini-batch, estimates the current error in
//! `M` and `w` with moment-corrected operators, and refines a rank-`k` factor
//! pair by one power step. All batch work is done in factor form in `O(kd)`
//! memory. A plain gradient-descent baseline, Monte-Carlo verifiers and an
//! experiment harness are included.

pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod gd;
pub mod harness;
pub mod linalg;
pub mod moments;
pub mod sensing;
pub mod solver;
pub mod stream;
pub mod trace;

pub use error::{Error, Result};
pub use trace::recovery_error;
