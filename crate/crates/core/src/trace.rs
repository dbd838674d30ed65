//! Per-step records shared by the MES solver and the gradient-descent baseline.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::distributions::GroundTruth;
use crate::error::Result;
use crate::linalg::factored_spectral_norm;
use crate::solver::ModelState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flags(u8);

impl Flags {
    pub const RANK_DEFICIENT: Flags = Flags(1);
    pub const TRUNCATED: Flags = Flags(1 << 1);
    pub const EARLY_STOP: Flags = Flags(1 << 2);
    pub const DIVERGED: Flags = Flags(1 << 3);
    pub const STEP_HALVED: Flags = Flags(1 << 4);

    const NAMES: [(Flags, &'static str); 5] = [
        (Flags::RANK_DEFICIENT, "rank_deficient"),
        (Flags::TRUNCATED, "truncated"),
        (Flags::EARLY_STOP, "early_stop"),
        (Flags::DIVERGED, "diverged"),
        (Flags::STEP_HALVED, "step_halved"),
    ];

    pub fn empty() -> Self {
        Flags(0)
    }

    pub fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: Flags) {
        self.0 |= other.0;
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (flag, name) in Flags::NAMES {
            if self.contains(flag) {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

impl Serialize for Flags {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// `beta = |w - w*|_2`, `gamma = |M - M*|_2` (spectral), `eps = beta + gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecoveryError {
    pub beta: f64,
    pub gamma: f64,
    pub eps: f64,
}

/// Relative tolerance of the power iteration used when the difference has a
/// diagonal correction (non-MIP models or diagonal-free ground truth).
pub const SPECTRAL_TOL: f64 = 1e-10;

pub fn recovery_error(state: &ModelState, gt: &GroundTruth) -> RecoveryError {
    let d = gt.dim();
    let k = state.u.ncols();
    let r = gt.rank();
    let beta = (&state.w - &gt.w_star).norm();

    let mut left = DMatrix::zeros(d, k + r);
    let mut right = DMatrix::zeros(d, k + r);
    left.columns_mut(0, k).copy_from(&state.u);
    right.columns_mut(0, k).copy_from(&state.v);
    left.columns_mut(k, r).copy_from(&(-&gt.factor));
    right.columns_mut(k, r).copy_from(&gt.factor);

    let mut diag = DVector::zeros(d);
    if state.mode.is_diag_free() {
        for j in 0..d {
            diag[j] -= state.u.row(j).dot(&state.v.row(j));
        }
    }
    if gt.diag_free {
        diag += gt.factor_diagonal();
    }
    let gamma = factored_spectral_norm(&left, &right, Some(&diag), SPECTRAL_TOL);
    RecoveryError {
        beta,
        gamma,
        eps: beta + gamma,
    }
}

/// Held-out instances used to report normalised mean squared error.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl TestSet {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Self {
        Self { x, y }
    }

    /// `mean((y_pred - y)^2) / mean(y^2)`.
    pub fn nmse(&self, state: &ModelState) -> Result<f64> {
        let pred = state.predict(&self.x)?;
        let err = (pred - &self.y).norm_squared();
        Ok(err / self.y.norm_squared())
    }

    /// `noise^2 / mean(y^2)`: the NMSE of the true model on this set.
    pub fn noise_floor(&self, noise_level: f64) -> f64 {
        noise_level * noise_level * self.y.len() as f64 / self.y.norm_squared()
    }
}

/// One row of a solver trace.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub recovery: Option<RecoveryError>,
    pub test_nmse: Option<f64>,
    /// `|z|_2 / sqrt(n)` of the residual on the batch consumed at this step.
    pub train_residual: f64,
    pub wall_ms: f64,
    pub flags: Flags,
}

/// Optional ground truth and test set used to annotate a trace.
#[derive(Clone, Copy, Debug, Default)]
pub struct Evaluation<'a> {
    pub gt: Option<&'a GroundTruth>,
    pub test: Option<&'a TestSet>,
}

impl<'a> Evaluation<'a> {
    pub fn new(gt: Option<&'a GroundTruth>, test: Option<&'a TestSet>) -> Self {
        Self { gt, test }
    }

    pub(crate) fn record(
        &self,
        step: usize,
        state: &ModelState,
        train_residual: f64,
        wall_ms: f64,
        flags: Flags,
    ) -> Result<StepRecord> {
        let recovery = self.gt.map(|gt| recovery_error(state, gt));
        let test_nmse = self.test.map(|t| t.nmse(state)).transpose()?;
        Ok(StepRecord {
            step,
            recovery,
            test_nmse,
            train_residual,
            wall_ms,
            flags,
        })
    }
}
