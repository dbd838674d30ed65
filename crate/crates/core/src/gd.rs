//! Alternating mini-batch gradient descent on
//! `L(w, U, V) = |X^T w + A(U V^T) - y|^2 / (2n)`, the baseline MES is compared
//! against, and the closed-form expectation of its `V` gradient.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{derive_seed, GroundTruth};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, thin_qr};
use crate::sensing::{residual_pass, MiniBatch};
use crate::solver::{init_factors, next_or, ModelState, Mode, RunResult};
use crate::stream::BatchSource;
use crate::trace::{Evaluation, Flags};

/// Step sizes tried by the harness when GD is "tuned".
pub const STEP_GRID: [f64; 4] = [1.0, 0.5, 0.1, 0.01];

/// A run is declared divergent once the batch loss exceeds this multiple of the first one.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdInit {
    /// Same `H(y)` eigenvector start as MES, `V = 0`.
    Spectral,
    /// Random orthonormal `U`, `V = 0`.
    RandomScaled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdConfig {
    pub k: usize,
    pub eta_w: f64,
    pub eta_u: f64,
    pub eta_v: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub init: GdInit,
    pub init_sweeps: usize,
    pub termination: f64,
    pub seed: u64,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self {
            k: 1,
            eta_w: 0.5,
            eta_u: 0.5,
            eta_v: 0.5,
            batch_size: 1000,
            max_steps: 50,
            init: GdInit::Spectral,
            init_sweeps: 20,
            termination: 1e-8,
            seed: 0,
        }
    }
}

impl GdConfig {
    pub fn with_step(mut self, eta: f64) -> Self {
        self.eta_w = eta;
        self.eta_u = eta;
        self.eta_v = eta;
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 || self.k > d {
            return Err(Error::config("k", format!("rank must satisfy 1 <= k <= d = {d}, got {}", self.k)));
        }
        for (field, eta) in [("eta_w", self.eta_w), ("eta_u", self.eta_u), ("eta_v", self.eta_v)] {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(Error::config(field, "step size must be finite and nonnegative"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

fn residual(batch: &MiniBatch, state: &ModelState) -> Result<DVector<f64>> {
    let mut r = state.predict(&batch.x)?;
    r -= &batch.y;
    Ok(r)
}

/// `|r|^2 / (2n)` with `r = X^T w + A(U V^T) - y`.
pub fn loss(batch: &MiniBatch, state: &ModelState) -> Result<f64> {
    let r = residual(batch, state)?;
    Ok(r.norm_squared() / (2.0 * r.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w: DVector<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

/// `g_w = X r / n`, `g_U = (1/n) sum r_i x_i (x_i^T V)`, `g_V = (1/n) sum r_i x_i (x_i^T U)`.
pub fn gradients(batch: &MiniBatch, state: &ModelState) -> Result<Gradients> {
    let r = residual(batch, state)?;
    gradients_at(batch, state, &r)
}

fn gradients_at(batch: &MiniBatch, state: &ModelState, r: &DVector<f64>) -> Result<Gradients> {
    let (d, k) = state.u.shape();
    let mut both = DMatrix::zeros(d, 2 * k);
    both.columns_mut(0, k).copy_from(&state.v);
    both.columns_mut(k, k).copy_from(&state.u);
    let pass = residual_pass(&batch.x, r, &both)?;
    // residual_pass returns H(r) F = (1/2n) sum r_i x_i x_i^T F
    let h = pass.h_u * 2.0;
    Ok(Gradients {
        w: pass.stats.p1,
        u: h.columns(0, k).into_owned(),
        v: h.columns(k, k).into_owned(),
    })
}

/// `E[g_V] = (2 sym(dM) + tr(dM) I + D(phi - 3) D(dM) + D(kappa o dw)) U` for
/// features with independent standardised coordinates of third moments
/// `kappa` and fourth moments `phi`. Noise has mean zero and does not enter.
pub fn expected_gradient_v(
    state: &ModelState,
    gt: &GroundTruth,
    kappa: &DVector<f64>,
    phi: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let d = state.dim();
    if gt.dim() != d || kappa.len() != d || phi.len() != d {
        return Err(Error::Shape(format!(
            "state has d = {d}, ground truth {}, moments {}/{}",
            gt.dim(),
            kappa.len(),
            phi.len()
        )));
    }
    let u = &state.u;
    let b = &gt.factor;
    let state_diag = state.factor_diagonal();
    let gt_diag = gt.factor_diagonal();

    // dM = U V^T - B B^T + diag(c)
    let mut c = DVector::zeros(d);
    if state.mode.is_diag_free() {
        c -= &state_diag;
    }
    if gt.diag_free {
        c += &gt_diag;
    }
    let dm_diag = &state_diag - &gt_diag + &c;
    let trace: f64 = dm_diag.sum();
    let dw = &state.w - &gt.w_star;

    // 2 sym(dM) U = (U V^T + V U^T) U - 2 B B^T U + 2 diag(c) U
    let mut out = u * state.v.tr_mul(u) + &state.v * u.tr_mul(u) - b * b.tr_mul(u) * 2.0;
    let row_scale = DVector::from_fn(d, |j, _| {
        2.0 * c[j] + trace + (phi[j] - 3.0) * dm_diag[j] + kappa[j] * dw[j]
    });
    for (j, mut row) in out.row_iter_mut().enumerate() {
        row += u.row(j) * row_scale[j];
    }
    Ok(out)
}

/// Runs alternating GD over a one-pass stream: one initialisation batch and up
/// to `max_steps` update batches. Within a step `w`, `U` and `V` are updated in
/// turn, each against the residual of the partially updated model.
pub fn run_gd<S: BatchSource + ?Sized>(source: &mut S, config: &GdConfig, eval: Evaluation<'_>) -> Result<RunResult> {
    let mut consumed = 0usize;
    let started = Instant::now();
    let init_batch = next_or(source, "the initialisation batch")?;
    consumed += init_batch.len();
    let d = init_batch.dim();
    config.validate(d)?;
    let u = match config.init {
        GdInit::Spectral => init_factors(&init_batch, config.k, config.init_sweeps, derive_seed(config.seed, 0x1417))?,
        GdInit::RandomScaled => thin_qr(&gaussian_matrix(d, config.k, derive_seed(config.seed, 0x2b1d))).q,
    };
    let mut state = ModelState::new(DVector::zeros(d), u, DMatrix::zeros(d, config.k), Mode::Mip)?;
    let init_residual = init_batch.y.norm() / (init_batch.len() as f64).sqrt();
    drop(init_batch);
    let mut trace = vec![eval.record(0, &state, init_residual, started.elapsed().as_secs_f64() * 1e3, Flags::empty())?];

    let (mut eta_w, mut eta_u, mut eta_v) = (config.eta_w, config.eta_u, config.eta_v);
    let mut first_loss: Option<f64> = None;
    let mut previous_loss: Option<f64> = None;
    let mut previous_residual: Option<f64> = None;
    for step in 1..=config.max_steps {
        let Some(batch) = source.next_batch() else {
            if let Some(last) = trace.last_mut() {
                last.flags.insert(Flags::TRUNCATED);
            }
            break;
        };
        let batch = batch?;
        consumed += batch.len();
        let started = Instant::now();
        let mut flags = Flags::empty();

        let r = residual(&batch, &state)?;
        let n = r.len() as f64;
        let batch_loss = r.norm_squared() / (2.0 * n);
        let train_residual = (2.0 * batch_loss).sqrt();
        let first = *first_loss.get_or_insert(batch_loss);
        if !batch_loss.is_finite() || batch_loss > DIVERGENCE_FACTOR * first {
            flags.insert(Flags::DIVERGED);
            trace.push(eval.record(step, &state, train_residual, started.elapsed().as_secs_f64() * 1e3, flags)?);
            break;
        }
        if previous_loss.is_some_and(|p| batch_loss > 2.0 * p) {
            eta_w *= 0.5;
            eta_u *= 0.5;
            eta_v *= 0.5;
            flags.insert(Flags::STEP_HALVED);
        }
        previous_loss = Some(batch_loss);

        let g = gradients_at(&batch, &state, &r)?;
        state.w -= g.w * eta_w;
        let r = residual(&batch, &state)?;
        let g = gradients_at(&batch, &state, &r)?;
        state.u -= g.u * eta_u;
        let r = residual(&batch, &state)?;
        let g = gradients_at(&batch, &state, &r)?;
        state.v -= g.v * eta_v;
        state.t += 1;
        drop(batch);

        let stalled = previous_residual.is_some_and(|p: f64| (p - train_residual).abs() < config.termination);
        if stalled {
            flags.insert(Flags::EARLY_STOP);
        }
        trace.push(eval.record(step, &state, train_residual, started.elapsed().as_secs_f64() * 1e3, flags)?);
        if stalled {
            break;
        }
        previous_residual = Some(train_residual);
    }

    Ok(RunResult {
        state,
        trace,
        profile: None,
        samples_consumed: consumed,
    })
}
