//! The moment-estimation-sequence (MES) solver.
//!
//! Each step consumes one fresh batch, forms the residual `z = y_hat - y` of
//! the current model and builds two moment-corrected estimates from it:
//! `M(z)`, whose expectation is the matrix error `M - M*`, and `W(z)`, whose
//! expectation is `w - w*`. The matrix part is then refined by one power step
//! with QR re-orthonormalisation and `w` is moved by `-W(z)`.
//!
//! On distributions that are not moment invertible (standardised Bernoulli,
//! Rademacher) the model is restricted to diagonal-free matrices and the
//! correction reduces to the simpler non-MIP construction.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::derive_seed;
use crate::error::{Error, Result};
use crate::linalg::{dominant_subspace, thin_qr};
use crate::moments::{MomentProfile, MomentSource, DEFAULT_TAU_TOL};
use crate::sensing::{apply_sensing, h_times_factor, residual_pass, sub_row_scaled, MiniBatch, PStats};
use crate::stream::BatchSource;
use crate::trace::{Evaluation, Flags, StepRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Moment-invertible features; full moment correction through `G` and `H`.
    Mip,
    /// Non-invertible features; the model matrix is kept diagonal-free.
    NonMip,
}

impl Mode {
    pub fn is_diag_free(self) -> bool {
        matches!(self, Mode::NonMip)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `U+ = qr(S U)`, `V+ = S U+` with `S = sym(U V^T) - M(z)`. Exact
    /// operators give an exact fixed point at the truth.
    Power,
    /// `U+ R = V - M(z) U`, `V+ = V R^T`, kept for fidelity studies.
    Verbatim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub k: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub mode: Mode,
    pub update_rule: UpdateRule,
    /// Also subtract `p0 / 2 * I` in `M(z)` (MIP mode), which removes the
    /// `tr(M - M*) / 2` shift left by the diagonal corrections alone.
    pub trace_correction: bool,
    pub moment_source: MomentSource,
    pub tau_tol: f64,
    /// Stop when the training residual changes by less than this between steps.
    pub termination: f64,
    /// Subspace-iteration sweeps used for the spectral initialisation.
    pub init_sweeps: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            k: 1,
            batch_size: 1000,
            max_steps: 50,
            mode: Mode::Mip,
            update_rule: UpdateRule::Power,
            trace_correction: true,
            moment_source: MomentSource::Estimated,
            tau_tol: DEFAULT_TAU_TOL,
            termination: 1e-8,
            init_sweeps: 20,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 || self.k > d {
            return Err(Error::config("k", format!("rank must satisfy 1 <= k <= d = {d}, got {}", self.k)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.tau_tol > 0.0) {
            return Err(Error::config("tau_tol", "must be positive"));
        }
        if !(self.termination >= 0.0) {
            return Err(Error::config("termination", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Current iterate. The model matrix is `U V^T`, or `U V^T - diag(U V^T)` in
/// non-MIP mode. `U` has orthonormal columns after every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub w: DVector<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub t: usize,
    pub mode: Mode,
}

impl ModelState {
    pub fn new(w: DVector<f64>, u: DMatrix<f64>, v: DMatrix<f64>, mode: Mode) -> Result<Self> {
        let d = w.len();
        if u.nrows() != d || v.shape() != u.shape() {
            return Err(Error::Shape(format!(
                "state factors {:?} / {:?} do not match d = {d}",
                u.shape(),
                v.shape()
            )));
        }
        Ok(Self { w, u, v, t: 0, mode })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        apply_sensing(x, &self.w, &self.u, &self.v, self.mode.is_diag_free())
    }

    /// `diag(U V^T)`.
    pub fn factor_diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.u.row_iter().zip(self.v.row_iter()).map(|(a, b)| a.dot(&b)),
        )
    }

    /// Dense effective model matrix. Small-d checks only.
    pub fn dense_m(&self) -> DMatrix<f64> {
        let mut m = &self.u * self.v.transpose();
        if self.mode.is_diag_free() {
            m.fill_diagonal(0.0);
        }
        m
    }

    /// `|U^T U - I|_F`.
    pub fn orthonormality_defect(&self) -> f64 {
        let k = self.rank();
        (self.u.tr_mul(&self.u) - DMatrix::<f64>::identity(k, k)).norm()
    }
}

/// Row-wise diagonal shift `c` such that `M(z) F = H(z) F - diag(c) F`.
fn m_shift(
    stats: &PStats,
    h_diag: &DVector<f64>,
    profile: &MomentProfile,
    mode: Mode,
    trace_correction: bool,
    zero_diagonal: bool,
) -> Result<DVector<f64>> {
    match mode {
        Mode::Mip => {
            let t = profile.require_tables()?;
            let mut c = (t.g.column(0).component_mul(&stats.p1) + t.g.column(1).component_mul(&stats.p2)) * 0.5;
            if trace_correction {
                c.add_scalar_mut(0.5 * stats.p0);
            }
            Ok(c)
        }
        // diag(M(z)) = diag(H(z)) - p2 / 2, so removing it leaves only the
        // off-diagonal part of H(z).
        Mode::NonMip if zero_diagonal => Ok(h_diag.clone()),
        Mode::NonMip => Ok(&stats.p2 * 0.5),
    }
}

fn w_correction(stats: &PStats, profile: &MomentProfile, mode: Mode) -> Result<DVector<f64>> {
    match mode {
        Mode::Mip => {
            let t = profile.require_tables()?;
            Ok(t.h.column(0).component_mul(&stats.p1) + t.h.column(1).component_mul(&stats.p2))
        }
        Mode::NonMip => Ok(stats.p1.clone()),
    }
}

fn check_profile(batch: &MiniBatch, profile: &MomentProfile) -> Result<()> {
    if profile.dim() != batch.dim() {
        return Err(Error::Shape(format!(
            "moment profile has dimension {} but batch has {}",
            profile.dim(),
            batch.dim()
        )));
    }
    Ok(())
}

/// `M(z) U`.
///
/// MIP: `M(z) = H(z) - diag(G1 o p1)/2 - diag(G2 o p2)/2 [- p0/2 I]`.
/// Non-MIP: `M(z) = H(z) - diag(p2)/2`.
pub fn apply_m_operator(
    batch: &MiniBatch,
    z: &DVector<f64>,
    u: &DMatrix<f64>,
    profile: &MomentProfile,
    mode: Mode,
    trace_correction: bool,
) -> Result<DMatrix<f64>> {
    check_profile(batch, profile)?;
    let pass = residual_pass(&batch.x, z, u)?;
    let shift = m_shift(&pass.stats, &pass.h_diag, profile, mode, trace_correction, false)?;
    let mut out = pass.h_u;
    sub_row_scaled(&mut out, &shift, u);
    Ok(out)
}

/// `W(z)`: `H1 o p1 + H2 o p2` (MIP) or `p1` (non-MIP).
pub fn apply_w_operator(batch: &MiniBatch, z: &DVector<f64>, profile: &MomentProfile, mode: Mode) -> Result<DVector<f64>> {
    check_profile(batch, profile)?;
    let stats = crate::sensing::p_stats(&batch.x, z)?;
    w_correction(&stats, profile, mode)
}

/// Dominant-`k` eigenvectors (by `|eigenvalue|`) of `H(y)` for an
/// initialisation batch, by randomised subspace iteration through
/// `h_times_factor` only.
pub fn init_factors(batch: &MiniBatch, k: usize, sweeps: usize, seed: u64) -> Result<DMatrix<f64>> {
    let d = batch.dim();
    if k == 0 || k > d {
        return Err(Error::Dimension(format!("rank must satisfy 1 <= k <= d = {d}, got {k}")));
    }
    let y = &batch.y;
    let x = &batch.x;
    // The closure cannot fail: shapes are fixed by the checks above.
    Ok(dominant_subspace(
        |f| h_times_factor(x, y, f).expect("init shapes are consistent"),
        d,
        k,
        5,
        sweeps,
        seed,
    )
    .basis)
}

/// Moment-corrected operator bound to one residual: applies `M(z)` (with the
/// diagonal removed in non-MIP mode) to arbitrary factors and exposes `W(z)`.
pub struct ResidualOperator<'a> {
    x: &'a DMatrix<f64>,
    z: &'a DVector<f64>,
    shift: DVector<f64>,
    pub stats: PStats,
    pub w_correction: DVector<f64>,
}

impl<'a> ResidualOperator<'a> {
    /// Builds the operator and returns it with `M(z) U` from the same batch pass.
    pub fn prepare(
        batch: &'a MiniBatch,
        z: &'a DVector<f64>,
        u: &DMatrix<f64>,
        profile: &MomentProfile,
        mode: Mode,
        trace_correction: bool,
        zero_diagonal: bool,
    ) -> Result<(Self, DMatrix<f64>)> {
        check_profile(batch, profile)?;
        let pass = residual_pass(&batch.x, z, u)?;
        let shift = m_shift(&pass.stats, &pass.h_diag, profile, mode, trace_correction, zero_diagonal)?;
        let w_correction = w_correction(&pass.stats, profile, mode)?;
        let mut mu = pass.h_u;
        sub_row_scaled(&mut mu, &shift, u);
        Ok((
            Self {
                x: &batch.x,
                z,
                shift,
                stats: pass.stats,
                w_correction,
            },
            mu,
        ))
    }

    pub fn apply(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = h_times_factor(self.x, self.z, f)?;
        sub_row_scaled(&mut out, &self.shift, f);
        Ok(out)
    }
}

/// Result of one factor update.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: ModelState,
    /// `|z|_2 / sqrt(n)` for the residual of the incoming state on this batch.
    pub train_residual: f64,
    pub rank_deficient: bool,
}

/// Factor and `w` update given `M(z) U`, a way to apply `M(z)` to further
/// factors, and `W(z)`. Exposed separately so the update algebra can be driven
/// by injected operators.
pub fn apply_update<F>(
    state: &ModelState,
    m_u: DMatrix<f64>,
    m_apply: F,
    w_corr: &DVector<f64>,
    rule: UpdateRule,
) -> Result<(ModelState, bool)>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let (u_next, v_next, rank_deficient) = match rule {
        UpdateRule::Power => {
            // S = sym(U V^T) - M(z). Only the symmetric part of U V^T is seen
            // by the measurements; keeping the skew part would let it persist.
            let sym_apply = |f: &DMatrix<f64>| -> DMatrix<f64> {
                let mut out = &state.u * state.v.tr_mul(f);
                out += &state.v * state.u.tr_mul(f);
                out * 0.5
            };
            let mut s_u = sym_apply(&state.u);
            s_u -= m_u;
            let qr = thin_qr(&s_u);
            drop(s_u);
            let u_next = qr.q;
            // S is symmetric, so S^T U+ = S U+.
            let mut v_next = sym_apply(&u_next);
            v_next -= m_apply(&u_next)?;
            (u_next, v_next, qr.rank_deficient)
        }
        UpdateRule::Verbatim => {
            let mut u_hat = state.v.clone();
            u_hat -= m_u;
            let qr = thin_qr(&u_hat);
            let v_next = &state.v * qr.r.transpose();
            (qr.q, v_next, qr.rank_deficient)
        }
    };
    let w_next = &state.w - w_corr;
    Ok((
        ModelState {
            w: w_next,
            u: u_next,
            v: v_next,
            t: state.t + 1,
            mode: state.mode,
        },
        rank_deficient,
    ))
}

/// One MES iteration on a fresh batch.
pub fn mes_step(state: &ModelState, batch: &MiniBatch, profile: &MomentProfile, config: &SolverConfig) -> Result<StepOutcome> {
    let mut z = state.predict(&batch.x)?;
    z -= &batch.y;
    let train_residual = z.norm() / (z.len() as f64).sqrt();
    let zero_diagonal = matches!(config.update_rule, UpdateRule::Power);
    let (op, m_u) = ResidualOperator::prepare(
        batch,
        &z,
        &state.u,
        profile,
        state.mode,
        config.trace_correction,
        zero_diagonal,
    )?;
    let (next, rank_deficient) = apply_update(state, m_u, |f| op.apply(f), &op.w_correction, config.update_rule)?;
    Ok(StepOutcome {
        state: next,
        train_residual,
        rank_deficient,
    })
}

/// Spectral initialisation used by [`run_mes`]: dominant subspace of the
/// moment-corrected operator `M(y)` on the initialisation batch, which is the
/// operator the first power step applies from the zero model.
pub fn spectral_init(batch: &MiniBatch, profile: &MomentProfile, config: &SolverConfig) -> Result<ModelState> {
    let d = batch.dim();
    config.validate(d)?;
    let empty = DMatrix::zeros(d, 0);
    let (op, _) = ResidualOperator::prepare(
        batch,
        &batch.y,
        &empty,
        profile,
        config.mode,
        config.trace_correction,
        true,
    )?;
    let basis = dominant_subspace(
        |f| op.apply(f).expect("init shapes are consistent"),
        d,
        config.k,
        5,
        config.init_sweeps,
        derive_seed(config.seed, 0x1417),
    )
    .basis;
    ModelState::new(DVector::zeros(d), basis, DMatrix::zeros(d, config.k), config.mode)
}

/// Final state, per-step trace and sample accounting of a run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub state: ModelState,
    pub trace: Vec<StepRecord>,
    pub profile: Option<MomentProfile>,
    pub samples_consumed: usize,
}

pub(crate) fn next_or<S: BatchSource + ?Sized>(source: &mut S, what: &'static str) -> Result<MiniBatch> {
    source.next_batch().ok_or(Error::StreamExhausted(what))?
}

/// Runs MES over a one-pass stream: one moment batch, one initialisation batch
/// and up to `max_steps` iteration batches, each consumed exactly once.
pub fn run_mes<S: BatchSource + ?Sized>(source: &mut S, config: &SolverConfig, eval: Evaluation<'_>) -> Result<RunResult> {
    let mut consumed = 0usize;

    let moment_batch = next_or(source, "the moment batch")?;
    consumed += moment_batch.len();
    let d = moment_batch.dim();
    config.validate(d)?;
    let profile = match config.moment_source {
        MomentSource::Estimated => MomentProfile::estimate(&moment_batch.x, config.tau_tol)?,
        MomentSource::Analytic => {
            let spec = source.distribution().ok_or_else(|| {
                Error::config("moment_source", "analytic moments need a stream with a known distribution")
            })?;
            MomentProfile::analytic(&spec, d, config.tau_tol)?
        }
    };
    drop(moment_batch);
    if config.mode == Mode::Mip {
        profile.require_tables()?;
        // Sample moments of a non-invertible law are only approximately
        // singular; when the law is known, refuse on its exact moments.
        if let Some(spec) = source.distribution() {
            MomentProfile::analytic(&spec, d, config.tau_tol)?.require_tables()?;
        }
    }

    let started = Instant::now();
    let init_batch = next_or(source, "the initialisation batch")?;
    consumed += init_batch.len();
    let mut state = spectral_init(&init_batch, &profile, config)?;
    let init_residual = init_batch.y.norm() / (init_batch.len() as f64).sqrt();
    drop(init_batch);
    let mut trace = vec![eval.record(0, &state, init_residual, started.elapsed().as_secs_f64() * 1e3, Flags::empty())?];

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
        let outcome = mes_step(&state, &batch, &profile, config)?;
        drop(batch);
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        state = outcome.state;

        let mut flags = Flags::empty();
        if outcome.rank_deficient {
            flags.insert(Flags::RANK_DEFICIENT);
        }
        let finite = outcome.train_residual.is_finite() && state.u.iter().chain(state.v.iter()).all(|v| v.is_finite());
        if !finite {
            flags.insert(Flags::DIVERGED);
        }
        let stalled = previous_residual.is_some_and(|p| (p - outcome.train_residual).abs() < config.termination);
        if stalled {
            flags.insert(Flags::EARLY_STOP);
        }
        trace.push(eval.record(step, &state, outcome.train_residual, wall_ms, flags)?);
        if !finite || stalled {
            break;
        }
        previous_residual = Some(outcome.train_residual);
    }

    Ok(RunResult {
        state,
        trace,
        profile: Some(profile),
        samples_consumed: consumed,
    })
}
