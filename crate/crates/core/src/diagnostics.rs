//! Monte-Carlo verifiers for the concentration of the sensing operator and the
//! residual statistics, and the sample-size calculator for the MES guarantee.
//!
//! Verifiers work with dense `d x d` matrices and are therefore limited to
//! small `d` ([`DENSE_LIMIT`]).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::{derive_seed, sample_batch, AnalyticMoments, DistributionSpec, GroundTruth};
use crate::error::{Error, Result};
use crate::linalg::{dominant_subspace, spectral_norm};
use crate::moments::{mip_constant, DEFAULT_TAU_TOL};
use crate::solver::Mode;

/// Largest dimension accepted by the dense verifiers.
pub const DENSE_LIMIT: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryBounds {
    /// `max{1, |kappa|_inf, |phi - 3|_inf, |phi - 1|_inf}`.
    pub p: f64,
    /// `min_j |phi_j - 1 - kappa_j^2|`.
    pub tau: f64,
    pub sigma_1: f64,
    pub sigma_k: f64,
    pub delta_max: f64,
    pub delta: f64,
    /// `C (p + 1)^2 / delta^2 * max{p / tau^2, k^2 d}`; the `p / tau^2` term is
    /// dropped in non-MIP mode.
    pub n_recommended: u64,
    pub constant: f64,
    pub mode: Mode,
}

/// `(4 sqrt5 s1 / sk + 3) sk / (4 sqrt5 s1 + 3 sk + 4 sqrt5 |w*|^2)`.
pub fn delta_upper_bound(sigma_1: f64, sigma_k: f64, w_norm_sq: f64) -> f64 {
    let r5 = 4.0 * 5f64.sqrt();
    (r5 * sigma_1 / sigma_k + 3.0) * sigma_k / (r5 * sigma_1 + 3.0 * sigma_k + r5 * w_norm_sq)
}

/// Largest and k-th largest singular values of the effective `M*`.
fn extreme_singular_values(gt: &GroundTruth, k: usize) -> (f64, f64) {
    let b = &gt.factor;
    if !gt.diag_free {
        // B B^T has singular values sigma_j(B)^2.
        let s = b.clone().svd(false, false).singular_values;
        let mut s: Vec<f64> = s.iter().map(|v| v * v).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s.resize(k.max(1), 0.0);
        return (s[0], s[k - 1]);
    }
    let diag = gt.factor_diagonal();
    let d = gt.dim();
    let sub = dominant_subspace(
        |f| {
            let mut out = b * b.tr_mul(f);
            for (j, mut row) in out.row_iter_mut().enumerate() {
                row -= f.row(j) * diag[j];
            }
            out
        },
        d,
        k,
        5,
        200,
        0x5160,
    );
    let mut s: Vec<f64> = sub.values.iter().map(|v| v.abs()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    (s[0], s[k - 1])
}

/// Sample-size quantities of the recovery guarantee. `constant` stands in for
/// the unspecified absolute constant and defaults to 1 in the harness.
pub fn theory_bounds(
    gt: &GroundTruth,
    moments: &AnalyticMoments,
    k: usize,
    delta: f64,
    constant: f64,
    mode: Mode,
) -> Result<TheoryBounds> {
    let d = gt.dim();
    if k == 0 || k > d {
        return Err(Error::config("k", format!("rank must satisfy 1 <= k <= d = {d}, got {k}")));
    }
    if !(delta > 0.0) {
        return Err(Error::config("delta", "must be positive"));
    }
    if !(constant > 0.0) {
        return Err(Error::config("constant", "must be positive"));
    }
    let (kappa, phi) = (moments.kappa, moments.phi);
    let p = 1f64.max(kappa.abs()).max((phi - 3.0).abs()).max((phi - 1.0).abs());
    let tau = mip_constant(&DVector::from_element(1, kappa), &DVector::from_element(1, phi));
    if mode == Mode::Mip && tau < DEFAULT_TAU_TOL {
        return Err(Error::MomentSystemSingular {
            coord: 0,
            kappa,
            phi,
            det: tau,
        });
    }
    let (sigma_1, sigma_k) = extreme_singular_values(gt, k);
    if !(sigma_k > 0.0) {
        return Err(Error::Dimension(format!("M* has sigma_{k} = 0; rank below k")));
    }
    let delta_max = delta_upper_bound(sigma_1, sigma_k, gt.w_star.norm_squared());
    let dim_term = (k * k * d) as f64;
    let inner = match mode {
        Mode::Mip => (p / (tau * tau)).max(dim_term),
        Mode::NonMip => dim_term,
    };
    let n = constant * (p + 1.0).powi(2) / (delta * delta) * inner;
    Ok(TheoryBounds {
        p,
        tau,
        sigma_1,
        sigma_k,
        delta_max,
        delta,
        n_recommended: (n.ceil() as u64).max(1),
        constant,
        mode,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifierRow {
    pub n: usize,
    pub mean_dev: f64,
    pub stderr: f64,
}

/// Deviations of one statistic from its expectation, per sample size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifierTable {
    pub statistic: String,
    pub d: usize,
    pub trials: usize,
    pub rows: Vec<VerifierRow>,
    /// Least-squares slope of `ln mean_dev` on `ln n`; `None` when some deviation is zero.
    pub fitted_exponent: Option<f64>,
    /// False when `d < (2 + |phi - 3|_inf)^2`, the dimension condition of the
    /// operator concentration bound. The expectation identity is unaffected.
    pub dimension_condition: bool,
}

impl VerifierTable {
    fn new(statistic: &str, d: usize, trials: usize, rows: Vec<VerifierRow>, dimension_condition: bool) -> Self {
        let fitted_exponent = fit_exponent(&rows);
        Self {
            statistic: statistic.to_string(),
            d,
            trials,
            rows,
            fitted_exponent,
            dimension_condition,
        }
    }

    /// Columns `n, mean_dev, stderr, fitted_exponent`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["n", "mean_dev", "stderr", "fitted_exponent"])?;
            let exponent = self.fitted_exponent.map(crate::harness::fmt_f64).unwrap_or_default();
            for r in &self.rows {
                w.write_record([r.n.to_string(), crate::harness::fmt_f64(r.mean_dev), crate::harness::fmt_f64(r.stderr), exponent.clone()])?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        crate::harness::write_atomic(path, &buf)
    }

    /// `mean_dev[i] / mean_dev[i + 1]`.
    pub fn consecutive_ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].mean_dev / w[1].mean_dev).collect()
    }
}

/// Slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() || ys.iter().chain(xs).any(|&v| !(v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn fit_exponent(rows: &[VerifierRow]) -> Option<f64> {
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_dev).collect();
    loglog_slope(&xs, &ys)
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

fn check_dense(d: usize) -> Result<()> {
    if d > DENSE_LIMIT {
        return Err(Error::DenseLimit { d, max: DENSE_LIMIT });
    }
    Ok(())
}

fn check_inputs(spec: &DistributionSpec, m: &DMatrix<f64>, n_list: &[usize], trials: usize) -> Result<AnalyticMoments> {
    if !m.is_square() {
        return Err(Error::Shape(format!("M must be square, got {:?}", m.shape())));
    }
    check_dense(m.nrows())?;
    if n_list.is_empty() || n_list.contains(&0) {
        return Err(Error::config("n_list", "needs at least one positive sample size"));
    }
    if trials == 0 {
        return Err(Error::config("trials", "must be at least 1"));
    }
    spec.analytic_moments()
}

/// `x_i^T M x_i` for every column, dense.
fn quadratic_forms(x: &DMatrix<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    let mx = m * x;
    DVector::from_iterator(x.ncols(), x.column_iter().zip(mx.column_iter()).map(|(a, b)| a.dot(&b)))
}

/// `(1/n) sum_i z_i x_i x_i^T`, dense.
fn weighted_gram(x: &DMatrix<f64>, z: &DVector<f64>) -> DMatrix<f64> {
    let mut xz = x.clone();
    for (mut col, zi) in xz.column_iter_mut().zip(z.iter()) {
        col *= *zi;
    }
    (&xz * x.transpose()) / x.ncols() as f64
}

fn dimension_condition(d: usize, phi: f64) -> bool {
    d as f64 >= (2.0 + (phi - 3.0).abs()).powi(2)
}

/// `E[(1/n) A'A(M)] = 2 sym(M) + tr(M) I + D(phi - 3) D(M)`.
pub fn cirip_expectation(m: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    let d = m.nrows();
    let mut e = m + m.transpose();
    for j in 0..d {
        e[(j, j)] += m.trace() + (phi - 3.0) * m[(j, j)];
    }
    e
}

/// For each `n`, the mean over `trials` of `|(1/n) sum z_i x_i x_i^T - E|_2`
/// with `z = A(M)` on fresh batches.
pub fn verify_shifted_cirip(
    spec: &DistributionSpec,
    m: &DMatrix<f64>,
    n_list: &[usize],
    trials: usize,
    seed: u64,
) -> Result<VerifierTable> {
    let moments = check_inputs(spec, m, n_list, trials)?;
    let d = m.nrows();
    let expected = cirip_expectation(m, moments.phi);
    let mut rows = Vec::with_capacity(n_list.len());
    for (ni, &n) in n_list.iter().enumerate() {
        let devs: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let x = sample_batch(spec, d, n, derive_seed(derive_seed(seed, ni as u64), t as u64))?;
                let z = quadratic_forms(&x, m);
                Ok(spectral_norm(&(weighted_gram(&x, &z) - &expected)))
            })
            .collect::<Result<_>>()?;
        let (mean_dev, stderr) = mean_stderr(&devs);
        rows.push(VerifierRow { n, mean_dev, stderr });
    }
    Ok(VerifierTable::new("cirip", d, trials, rows, dimension_condition(d, moments.phi)))
}

/// Expectations of `p0`, `p1`, `p2` and `(1/n) A'(X^T w)` for `y = X^T w + A(M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PTargets {
    pub p0: f64,
    pub p1: DVector<f64>,
    pub p2: DVector<f64>,
    pub adjoint_linear: DMatrix<f64>,
}

pub fn p_targets(w: &DVector<f64>, m: &DMatrix<f64>, moments: &AnalyticMoments) -> PTargets {
    let dm = m.diagonal();
    let (kappa, phi) = (moments.kappa, moments.phi);
    PTargets {
        p0: m.trace(),
        p1: &dm * kappa + w,
        p2: &dm * (phi - 1.0) + w * kappa,
        adjoint_linear: DMatrix::from_diagonal(&(w * kappa)),
    }
}

/// Four tables, in order `p0`, `p1`, `p2`, `adjoint_linear`: absolute (p0),
/// Euclidean (p1, p2) and spectral (adjoint) deviations from [`p_targets`].
pub fn verify_p_concentration(
    spec: &DistributionSpec,
    w: &DVector<f64>,
    m: &DMatrix<f64>,
    n_list: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<VerifierTable>> {
    let moments = check_inputs(spec, m, n_list, trials)?;
    let d = m.nrows();
    if w.len() != d {
        return Err(Error::Shape(format!("w has length {} but M is {d} x {d}", w.len())));
    }
    let target = p_targets(w, m, &moments);
    let mut per_stat: [Vec<VerifierRow>; 4] = Default::default();
    for (ni, &n) in n_list.iter().enumerate() {
        let devs: Vec<[f64; 4]> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let x = sample_batch(spec, d, n, derive_seed(derive_seed(seed, ni as u64), t as u64))?;
                let linear = x.tr_mul(w);
                let y = &linear + quadratic_forms(&x, m);
                let stats = crate::sensing::p_stats(&x, &y)?;
                Ok([
                    (stats.p0 - target.p0).abs(),
                    (&stats.p1 - &target.p1).norm(),
                    (&stats.p2 - &target.p2).norm(),
                    spectral_norm(&(weighted_gram(&x, &linear) - &target.adjoint_linear)),
                ])
            })
            .collect::<Result<_>>()?;
        for (s, rows) in per_stat.iter_mut().enumerate() {
            let v: Vec<f64> = devs.iter().map(|r| r[s]).collect();
            let (mean_dev, stderr) = mean_stderr(&v);
            rows.push(VerifierRow { n, mean_dev, stderr });
        }
    }
    let cond = dimension_condition(d, moments.phi);
    let names = ["p0", "p1", "p2", "adjoint_linear"];
    Ok(names
        .iter()
        .zip(per_stat)
        .map(|(name, rows)| VerifierTable::new(name, d, trials, rows, cond))
        .collect())
}
