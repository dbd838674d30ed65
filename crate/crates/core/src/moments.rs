//! Per-coordinate third/fourth moments, the 2x2 correction systems that cancel
//! the skewness/kurtosis bias of the residual statistics, and the moment
//! invertibility constant.
//!
//! For coordinate `j` with `A_j = [[1, kappa_j], [kappa_j, phi_j - 1]]`:
//!
//! * `G_j = A_j^{-1} [kappa_j, phi_j - 3]^T`, so `G_j1 p1 + G_j2 p2` has
//!   expectation `(phi_j - 3) diag(dM)_j + kappa_j dw_j`;
//! * `H_j = A_j^{-1} [1, 0]^T`, so `H_j1 p1 + H_j2 p2` has expectation `dw_j`.
//!
//! `det A_j = phi_j - 1 - kappa_j^2` vanishes identically for standardised
//! Bernoulli and Rademacher coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::DistributionSpec;
use crate::error::{Error, Result};

/// Default `tau_tol`: below this `|phi - 1 - kappa^2|` a coordinate is treated as singular.
pub const DEFAULT_TAU_TOL: f64 = 1e-6;

/// Sample third and fourth moments, one per coordinate (row of `x`).
pub fn estimate_moments(x: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let (d, n) = x.shape();
    let mut kappa = DVector::zeros(d);
    let mut phi = DVector::zeros(d);
    for col in x.column_iter() {
        for j in 0..d {
            let v = col[j];
            let v3 = v * v * v;
            kappa[j] += v3;
            phi[j] += v3 * v;
        }
    }
    let nf = n.max(1) as f64;
    (kappa / nf, phi / nf)
}

/// `min_j |phi_j - 1 - kappa_j^2|`.
pub fn mip_constant(kappa: &DVector<f64>, phi: &DVector<f64>) -> f64 {
    kappa
        .iter()
        .zip(phi.iter())
        .map(|(k, p)| (p - 1.0 - k * k).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Row `j` of `G` (column 0 multiplies `p1`, column 1 multiplies `p2`) and `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTables {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

pub fn solve_moment_systems(
    kappa: &DVector<f64>,
    phi: &DVector<f64>,
    tau_tol: f64,
) -> Result<CorrectionTables> {
    if kappa.len() != phi.len() {
        return Err(Error::Shape(format!(
            "kappa has length {} but phi has length {}",
            kappa.len(),
            phi.len()
        )));
    }
    let d = kappa.len();
    let mut g = DMatrix::zeros(d, 2);
    let mut h = DMatrix::zeros(d, 2);
    for j in 0..d {
        let (k, p) = (kappa[j], phi[j]);
        let det = p - 1.0 - k * k;
        if !(det.abs() >= tau_tol) {
            return Err(Error::MomentSystemSingular {
                coord: j,
                kappa: k,
                phi: p,
                det: det.abs(),
            });
        }
        // inverse of [[1, k], [k, p - 1]] is [[p - 1, -k], [-k, 1]] / det
        let (b1, b2) = (k, p - 3.0);
        g[(j, 0)] = ((p - 1.0) * b1 - k * b2) / det;
        g[(j, 1)] = (-k * b1 + b2) / det;
        h[(j, 0)] = (p - 1.0) / det;
        h[(j, 1)] = -k / det;
    }
    Ok(CorrectionTables { g, h })
}

/// Largest residual `|A_j t_j - b_j|` across both systems and all coordinates.
pub fn system_residual(kappa: &DVector<f64>, phi: &DVector<f64>, tables: &CorrectionTables) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..kappa.len() {
        let (k, p) = (kappa[j], phi[j]);
        let apply = |t0: f64, t1: f64| (t0 + k * t1, k * t0 + (p - 1.0) * t1);
        let (g0, g1) = apply(tables.g[(j, 0)], tables.g[(j, 1)]);
        let (h0, h1) = apply(tables.h[(j, 0)], tables.h[(j, 1)]);
        worst = worst
            .max((g0 - k).abs())
            .max((g1 - (p - 3.0)).abs())
            .max((h0 - 1.0).abs())
            .max(h1.abs());
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    Analytic,
    Estimated,
}

/// Moment tables for one feature distribution. `tables` is `None` when some
/// coordinate is singular; `singular` then records the first such coordinate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentProfile {
    pub kappa: DVector<f64>,
    pub phi: DVector<f64>,
    pub tables: Option<CorrectionTables>,
    pub tau_hat: f64,
    pub source: MomentSource,
    pub n_used: usize,
    singular: Option<(usize, f64)>,
}

impl MomentProfile {
    pub fn from_moments(
        kappa: DVector<f64>,
        phi: DVector<f64>,
        source: MomentSource,
        n_used: usize,
        tau_tol: f64,
    ) -> Result<Self> {
        let (tables, singular) = match solve_moment_systems(&kappa, &phi, tau_tol) {
            Ok(t) => (Some(t), None),
            Err(Error::MomentSystemSingular { coord, det, .. }) => (None, Some((coord, det))),
            Err(e) => return Err(e),
        };
        let tau_hat = mip_constant(&kappa, &phi);
        Ok(Self {
            kappa,
            phi,
            tables,
            tau_hat,
            source,
            n_used,
            singular,
        })
    }

    /// Profile built from the closed-form moments of `spec`, replicated over `d` coordinates.
    pub fn analytic(spec: &DistributionSpec, d: usize, tau_tol: f64) -> Result<Self> {
        let m = spec.analytic_moments()?;
        Self::from_moments(
            DVector::from_element(d, m.kappa),
            DVector::from_element(d, m.phi),
            MomentSource::Analytic,
            0,
            tau_tol,
        )
    }

    /// Profile estimated from a dedicated warm-up batch.
    pub fn estimate(x: &DMatrix<f64>, tau_tol: f64) -> Result<Self> {
        let (kappa, phi) = estimate_moments(x);
        Self::from_moments(kappa, phi, MomentSource::Estimated, x.ncols(), tau_tol)
    }

    pub fn dim(&self) -> usize {
        self.kappa.len()
    }

    pub fn is_mip(&self) -> bool {
        self.tables.is_some()
    }

    /// The correction tables, or `MomentSystemSingular` for the first bad coordinate.
    pub fn require_tables(&self) -> Result<&CorrectionTables> {
        match (&self.tables, self.singular) {
            (Some(t), _) => Ok(t),
            (None, Some((coord, det))) => Err(Error::MomentSystemSingular {
                coord,
                kappa: self.kappa[coord],
                phi: self.phi[coord],
                det,
            }),
            (None, None) => unreachable!("profile without tables records its singular coordinate"),
        }
    }
}

/// Entrywise max-abs distance between two `d x 2` tables.
pub fn table_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    crate::linalg::max_abs((a - b).iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    /// Cramer's rule on the 2x2 system, written independently of the explicit inverse.
    fn cramer(k: f64, p: f64, b: (f64, f64)) -> (f64, f64) {
        let det = 1.0 * (p - 1.0) - k * k;
        ((b.0 * (p - 1.0) - k * b.1) / det, (1.0 * b.1 - k * b.0) / det)
    }

    #[test]
    fn estimate_examples() {
        let (k, p) = estimate_moments(&DMatrix::from_element(2, 3, 1.0));
        assert_eq!(k.as_slice(), &[1.0, 1.0]);
        assert_eq!(p.as_slice(), &[1.0, 1.0]);

        let x = crate::distributions::sample_batch(&DistributionSpec::rademacher(), 4, 101, 3).unwrap();
        let (k, p) = estimate_moments(&x);
        assert!(p.iter().all(|&v| v == 1.0));
        for j in 0..4 {
            assert_abs_diff_eq!(k[j], x.row(j).sum() / 101.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn solve_examples() {
        let t = solve_moment_systems(&v(&[0.0]), &v(&[3.0]), DEFAULT_TAU_TOL).unwrap();
        assert_eq!(t.g.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_eq!(t.h.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);

        let t = solve_moment_systems(&v(&[1.0]), &v(&[4.0]), DEFAULT_TAU_TOL).unwrap();
        let g = cramer(1.0, 4.0, (1.0, 1.0));
        let h = cramer(1.0, 4.0, (1.0, 0.0));
        assert_eq!((g, h), ((1.0, 0.0), (1.5, -0.5)));
        assert_abs_diff_eq!(t.g[(0, 0)], g.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.g[(0, 1)], g.1, epsilon = 1e-15);
        assert_abs_diff_eq!(t.h[(0, 0)], h.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.h[(0, 1)], h.1, epsilon = 1e-15);

        let err = solve_moment_systems(&v(&[0.0, 0.0]), &v(&[3.0, 1.0]), DEFAULT_TAU_TOL).unwrap_err();
        assert!(matches!(err, Error::MomentSystemSingular { coord: 1, .. }));
    }

    #[test]
    fn mip_constant_examples() {
        assert_eq!(mip_constant(&v(&[0.0; 3]), &v(&[3.0; 3])), 2.0);
        assert_eq!(mip_constant(&v(&[0.0]), &v(&[1.0])), 0.0);
        for q in [0.01, 0.1, 0.3, 0.5, 0.77] {
            let m = DistributionSpec::bernoulli(q).analytic_moments().unwrap();
            assert_abs_diff_eq!(mip_constant(&v(&[m.kappa]), &v(&[m.phi])), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn profile_reports_singular_coordinate() {
        let p = MomentProfile::analytic(&DistributionSpec::bernoulli(0.1), 3, DEFAULT_TAU_TOL).unwrap();
        assert!(!p.is_mip());
        match p.require_tables() {
            Err(Error::MomentSystemSingular { coord, kappa, .. }) => {
                assert_eq!(coord, 0);
                assert_abs_diff_eq!(kappa, 8.0 / 3.0, epsilon = 1e-12);
            }
            other => panic!("expected singular, got {other:?}"),
        }
        let g = MomentProfile::analytic(&DistributionSpec::gaussian(), 3, DEFAULT_TAU_TOL).unwrap();
        assert_eq!(g.tau_hat, 2.0);
        assert!(g.is_mip());
    }
}
