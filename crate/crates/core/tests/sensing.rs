use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use slm_mes::distributions::{sample_batch, DistributionSpec};
use slm_mes::linalg::{dominant_subspace, factored_spectral_norm, gaussian_matrix, spectral_norm, thin_qr};
use slm_mes::sensing::{apply_sensing, h_diag, h_times_factor, p_stats, residual_pass};

/// Dense `H(z) = (1/2n) sum_i z_i x_i x_i^T`.
fn dense_h(x: &DMatrix<f64>, z: &DVector<f64>) -> DMatrix<f64> {
    let n = x.ncols() as f64;
    let mut h = DMatrix::zeros(x.nrows(), x.nrows());
    for (i, col) in x.column_iter().enumerate() {
        h += col * col.transpose() * z[i];
    }
    h / (2.0 * n)
}

fn features(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
    sample_batch(&DistributionSpec::truncated_gaussian(0.0), d, n, seed).unwrap()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * b.amax().max(1.0)
}

#[test]
fn sensing_matches_dense_quadratic_forms() {
    let (d, n) = (9, 40);
    let x = features(d, n, 1);
    let w = gaussian_matrix(d, 1, 2).column(0).into_owned();
    let left = gaussian_matrix(d, 3, 3);
    let right = gaussian_matrix(d, 3, 4);
    for diag_free in [false, true] {
        let mut m = &left * right.transpose();
        if diag_free {
            m.fill_diagonal(0.0);
        }
        let y = apply_sensing(&x, &w, &left, &right, diag_free).unwrap();
        for (i, col) in x.column_iter().enumerate() {
            let dense = col.dot(&w) + (col.transpose() * &m * col)[(0, 0)];
            assert!((y[i] - dense).abs() <= 1e-10 * dense.abs().max(1.0));
        }
    }
}

#[test]
fn operators_match_dense_oracle() {
    let (d, n) = (12, 300);
    let x = features(d, n, 5);
    let z = DVector::from_fn(n, |i, _| ((i * 7) % 11) as f64 - 5.0);
    let u = gaussian_matrix(d, 3, 6);
    let h = dense_h(&x, &z);

    assert!(close(&h_times_factor(&x, &z, &u).unwrap(), &(&h * &u), 1e-12));
    let diag = h_diag(&x, &z).unwrap();
    assert!((diag - h.diagonal()).amax() <= 1e-12);

    let s = p_stats(&x, &z).unwrap();
    let nf = n as f64;
    let p0 = z.sum() / nf;
    let p1 = &x * &z / nf;
    let p2 = x.map(|v| v * v) * &z / nf - DVector::from_element(d, p0);
    assert!((s.p0 - p0).abs() <= 1e-12);
    assert!((&s.p1 - p1).amax() <= 1e-12);
    assert!((&s.p2 - p2).amax() <= 1e-12);

    let pass = residual_pass(&x, &z, &u).unwrap();
    assert!(close(&pass.h_u, &(&h * &u), 1e-12));
    assert_eq!(pass.stats, s);
}

#[test]
fn shape_errors() {
    let x = features(4, 10, 7);
    assert!(h_times_factor(&x, &DVector::zeros(9), &DMatrix::zeros(4, 1)).is_err());
    assert!(h_times_factor(&x, &DVector::zeros(10), &DMatrix::zeros(3, 1)).is_err());
    assert!(apply_sensing(&x, &DVector::zeros(4), &DMatrix::zeros(4, 2), &DMatrix::zeros(4, 1), false).is_err());
}

#[test]
fn factored_norm_matches_dense_svd() {
    for seed in 0..5 {
        let d = 14;
        let left = gaussian_matrix(d, 4, 10 + seed);
        let right = gaussian_matrix(d, 4, 20 + seed);
        let diag = gaussian_matrix(d, 1, 30 + seed).column(0).into_owned();
        let mut dense = &left * right.transpose();
        let plain = factored_spectral_norm(&left, &right, None, 1e-12);
        assert!((plain - spectral_norm(&dense)).abs() <= 1e-8 * plain);
        for j in 0..d {
            dense[(j, j)] += diag[j];
        }
        let shifted = factored_spectral_norm(&left, &right, Some(&diag), 1e-12);
        assert!((shifted - spectral_norm(&dense)).abs() <= 1e-6 * shifted, "{shifted} vs {}", spectral_norm(&dense));
    }
}

#[test]
fn dominant_subspace_matches_dense_eigenvectors() {
    let d = 20;
    let q = thin_qr(&gaussian_matrix(d, d, 40)).q;
    let eig = DVector::from_fn(d, |i, _| if i % 2 == 0 { 10.0 / (1.0 + i as f64) } else { -9.0 / (1.0 + i as f64) });
    let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    let sub = dominant_subspace(|f| &a * f, d, 3, 5, 40, 41);
    // the three largest |eigenvalues| are 10, -4.5, 3.33 at indices 0, 1, 2
    let top = q.columns(0, 3).into_owned();
    let residual = &sub.basis - &top * (top.transpose() * &sub.basis);
    assert!(spectral_norm(&residual) <= 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn statistics_are_linear_in_z(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (d, n) = (6, 25);
        let x = features(d, n, seed);
        let z1 = gaussian_matrix(n, 1, seed ^ 1).column(0).into_owned();
        let z2 = gaussian_matrix(n, 1, seed ^ 2).column(0).into_owned();
        let u = gaussian_matrix(d, 2, seed ^ 3);
        let mix = &z1 * a + &z2 * b;

        let h = h_times_factor(&x, &mix, &u).unwrap();
        let h_lin = h_times_factor(&x, &z1, &u).unwrap() * a + h_times_factor(&x, &z2, &u).unwrap() * b;
        prop_assert!((h - h_lin).amax() <= 1e-10);

        let (s, s1, s2) = (p_stats(&x, &mix).unwrap(), p_stats(&x, &z1).unwrap(), p_stats(&x, &z2).unwrap());
        prop_assert!((s.p0 - (a * s1.p0 + b * s2.p0)).abs() <= 1e-10);
        prop_assert!((&s.p1 - (&s1.p1 * a + &s2.p1 * b)).amax() <= 1e-10);
        prop_assert!((&s.p2 - (&s1.p2 * a + &s2.p2 * b)).amax() <= 1e-10);
    }

    #[test]
    fn implied_operator_is_symmetric(seed in any::<u64>()) {
        let (d, n) = (7, 30);
        let x = features(d, n, seed);
        let z = gaussian_matrix(n, 1, seed ^ 4).column(0).into_owned();
        let u = gaussian_matrix(d, 1, seed ^ 5);
        let v = gaussian_matrix(d, 1, seed ^ 6);
        let uhv = u.tr_mul(&h_times_factor(&x, &z, &v).unwrap())[(0, 0)];
        let vhu = v.tr_mul(&h_times_factor(&x, &z, &u).unwrap())[(0, 0)];
        prop_assert!((uhv - vhu).abs() <= 1e-10 * uhv.abs().max(1.0));
    }

    #[test]
    fn thin_qr_is_orthonormal(rows in 3usize..20, seed in any::<u64>()) {
        let cols = 1 + rows / 3;
        let a = gaussian_matrix(rows, cols, seed);
        let qr = thin_qr(&a);
        let defect = (qr.q.tr_mul(&qr.q) - DMatrix::identity(cols, cols)).norm();
        prop_assert!(defect <= 1e-12);
        prop_assert!((&qr.q * &qr.r - &a).amax() <= 1e-10 * a.amax());
    }
}
