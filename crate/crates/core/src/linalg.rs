//! Small dense kernels shared by the solvers: thin QR with a fixed sign
//! convention, subspace iteration for symmetric operators given only through
//! their action on factors, spectral norms, and a deterministic blocked
//! reduction over sample ranges.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Upper bound on the number of sample blocks a batch reduction is split into.
/// Block boundaries depend only on `n`, never on the thread count.
pub const REDUCTION_BLOCKS: usize = 4;
const MIN_BLOCK_LEN: usize = 512;

/// Splits `0..n` into at most [`REDUCTION_BLOCKS`] contiguous ranges, folds each
/// range (in parallel) into its own accumulator and combines the partial results
/// with a fixed pairwise tree. The result is bit-identical for any thread count.
pub fn block_reduce<T, I, F, C>(n: usize, init: I, fold: F, combine: C) -> T
where
    T: Send,
    I: Fn() -> T + Sync,
    F: Fn(&mut T, Range<usize>) + Sync,
    C: Fn(T, T) -> T,
{
    let blocks = n.div_ceil(MIN_BLOCK_LEN).clamp(1, REDUCTION_BLOCKS);
    let len = n.div_ceil(blocks).max(1);
    let ranges: Vec<Range<usize>> = (0..blocks)
        .map(|b| (b * len).min(n)..((b + 1) * len).min(n))
        .collect();
    let mut parts: Vec<T> = if blocks == 1 {
        let mut acc = init();
        fold(&mut acc, 0..n);
        vec![acc]
    } else {
        ranges
            .into_par_iter()
            .map(|r| {
                let mut acc = init();
                fold(&mut acc, r);
                acc
            })
            .collect()
    };
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop().expect("at least one block")
}

/// Thin QR factorisation `a = q * r` with `q` having orthonormal columns and
/// `r` upper triangular with a nonnegative diagonal.
#[derive(Debug, Clone)]
pub struct ThinQr {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Set when some diagonal entry of `r` is negligible relative to the largest.
    /// `q` is still a full orthonormal set in that case (Householder completion).
    pub rank_deficient: bool,
}

pub fn thin_qr(a: &DMatrix<f64>) -> ThinQr {
    let (rows, cols) = a.shape();
    assert!(cols <= rows, "thin_qr expects a tall matrix, got {rows}x{cols}");
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let scale = (0..cols).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let mut rank_deficient = cols > 0 && scale == 0.0;
    for j in 0..cols {
        if r[(j, j)].abs() <= 1e-12 * scale {
            rank_deficient = true;
        }
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    ThinQr {
        q,
        r,
        rank_deficient,
    }
}

/// Gaussian d x k matrix from a dedicated stream.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Result of [`dominant_subspace`]: orthonormal basis ordered by decreasing
/// `|eigenvalue|`, together with the Ritz values.
#[derive(Debug, Clone)]
pub struct Subspace {
    pub basis: DMatrix<f64>,
    pub values: DVector<f64>,
}

/// Randomised subspace iteration for a symmetric `d x d` operator known only
/// through `apply(F) = A F`. Keeps `k + oversample` columns (capped at `d`),
/// runs `sweeps` power sweeps with re-orthonormalisation and finishes with a
/// Rayleigh-Ritz projection. Memory is `O(d (k + oversample))`.
pub fn dominant_subspace<A>(
    apply: A,
    d: usize,
    k: usize,
    oversample: usize,
    sweeps: usize,
    seed: u64,
) -> Subspace
where
    A: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    assert!(k >= 1 && k <= d);
    let width = (k + oversample).min(d);
    let mut q = thin_qr(&gaussian_matrix(d, width, seed)).q;
    for _ in 0..sweeps {
        q = thin_qr(&apply(&q)).q;
    }
    let aq = apply(&q);
    let mut t = q.transpose() * &aq;
    t = (&t + t.transpose()) * 0.5;
    let eig = t.symmetric_eigen();
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });
    let mut basis = DMatrix::zeros(d, k);
    let mut values = DVector::zeros(k);
    for (slot, &idx) in order.iter().take(k).enumerate() {
        let col = &q * eig.eigenvectors.column(idx);
        basis.set_column(slot, &col);
        values[slot] = eig.eigenvalues[idx];
    }
    // Fix the column sign: largest-magnitude entry positive.
    for j in 0..k {
        let mut col = basis.column_mut(j);
        let pivot = col.iter().copied().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    Subspace { basis, values }
}

/// Largest singular value of a dense matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Spectral norm of `left * right^T + diag(diagonal)` without forming the
/// `d x d` matrix.
///
/// Without a diagonal term the norm is exact: both factors are orthogonalised
/// and the small core `R_l R_r^T` is decomposed. With a diagonal term it falls
/// back to block power iteration on `D^T D`, stopping once the leading Ritz value
/// moves by less than `tol` (relative).
pub fn factored_spectral_norm(
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
    diagonal: Option<&DVector<f64>>,
    tol: f64,
) -> f64 {
    let d = left.nrows();
    let r = left.ncols();
    debug_assert_eq!(right.shape(), (d, r));
    let diagonal = diagonal.filter(|v| v.iter().any(|&x| x != 0.0));
    match diagonal {
        None => {
            if r == 0 {
                return 0.0;
            }
            if r >= d {
                return spectral_norm(&(left * right.transpose()));
            }
            let ql = thin_qr(left);
            let qr = thin_qr(right);
            spectral_norm(&(&ql.r * qr.r.transpose()))
        }
        Some(diag) => {
            let apply = |f: &DMatrix<f64>| -> DMatrix<f64> {
                let mut out = left * right.tr_mul(f);
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row += f.row(i) * diag[i];
                }
                out
            };
            let apply_t = |f: &DMatrix<f64>| -> DMatrix<f64> {
                let mut out = right * left.tr_mul(f);
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row += f.row(i) * diag[i];
                }
                out
            };
            let width = (r + 3).min(d);
            let mut q = thin_qr(&gaussian_matrix(d, width, 0x005e_ed0f_5eed)).q;
            let mut last = 0.0_f64;
            for _ in 0..2000 {
                let z = apply_t(&apply(&q));
                let ritz = spectral_norm(&(q.transpose() * &z));
                q = thin_qr(&z).q;
                if (ritz - last).abs() <= tol * ritz.max(f64::MIN_POSITIVE) {
                    last = ritz;
                    break;
                }
                last = ritz;
            }
            last.max(0.0).sqrt()
        }
    }
}

/// `max_j |a_j|` over every entry.
pub fn max_abs(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}
