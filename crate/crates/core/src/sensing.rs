//! The rank-one symmetric sensing operator `A(M)_i = x_i^T M x_i`, its adjoint
//! acting on factors, and the residual statistics built from a batch.
//!
//! Everything here works in factor form: a pass over a batch costs `O(n d k)`
//! and keeps `O(d k)` accumulators. No `d x d` matrix is ever formed.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::block_reduce;

/// A block of `n` instances (columns of `x`) and their labels.
#[derive(Clone, Debug)]
pub struct MiniBatch {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl MiniBatch {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(Error::Dimension("a mini-batch needs at least one instance".into()));
        }
        if x.ncols() != y.len() {
            return Err(Error::Shape(format!(
                "batch has {} instances but {} labels",
                x.ncols(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

/// `p0 = 1^T z / n`, `p1 = X z / n`, `p2 = (X o X) z / n - p0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PStats {
    pub p0: f64,
    pub p1: DVector<f64>,
    pub p2: DVector<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_batch(x: &DMatrix<f64>, z: &DVector<f64>) -> Result<()> {
    if x.ncols() != z.len() {
        return Err(Error::Shape(format!(
            "X has {} columns but z has length {}",
            x.ncols(),
            z.len()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }
    Ok(())
}

fn check_factor(x: &DMatrix<f64>, f: &DMatrix<f64>, what: &str) -> Result<()> {
    if f.nrows() != x.nrows() {
        return Err(Error::Shape(format!(
            "{what} has {} rows but instances have dimension {}",
            f.nrows(),
            x.nrows()
        )));
    }
    Ok(())
}

/// `X^T w + A(M)` with `M = left * right^T`, minus its diagonal when `diag_free`.
pub fn apply_sensing(
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
    diag_free: bool,
) -> Result<DVector<f64>> {
    let d = x.nrows();
    if w.len() != d {
        return Err(Error::Shape(format!("w has length {} but d = {d}", w.len())));
    }
    check_factor(x, left, "left factor")?;
    check_factor(x, right, "right factor")?;
    if left.ncols() != right.ncols() {
        return Err(Error::Shape(format!(
            "factor ranks differ: {} vs {}",
            left.ncols(),
            right.ncols()
        )));
    }
    let k = left.ncols();
    let ls = left.as_slice();
    let rs = right.as_slice();
    let lr_diag: Vec<f64> = if diag_free {
        (0..d).map(|j| (0..k).map(|l| ls[l * d + j] * rs[l * d + j]).sum()).collect()
    } else {
        Vec::new()
    };
    let mut out = DVector::zeros(x.ncols());
    out.as_mut_slice()
        .par_iter_mut()
        .zip(x.as_slice().par_chunks(d))
        .for_each(|(o, col)| {
            let mut v = dot(col, w.as_slice());
            for l in 0..k {
                v += dot(col, &ls[l * d..(l + 1) * d]) * dot(col, &rs[l * d..(l + 1) * d]);
            }
            if diag_free {
                v -= col.iter().zip(&lr_diag).map(|(xj, dj)| xj * xj * dj).sum::<f64>();
            }
            *o = v;
        });
    Ok(out)
}

/// Everything a residual pass produces: the statistics, `H(z) U` and the
/// diagonal of `H(z)`.
#[derive(Clone, Debug)]
pub struct ResidualPass {
    pub stats: PStats,
    pub h_u: DMatrix<f64>,
    pub h_diag: DVector<f64>,
}

struct Accum {
    hu: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    s0: f64,
}

impl Accum {
    fn merge(mut self, other: Accum) -> Accum {
        axpy(1.0, &other.hu, &mut self.hu);
        axpy(1.0, &other.s1, &mut self.s1);
        axpy(1.0, &other.s2, &mut self.s2);
        self.s0 += other.s0;
        self
    }
}

/// `H(z) U = (1/2n) sum_i z_i x_i (x_i^T U)` accumulated into a `d x k` buffer.
fn fold_h_factor(x: &[f64], d: usize, z: &[f64], u: &[f64], k: usize, range: std::ops::Range<usize>, hu: &mut [f64], proj: &mut [f64]) {
    for i in range {
        let zi = z[i];
        if zi == 0.0 {
            continue;
        }
        let col = &x[i * d..(i + 1) * d];
        for l in 0..k {
            proj[l] = zi * dot(col, &u[l * d..(l + 1) * d]);
        }
        for l in 0..k {
            axpy(proj[l], col, &mut hu[l * d..(l + 1) * d]);
        }
    }
}

/// One fused pass over the batch computing the residual statistics and `H(z) U`.
pub fn residual_pass(x: &DMatrix<f64>, z: &DVector<f64>, u: &DMatrix<f64>) -> Result<ResidualPass> {
    check_batch(x, z)?;
    check_factor(x, u, "U")?;
    let (d, n) = x.shape();
    let k = u.ncols();
    let xs = x.as_slice();
    let zs = z.as_slice();
    let us = u.as_slice();
    let acc = block_reduce(
        n,
        || Accum {
            hu: vec![0.0; d * k],
            s1: vec![0.0; d],
            s2: vec![0.0; d],
            s0: 0.0,
        },
        |acc, range| {
            let mut proj = vec![0.0; k];
            for i in range.clone() {
                let zi = zs[i];
                let col = &xs[i * d..(i + 1) * d];
                acc.s0 += zi;
                for j in 0..d {
                    let v = zi * col[j];
                    acc.s1[j] += v;
                    acc.s2[j] += v * col[j];
                }
            }
            fold_h_factor(xs, d, zs, us, k, range, &mut acc.hu, &mut proj);
        },
        Accum::merge,
    );
    let nf = n as f64;
    let p0 = acc.s0 / nf;
    let p1 = DVector::from_iterator(d, acc.s1.iter().map(|v| v / nf));
    let p2 = DVector::from_iterator(d, acc.s2.iter().map(|v| v / nf - p0));
    let h_diag = DVector::from_iterator(d, acc.s2.iter().map(|v| v / (2.0 * nf)));
    let h_u = DMatrix::from_vec(d, k, acc.hu) / (2.0 * nf);
    Ok(ResidualPass {
        stats: PStats { p0, p1, p2 },
        h_u,
        h_diag,
    })
}

pub fn p_stats(x: &DMatrix<f64>, z: &DVector<f64>) -> Result<PStats> {
    let empty = DMatrix::zeros(x.nrows(), 0);
    Ok(residual_pass(x, z, &empty)?.stats)
}

/// `H(z) U` where `H(z) = (1/2n) sum_i z_i x_i x_i^T`.
pub fn h_times_factor(x: &DMatrix<f64>, z: &DVector<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_batch(x, z)?;
    check_factor(x, u, "U")?;
    let (d, n) = x.shape();
    let k = u.ncols();
    let xs = x.as_slice();
    let zs = z.as_slice();
    let us = u.as_slice();
    let hu = block_reduce(
        n,
        || vec![0.0; d * k],
        |acc, range| {
            let mut proj = vec![0.0; k];
            fold_h_factor(xs, d, zs, us, k, range, acc, &mut proj);
        },
        |mut a, b| {
            axpy(1.0, &b, &mut a);
            a
        },
    );
    Ok(DMatrix::from_vec(d, k, hu) / (2.0 * n as f64))
}

/// Diagonal of `H(z)`: `(1/2n) sum_i z_i (x_i o x_i)`.
pub fn h_diag(x: &DMatrix<f64>, z: &DVector<f64>) -> Result<DVector<f64>> {
    let empty = DMatrix::zeros(x.nrows(), 0);
    Ok(residual_pass(x, z, &empty)?.h_diag)
}

/// Multiplies row `j` of `f` by `scale[j]` and subtracts it from `out`.
pub(crate) fn sub_row_scaled(out: &mut DMatrix<f64>, scale: &DVector<f64>, f: &DMatrix<f64>) {
    let d = out.nrows();
    for l in 0..out.ncols() {
        let o = &mut out.as_mut_slice()[l * d..(l + 1) * d];
        let src = &f.as_slice()[l * d..(l + 1) * d];
        for j in 0..d {
            o[j] -= scale[j] * src[j];
        }
    }
}
