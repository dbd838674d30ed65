//! Coordinate-wise i.i.d. feature distributions, planted ground-truth models
//! and label generation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::thin_qr;
use crate::sensing::apply_sensing;

/// Columns generated per independent substream in [`sample_batch`].
const SAMPLE_CHUNK: usize = 256;

/// SplitMix64 finaliser. Used to derive independent child seeds from
/// `(seed, index)` pairs (trial, batch, column block ...).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    /// `min(g, a)` with `g ~ N(0, 1)`.
    TruncatedGaussian { a: f64 },
    /// `P(b = 1) = q`, otherwise `b = 0`.
    Bernoulli { q: f64 },
    Rademacher,
}

fn default_true() -> bool {
    true
}

/// Per-coordinate feature law. With `standardize` the raw variable is shifted
/// and scaled to mean 0 and variance 1 using its closed-form moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    #[serde(flatten)]
    pub family: Family,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

/// Moments of one coordinate of the distribution actually sampled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticMoments {
    pub mean: f64,
    pub variance: f64,
    /// `E[x^3]`
    pub kappa: f64,
    /// `E[x^4]`
    pub phi: f64,
    /// `|phi - 1 - kappa^2|`
    pub tau: f64,
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

impl DistributionSpec {
    pub fn gaussian() -> Self {
        Self::new(Family::Gaussian)
    }

    pub fn truncated_gaussian(a: f64) -> Self {
        Self::new(Family::TruncatedGaussian { a })
    }

    pub fn bernoulli(q: f64) -> Self {
        Self::new(Family::Bernoulli { q })
    }

    pub fn rademacher() -> Self {
        Self::new(Family::Rademacher)
    }

    fn new(family: Family) -> Self {
        Self {
            family,
            standardize: true,
        }
    }

    pub fn raw(mut self) -> Self {
        self.standardize = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            Family::Bernoulli { q } if !(q > 0.0 && q < 1.0) => Err(Error::config(
                "distribution.q",
                format!("success probability must lie strictly inside (0, 1), got {q}"),
            )),
            Family::TruncatedGaussian { a } if !a.is_finite() => Err(Error::config(
                "distribution.a",
                format!("truncation level must be finite, got {a}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self.family {
            Family::Gaussian => "gaussian".into(),
            Family::TruncatedGaussian { a } => format!("truncated_gaussian(a={a})"),
            Family::Bernoulli { q } => format!("bernoulli(q={q})"),
            Family::Rademacher => "rademacher".into(),
        }
    }

    /// `E[b^r]` of the unstandardised variable.
    pub fn raw_moment(&self, r: u32) -> f64 {
        if r == 0 {
            return 1.0;
        }
        match self.family {
            Family::Gaussian => {
                if r % 2 == 1 {
                    0.0
                } else {
                    (1..r).step_by(2).map(f64::from).product()
                }
            }
            Family::Rademacher => {
                if r % 2 == 1 {
                    0.0
                } else {
                    1.0
                }
            }
            Family::Bernoulli { q } => q,
            Family::TruncatedGaussian { a } => {
                // I_r = int_{-inf}^a x^r pdf(x) dx with I_r = -a^{r-1} pdf(a) + (r-1) I_{r-2}.
                let pdf = std_normal_pdf(a);
                let cdf = std_normal_cdf(a);
                let mut partial = vec![cdf, -pdf];
                for s in 2..=r as usize {
                    let next = -a.powi(s as i32 - 1) * pdf + (s as f64 - 1.0) * partial[s - 2];
                    partial.push(next);
                }
                partial[r as usize] + a.powi(r as i32) * (1.0 - cdf)
            }
        }
    }

    /// `(shift, scale)` such that the sampled value is `(b - shift) / scale`.
    pub fn standardization(&self) -> (f64, f64) {
        if !self.standardize {
            return (0.0, 1.0);
        }
        match self.family {
            Family::Gaussian | Family::Rademacher => (0.0, 1.0),
            _ => {
                let m1 = self.raw_moment(1);
                let var = self.raw_moment(2) - m1 * m1;
                (m1, var.sqrt())
            }
        }
    }

    /// `E[x^r]` of the sampled (possibly standardised) variable.
    pub fn moment(&self, r: u32) -> f64 {
        let (shift, scale) = self.standardization();
        if shift == 0.0 && scale == 1.0 {
            return self.raw_moment(r);
        }
        let central: f64 = (0..=r)
            .map(|j| binomial(r, j) * self.raw_moment(j) * (-shift).powi((r - j) as i32))
            .sum();
        central / scale.powi(r as i32)
    }

    pub fn analytic_moments(&self) -> Result<AnalyticMoments> {
        self.validate()?;
        let mean = self.moment(1);
        let variance = self.moment(2) - mean * mean;
        let kappa = self.moment(3);
        let phi = self.moment(4);
        Ok(AnalyticMoments {
            mean,
            variance,
            kappa,
            phi,
            tau: (phi - 1.0 - kappa * kappa).abs(),
        })
    }

    fn draw_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            Family::Gaussian => StandardNormal.sample(rng),
            Family::TruncatedGaussian { a } => {
                let g: f64 = StandardNormal.sample(rng);
                g.min(a)
            }
            Family::Bernoulli { q } => {
                if rng.random::<f64>() < q {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

/// Draws a `d x n` feature matrix whose columns are instances.
///
/// Columns are produced in fixed-size chunks, each from its own substream
/// derived from `(seed, chunk index)`, so the output does not depend on how many
/// threads generate it.
pub fn sample_batch(spec: &DistributionSpec, d: usize, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if d == 0 || n == 0 {
        return Err(Error::Dimension(format!("sample_batch needs d, n >= 1 (got d = {d}, n = {n})")));
    }
    let (shift, scale) = spec.standardization();
    let identity = shift == 0.0 && scale == 1.0;
    let mut x = DMatrix::<f64>::zeros(d, n);
    x.as_mut_slice()
        .par_chunks_mut(d * SAMPLE_CHUNK)
        .enumerate()
        .for_each(|(chunk, out)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, chunk as u64));
            for v in out.iter_mut() {
                let b = spec.draw_raw(&mut rng);
                *v = if identity { b } else { (b - shift) / scale };
            }
        });
    Ok(x)
}

/// Planted model `y = x^T w* + x^T M* x + noise * N(0, 1)` with `M* = B B^T`,
/// or `B B^T - diag(B B^T)` when `diag_free`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub w_star: DVector<f64>,
    pub factor: DMatrix<f64>,
    pub diag_free: bool,
    pub noise_level: f64,
}

impl GroundTruth {
    pub fn new(w_star: DVector<f64>, factor: DMatrix<f64>, diag_free: bool, noise_level: f64) -> Result<Self> {
        if factor.nrows() != w_star.len() {
            return Err(Error::Shape(format!(
                "factor has {} rows but w* has length {}",
                factor.nrows(),
                w_star.len()
            )));
        }
        if !(noise_level >= 0.0) {
            return Err(Error::config("noise_level", "must be nonnegative"));
        }
        Ok(Self {
            w_star,
            factor,
            diag_free,
            noise_level,
        })
    }

    pub fn with_noise(mut self, noise_level: f64) -> Self {
        self.noise_level = noise_level;
        self
    }

    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    /// `diag(B B^T)`, i.e. squared row norms of the factor.
    pub fn factor_diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.factor.row_iter().map(|r| r.norm_squared()))
    }

    /// Dense effective `M*`. Intended for small-d checks only.
    pub fn dense_m(&self) -> DMatrix<f64> {
        let mut m = &self.factor * self.factor.transpose();
        if self.diag_free {
            m.fill_diagonal(0.0);
        }
        m
    }

    /// Noise-free labels `X^T w* + A(M*)`, evaluated through the factor.
    pub fn signal(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        apply_sensing(x, &self.w_star, &self.factor, &self.factor, self.diag_free)
    }
}

/// Random planted model: `B` has orthonormal columns (QR of a Gaussian matrix)
/// and `w*` has i.i.d. `N(0, 1/d)` entries.
pub fn make_ground_truth(d: usize, k: usize, diag_free: bool, seed: u64) -> Result<GroundTruth> {
    if k == 0 || k > d {
        return Err(Error::Dimension(format!("rank must satisfy 1 <= k <= d (got k = {k}, d = {d})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let factor = thin_qr(&g).q;
    let sd = 1.0 / (d as f64).sqrt();
    let w_star = DVector::from_fn(d, |_, _| sd * { let g: f64 = StandardNormal.sample(&mut rng); g });
    GroundTruth::new(w_star, factor, diag_free, 0.0)
}

/// Labels for the columns of `x`: signal plus `noise_level * N(0, 1)` drawn from
/// a stream seeded by `seed`.
pub fn label_batch(gt: &GroundTruth, x: &DMatrix<f64>, seed: u64) -> Result<DVector<f64>> {
    let mut y = gt.signal(x)?;
    if gt.noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in y.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += gt.noise_level * e;
        }
    }
    Ok(y)
}
