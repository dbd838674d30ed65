// The sensing map and its adjoint in factor form: labels from a rank-k
// model and the residual statistics one pass over a batch produces.

use slm_mes::distributions::{make_ground_truth, sample_batch, DistributionSpec};
use slm_mes::linalg::gaussian_matrix;
use slm_mes::sensing::{apply_sensing, residual_pass};

pub fn run_example() -> slm_mes::Result<()> {
    let (d, k, n) = (200, 3, 5000);
    let gt = make_ground_truth(d, k, false, 1)?;
    let x = sample_batch(&DistributionSpec::gaussian(), d, n, 2)?;

    // y = X^T w* + A(B B^T); nothing d x d is formed
    let y = apply_sensing(&x, &gt.w_star, &gt.factor, &gt.factor, false)?;
    println!("mean label {:.4} (tr M* = {k})", y.mean());

    // H(y) B should be close to (M* + tr(M*)/2 I) B for Gaussian features
    let pass = residual_pass(&x, &y, &gt.factor)?;
    let expected = &gt.factor * (1.0 + 0.5 * k as f64);
    println!("|H(y) B - (1 + k/2) B|_F / |B|_F = {:.3}", (&pass.h_u - &expected).norm() / gt.factor.norm());
    println!("p0 = {:.3}, |p1 - w*| = {:.3}", pass.stats.p0, (&pass.stats.p1 - &gt.w_star).norm());

    let probe = gaussian_matrix(d, 2, 3);
    let again = residual_pass(&x, &y, &probe)?;
    println!("H(y) applied to a {}x{} probe: norm {:.3}", d, 2, again.h_u.norm());
    Ok(())
}

fn main() -> slm_mes::Result<()> {
    run_example()
}
