// Sample-size quantities of the recovery guarantee for a few laws.

use slm_mes::diagnostics::theory_bounds;
use slm_mes::distributions::{make_ground_truth, DistributionSpec};
use slm_mes::solver::Mode;

pub fn run_example() -> slm_mes::Result<()> {
    let (d, k) = (100, 5);
    for (spec, mode) in [
        (DistributionSpec::gaussian(), Mode::Mip),
        (DistributionSpec::truncated_gaussian(0.0), Mode::Mip),
        (DistributionSpec::truncated_gaussian(0.1), Mode::Mip),
        (DistributionSpec::bernoulli(0.1), Mode::NonMip),
    ] {
        let gt = make_ground_truth(d, k, mode.is_diag_free(), 1)?;
        let b = theory_bounds(&gt, &spec.analytic_moments()?, k, 0.5, 1.0, mode)?;
        println!(
            "{:<26} p {:>6.2}  tau {:>6.3}  delta_max {:.3}  n >= {}",
            spec.name(),
            b.p,
            b.tau,
            b.delta_max,
            b.n_recommended
        );
    }
    Ok(())
}

fn main() -> slm_mes::Result<()> {
    run_example()
}
