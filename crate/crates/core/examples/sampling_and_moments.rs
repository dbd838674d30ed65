// Feature laws, their closed-form moments, and the correction tables
// estimated from a warm-up batch.

use slm_mes::distributions::{sample_batch, DistributionSpec};
use slm_mes::moments::{MomentProfile, DEFAULT_TAU_TOL};

pub fn run_example() -> slm_mes::Result<()> {
    let laws = [
        DistributionSpec::gaussian(),
        DistributionSpec::truncated_gaussian(0.0),
        DistributionSpec::bernoulli(0.1),
        DistributionSpec::rademacher(),
    ];
    println!("{:<26} {:>9} {:>9} {:>9}  mip", "law", "kappa", "phi", "tau");
    for spec in laws {
        let m = spec.analytic_moments()?;
        println!("{:<26} {:>9.4} {:>9.4} {:>9.2e}  {}", spec.name(), m.kappa, m.phi, m.tau, m.tau >= DEFAULT_TAU_TOL);
    }

    // tables from 20k instances against the closed forms
    let spec = DistributionSpec::truncated_gaussian(0.0);
    let x = sample_batch(&spec, 3, 20_000, 7)?;
    let est = MomentProfile::estimate(&x, DEFAULT_TAU_TOL)?;
    let exact = MomentProfile::analytic(&spec, 3, DEFAULT_TAU_TOL)?;
    let (te, ta) = (est.require_tables()?, exact.require_tables()?);
    for j in 0..3 {
        println!(
            "coord {j}: G = ({:+.3}, {:+.3}) vs ({:+.3}, {:+.3})   H = ({:+.3}, {:+.3}) vs ({:+.3}, {:+.3})",
            te.g[(j, 0)], te.g[(j, 1)], ta.g[(j, 0)], ta.g[(j, 1)],
            te.h[(j, 0)], te.h[(j, 1)], ta.h[(j, 0)], ta.h[(j, 1)]
        );
    }
    Ok(())
}

fn main() -> slm_mes::Result<()> {
    run_example()
}
