// Monte-Carlo checks that the sensing operator and the residual statistics
// concentrate around their expectations at the 1/sqrt(n) rate.

use slm_mes::diagnostics::{verify_p_concentration, verify_shifted_cirip, VerifierTable};
use slm_mes::distributions::{make_ground_truth, DistributionSpec};

fn show(t: &VerifierTable) {
    let rows: Vec<String> = t.rows.iter().map(|r| format!("{}: {:.3e}", r.n, r.mean_dev)).collect();
    println!("{:<15} slope {:>7}   {}", t.statistic, t.fitted_exponent.map_or("-".into(), |e| format!("{e:.3}")), rows.join("  "));
}

pub fn run_example() -> slm_mes::Result<()> {
    let n = [500, 2000, 8000];
    for spec in [DistributionSpec::gaussian(), DistributionSpec::truncated_gaussian(0.0)] {
        println!("{}", spec.name());
        let gt = make_ground_truth(8, 2, false, 3)?;
        show(&verify_shifted_cirip(&spec, &gt.dense_m(), &n, 10, 4)?);
        for t in verify_p_concentration(&spec, &gt.w_star, &gt.dense_m(), &n, 10, 5)? {
            show(&t);
        }
    }
    Ok(())
}

fn main() -> slm_mes::Result<()> {
    run_example()
}
