// MES against alternating gradient descent on skewed features, each over the
// same sample budget. GD gets the best of a small step-size grid.

use slm_mes::distributions::DistributionSpec;
use slm_mes::harness::{run_experiment, ExperimentConfig, SolverChoice};

pub fn run_example() -> slm_mes::Result<()> {
    let (d, k) = (60, 2);
    let n = 16 * k * d;
    let cfg = ExperimentConfig {
        d,
        k,
        solver: SolverChoice::Both,
        distribution: DistributionSpec::truncated_gaussian(0.0),
        batch_size: Some(n),
        total_samples: Some(32 * n),
        max_steps: 30,
        test_samples: 2000,
        trials: 2,
        seed: 5,
        ..ExperimentConfig::default()
    };
    let outcome = run_experiment(&cfg)?;
    for s in &outcome.summary.solvers {
        println!(
            "{:<3} final eps {:.2e}  test nmse {:.2e}  step size {:?}",
            s.solver,
            s.final_stats.mean_eps,
            s.final_stats.mean_test_nmse.unwrap_or(f64::NAN),
            s.step_size
        );
        for g in &s.grid {
            println!("      eta {:<5} -> {:.2e}", g.eta, g.mean_final_eps);
        }
    }
    Ok(())
}

fn main() -> slm_mes::Result<()> {
    run_example()
}
