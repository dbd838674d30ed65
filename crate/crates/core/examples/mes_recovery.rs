// Streaming recovery of a planted second-order model: one moment batch, one
// initialisation batch, then one fresh batch per iteration.

use slm_mes::distributions::{make_ground_truth, DistributionSpec};
use slm_mes::solver::{run_mes, SolverConfig};
use slm_mes::stream::SyntheticStream;
use slm_mes::trace::Evaluation;

pub fn run_example() -> slm_mes::Result<()> {
    let (d, k) = (100, 3);
    // skewed features want larger batches than Gaussian ones at this size
    let n = 16 * k * d;
    let spec = DistributionSpec::truncated_gaussian(0.0);
    let gt = make_ground_truth(d, k, false, 11)?;
    let config = SolverConfig {
        k,
        batch_size: n,
        max_steps: 30,
        seed: 12,
        ..SolverConfig::default()
    };
    let mut stream = SyntheticStream::new(spec, gt.clone(), n, 13);
    let run = run_mes(&mut stream, &config, Evaluation::new(Some(&gt), None))?;
    for r in run.trace.iter().filter(|r| r.step % 5 == 0 || r.step + 1 == run.trace.len()) {
        let e = r.recovery.expect("ground truth supplied");
        println!("step {:>2}  beta {:.2e}  gamma {:.2e}  eps {:.2e}  {}", r.step, e.beta, e.gamma, e.eps, r.flags);
    }
    println!("{} samples consumed, each once", run.samples_consumed);
    Ok(())
}

fn main() -> slm_mes::Result<()> {
    run_example()
}
