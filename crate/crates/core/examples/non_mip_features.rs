// Sparse binary features have a singular moment system. The corrected path
// refuses them; the diagonal-free model recovers through the reduced one.

use slm_mes::distributions::{make_ground_truth, DistributionSpec};
use slm_mes::solver::{run_mes, Mode, SolverConfig};
use slm_mes::stream::SyntheticStream;
use slm_mes::trace::Evaluation;

pub fn run_example() -> slm_mes::Result<()> {
    let (d, k) = (100, 2);
    let n = 4 * k * d;
    let spec = DistributionSpec::bernoulli(0.1);
    let gt = make_ground_truth(d, k, true, 21)?;
    let mut config = SolverConfig {
        k,
        batch_size: n,
        max_steps: 40,
        ..SolverConfig::default()
    };

    let mut stream = SyntheticStream::new(spec, gt.clone(), n, 22);
    match run_mes(&mut stream, &config, Evaluation::default()) {
        Err(e) => println!("mip mode: {e}"),
        Ok(_) => println!("mip mode unexpectedly ran"),
    }

    config.mode = Mode::NonMip;
    let mut stream = SyntheticStream::new(spec, gt.clone(), n, 22);
    let run = run_mes(&mut stream, &config, Evaluation::new(Some(&gt), None))?;
    let last = run.trace.last().expect("trace has the init record");
    println!(
        "non-mip mode: eps {:.2e} after {} steps, model diagonal max {:.1e}",
        last.recovery.expect("ground truth supplied").eps,
        last.step,
        run.state.dense_m().diagonal().amax()
    );
    Ok(())
}

fn main() -> slm_mes::Result<()> {
    run_example()
}
