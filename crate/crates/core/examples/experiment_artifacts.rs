// A full experiment from a JSON config, written out as trace.csv and
// summary.json.

use std::path::PathBuf;

use slm_mes::harness::{run_experiment, write_artifacts, ExperimentConfig};

const CONFIG: &str = r#"{
    "d": 40,
    "k": 2,
    "distribution": { "family": "truncated_gaussian", "a": 0.01 },
    "noise_level": 0.1,
    "batch_size": 2560,
    "total_samples": 56320,
    "max_steps": 20,
    "test_samples": 2000,
    "trials": 3,
    "seed": 9
}"#;

pub fn run_example() -> slm_mes::Result<()> {
    let cfg = ExperimentConfig::from_json_str(CONFIG)?;
    let outcome = run_experiment(&cfg)?;
    let s = &outcome.summary.solvers[0];
    println!(
        "final eps {:.2e}, test nmse {:.2e} (noise floor {:.2e})",
        s.final_stats.mean_eps,
        s.final_stats.mean_test_nmse.unwrap_or(f64::NAN),
        outcome.summary.noise_floor_nmse.unwrap_or(f64::NAN)
    );
    let out = std::env::var_os("SLM_EXAMPLE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("slm-example"));
    for p in write_artifacts(&outcome, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> slm_mes::Result<()> {
    run_example()
}
