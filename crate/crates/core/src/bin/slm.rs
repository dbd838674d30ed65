use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slm_mes::diagnostics::{theory_bounds, verify_p_concentration, verify_shifted_cirip, VerifierTable};
use slm_mes::distributions::{make_ground_truth, sample_batch, DistributionSpec};
use slm_mes::harness::{preset, reproduce_figure1, run_experiment, write_artifacts, write_atomic, ExperimentConfig, Scale};
use slm_mes::moments::{MomentProfile, DEFAULT_TAU_TOL};
use slm_mes::{Error, Result};

/// Dimension cap for the dense verifiers on the command line.
const CLI_DENSE_LIMIT: usize = 32;

#[derive(Parser)]
#[command(name = "slm", version, about = "Second-order linear model recovery by moment-estimation sequences")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset: default, quick, figure1-desk, figure1-paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write trace.csv / summary.json.
    Run {
        /// Override the number of trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Monte-Carlo deviation of (1/n) A'A(M) from its expectation.
    VerifyCirip(VerifyArgs),
    /// Monte-Carlo deviations of the residual statistics from their targets.
    VerifyP(VerifyArgs),
    /// Print analytic or estimated moment tables.
    Moments {
        #[arg(long, default_value = "gaussian")]
        distribution: String,
        #[arg(long, default_value_t = 5)]
        d: usize,
        /// Estimate from this many samples instead of using closed forms.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Sample-size quantities of the recovery guarantee for a config.
    Bounds,
}

#[derive(Args)]
struct VerifyArgs {
    /// gaussian | truncated_gaussian:A | bernoulli:Q | rademacher
    #[arg(long, default_value = "gaussian")]
    distribution: String,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "1000,4000,16000")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Use a diagonal-free M (needed for the non-MIP laws).
    #[arg(long)]
    diag_free: bool,
}

fn parse_distribution(s: &str) -> Result<DistributionSpec> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let num = |what: &str| -> Result<f64> {
        arg.ok_or_else(|| Error::config("distribution", format!("`{name}` needs a parameter, e.g. {name}:{what}")))?
            .parse::<f64>()
            .map_err(|e| Error::config("distribution", e.to_string()))
    };
    let spec = match name {
        "gaussian" => DistributionSpec::gaussian(),
        "truncated_gaussian" => DistributionSpec::truncated_gaussian(num("0")?),
        "bernoulli" => DistributionSpec::bernoulli(num("0.1")?),
        "rademacher" => DistributionSpec::rademacher(),
        other => return Err(Error::config("distribution", format!("unknown family `{other}`"))),
    };
    spec.validate()?;
    Ok(spec)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::from_json_file(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => preset("default")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, fallback: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_tables(tables: &[VerifierTable], out: &Path) -> Result<()> {
    for t in tables {
        let path = out.join(format!("{}.csv", t.statistic));
        t.write_csv(&path)?;
        println!("{}: exponent {}", t.statistic, t.fitted_exponent.map_or("n/a".into(), |e| format!("{e:.3}")));
        for r in &t.rows {
            println!("  n={:>7}  mean_dev={:.4e}  stderr={:.2e}", r.n, r.mean_dev, r.stderr);
        }
        if !t.dimension_condition {
            eprintln!("note: d = {} is below the dimension condition (2 + |phi - 3|)^2 of the bound", t.d);
        }
        println!("  -> {}", path.display());
    }
    Ok(())
}

fn verify(cli: &Cli, args: &VerifyArgs, p_stats: bool) -> Result<()> {
    if args.d > CLI_DENSE_LIMIT {
        return Err(Error::DenseLimit {
            d: args.d,
            max: CLI_DENSE_LIMIT,
        });
    }
    let spec = parse_distribution(&args.distribution)?;
    let seed = cli.seed.unwrap_or(0);
    let gt = make_ground_truth(args.d, args.rank, args.diag_free, seed)?;
    let m = gt.dense_m();
    let out = out_dir(cli, "verify");
    let tables = if p_stats {
        verify_p_concentration(&spec, &gt.w_star, &m, &args.n, args.trials, seed)?
    } else {
        vec![verify_shifted_cirip(&spec, &m, &args.n, args.trials, seed)?]
    };
    write_tables(&tables, &out)
}

fn moments(cli: &Cli, distribution: &str, d: usize, n: Option<usize>) -> Result<()> {
    let spec = parse_distribution(distribution)?;
    let profile = match n {
        Some(n) => MomentProfile::estimate(&sample_batch(&spec, d, n, cli.seed.unwrap_or(0))?, DEFAULT_TAU_TOL)?,
        None => MomentProfile::analytic(&spec, d, DEFAULT_TAU_TOL)?,
    };
    let rows: Vec<serde_json::Value> = (0..d)
        .map(|j| {
            let table = |t: Option<&nalgebra::DMatrix<f64>>| t.map(|t| [t[(j, 0)], t[(j, 1)]]);
            serde_json::json!({
                "coord": j,
                "kappa": profile.kappa[j],
                "phi": profile.phi[j],
                "g": table(profile.tables.as_ref().map(|t| &t.g)),
                "h": table(profile.tables.as_ref().map(|t| &t.h)),
            })
        })
        .collect();
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "distribution": spec,
        "source": profile.source,
        "n_used": profile.n_used,
        "tau_hat": profile.tau_hat,
        "mip": profile.is_mip(),
        "coordinates": rows,
    }))?;
    println!("{json}");
    if let Some(out) = &cli.out {
        write_atomic(&out.join("moments.json"), json.as_bytes())?;
    }
    Ok(())
}

fn bounds(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let gt = make_ground_truth(cfg.d, cfg.k, cfg.diag_free, cfg.seed)?;
    let m = cfg.distribution.analytic_moments()?;
    let b = theory_bounds(&gt, &m, cfg.k, cfg.theory.delta, cfg.theory.constant, cfg.mes.mode)?;
    println!("{}", serde_json::to_string_pretty(&b)?);
    Ok(())
}

fn run(cli: &Cli, trials: Option<usize>) -> Result<()> {
    let scale = match cli.preset.as_deref() {
        Some("figure1-desk") if cli.config.is_none() => Some(Scale::Desk),
        Some("figure1-paper") if cli.config.is_none() => Some(Scale::Paper),
        _ => None,
    };
    if let Some(scale) = scale {
        let report = reproduce_figure1(scale, trials.unwrap_or(10), cli.seed.unwrap_or(0))?;
        let out = out_dir(cli, "figure1");
        for p in &report.panels {
            println!("panel ({}) {}", p.name, p.title);
            for s in &p.series {
                println!("  {:<10} final eps {:.3e}  test nmse {}", s.label, s.final_eps, s.final_test_nmse.map_or("n/a".into(), |v| format!("{v:.3e}")));
            }
            for note in &p.notes {
                println!("  {note}");
            }
        }
        for path in report.write(&out)? {
            println!("wrote {}", path.display());
        }
        return Ok(());
    }
    let mut cfg = load_config(cli)?;
    if let Some(t) = trials {
        cfg.trials = t;
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let outcome = run_experiment(&cfg)?;
    for s in &outcome.summary.solvers {
        println!(
            "{}: final eps {:.3e} (std {:.1e}), test nmse {}",
            s.solver,
            s.final_stats.mean_eps,
            s.final_stats.std_eps,
            s.final_stats.mean_test_nmse.map_or("n/a".into(), |v| format!("{v:.3e}"))
        );
    }
    for path in write_artifacts(&outcome, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::Run { trials } => run(&cli, *trials),
        Command::VerifyCirip(a) => verify(&cli, a, false),
        Command::VerifyP(a) => verify(&cli, a, true),
        Command::Moments { distribution, d, n } => moments(&cli, distribution, *d, *n),
        Command::Bounds => bounds(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
