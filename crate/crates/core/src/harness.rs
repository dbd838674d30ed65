//! Experiment harness: synthetic trials for MES and the GD baseline, CSV
//! traces, JSON summaries and the eight-panel convergence study.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{theory_bounds, TheoryBounds};
use crate::distributions::{derive_seed, make_ground_truth, DistributionSpec, GroundTruth};
use crate::error::{Error, Result};
use crate::gd::{run_gd, GdConfig, GdInit, STEP_GRID};
use crate::moments::{MomentSource, DEFAULT_TAU_TOL};
use crate::solver::{run_mes, Mode, RunResult, SolverConfig, UpdateRule};
use crate::stream::{draw_labelled, SyntheticStream};
use crate::trace::{Evaluation, StepRecord, TestSet};

/// Header of every `trace.csv`.
pub const TRACE_HEADER: [&str; 9] = [
    "trial",
    "step",
    "beta",
    "gamma",
    "eps",
    "test_nmse",
    "train_residual",
    "wall_ms",
    "flags",
];

/// Header of every figure panel CSV.
pub const PANEL_HEADER: [&str; 6] = ["series", "step", "mean_eps", "std_eps", "mean_test_nmse", "std_test_nmse"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Mes,
    Gd,
    Both,
}

impl SolverChoice {
    fn runs_mes(self) -> bool {
        matches!(self, SolverChoice::Mes | SolverChoice::Both)
    }

    fn runs_gd(self) -> bool {
        matches!(self, SolverChoice::Gd | SolverChoice::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MesSettings {
    pub mode: Mode,
    pub update_rule: UpdateRule,
    pub trace_correction: bool,
    pub moment_source: MomentSource,
    pub tau_tol: f64,
    pub termination: f64,
    pub init_sweeps: usize,
}

impl Default for MesSettings {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            mode: s.mode,
            update_rule: s.update_rule,
            trace_correction: s.trace_correction,
            moment_source: s.moment_source,
            tau_tol: s.tau_tol,
            termination: s.termination,
            init_sweeps: s.init_sweeps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdSettings {
    pub eta_w: f64,
    pub eta_u: f64,
    pub eta_v: f64,
    pub init: GdInit,
    /// Common step sizes to try; the one with the lowest mean final error is
    /// reported. Empty means "use `eta_*` as given".
    pub step_grid: Vec<f64>,
    pub termination: f64,
    pub init_sweeps: usize,
}

impl Default for GdSettings {
    fn default() -> Self {
        let g = GdConfig::default();
        Self {
            eta_w: g.eta_w,
            eta_u: g.eta_u,
            eta_v: g.eta_v,
            init: g.init,
            step_grid: STEP_GRID.to_vec(),
            termination: g.termination,
            init_sweeps: g.init_sweeps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySettings {
    pub delta: f64,
    pub constant: f64,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self { delta: 0.5, constant: 1.0 }
    }
}

/// One synthetic experiment. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub k: usize,
    pub solver: SolverChoice,
    pub distribution: DistributionSpec,
    /// Plant `M* = B B^T - diag(B B^T)`; required for non-MIP features.
    pub diag_free: bool,
    pub noise_level: f64,
    /// Training samples per trial. Defaults to `30 k d`.
    pub total_samples: Option<usize>,
    /// Per-batch size. Defaults to `total_samples / (max_steps + 2)`.
    pub batch_size: Option<usize>,
    pub max_steps: usize,
    pub test_samples: usize,
    pub trials: usize,
    pub seed: u64,
    /// Write measured wall times; off gives byte-identical reruns.
    pub record_wall_time: bool,
    pub mes: MesSettings,
    pub gd: GdSettings,
    pub theory: TheorySettings,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 100,
            k: 5,
            solver: SolverChoice::Mes,
            distribution: DistributionSpec::gaussian(),
            diag_free: false,
            noise_level: 0.0,
            total_samples: None,
            batch_size: None,
            max_steps: 50,
            test_samples: 10_000,
            trials: 10,
            seed: 0,
            record_wall_time: true,
            mes: MesSettings::default(),
            gd: GdSettings::default(),
            theory: TheorySettings::default(),
            out: None,
        }
    }
}

/// Resolved sample accounting of one trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Budget {
    pub total_samples: usize,
    pub batch_size: usize,
    /// `(max_steps + 2) * batch_size`: moment (or second GD) batch, init batch
    /// and `max_steps` iteration batches.
    pub allocated: usize,
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses a JSON document; errors name the offending field path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path.is_empty() || path == "." { "<root>".into() } else { path }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn budget(&self) -> Result<Budget> {
        let slots = self.max_steps + 2;
        let total = self.total_samples.unwrap_or(30 * self.k * self.d);
        let batch_size = match self.batch_size {
            Some(n) => n,
            None => total / slots,
        };
        if batch_size == 0 {
            return Err(Error::config(
                "total_samples",
                format!("{total} samples cannot fill {slots} batches"),
            ));
        }
        let allocated = slots * batch_size;
        if allocated > total {
            return Err(Error::config(
                "total_samples",
                format!("{total} samples are fewer than (max_steps + 2) * batch_size = {allocated}"),
            ));
        }
        Ok(Budget {
            total_samples: total,
            batch_size,
            allocated,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("d", "must be at least 1"));
        }
        if self.k == 0 || self.k > self.d {
            return Err(Error::config("k", format!("rank must satisfy 1 <= k <= d = {}", self.d)));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("noise_level", "must be finite and nonnegative"));
        }
        self.distribution.validate()?;
        if self.gd.step_grid.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::config("gd.step_grid", "step sizes must be positive and finite"));
        }
        let budget = self.budget()?;
        self.solver_config(0, budget.batch_size).validate(self.d).map_err(|e| prefixed("mes", e))?;
        self.gd_config(0, budget.batch_size, None).validate(self.d).map_err(|e| prefixed("gd", e))?;
        Ok(())
    }

    pub fn solver_config(&self, seed: u64, batch_size: usize) -> SolverConfig {
        SolverConfig {
            k: self.k,
            batch_size,
            max_steps: self.max_steps,
            mode: self.mes.mode,
            update_rule: self.mes.update_rule,
            trace_correction: self.mes.trace_correction,
            moment_source: self.mes.moment_source,
            tau_tol: self.mes.tau_tol,
            termination: self.mes.termination,
            init_sweeps: self.mes.init_sweeps,
            seed,
        }
    }

    /// GD takes one more update step than MES has iterations, because it needs
    /// no moment batch; both then consume the same number of samples.
    pub fn gd_config(&self, seed: u64, batch_size: usize, eta: Option<f64>) -> GdConfig {
        let cfg = GdConfig {
            k: self.k,
            eta_w: self.gd.eta_w,
            eta_u: self.gd.eta_u,
            eta_v: self.gd.eta_v,
            batch_size,
            max_steps: self.max_steps + 1,
            init: self.gd.init,
            init_sweeps: self.gd.init_sweeps,
            termination: self.gd.termination,
            seed,
        };
        match eta {
            Some(e) => cfg.with_step(e),
            None => cfg,
        }
    }
}

/// Named configurations usable with zero authored config.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "default" => {
            let mut c = ExperimentConfig::default();
            let n = 4 * c.k * c.d;
            c.batch_size = Some(n);
            c.total_samples = Some((c.max_steps + 2) * n);
            Ok(c)
        }
        "quick" => Ok(ExperimentConfig {
            d: 50,
            k: 2,
            batch_size: Some(2000),
            total_samples: Some(52 * 2000),
            trials: 2,
            test_samples: 2000,
            ..ExperimentConfig::default()
        }),
        other => Err(Error::config(
            "preset",
            format!("unknown preset `{other}` (known: default, quick, figure1-desk, figure1-paper)"),
        )),
    }
}

/// Traces of one solver across trials.
#[derive(Clone, Debug)]
pub struct SolverRun {
    pub solver: &'static str,
    /// Common GD step size actually used.
    pub step_size: Option<f64>,
    pub traces: Vec<Vec<StepRecord>>,
    pub samples_consumed: Vec<usize>,
    pub grid: Vec<GridPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridPoint {
    pub eta: f64,
    pub mean_final_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    /// Trials still iterating at this step; stopped trials contribute their final record.
    pub trials_active: usize,
    pub mean_beta: f64,
    pub mean_gamma: f64,
    pub mean_eps: f64,
    pub std_eps: f64,
    pub mean_test_nmse: Option<f64>,
    pub std_test_nmse: Option<f64>,
    pub mean_train_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverSummary {
    pub solver: String,
    pub step_size: Option<f64>,
    pub grid: Vec<GridPoint>,
    pub samples_consumed: Vec<usize>,
    pub per_step: Vec<StepStats>,
    #[serde(rename = "final")]
    pub final_stats: StepStats,
    pub flagged_trials: Vec<(usize, String)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub d: usize,
    pub k: usize,
    pub distribution: DistributionSpec,
    pub diag_free: bool,
    pub noise_level: f64,
    pub trials: usize,
    pub max_steps: usize,
    pub budget: Budget,
    /// Mean over trials of `noise^2 / mean(y_test^2)`.
    pub noise_floor_nmse: Option<f64>,
    pub theory_bounds: Option<TheoryBounds>,
    pub theory_bounds_error: Option<String>,
    pub solvers: Vec<SolverSummary>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub runs: Vec<SolverRun>,
    pub summary: Summary,
}

impl ExperimentOutcome {
    pub fn run(&self, solver: &str) -> Option<&SolverRun> {
        self.runs.iter().find(|r| r.solver == solver)
    }

    pub fn solver_summary(&self, solver: &str) -> Option<&SolverSummary> {
        self.summary.solvers.iter().find(|s| s.solver == solver)
    }
}

struct Trial {
    gt: GroundTruth,
    test: Option<TestSet>,
    stream_seed: u64,
}

fn make_trial(cfg: &ExperimentConfig, trial: usize) -> Result<Trial> {
    let base = 3 * trial as u64;
    let gt = make_ground_truth(cfg.d, cfg.k, cfg.diag_free, derive_seed(cfg.seed, base))?.with_noise(cfg.noise_level);
    let test = if cfg.test_samples > 0 {
        let b = draw_labelled(&cfg.distribution, &gt, cfg.test_samples, derive_seed(cfg.seed, base + 2))?;
        Some(TestSet::new(b.x, b.y))
    } else {
        None
    };
    Ok(Trial {
        gt,
        test,
        stream_seed: derive_seed(cfg.seed, base + 1),
    })
}

fn stream(cfg: &ExperimentConfig, trial: &Trial, budget: &Budget) -> SyntheticStream {
    SyntheticStream::new(cfg.distribution, trial.gt.clone(), budget.batch_size, trial.stream_seed)
        .with_limit(cfg.max_steps + 2)
}

fn strip_wall(mut result: RunResult, keep: bool) -> RunResult {
    if !keep {
        for r in &mut result.trace {
            r.wall_ms = 0.0;
        }
    }
    result
}

fn final_eps(traces: &[Vec<StepRecord>]) -> f64 {
    let v: Vec<f64> = traces
        .iter()
        .map(|t| t.last().and_then(|r| r.recovery).map_or(f64::INFINITY, |e| e.eps))
        .map(|e| if e.is_finite() { e } else { f64::INFINITY })
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    (mean, var.sqrt())
}

fn step_stats(traces: &[Vec<StepRecord>], step: usize) -> StepStats {
    let recs: Vec<&StepRecord> = traces
        .iter()
        .filter_map(|t| t.iter().rev().find(|r| r.step <= step).or(t.first()))
        .collect();
    let trials_active = traces.iter().filter(|t| t.iter().any(|r| r.step == step)).count();
    let rec = |f: fn(&StepRecord) -> f64| recs.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let eps = rec(|r| r.recovery.map_or(f64::NAN, |e| e.eps));
    let (mean_eps, std_eps) = mean_std(&eps);
    let nmse: Option<Vec<f64>> = recs.iter().map(|r| r.test_nmse).collect();
    let (mean_test_nmse, std_test_nmse) = match nmse {
        Some(v) if !v.is_empty() => {
            let (m, s) = mean_std(&v);
            (Some(m), Some(s))
        }
        _ => (None, None),
    };
    StepStats {
        step,
        trials_active,
        mean_beta: mean_std(&rec(|r| r.recovery.map_or(f64::NAN, |e| e.beta))).0,
        mean_gamma: mean_std(&rec(|r| r.recovery.map_or(f64::NAN, |e| e.gamma))).0,
        mean_eps,
        std_eps,
        mean_test_nmse,
        std_test_nmse,
        mean_train_residual: mean_std(&rec(|r| r.train_residual)).0,
    }
}

fn summarise(run: &SolverRun) -> SolverSummary {
    let last_step = run.traces.iter().filter_map(|t| t.last().map(|r| r.step)).max().unwrap_or(0);
    let per_step: Vec<StepStats> = (0..=last_step).map(|s| step_stats(&run.traces, s)).collect();
    let final_stats = step_stats(&run.traces, last_step);
    let flagged_trials = run
        .traces
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let mut flags = crate::trace::Flags::empty();
            for r in t {
                flags.insert(r.flags);
            }
            (!flags.is_empty()).then(|| (i, flags.to_string()))
        })
        .collect();
    SolverSummary {
        solver: run.solver.to_string(),
        step_size: run.step_size,
        grid: run.grid.clone(),
        samples_consumed: run.samples_consumed.clone(),
        per_step,
        final_stats,
        flagged_trials,
    }
}

fn run_mes_trials(cfg: &ExperimentConfig, trials: &[Trial], budget: &Budget) -> Result<SolverRun> {
    let results: Vec<RunResult> = trials
        .par_iter()
        .map(|t| {
            let mut s = stream(cfg, t, budget);
            let sc = cfg.solver_config(t.stream_seed, budget.batch_size);
            run_mes(&mut s, &sc, Evaluation::new(Some(&t.gt), t.test.as_ref())).map(|r| strip_wall(r, cfg.record_wall_time))
        })
        .collect::<Result<_>>()?;
    Ok(SolverRun {
        solver: "mes",
        step_size: None,
        samples_consumed: results.iter().map(|r| r.samples_consumed).collect(),
        traces: results.into_iter().map(|r| r.trace).collect(),
        grid: Vec::new(),
    })
}

fn run_gd_trials(cfg: &ExperimentConfig, trials: &[Trial], budget: &Budget, eta: Option<f64>) -> Result<SolverRun> {
    let results: Vec<RunResult> = trials
        .par_iter()
        .map(|t| {
            let mut s = stream(cfg, t, budget);
            let gc = cfg.gd_config(t.stream_seed, budget.batch_size, eta);
            run_gd(&mut s, &gc, Evaluation::new(Some(&t.gt), t.test.as_ref())).map(|r| strip_wall(r, cfg.record_wall_time))
        })
        .collect::<Result<_>>()?;
    Ok(SolverRun {
        solver: "gd",
        step_size: eta,
        samples_consumed: results.iter().map(|r| r.samples_consumed).collect(),
        traces: results.into_iter().map(|r| r.trace).collect(),
        grid: Vec::new(),
    })
}

/// Runs every trial of `cfg` and summarises them. Nothing is written to disk.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let budget = cfg.budget()?;
    let trials: Vec<Trial> = (0..cfg.trials).into_par_iter().map(|i| make_trial(cfg, i)).collect::<Result<_>>()?;

    let mut runs = Vec::new();
    if cfg.solver.runs_mes() {
        runs.push(run_mes_trials(cfg, &trials, &budget)?);
    }
    if cfg.solver.runs_gd() {
        if cfg.gd.step_grid.is_empty() {
            runs.push(run_gd_trials(cfg, &trials, &budget, None)?);
        } else {
            let mut best: Option<SolverRun> = None;
            let mut grid = Vec::new();
            for &eta in &cfg.gd.step_grid {
                let run = run_gd_trials(cfg, &trials, &budget, Some(eta))?;
                let score = final_eps(&run.traces);
                grid.push(GridPoint { eta, mean_final_eps: score });
                if best.as_ref().is_none_or(|b| score < final_eps(&b.traces)) {
                    best = Some(run);
                }
            }
            let mut best = best.expect("grid is nonempty");
            best.grid = grid;
            runs.push(best);
        }
    }

    let noise_floor_nmse = {
        let v: Vec<f64> = trials.iter().filter_map(|t| t.test.as_ref().map(|s| s.noise_floor(cfg.noise_level))).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (theory_bounds, theory_bounds_error) = match cfg
        .distribution
        .analytic_moments()
        .and_then(|m| theory_bounds(&trials[0].gt, &m, cfg.k, cfg.theory.delta, cfg.theory.constant, cfg.mes.mode))
    {
        Ok(b) => (Some(b), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let summary = Summary {
        d: cfg.d,
        k: cfg.k,
        distribution: cfg.distribution,
        diag_free: cfg.diag_free,
        noise_level: cfg.noise_level,
        trials: cfg.trials,
        max_steps: cfg.max_steps,
        budget,
        noise_floor_nmse,
        theory_bounds,
        theory_bounds_error,
        solvers: runs.iter().map(summarise).collect(),
    };
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        runs,
        summary,
    })
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Plain notation for moderate magnitudes, scientific otherwise.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-3..1e7).contains(&a) || !x.is_finite() {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// `trace.csv` contents for one solver.
pub fn trace_csv(traces: &[Vec<StepRecord>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_HEADER)?;
    for (trial, trace) in traces.iter().enumerate() {
        for r in trace {
            w.write_record([
                trial.to_string(),
                r.step.to_string(),
                opt(r.recovery.map(|e| e.beta)),
                opt(r.recovery.map(|e| e.gamma)),
                opt(r.recovery.map(|e| e.eps)),
                opt(r.test_nmse),
                fmt_f64(r.train_residual),
                fmt_f64(r.wall_ms),
                r.flags.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::io("<trace buffer>", e.into_error()))
}

/// Writes `<out>/<solver>/trace.csv` for each solver and `<out>/summary.json`.
pub fn write_artifacts(outcome: &ExperimentOutcome, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for run in &outcome.runs {
        let path = out.join(run.solver).join("trace.csv");
        write_atomic(&path, &trace_csv(&run.traces)?)?;
        written.push(path);
    }
    let path = out.join("summary.json");
    let mut json = serde_json::to_vec_pretty(&outcome.summary)?;
    json.push(b'\n');
    write_atomic(&path, &json)?;
    written.push(path);
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// `d = 1000`, `k = 10`.
    Paper,
    /// `d = 200`, `k = 5`.
    Desk,
}

impl Scale {
    pub fn dims(self) -> (usize, usize) {
        match self {
            Scale::Paper => (1000, 10),
            Scale::Desk => (200, 5),
        }
    }
}

/// Truncation levels of the skewness sweep.
pub const TRUNCATION_SWEEP: [f64; 4] = [0.0, 1e-3, 0.01, 0.1];

#[derive(Clone, Debug, Serialize)]
pub struct SeriesPoint {
    pub step: usize,
    pub mean_eps: f64,
    pub std_eps: f64,
    pub mean_test_nmse: Option<f64>,
    pub std_test_nmse: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<SeriesPoint>,
    pub final_eps: f64,
    pub final_test_nmse: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Panel {
    pub name: char,
    pub title: String,
    pub series: Vec<Series>,
    pub notes: Vec<String>,
}

impl Panel {
    pub fn series(&self, label: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.label == label)
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(PANEL_HEADER)?;
        for s in &self.series {
            for p in &s.points {
                w.write_record([
                    s.label.clone(),
                    p.step.to_string(),
                    fmt_f64(p.mean_eps),
                    fmt_f64(p.std_eps),
                    opt(p.mean_test_nmse),
                    opt(p.std_test_nmse),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::io("<panel buffer>", e.into_error()))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Figure1Report {
    pub scale: Scale,
    pub d: usize,
    pub k: usize,
    pub trials: usize,
    pub panels: Vec<Panel>,
}

impl Figure1Report {
    pub fn panel(&self, name: char) -> Option<&Panel> {
        self.panels.iter().find(|p| p.name == name)
    }

    /// `panel_<x>.csv` per panel plus `figure1.json`.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for p in &self.panels {
            let path = out.join(format!("panel_{}.csv", p.name));
            write_atomic(&path, &p.csv()?)?;
            written.push(path);
        }
        let path = out.join("figure1.json");
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&path, &json)?;
        written.push(path);
        Ok(written)
    }
}

fn series_from(label: String, s: &SolverSummary) -> Series {
    Series {
        label,
        points: s
            .per_step
            .iter()
            .map(|p| SeriesPoint {
                step: p.step,
                mean_eps: p.mean_eps,
                std_eps: p.std_eps,
                mean_test_nmse: p.mean_test_nmse,
                std_test_nmse: p.std_test_nmse,
            })
            .collect(),
        final_eps: s.final_stats.mean_eps,
        final_test_nmse: s.final_stats.mean_test_nmse,
    }
}

/// Batch size used for a distribution at `(d, k)` in the convergence study:
/// `4 k d`, raised to `16 k d` for the very sparse Bernoulli q = 0.01.
pub fn study_batch_size(spec: &DistributionSpec, d: usize, k: usize) -> usize {
    match spec.family {
        crate::distributions::Family::Bernoulli { q } if q < 0.05 => 16 * k * d,
        _ => 4 * k * d,
    }
}

/// Base config for one curve of the convergence study.
pub fn study_config(scale: Scale, spec: DistributionSpec, noise: f64, trials: usize, seed: u64) -> ExperimentConfig {
    let (d, k) = scale.dims();
    let n = study_batch_size(&spec, d, k);
    let non_mip = spec.analytic_moments().map(|m| m.tau < DEFAULT_TAU_TOL).unwrap_or(false);
    ExperimentConfig {
        d,
        k,
        solver: SolverChoice::Both,
        distribution: spec,
        diag_free: non_mip,
        noise_level: noise,
        batch_size: Some(n),
        total_samples: Some(52 * n),
        trials,
        seed,
        mes: MesSettings {
            mode: if non_mip { Mode::NonMip } else { Mode::Mip },
            ..MesSettings::default()
        },
        ..ExperimentConfig::default()
    }
}

/// The eight-panel convergence study: (a)/(b) truncated Gaussian a = 0 at
/// noise 0/1, (c)/(d) Bernoulli q = 0.01/0.1, (e)-(h) the truncation sweep for
/// MES and GD at noise 0 and 1.
pub fn reproduce_figure1(scale: Scale, trials: usize, seed: u64) -> Result<Figure1Report> {
    let (d, k) = scale.dims();
    let mut sweep: Vec<Vec<ExperimentOutcome>> = Vec::new();
    for (ni, noise) in [0.0, 1.0].into_iter().enumerate() {
        let mut row = Vec::new();
        for (ai, a) in TRUNCATION_SWEEP.into_iter().enumerate() {
            let cfg = study_config(
                scale,
                DistributionSpec::truncated_gaussian(a),
                noise,
                trials,
                derive_seed(seed, (10 * ni + ai) as u64),
            );
            row.push(run_experiment(&cfg)?);
        }
        sweep.push(row);
    }

    let mut panels = Vec::new();
    for (ni, name) in ['a', 'b'].into_iter().enumerate() {
        let o = &sweep[ni][0];
        let mut notes = Vec::new();
        if let Some(g) = o.solver_summary("gd") {
            notes.push(format!("GD step size {:?} chosen from grid {:?}", g.step_size, g.grid));
        }
        if let Some(f) = o.summary.noise_floor_nmse {
            notes.push(format!("noise floor NMSE {f:.4e}"));
        }
        panels.push(Panel {
            name,
            title: format!("truncated Gaussian a=0, noise {}", ni),
            series: vec![
                series_from("MES".into(), o.solver_summary("mes").expect("mes ran")),
                series_from("GD".into(), o.solver_summary("gd").expect("gd ran")),
            ],
            notes,
        });
    }

    for (i, (name, q)) in [('c', 0.01), ('d', 0.1)].into_iter().enumerate() {
        let spec = DistributionSpec::bernoulli(q);
        let cfg = study_config(scale, spec, 0.0, trials, derive_seed(seed, 100 + i as u64));
        let o = run_experiment(&cfg)?;
        let mut mip = cfg.clone();
        mip.mes.mode = Mode::Mip;
        mip.mes.moment_source = MomentSource::Analytic;
        mip.solver = SolverChoice::Mes;
        mip.trials = 1;
        let refusal = match run_experiment(&mip) {
            Err(e @ Error::MomentSystemSingular { .. }) => format!("MIP path refused: {e}"),
            Err(e) => format!("MIP path failed unexpectedly: {e}"),
            Ok(_) => "MIP path unexpectedly ran".to_string(),
        };
        panels.push(Panel {
            name,
            title: format!("Bernoulli q={q}, diagonal-free M*, non-MIP MES"),
            series: vec![
                series_from("MES".into(), o.solver_summary("mes").expect("mes ran")),
                series_from("GD".into(), o.solver_summary("gd").expect("gd ran")),
            ],
            notes: vec![refusal],
        });
    }

    for (ni, noise) in [0.0, 1.0].into_iter().enumerate() {
        for (solver, name) in [("mes", ['e', 'g'][ni]), ("gd", ['f', 'h'][ni])] {
            let series = TRUNCATION_SWEEP
                .iter()
                .zip(&sweep[ni])
                .map(|(a, o)| series_from(format!("a={a}"), o.solver_summary(solver).expect("solver ran")))
                .collect();
            panels.push(Panel {
                name,
                title: format!("{} over truncation levels, noise {noise}", solver.to_uppercase()),
                series,
                notes: Vec::new(),
            });
        }
    }
    panels.sort_by_key(|p| p.name);
    Ok(Figure1Report {
        scale,
        d,
        k,
        trials,
        panels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_document() {
        let c = ExperimentConfig::from_json_str("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let b = c.budget().unwrap();
        assert_eq!(b.total_samples, 30 * 5 * 100);
        assert_eq!(b.batch_size, 15_000 / 52);
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_json_str(r#"{"mes": {"mode": "sideways"}}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "mes.mode"), "{e}");
        let e = ExperimentConfig::from_json_str(r#"{"distribution": {"family": "bernoulli", "q": 1.5}}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "distribution.q"), "{e}");
        let e = ExperimentConfig::from_json_str(r#"{"k": 0}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "k"), "{e}");
        let e = ExperimentConfig::from_json_str(r#"{"batch_size": 1000, "total_samples": 2000}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "total_samples"), "{e}");
        let e = ExperimentConfig::from_json_str(r#"{"mes": {"tau_tol": -1}}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "mes.tau_tol"), "{e}");
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(preset("default").is_ok());
        assert!(matches!(preset("nope"), Err(Error::Config { .. })));
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert!(!dir.path().join("a/b.txt.tmp").exists());
    }
}
