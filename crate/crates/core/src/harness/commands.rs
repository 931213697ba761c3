//! The `simulate`, `compare`, `sweep`, `check` and `live` commands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use super::config::{ConfigError, RunConfig, ScheduleSpec};
use super::suite::{run_suite, SuiteOptions, SuiteReport};
use crate::optimizer::{run_async, run_live, run_minibatch, HistoryMode, RunError, RunOptions, RunRecord};
use crate::problems::Problem;
use crate::rng::{substream, Domain};
use crate::scheduler::{simulate_trace, simulate_until, speedup_factor, steps_in_time, ArrivalTrace, SchedulerError};
use crate::schedules::{select_output, OutputError, OutputRule, StepSchedule};
use crate::virtual_iterates::{track, TrackError};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum CmdError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("run failed: {0}")]
    Run(#[from] RunError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("diagnostics: {0}")]
    Track(#[from] TrackError),
    #[error("output selection: {0}")]
    Output(#[from] OutputError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CmdError {
    /// `2` for configuration and usage problems, `1` for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CmdError::Config(_) | CmdError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CmdError + '_ {
    move |source| CmdError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CmdError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CmdError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        writeln!(w)
    })
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Summary of one run, as reported in the JSON documents.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schedule: String,
    pub repetition: u32,
    pub seed: u64,
    pub workers: usize,
    pub horizon: u64,
    pub final_time: f64,
    pub gradients_evaluated: u64,
    pub initial_fgap: f64,
    pub final_fgap: f64,
    pub final_gradnorm2: f64,
    pub output_rule: OutputRule,
    pub output_fgap: f64,
    pub output_gradnorm2: f64,
    /// Expectation of `||grad F||^2` over the random output index, when the
    /// rule samples.
    pub expected_output_gradnorm2: Option<f64>,
    pub gamma_hat_sum: f64,
    pub identity_residual: Option<f64>,
    pub csv: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct SimulateSummary {
    pub schema: u32,
    pub command: &'static str,
    pub runs: Vec<RunSummary>,
}

fn trace_for(cfg: &RunConfig) -> Result<ArrivalTrace, CmdError> {
    match (cfg.horizon, cfg.duration) {
        (Some(k), _) => Ok(simulate_trace(&cfg.speed, k)?),
        (None, Some(s)) => Ok(simulate_until(&cfg.speed, s)?),
        (None, None) => Err(CmdError::Usage("config needs `horizon` or `duration`".into())),
    }
}

fn run_options(cfg: &RunConfig, rule: OutputRule) -> RunOptions {
    let needs_history = matches!(rule, OutputRule::PHatWeighted | OutputRule::SampleProportional);
    RunOptions {
        history: if needs_history || cfg.diagnostics {
            HistoryMode::Full
        } else {
            HistoryMode::MetricsOnly
        },
        diagnostics: cfg.diagnostics,
        metric_stride: cfg.metric_stride,
    }
}

struct Executed {
    summary: RunSummary,
    record: RunRecord<f64>,
    vres: Option<Vec<f64>>,
}

fn execute(
    problem: &Problem<f64>,
    trace: &ArrivalTrace,
    spec: &ScheduleSpec,
    cfg: &RunConfig,
    repetition: u32,
) -> Result<Executed, CmdError> {
    let seed = cfg.seed.wrapping_add(repetition as u64);
    let schedule = spec.build(problem, trace.num_workers, trace.horizon())?;
    let rule = schedule.kind().output_rule();
    let opts = run_options(cfg, rule);
    let record = run_async(problem, trace, &schedule, problem.x0(), seed, opts)?;
    let vres = if cfg.diagnostics {
        Some(track(&record, trace)?.rel_residual)
    } else {
        None
    };
    let summary = summarize(
        problem,
        &schedule,
        &record,
        spec.label(),
        repetition,
        seed,
        vres.as_deref(),
    )?;
    Ok(Executed { summary, record, vres })
}

fn summarize(
    problem: &Problem<f64>,
    schedule: &StepSchedule<f64>,
    record: &RunRecord<f64>,
    label: String,
    repetition: u32,
    seed: u64,
    vres: Option<&[f64]>,
) -> Result<RunSummary, CmdError> {
    let rule = schedule.kind().output_rule();
    let mu = schedule.constants().mu;
    let mut out_rng = substream(seed, Domain::Output, 0);
    let (output_fgap, output_gradnorm2, expected) = if record.horizon == 0 {
        (problem.fgap(&record.x0), problem.grad_norm2(&record.x0), None)
    } else {
        let x = select_output(rule, record, mu, &mut out_rng)?;
        let expected = match rule {
            OutputRule::SampleProportional => Some(record.expected_gradnorm2(problem, rule, mu)?),
            _ => None,
        };
        (problem.fgap(&x), problem.grad_norm2(&x), expected)
    };
    Ok(RunSummary {
        schedule: label,
        repetition,
        seed,
        workers: record.num_workers,
        horizon: record.horizon,
        final_time: record.final_time(),
        gradients_evaluated: record.gradients_evaluated,
        initial_fgap: problem.fgap(&record.x0),
        final_fgap: problem.fgap(&record.final_x),
        final_gradnorm2: problem.grad_norm2(&record.final_x),
        output_rule: rule,
        output_fgap,
        output_gradnorm2,
        expected_output_gradnorm2: expected,
        gamma_hat_sum: record.gamma_hat_sum(),
        identity_residual: vres.map(|v| v.iter().copied().fold(0.0, f64::max)),
        csv: None,
    })
}

/// One run per schedule and repetition; a CSV per run plus a JSON summary.
pub fn simulate(cfg: &RunConfig) -> Result<SimulateSummary, CmdError> {
    let problem = cfg.problem.build(cfg.workers())?;
    let trace = trace_for(cfg)?;
    let mut runs = Vec::new();
    for spec in &cfg.schedules {
        for rep in 0..cfg.repetitions {
            let mut ex = execute(&problem, &trace, spec, cfg, rep)?;
            let mut name = format!("{}_{}", cfg.output.prefix, sanitize(&spec.label()));
            if cfg.repetitions > 1 {
                name.push_str(&format!("_rep{rep}"));
            }
            let path = cfg.output.dir.join(format!("{name}.csv"));
            write_file(&path, |w| ex.record.write_csv(w, ex.vres.as_deref()))?;
            ex.summary.csv = Some(path.display().to_string());
            runs.push(ex.summary);
        }
    }
    let summary = SimulateSummary {
        schema: SCHEMA,
        command: "simulate",
        runs,
    };
    write_json(
        &cfg.output.dir.join(format!("{}_summary.json", cfg.output.prefix)),
        &summary,
    )?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct CompareSummary {
    pub schema: u32,
    pub command: &'static str,
    pub duration: f64,
    pub workers: usize,
    /// Steps from the closed-form count `sum_m floor(S/s_m)`.
    pub predicted_async_steps: u64,
    /// Rounds from `min_m floor(S/s_m)`.
    pub predicted_minibatch_rounds: u64,
    /// Arrivals the event simulation produced within `S`.
    pub simulated_async_steps: u64,
    pub predicted_speedup: f64,
    /// The speedup as an exact fraction, when the compute times are rational.
    pub predicted_speedup_exact: Option<String>,
    /// `K_async / (M R)`.
    pub measured_speedup: Option<f64>,
    pub degenerate: bool,
    pub async_run: Option<RunSummary>,
    pub minibatch_run: Option<RunSummary>,
    /// Minibatch final `F - F*` over async final `F - F*`.
    pub error_ratio: Option<f64>,
}

fn exact_speedup(seconds: &[f64]) -> Option<String> {
    let rats = seconds
        .iter()
        .map(|&s| {
            let r = Ratio::<i64>::approximate_float(s)?;
            (*r.numer() as f64 / *r.denom() as f64 == s).then(|| Ratio::new(*r.numer() as i128, *r.denom() as i128))
        })
        .collect::<Option<Vec<Ratio<i128>>>>()?;
    // checked, since the common denominator can outgrow any fixed width
    let s_max = *rats.iter().max()?;
    let mut total = Ratio::from_integer(0i128);
    for r in &rats {
        total = total.checked_add(&s_max.checked_div(r)?)?;
    }
    let f = total.checked_div(&Ratio::from_integer(rats.len() as i128))?;
    Some(if *f.denom() == 1 {
        f.numer().to_string()
    } else {
        f.to_string()
    })
}

/// Asynchronous against minibatch SGD at equal wall-clock time `S`.
pub fn compare(cfg: &RunConfig) -> Result<CompareSummary, CmdError> {
    let seconds = cfg
        .speed
        .fixed_seconds()
        .ok_or_else(|| CmdError::Usage("compare needs a fixed or straggler speed model".into()))?;
    let budget = cfg
        .duration
        .ok_or_else(|| CmdError::Usage("compare needs `duration`".into()))?;
    let workers = seconds.len();
    let (k_async, k_mini) = steps_in_time(&seconds, budget)?;
    let speedup = speedup_factor(&seconds)?;
    let trace = simulate_until(&cfg.speed, budget)?;
    let degenerate = k_mini == 0 || trace.horizon() == 0;
    let mut summary = CompareSummary {
        schema: SCHEMA,
        command: "compare",
        duration: budget,
        workers,
        predicted_async_steps: k_async,
        predicted_minibatch_rounds: k_mini,
        simulated_async_steps: trace.horizon(),
        predicted_speedup: speedup,
        predicted_speedup_exact: exact_speedup(&seconds),
        measured_speedup: (k_mini > 0).then(|| trace.horizon() as f64 / (workers as u64 * k_mini) as f64),
        degenerate,
        async_run: None,
        minibatch_run: None,
        error_ratio: None,
    };
    if degenerate {
        write_json(
            &cfg.output.dir.join(format!("{}_compare.json", cfg.output.prefix)),
            &summary,
        )?;
        return Ok(summary);
    }

    let problem = cfg.problem.build(workers)?;
    let spec = &cfg.schedules[0];
    let mut ex = execute(&problem, &trace, spec, cfg, 0)?;
    let path = cfg.output.dir.join(format!("{}_async.csv", cfg.output.prefix));
    write_file(&path, |w| ex.record.write_csv(w, ex.vres.as_deref()))?;
    ex.summary.csv = Some(path.display().to_string());

    let gamma = cfg.minibatch.and_then(|m| m.gamma).unwrap_or(1.0 / problem.l());
    let round_times = cfg.speed.round_times(k_mini as usize)?;
    let opts = RunOptions {
        metric_stride: cfg.metric_stride,
        ..RunOptions::default()
    };
    let mb = run_minibatch(
        &problem,
        workers,
        k_mini,
        gamma,
        problem.x0(),
        cfg.seed,
        &round_times,
        opts,
    )?;
    let mb_schedule = StepSchedule::constant(gamma, problem.constants(workers, k_mini)).map_err(ConfigError::from)?;
    let mut mb_summary = summarize(&problem, &mb_schedule, &mb, "minibatch".into(), 0, cfg.seed, None)?;
    let path = cfg.output.dir.join(format!("{}_minibatch.csv", cfg.output.prefix));
    write_file(&path, |w| mb.write_csv(w, None))?;
    mb_summary.csv = Some(path.display().to_string());

    summary.error_ratio = Some(mb_summary.final_fgap / ex.summary.final_fgap);
    summary.async_run = Some(ex.summary);
    summary.minibatch_run = Some(mb_summary);
    write_json(
        &cfg.output.dir.join(format!("{}_compare.json", cfg.output.prefix)),
        &summary,
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub schedule: String,
    pub metric: &'static str,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Serialize)]
pub struct SweepSummary {
    pub schema: u32,
    pub command: &'static str,
    pub aggregates: Vec<Aggregate>,
    pub runs: Vec<RunSummary>,
}

pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

type MetricOf = fn(&RunSummary) -> f64;

/// All repetitions of every schedule, in parallel; mean and standard error
/// over seeds.
pub fn sweep(cfg: &RunConfig) -> Result<SweepSummary, CmdError> {
    let problem = cfg.problem.build(cfg.workers())?;
    let trace = trace_for(cfg)?;
    let jobs: Vec<(usize, u32)> = (0..cfg.schedules.len())
        .flat_map(|s| (0..cfg.repetitions).map(move |r| (s, r)))
        .collect();
    let runs: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(s, r)| execute(&problem, &trace, &cfg.schedules[s], cfg, r).map(|e| e.summary))
        .collect::<Result<_, _>>()?;
    let mut aggregates = Vec::new();
    for spec in &cfg.schedules {
        let label = spec.label();
        let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.schedule == label).collect();
        let metrics: [(&'static str, MetricOf); 4] = [
            ("final_fgap", |r| r.final_fgap),
            ("final_gradnorm2", |r| r.final_gradnorm2),
            ("output_fgap", |r| r.output_fgap),
            ("output_gradnorm2", |r| r.output_gradnorm2),
        ];
        for (metric, get) in metrics {
            let values: Vec<f64> = mine.iter().map(|r| get(r)).collect();
            let (mean, stderr) = mean_stderr(&values);
            aggregates.push(Aggregate {
                schedule: label.clone(),
                metric,
                mean,
                stderr,
                n: values.len(),
            });
        }
    }
    let path = cfg.output.dir.join(format!("{}_sweep.csv", cfg.output.prefix));
    write_file(&path, |w| {
        writeln!(w, "schedule,metric,mean,stderr,n")?;
        for a in &aggregates {
            writeln!(w, "{},{},{},{},{}", a.schedule, a.metric, a.mean, a.stderr, a.n)?;
        }
        Ok(())
    })?;
    let summary = SweepSummary {
        schema: SCHEMA,
        command: "sweep",
        aggregates,
        runs,
    };
    write_json(
        &cfg.output.dir.join(format!("{}_summary.json", cfg.output.prefix)),
        &summary,
    )?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct CheckSummary {
    pub schema: u32,
    pub command: &'static str,
    pub seed: u64,
    pub passed: bool,
    pub report: SuiteReport,
}

pub fn check(options: SuiteOptions, json: Option<&Path>) -> Result<CheckSummary, CmdError> {
    let report = run_suite(options);
    let summary = CheckSummary {
        schema: SCHEMA,
        command: "check",
        seed: options.seed,
        passed: report.passed(),
        report,
    };
    if let Some(path) = json {
        write_json(path, &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct LiveSummary {
    pub schema: u32,
    pub command: &'static str,
    pub threads: usize,
    pub run: RunSummary,
    pub wall_seconds: f64,
    /// Whether replaying the recorded trace reproduced the threads' final
    /// iterate bit for bit.
    pub replay_matches: bool,
}

/// Real threads, one per worker of the speed model. `duration` caps the
/// wall-clock seconds.
pub fn live(cfg: &RunConfig) -> Result<LiveSummary, CmdError> {
    let workers = cfg.workers();
    let horizon = cfg
        .horizon
        .ok_or_else(|| CmdError::Usage("live needs `horizon`".into()))?;
    let problem = cfg.problem.build(workers)?;
    let spec = &cfg.schedules[0];
    let schedule = spec.build(&problem, workers, horizon)?;
    let rule = schedule.kind().output_rule();
    let limit = cfg.duration.map(Duration::from_secs_f64);
    let out = run_live(
        &problem,
        &schedule,
        problem.x0(),
        cfg.seed,
        limit,
        run_options(cfg, rule),
    )?;
    let mut run = summarize(&problem, &schedule, &out.record, spec.label(), 0, cfg.seed, None)?;
    let path = cfg.output.dir.join(format!("{}_live.csv", cfg.output.prefix));
    write_file(&path, |w| out.record.write_csv(w, None))?;
    let trace_path = cfg.output.dir.join(format!("{}_live_trace.csv", cfg.output.prefix));
    write_file(&trace_path, |w| out.trace.write_csv(w))?;
    run.csv = Some(path.display().to_string());
    let summary = LiveSummary {
        schema: SCHEMA,
        command: "live",
        threads: workers,
        wall_seconds: out.trace.final_time(),
        replay_matches: out.record.final_x == out.live_final_x,
        run,
    };
    write_json(
        &cfg.output.dir.join(format!("{}_live.json", cfg.output.prefix)),
        &summary,
    )?;
    Ok(summary)
}

/// Print a suite report, one line per invariant.
pub fn print_report(report: &SuiteReport, out: &mut impl Write) -> std::io::Result<()> {
    for c in &report.checks {
        writeln!(out, "{c}")?;
    }
    writeln!(
        out,
        "{} ({} cases)",
        if report.passed() {
            "all invariants hold"
        } else {
            "INVARIANT FAILURE"
        },
        report.cases
    )
}
