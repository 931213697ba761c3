//! Optimization loops: asynchronous SGD replayed from an arrival trace,
//! the minibatch SGD baseline, and a real-thread executor.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{terminal_delay, DelayLedger, LedgerError};
use crate::problems::Problem;
use crate::rng::{worker_streams, Domain, SimRng};
use crate::scalar::{vecops, Scalar};
use crate::scheduler::{ArrivalTrace, SchedulerError};
use crate::schedules::{output_weights, OutputError, OutputRule, StepSchedule};

/// Iterates with a norm above this are treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("trace has {trace} workers but the schedule was built for {schedule}")]
    WorkerMismatch { trace: usize, schedule: usize },
    #[error("initial point has dimension {got}, problem has {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("iterates diverged at k = {k}")]
    Diverged { k: u64 },
    #[error("minibatch needs at least one round and one worker")]
    EmptyMinibatch,
    #[error("live execution needs a finite horizon")]
    NoHorizon,
    #[error("worker thread panicked")]
    WorkerPanic,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// Keep `x_0..x_K`.
    Full,
    /// Keep only running sums and metrics.
    #[default]
    MetricsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub history: HistoryMode,
    /// Memoize every gradient and evaluate the final in-flight ones, as the
    /// virtual-iterate reconstruction needs. Implies full history.
    pub diagnostics: bool,
    /// Record `F - F*` and `||grad F||^2` every this many iterations (and at
    /// `0` and `K`). `0` disables metrics.
    pub metric_stride: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            history: HistoryMode::MetricsOnly,
            diagnostics: false,
            metric_stride: 1,
        }
    }
}

impl RunOptions {
    pub fn diagnostics() -> Self {
        Self {
            history: HistoryMode::Full,
            diagnostics: true,
            metric_stride: 1,
        }
    }

    pub fn full() -> Self {
        Self {
            history: HistoryMode::Full,
            ..Self::default()
        }
    }

    fn keeps_iterates(&self) -> bool {
        self.diagnostics || self.history == HistoryMode::Full
    }

    fn records(&self, k: u64, horizon: u64) -> bool {
        self.metric_stride > 0 && (k.is_multiple_of(self.metric_stride) || k == horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord<S> {
    pub k: u64,
    pub worker: usize,
    pub tau: u64,
    pub gamma: S,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric<S> {
    pub k: u64,
    pub fgap: S,
    pub gradnorm2: S,
}

/// Every stochastic gradient of an async run, by the iteration that
/// consumed it, plus the ones still in flight at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMemo<S> {
    /// `consumed[k - 1]` is the gradient applied at iteration `k`.
    pub consumed: Vec<Vec<S>>,
    /// Per worker: `(dispatch iteration, gradient)` for workers other than
    /// `m_K` whose gradient was still being computed at `K`.
    pub inflight: Vec<Option<(u64, Vec<S>)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Async,
    Minibatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord<S> {
    pub kind: RunKind,
    pub num_workers: usize,
    pub horizon: u64,
    pub x0: Vec<S>,
    /// One entry per iteration `1..=K`. Minibatch rounds report worker 0 and
    /// delay 1.
    pub steps: Vec<StepRecord<S>>,
    /// `gamma_hat[k - 1]`: the stepsize eventually applied to the gradient
    /// evaluated at `x_k`, for `k = 1..=K`.
    pub gamma_hat: Vec<S>,
    /// Per worker, the stepsize eventually applied to its gradient at `x_0`.
    pub gamma_hat_initial: Vec<S>,
    pub metrics: Vec<Metric<S>>,
    pub iterates: Option<Vec<Vec<S>>>,
    pub gradients: Option<GradientMemo<S>>,
    pub final_x: Vec<S>,
    /// `sum_k gamma_hat_k x_k` over `k = 1..=K`.
    pub weighted_sum: Vec<S>,
    /// `sum_k x_k` over `k = 1..=K`.
    pub uniform_sum: Vec<S>,
    pub gradients_evaluated: u64,
}

impl<S: Scalar> RunRecord<S> {
    pub fn final_time(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.time)
    }

    pub fn final_metric(&self) -> Option<&Metric<S>> {
        self.metrics.last()
    }

    pub fn gamma_hat_sum(&self) -> S {
        self.gamma_hat.iter().copied().sum()
    }

    /// `E ||grad F(x_k)||^2` for the random index drawn by `rule`, computed
    /// exactly from the per-iteration metrics (or iterates).
    pub fn expected_gradnorm2(&self, problem: &Problem<S>, rule: OutputRule, mu: S) -> Result<f64, OutputError> {
        let weights = output_weights(rule, &self.gamma_hat, mu)?;
        let values: Vec<f64> = if let Some(it) = &self.iterates {
            it[1..].iter().map(|x| problem.grad_norm2(x).to_f64_lossy()).collect()
        } else if self.metrics.len() as u64 == self.horizon + 1 {
            self.metrics[1..].iter().map(|m| m.gradnorm2.to_f64_lossy()).collect()
        } else {
            return Err(OutputError::MissingHistory(rule));
        };
        Ok(weights.iter().zip(values).map(|(w, v)| w * v).sum())
    }

    /// CSV `k,worker,tau,gamma,gamma_hat,time,fgap,gradnorm2[,vres]`, one row
    /// per iteration. Metric fields are empty on iterations without metrics.
    pub fn write_csv<W: Write>(&self, mut out: W, vres: Option<&[f64]>) -> std::io::Result<()> {
        write!(out, "k,worker,tau,gamma,gamma_hat,time,fgap,gradnorm2")?;
        if vres.is_some() {
            write!(out, ",vres")?;
        }
        writeln!(out)?;
        let mut metrics = self.metrics.iter().peekable();
        for (i, s) in self.steps.iter().enumerate() {
            while metrics.peek().is_some_and(|m| m.k < s.k) {
                metrics.next();
            }
            write!(
                out,
                "{},{},{},{},{},{}",
                s.k, s.worker, s.tau, s.gamma, self.gamma_hat[i], s.time
            )?;
            match metrics.peek() {
                Some(m) if m.k == s.k => write!(out, ",{},{}", m.fgap, m.gradnorm2)?,
                _ => write!(out, ",,")?,
            }
            if let Some(v) = vres {
                match v.get(i) {
                    Some(r) => write!(out, ",{r}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn check_finite<S: Scalar>(x: &[S], k: u64) -> Result<(), RunError> {
    let n = vecops::norm(x);
    if !vecops::is_finite(x) || !n.is_finite() || n.to_f64_lossy() > DIVERGENCE_NORM {
        return Err(RunError::Diverged { k });
    }
    Ok(())
}

fn metric<S: Scalar>(problem: &Problem<S>, k: u64, x: &[S]) -> Metric<S> {
    Metric {
        k,
        fgap: problem.fgap(x),
        gradnorm2: problem.grad_norm2(x),
    }
}

/// Asynchronous SGD driven by `trace`.
///
/// Arrival `k` of worker `m` applies `x_k = x_{k-1} - gamma_k g` where `g` is
/// `m`'s stochastic gradient at its dispatch iterate and
/// `gamma_k = schedule.gamma(k, tau(k))`; `m` is then re-dispatched at `x_k`.
/// Gradients are evaluated lazily at arrival from the stored dispatch iterate
/// and worker `m`'s own noise stream, so the result is a pure function of the
/// inputs. Heterogeneous problems use the worker's local objective.
pub fn run_async<S: Scalar>(
    problem: &Problem<S>,
    trace: &ArrivalTrace,
    schedule: &StepSchedule<S>,
    x0: &[S],
    seed: u64,
    options: RunOptions,
) -> Result<RunRecord<S>, RunError> {
    let m = trace.num_workers;
    if m != schedule.constants().workers {
        return Err(RunError::WorkerMismatch {
            trace: m,
            schedule: schedule.constants().workers,
        });
    }
    if x0.len() != problem.dim() {
        return Err(RunError::DimensionMismatch {
            got: x0.len(),
            expected: problem.dim(),
        });
    }
    let horizon = trace.horizon();
    let d = x0.len();
    let mut rngs = worker_streams(seed, Domain::Noise, m);
    let mut ledger = DelayLedger::new(m)?;
    let mut dispatch_x: Vec<Vec<S>> = vec![x0.to_vec(); m];
    let mut x = x0.to_vec();

    let mut steps = Vec::with_capacity(horizon as usize);
    let mut gamma_hat = vec![S::nan(); horizon as usize];
    let mut gamma_hat_initial = vec![S::nan(); m];
    let mut weighted_sum = vec![S::zero(); d];
    let mut uniform_sum = vec![S::zero(); d];
    let mut metrics = Vec::new();
    let mut iterates = options.keeps_iterates().then(|| vec![x.clone()]);
    let mut memo = options.diagnostics.then(|| GradientMemo {
        consumed: Vec::with_capacity(horizon as usize),
        inflight: vec![None; m],
    });
    if options.records(0, horizon) {
        metrics.push(metric(problem, 0, &x));
    }

    for entry in &trace.entries {
        let w = entry.worker;
        let (k, tau) = ledger.record_arrival(w)?;
        let prev = k - tau;
        let g = problem.stoch_grad(&dispatch_x[w], w, &mut rngs[w]);
        let gamma = schedule.gamma(k, tau);
        vecops::axpy(-gamma, &g, &mut x);
        check_finite(&x, k)?;

        if prev == 0 {
            gamma_hat_initial[w] = gamma;
        } else {
            gamma_hat[prev as usize - 1] = gamma;
            vecops::axpy(gamma, &dispatch_x[w], &mut weighted_sum);
        }
        vecops::axpy(S::one(), &x, &mut uniform_sum);
        dispatch_x[w].copy_from_slice(&x);

        steps.push(StepRecord {
            k,
            worker: w,
            tau,
            gamma,
            time: entry.time,
        });
        if let Some(memo) = memo.as_mut() {
            memo.consumed.push(g);
        }
        if let Some(it) = iterates.as_mut() {
            it.push(x.clone());
        }
        if options.records(k, horizon) {
            metrics.push(metric(problem, k, &x));
        }
    }

    // gradients never consumed within the horizon get the boundary delay
    let last_worker = trace.entries.last().map(|e| e.worker);
    let mut extra = 0;
    for w in 0..m {
        let dispatched = ledger.dispatch_iter(w).expect("worker index in range");
        let gamma = schedule.gamma(horizon + 1, terminal_delay(dispatched, horizon));
        if dispatched == 0 {
            gamma_hat_initial[w] = gamma;
        } else {
            gamma_hat[dispatched as usize - 1] = gamma;
            vecops::axpy(gamma, &dispatch_x[w], &mut weighted_sum);
        }
        if let Some(memo) = memo.as_mut() {
            if Some(w) != last_worker || horizon == 0 {
                let g = problem.stoch_grad(&dispatch_x[w], w, &mut rngs[w]);
                memo.inflight[w] = Some((dispatched, g));
                extra += 1;
            }
        }
    }

    Ok(RunRecord {
        kind: RunKind::Async,
        num_workers: m,
        horizon,
        x0: x0.to_vec(),
        steps,
        gamma_hat,
        gamma_hat_initial,
        metrics,
        iterates,
        gradients: memo,
        final_x: x,
        weighted_sum,
        uniform_sum,
        gradients_evaluated: horizon + extra,
    })
}

/// Minibatch SGD: `x_r = x_{r-1} - gamma (1/M) sum_m g_m(x_{r-1})` for `R`
/// rounds. Round `r` takes `round_times[r - 1]` seconds (1 when absent).
#[allow(clippy::too_many_arguments)]
pub fn run_minibatch<S: Scalar>(
    problem: &Problem<S>,
    workers: usize,
    rounds: u64,
    gamma: S,
    x0: &[S],
    seed: u64,
    round_times: &[f64],
    options: RunOptions,
) -> Result<RunRecord<S>, RunError> {
    if workers == 0 {
        return Err(RunError::EmptyMinibatch);
    }
    if x0.len() != problem.dim() {
        return Err(RunError::DimensionMismatch {
            got: x0.len(),
            expected: problem.dim(),
        });
    }
    let d = x0.len();
    let mut rngs: Vec<SimRng> = worker_streams(seed, Domain::Noise, workers);
    let mut x = x0.to_vec();
    let inv_m = S::one() / S::lit(workers as f64);
    let mut steps = Vec::with_capacity(rounds as usize);
    let mut weighted_sum = vec![S::zero(); d];
    let mut uniform_sum = vec![S::zero(); d];
    let mut metrics = Vec::new();
    let mut iterates = options.keeps_iterates().then(|| vec![x.clone()]);
    if options.records(0, rounds) {
        metrics.push(metric(problem, 0, &x));
    }
    let mut clock = 0.0;
    for r in 1..=rounds {
        let mut avg = vec![S::zero(); d];
        for (w, rng) in rngs.iter_mut().enumerate() {
            let g = problem.stoch_grad(&x, w, rng);
            vecops::axpy(S::one(), &g, &mut avg);
        }
        avg.iter_mut().for_each(|v| *v = *v * inv_m);
        vecops::axpy(-gamma, &avg, &mut x);
        check_finite(&x, r)?;
        clock += round_times.get(r as usize - 1).copied().unwrap_or(1.0);
        steps.push(StepRecord {
            k: r,
            worker: 0,
            tau: 1,
            gamma,
            time: clock,
        });
        vecops::axpy(gamma, &x, &mut weighted_sum);
        vecops::axpy(S::one(), &x, &mut uniform_sum);
        if let Some(it) = iterates.as_mut() {
            it.push(x.clone());
        }
        if options.records(r, rounds) {
            metrics.push(metric(problem, r, &x));
        }
    }
    Ok(RunRecord {
        kind: RunKind::Minibatch,
        num_workers: workers,
        horizon: rounds,
        x0: x0.to_vec(),
        steps,
        gamma_hat: vec![gamma; rounds as usize],
        gamma_hat_initial: vec![gamma; workers],
        metrics,
        iterates,
        gradients: None,
        final_x: x,
        weighted_sum,
        uniform_sum,
        gradients_evaluated: workers as u64 * rounds,
    })
}

/// Result of a real-thread run: the arrival order the OS produced and the
/// record, which replaying that trace reproduces exactly.
#[derive(Debug, Clone)]
pub struct LiveRun<S> {
    pub trace: ArrivalTrace,
    pub record: RunRecord<S>,
    /// Final iterate computed by the threads themselves.
    pub live_final_x: Vec<S>,
}

struct Shared<S> {
    ledger: DelayLedger,
    x: Vec<S>,
    arrivals: Vec<(usize, f64)>,
    done: bool,
}

/// Asynchronous SGD on `M` OS threads sharing one parameter vector.
///
/// Each worker computes its gradient outside the lock; arrival bookkeeping
/// and the update happen atomically under a single mutex. Stops after the
/// schedule's horizon `K` arrivals or when `max_duration` elapses.
pub fn run_live<S: Scalar>(
    problem: &Problem<S>,
    schedule: &StepSchedule<S>,
    x0: &[S],
    seed: u64,
    max_duration: Option<Duration>,
    options: RunOptions,
) -> Result<LiveRun<S>, RunError> {
    let m = schedule.constants().workers;
    let horizon = schedule.constants().horizon;
    if horizon == 0 {
        return Err(RunError::NoHorizon);
    }
    if x0.len() != problem.dim() {
        return Err(RunError::DimensionMismatch {
            got: x0.len(),
            expected: problem.dim(),
        });
    }
    let shared = Mutex::new(Shared {
        ledger: DelayLedger::new(m)?,
        x: x0.to_vec(),
        arrivals: Vec::with_capacity(horizon as usize),
        done: false,
    });
    let start = Instant::now();
    let rngs = worker_streams(seed, Domain::Noise, m);
    let results: Vec<Result<(), RunError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = rngs
            .into_iter()
            .enumerate()
            .map(|(w, mut rng)| {
                let shared = &shared;
                scope.spawn(move || -> Result<(), RunError> {
                    let mut local = x0.to_vec();
                    loop {
                        let g = problem.stoch_grad(&local, w, &mut rng);
                        let mut st = shared.lock().map_err(|_| RunError::WorkerPanic)?;
                        let expired = max_duration.is_some_and(|lim| start.elapsed() >= lim);
                        if st.done || st.ledger.arrivals() >= horizon || expired {
                            st.done = true;
                            return Ok(());
                        }
                        let (k, tau) = st.ledger.record_arrival(w)?;
                        let gamma = schedule.gamma(k, tau);
                        vecops::axpy(-gamma, &g, &mut st.x);
                        if check_finite(&st.x, k).is_err() {
                            st.done = true;
                            return Err(RunError::Diverged { k });
                        }
                        st.arrivals.push((w, start.elapsed().as_secs_f64()));
                        local.copy_from_slice(&st.x);
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or(Err(RunError::WorkerPanic)))
            .collect()
    });
    for r in results {
        r?;
    }
    let st = shared.into_inner().map_err(|_| RunError::WorkerPanic)?;
    let trace = ArrivalTrace::from_events(m, st.arrivals, None)?;
    let record = run_async(problem, &trace, schedule, x0, seed, options)?;
    Ok(LiveRun {
        trace,
        record,
        live_final_x: st.x,
    })
}
