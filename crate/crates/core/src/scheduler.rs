//! Discrete-event simulation of `M` workers computing gradients.
//!
//! Each worker finishes after a sampled compute time; the finish becomes the
//! next iteration and the worker is immediately re-dispatched. Events are
//! ordered by `(finish_time, worker_index)` using exact binary64 comparison,
//! so simultaneous finishes resolve toward the lowest worker index.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{DelayLedger, LedgerError};
use crate::rng::{worker_streams, Domain, SimRng};
use crate::scalar::WallClock;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("speed model has no workers")]
    NoWorkers,
    #[error("compute time for worker {worker} must be positive and finite, got {value}")]
    BadComputeTime { worker: usize, value: f64 },
    #[error("invalid speed model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("malformed trace csv at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-gradient compute-time distribution of one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComputeDist {
    Exponential {
        mean: f64,
    },
    /// Log-normal with the given mean; `sigma` is the standard deviation of
    /// the underlying normal.
    LogNormal {
        mean: f64,
        sigma: f64,
    },
}

impl ComputeDist {
    fn validate(&self, worker: usize) -> Result<(), SchedulerError> {
        let (mean, sigma) = match *self {
            ComputeDist::Exponential { mean } => (mean, 0.0),
            ComputeDist::LogNormal { mean, sigma } => (mean, sigma),
        };
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(SchedulerError::BadComputeTime { worker, value: mean });
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(SchedulerError::Invalid(format!(
                "log-normal sigma for worker {worker} must be finite and non-negative"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut SimRng) -> f64 {
        let t = match *self {
            ComputeDist::Exponential { mean } => Exp::new(1.0 / mean).expect("validated rate").sample(rng),
            ComputeDist::LogNormal { mean, sigma } => {
                let mu = mean.ln() - 0.5 * sigma * sigma;
                LogNormal::new(mu, sigma).expect("validated").sample(rng)
            }
        };
        t.max(f64::MIN_POSITIVE)
    }
}

/// How long each worker takes per gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeedModel {
    /// Worker `m` always needs `seconds[m]`.
    Fixed { seconds: Vec<f64> },
    /// Independent draws per gradient, from per-worker distributions.
    Random { dists: Vec<ComputeDist>, seed: u64 },
    /// `workers` identical workers at `base` seconds, except worker
    /// `straggler`, which is `slowdown` times slower.
    Straggler {
        workers: usize,
        base: f64,
        straggler: usize,
        slowdown: f64,
    },
    /// Explicit arrival order (cycled when shorter than the horizon), for
    /// constructing worst-case delay patterns. Arrival `k` happens at time `k`.
    Sequence { workers: usize, order: Vec<usize> },
}

impl SpeedModel {
    pub fn num_workers(&self) -> usize {
        match self {
            SpeedModel::Fixed { seconds } => seconds.len(),
            SpeedModel::Random { dists, .. } => dists.len(),
            SpeedModel::Straggler { workers, .. } | SpeedModel::Sequence { workers, .. } => *workers,
        }
    }

    /// Deterministic per-gradient times, when the model has them.
    pub fn fixed_seconds(&self) -> Option<Vec<f64>> {
        match self {
            SpeedModel::Fixed { seconds } => Some(seconds.clone()),
            SpeedModel::Straggler {
                workers,
                base,
                straggler,
                slowdown,
            } => Some(
                (0..*workers)
                    .map(|m| if m == *straggler { base * slowdown } else { *base })
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.num_workers() == 0 {
            return Err(SchedulerError::NoWorkers);
        }
        match self {
            SpeedModel::Random { dists, .. } => {
                for (m, d) in dists.iter().enumerate() {
                    d.validate(m)?;
                }
            }
            SpeedModel::Straggler { workers, straggler, .. } if straggler >= workers => {
                return Err(SchedulerError::Invalid(format!(
                    "straggler index {straggler} out of range for {workers} workers"
                )));
            }
            SpeedModel::Sequence { workers, order } => {
                if order.is_empty() {
                    return Err(SchedulerError::Invalid("empty arrival order".into()));
                }
                if let Some(&w) = order.iter().find(|&&w| w >= *workers) {
                    return Err(LedgerError::UnknownWorker {
                        worker: w,
                        num_workers: *workers,
                    }
                    .into());
                }
            }
            _ => {}
        }
        if let Some(secs) = self.fixed_seconds() {
            for (m, &s) in secs.iter().enumerate() {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(SchedulerError::BadComputeTime { worker: m, value: s });
                }
            }
        }
        Ok(())
    }

    /// Wall-clock duration of `rounds` synchronous rounds (every worker
    /// computes one gradient, the round waits for the slowest). Uses the same
    /// compute-time streams as [`simulate_trace`].
    pub fn round_times(&self, rounds: usize) -> Result<Vec<f64>, SchedulerError> {
        self.validate()?;
        match self {
            SpeedModel::Random { dists, seed } => {
                let mut rngs = worker_streams(*seed, Domain::ComputeTime, dists.len());
                Ok((0..rounds)
                    .map(|_| {
                        dists
                            .iter()
                            .zip(rngs.iter_mut())
                            .map(|(d, r)| d.sample(r))
                            .fold(0.0, f64::max)
                    })
                    .collect())
            }
            SpeedModel::Sequence { .. } => Ok(vec![1.0; rounds]),
            _ => {
                let secs = self.fixed_seconds().expect("fixed-time model");
                let slowest = secs.iter().copied().fold(0.0, f64::max);
                Ok(vec![slowest; rounds])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Finish {
    time: f64,
    worker: usize,
}

impl Eq for Finish {}

impl Ord for Finish {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.worker.cmp(&other.worker))
    }
}

impl PartialOrd for Finish {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum Sampler {
    Fixed(Vec<f64>),
    Random(Vec<ComputeDist>, Vec<SimRng>),
}

impl Sampler {
    fn next(&mut self, worker: usize) -> f64 {
        match self {
            Sampler::Fixed(s) => s[worker],
            Sampler::Random(d, r) => d[worker].sample(&mut r[worker]),
        }
    }
}

/// Unbounded stream of `(worker, finish_time)` in arrival order.
pub struct ArrivalEvents {
    inner: EventsInner,
}

enum EventsInner {
    Queue {
        heap: BinaryHeap<Reverse<Finish>>,
        sampler: Sampler,
    },
    Sequence {
        order: Vec<usize>,
        next: usize,
    },
}

impl ArrivalEvents {
    pub fn new(model: &SpeedModel) -> Result<Self, SchedulerError> {
        model.validate()?;
        let inner = match model {
            SpeedModel::Sequence { order, .. } => EventsInner::Sequence {
                order: order.clone(),
                next: 0,
            },
            _ => {
                let mut sampler = match model {
                    SpeedModel::Random { dists, seed } => {
                        Sampler::Random(dists.clone(), worker_streams(*seed, Domain::ComputeTime, dists.len()))
                    }
                    _ => Sampler::Fixed(model.fixed_seconds().expect("fixed-time model")),
                };
                let heap = (0..model.num_workers())
                    .map(|worker| {
                        Reverse(Finish {
                            time: sampler.next(worker),
                            worker,
                        })
                    })
                    .collect();
                EventsInner::Queue { heap, sampler }
            }
        };
        Ok(Self { inner })
    }
}

impl Iterator for ArrivalEvents {
    type Item = (usize, f64);

    fn next(&mut self) -> Option<(usize, f64)> {
        match &mut self.inner {
            EventsInner::Queue { heap, sampler } => {
                let Reverse(f) = heap.pop()?;
                let next = f.time + sampler.next(f.worker);
                heap.push(Reverse(Finish {
                    time: next,
                    worker: f.worker,
                }));
                Some((f.worker, f.time))
            }
            EventsInner::Sequence { order, next } => {
                let w = order[*next % order.len()];
                *next += 1;
                Some((w, *next as f64))
            }
        }
    }
}

/// One arrival: iteration `k` applied worker `worker`'s gradient of delay
/// `tau` at wall-clock `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub k: u64,
    pub worker: usize,
    pub tau: u64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalTrace {
    pub num_workers: usize,
    pub entries: Vec<TraceEntry>,
    /// Model that generated the trace; `None` for imported traces.
    pub model: Option<SpeedModel>,
}

impl ArrivalTrace {
    /// Build a trace from `(worker, time)` arrivals in order.
    pub fn from_events<I>(num_workers: usize, events: I, model: Option<SpeedModel>) -> Result<Self, SchedulerError>
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        let mut ledger = DelayLedger::new(num_workers)?;
        let entries = events
            .into_iter()
            .map(|(worker, time)| {
                let (k, tau) = ledger.record_arrival(worker)?;
                Ok(TraceEntry { k, worker, tau, time })
            })
            .collect::<Result<Vec<_>, SchedulerError>>()?;
        Ok(Self {
            num_workers,
            entries,
            model,
        })
    }

    /// Worst-case traces built from an explicit arrival order (time = k).
    pub fn from_order(num_workers: usize, order: &[usize]) -> Result<Self, SchedulerError> {
        Self::from_events(
            num_workers,
            order.iter().enumerate().map(|(i, &w)| (w, (i + 1) as f64)),
            None,
        )
    }

    pub fn horizon(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn workers(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.worker)
    }

    pub fn ledger(&self) -> Result<DelayLedger, LedgerError> {
        DelayLedger::replay(self.num_workers, self.workers())
    }

    pub fn final_time(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.time)
    }

    /// Per-worker number of arrivals with `time <= budget`.
    pub fn arrivals_by(&self, budget: f64) -> Vec<u64> {
        let mut counts = vec![0; self.num_workers];
        for e in self.entries.iter().take_while(|e| e.time <= budget) {
            counts[e.worker] += 1;
        }
        counts
    }

    /// Trace export: `k,worker,tau,time`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(b"k,worker,tau,time\n")?;
        for e in &self.entries {
            writeln!(out, "{},{},{},{}", e.k, e.worker, e.tau, e.time)?;
        }
        Ok(())
    }

    /// Import a `k,worker,tau,time` trace; rows must agree with a ledger
    /// replay and times must be non-decreasing.
    pub fn read_csv<R: BufRead>(num_workers: usize, input: R) -> Result<Self, SchedulerError> {
        let mut rows = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let csv_err = |msg: String| SchedulerError::Csv { line: lineno, msg };
            if i == 0 {
                if line.trim() != "k,worker,tau,time" {
                    return Err(csv_err(format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(csv_err("expected 4 fields".into()));
            }
            let parse_u = |s: &str| s.parse::<u64>().map_err(|e| csv_err(e.to_string()));
            let k = parse_u(f[0])?;
            let worker = parse_u(f[1])? as usize;
            let tau = parse_u(f[2])?;
            let time = f[3].parse::<f64>().map_err(|e| csv_err(e.to_string()))?;
            rows.push((lineno, k, worker, tau, time));
        }
        let trace = Self::from_events(num_workers, rows.iter().map(|r| (r.2, r.4)), None)?;
        let mut last_time = f64::NEG_INFINITY;
        for (e, &(line, k, _, tau, time)) in trace.entries.iter().zip(&rows) {
            if e.k != k || e.tau != tau {
                return Err(SchedulerError::Csv {
                    line,
                    msg: format!("(k={k}, tau={tau}) disagrees with replay (k={}, tau={})", e.k, e.tau),
                });
            }
            if time < last_time {
                return Err(SchedulerError::Csv {
                    line,
                    msg: "time decreases".into(),
                });
            }
            last_time = time;
        }
        Ok(trace)
    }
}

/// Simulate exactly `horizon` arrivals.
pub fn simulate_trace(model: &SpeedModel, horizon: u64) -> Result<ArrivalTrace, SchedulerError> {
    let events = ArrivalEvents::new(model)?;
    ArrivalTrace::from_events(model.num_workers(), events.take(horizon as usize), Some(model.clone()))
}

/// Simulate every arrival that completes within `budget` seconds.
pub fn simulate_until(model: &SpeedModel, budget: f64) -> Result<ArrivalTrace, SchedulerError> {
    let events = ArrivalEvents::new(model)?;
    ArrivalTrace::from_events(
        model.num_workers(),
        events.take_while(|&(_, t)| t <= budget),
        Some(model.clone()),
    )
}

/// Steps asynchronous and minibatch SGD complete in `budget` seconds when
/// worker `m` needs `speeds[m]` per gradient:
/// `(sum_m floor(S/s_m), min_m floor(S/s_m))`.
pub fn steps_in_time<T: WallClock>(speeds: &[T], budget: T) -> Result<(u64, u64), SchedulerError> {
    if speeds.is_empty() {
        return Err(SchedulerError::NoWorkers);
    }
    for (m, &s) in speeds.iter().enumerate() {
        if !(s > T::zero()) {
            return Err(SchedulerError::Invalid(format!(
                "compute time of worker {m} must be positive, got {s:?}"
            )));
        }
    }
    let counts: Vec<u64> = speeds.iter().map(|&s| (budget / s).floor_count()).collect();
    let k_async = counts.iter().sum();
    let k_mini = counts.iter().copied().min().unwrap_or(0);
    Ok((k_async, k_mini))
}

/// Asynchronous-over-minibatch speedup `(1/M) sum_m s_max / s_m`; always >= 1.
pub fn speedup_factor<T: WallClock>(speeds: &[T]) -> Result<T, SchedulerError> {
    if speeds.is_empty() {
        return Err(SchedulerError::NoWorkers);
    }
    let mut s_max = speeds[0];
    for &s in speeds {
        if !(s > T::zero()) {
            return Err(SchedulerError::Invalid(format!(
                "compute times must be positive, got {s:?}"
            )));
        }
        if s > s_max {
            s_max = s;
        }
    }
    let total = speeds.iter().fold(T::zero(), |acc, &s| acc + s_max / s);
    let m = T::from_usize(speeds.len()).ok_or_else(|| SchedulerError::Invalid("worker count".into()))?;
    Ok(total / m)
}

/// Random heterogeneous fixed speeds: `s_m = exp(N(0, spread^2))`, drawn once.
pub fn lognormal_fixed_speeds(workers: usize, spread: f64, seed: u64) -> SpeedModel {
    let mut rng = crate::rng::substream(seed, Domain::ComputeTime, u64::MAX);
    let seconds = (0..workers)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            (spread * z).exp()
        })
        .collect();
    SpeedModel::Fixed { seconds }
}
