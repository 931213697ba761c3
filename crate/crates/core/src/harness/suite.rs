//! Randomized invariant suite behind `async-sgd check`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::ledger::{check_delay_budget, large_delay_count};
use crate::optimizer::{run_async, RunOptions, RunRecord};
use crate::problems::{NoiseMode, Problem};
use crate::rng::{substream, Domain};
use crate::scheduler::{lognormal_fixed_speeds, simulate_trace, ArrivalTrace, ComputeDist, SpeedModel};
use crate::schedules::{lower_bounds, ScheduleKind, StepSchedule};
use crate::virtual_iterates::{check_lemma1, track_with, Mutation};

pub const WORKER_COUNTS: [usize; 4] = [1, 2, 5, 16];
pub const HORIZONS: [u64; 2] = [50, 500];
pub const LEMMA1_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedFamily {
    Fixed,
    Random,
    Straggler,
    Sequence,
}

pub const SPEED_FAMILIES: [SpeedFamily; 4] = [
    SpeedFamily::Fixed,
    SpeedFamily::Random,
    SpeedFamily::Straggler,
    SpeedFamily::Sequence,
];

/// One randomized configuration of the suite.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub index: u64,
    pub workers: usize,
    pub horizon: u64,
    pub family: SpeedFamily,
    pub schedule: ScheduleKind,
    pub model: SpeedModel,
    pub problem: Problem<f64>,
    pub seed: u64,
}

/// Number of distinct (M, K, speed family, schedule) combinations.
pub const GRID: u64 =
    (WORKER_COUNTS.len() * HORIZONS.len() * SPEED_FAMILIES.len() * ScheduleKind::ADAPTIVE.len()) as u64;

/// Configuration `index` under `seed`. Indices `0..GRID` cover every
/// combination once; randomness (speeds, data, noise) comes from the index.
pub fn suite_case(seed: u64, index: u64) -> SuiteCase {
    let mut rng = substream(seed, Domain::Harness, index);
    let g = index % GRID;
    let workers = WORKER_COUNTS[(g % 4) as usize];
    let horizon = HORIZONS[((g / 4) % 2) as usize];
    let family = SPEED_FAMILIES[((g / 8) % 4) as usize];
    let schedule = ScheduleKind::ADAPTIVE[((g / 32) % 4) as usize];
    let model_seed = rng.random::<u64>();
    let model = match family {
        SpeedFamily::Fixed => lognormal_fixed_speeds(workers, rng.random_range(0.0..2.0), model_seed),
        SpeedFamily::Random => SpeedModel::Random {
            dists: (0..workers)
                .map(|_| {
                    let mean = rng.random_range(0.5..4.0);
                    if rng.random_bool(0.5) {
                        ComputeDist::Exponential { mean }
                    } else {
                        ComputeDist::LogNormal {
                            mean,
                            sigma: rng.random_range(0.1..1.5),
                        }
                    }
                })
                .collect(),
            seed: model_seed,
        },
        SpeedFamily::Straggler => SpeedModel::Straggler {
            workers,
            base: 1.0,
            straggler: rng.random_range(0..workers),
            slowdown: rng.random_range(2.0..200.0),
        },
        SpeedFamily::Sequence => {
            let mut order: Vec<usize> = (0..workers).collect();
            let extra = rng.random_range(0..=2 * workers);
            order.extend((0..extra).map(|_| rng.random_range(0..workers)));
            order.shuffle(&mut rng);
            SpeedModel::Sequence { workers, order }
        }
    };
    let data_seed = rng.random::<u64>();
    let noise = NoiseMode::Additive {
        sigma: rng.random_range(0.0..1.0),
    };
    let mut problem = Problem::least_squares(4, 16, noise, data_seed).expect("valid construction");
    if schedule == ScheduleKind::AdaptiveHeterogeneous && workers > 1 {
        problem = problem
            .with_heterogeneity(workers, rng.random_range(0.0..1.0), data_seed)
            .expect("d = 4 supports any M");
    }
    SuiteCase {
        index,
        workers,
        horizon,
        family,
        schedule,
        model,
        problem,
        seed: rng.random(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub limit: String,
    pub cases: u64,
    pub first_failure: Option<String>,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} worst={:<12.4e} limit {} over {} cases",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.limit,
            self.cases
        )?;
        if let Some(why) = &self.first_failure {
            write!(f, " (first failure: {why})")?;
        }
        Ok(())
    }
}

struct Tally {
    name: &'static str,
    limit: String,
    worst: f64,
    cases: u64,
    failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str, limit: impl Into<String>) -> Self {
        Self {
            name,
            limit: limit.into(),
            worst: f64::NEG_INFINITY,
            cases: 0,
            failure: None,
        }
    }

    fn record(&mut self, value: f64, ok: bool, case: &SuiteCase) {
        self.cases += 1;
        if value.is_finite() || !ok {
            self.worst = self.worst.max(value);
        }
        if !ok && self.failure.is_none() {
            self.failure = Some(format!(
                "case {} (M={}, K={}, {:?}, {}) value {value:e}",
                case.index, case.workers, case.horizon, case.family, case.schedule
            ));
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name,
            passed: self.failure.is_none() && self.cases > 0,
            worst: if self.cases == 0 { f64::NAN } else { self.worst },
            limit: self.limit,
            cases: self.cases,
            first_failure: self.failure,
        }
    }
}

/// `sum_k gamma_hat_k` (or its log with `P_k` weights) against the matching
/// lower bound. Returns `(achieved / bound)`, which must be at least 1.
pub fn stepsize_sum_ratio(run: &RunRecord<f64>, schedule: &StepSchedule<f64>) -> f64 {
    let sum = run.gamma_hat_sum();
    match schedule.kind() {
        ScheduleKind::AdaptiveConvex => sum / lower_bounds::adaptive_convex(schedule.constants()),
        ScheduleKind::AdaptiveNonconvex => sum / lower_bounds::adaptive_nonconvex(schedule),
        ScheduleKind::AdaptiveHeterogeneous => sum / lower_bounds::adaptive_heterogeneous(schedule),
        ScheduleKind::AdaptiveStronglyConvex => {
            let mu = schedule.constants().mu;
            let mut cum = 0.0;
            let logs: Vec<f64> = run
                .gamma_hat
                .iter()
                .map(|&g| {
                    cum += g;
                    g.ln() + mu * cum
                })
                .collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ln_lhs = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
            (ln_lhs - lower_bounds::adaptive_strongly_convex_ln(schedule)).exp()
        }
        _ => f64::NAN,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    pub cases: u64,
    pub mutation: Mutation,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub cases: u64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Run every invariant over `options.cases` configurations.
pub fn run_suite(options: SuiteOptions) -> SuiteReport {
    let mut lemma = Tally::new("inflight_identity", format!("<= {LEMMA1_TOL:e}"));
    let mut terms = Tally::new("inflight_term_count", "== M-1");
    let mut budget = Tally::new("delay_budget", "lhs/(KM) <= 1");
    let mut large = Tally::new("large_delay_fraction", "count/cap <= 1");
    let mut assigned = Tally::new("gamma_hat_assigned_once", "all finite, > 0");
    let mut grads = Tally::new("gradient_accounting", "== K + M - 1");
    let mut sums = Tally::new("stepsize_sum_lower_bound", "achieved/bound >= 1");
    let mut caps = Tally::new("delay_adaptive_cap", "gamma*L*tau/c <= 1");
    let mut determinism = Tally::new("replay_determinism", "bitwise equal");
    let mut run_errors = Tally::new("runs_complete", "no errors");
    let mut lipschitz = Tally::new("const_lipschitz_error_bound", "||e_k||/((M-1) gamma G) <= 1");

    let opts = RunOptions::diagnostics();
    for index in 0..options.cases {
        let case = suite_case(options.seed, index);
        let outcome = (|| -> Result<(), String> {
            let trace = simulate_trace(&case.model, case.horizon).map_err(|e| e.to_string())?;
            let constants = case.problem.constants(case.workers, case.horizon);
            let schedule = StepSchedule::new(case.schedule, constants).map_err(|e| e.to_string())?;
            let run = run_async(&case.problem, &trace, &schedule, case.problem.x0(), case.seed, opts)
                .map_err(|e| e.to_string())?;
            let vt = track_with(&run, &trace, options.mutation).map_err(|e| e.to_string())?;
            let r = check_lemma1(&vt);
            lemma.record(r, r <= LEMMA1_TOL, &case);
            let bad_terms = vt.terms.iter().filter(|&&t| t != case.workers - 1).count();
            terms.record(bad_terms as f64, bad_terms == 0, &case);

            let ledger = trace.ledger().map_err(|e| e.to_string())?;
            match check_delay_budget(ledger.history(), case.workers) {
                Ok(ratio) => budget.record(ratio, true, &case),
                Err(v) => budget.record(v.lhs as f64 / v.rhs as f64, false, &case),
            }
            let (count, cap) = large_delay_count(ledger.history(), case.workers);
            let ratio = if cap > 0.0 { count as f64 / cap } else { count as f64 };
            large.record(ratio, count as f64 <= cap, &case);

            let ok = run
                .gamma_hat
                .iter()
                .chain(&run.gamma_hat_initial)
                .all(|g| g.is_finite() && *g > 0.0)
                && run.gamma_hat.len() as u64 == case.horizon
                && run.gamma_hat_initial.len() == case.workers;
            assigned.record(if ok { 0.0 } else { 1.0 }, ok, &case);
            let expect = case.horizon + case.workers as u64 - 1;
            grads.record(
                run.gradients_evaluated as f64 - expect as f64,
                run.gradients_evaluated == expect,
                &case,
            );

            let ratio = stepsize_sum_ratio(&run, &schedule);
            sums.record(-ratio, ratio >= 1.0, &case);

            let c = case.schedule.delay_constant().expect("adaptive");
            let worst_cap = run
                .steps
                .iter()
                .map(|s| s.gamma * schedule.constants().l * s.tau as f64 / c)
                .fold(0.0, f64::max);
            caps.record(worst_cap, worst_cap <= 1.0 + 1e-12, &case);

            let again = run_async(&case.problem, &trace, &schedule, case.problem.x0(), case.seed, opts)
                .map_err(|e| e.to_string())?;
            let same = again == run;
            determinism.record(if same { 0.0 } else { 1.0 }, same, &case);

            if case.index.is_multiple_of(5) {
                lipschitz_case(&case, &trace, &mut lipschitz)?;
            }
            Ok(())
        })();
        let failed = outcome.as_ref().err().cloned();
        run_errors.record(if failed.is_some() { 1.0 } else { 0.0 }, failed.is_none(), &case);
        if let Some(msg) = failed {
            run_errors.failure.get_or_insert(format!("case {index}: {msg}"));
        }
    }
    let mut checks: Vec<CheckOutcome> = [
        lemma,
        terms,
        budget,
        large,
        assigned,
        grads,
        sums,
        caps,
        determinism,
        lipschitz,
        run_errors,
    ]
    .into_iter()
    .map(Tally::finish)
    .collect();
    // the stepsize-sum ratio is recorded negated so that "worst" is the smallest
    if let Some(s) = checks.iter_mut().find(|c| c.name == "stepsize_sum_lower_bound") {
        s.worst = -s.worst;
    }
    SuiteReport {
        checks,
        cases: options.cases,
    }
}

/// Constant stepsize on the bounded non-convex problem, where every sampled
/// gradient is bounded by `G`, so `||e_k|| <= (M-1) gamma G`.
fn lipschitz_case(case: &SuiteCase, trace: &ArrivalTrace, tally: &mut Tally) -> Result<(), String> {
    let problem: Problem<f64> = Problem::bounded_nonconvex(3, case.seed).map_err(|e| e.to_string())?;
    let constants = problem.constants(case.workers, case.horizon);
    let g = constants.g.expect("bounded problem has G");
    let gamma = 0.5 / (case.workers as f64 * constants.l);
    let schedule = StepSchedule::constant(gamma, constants).map_err(|e| e.to_string())?;
    let run = run_async(
        &problem,
        trace,
        &schedule,
        problem.x0(),
        case.seed,
        RunOptions::diagnostics(),
    )
    .map_err(|e| e.to_string())?;
    let vt = crate::virtual_iterates::track(&run, trace).map_err(|e| e.to_string())?;
    let limit = (case.workers as f64 - 1.0) * gamma * g;
    let worst = vt.max_error_norm();
    let ratio = if limit > 0.0 { worst / limit } else { worst };
    tally.record(ratio, worst <= limit * (1.0 + 1e-12), case);
    Ok(())
}
