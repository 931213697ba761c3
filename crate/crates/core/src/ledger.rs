//! Delay bookkeeping: which worker's gradient arrived at which iteration, and
//! how stale it was.
//!
//! For an iteration `k` and worker `m`, `prev(k, m)` is the last iteration
//! before `k` at which `m` returned a gradient (0 if none), and
//! `tau(k, m) = k - prev(k, m)` is the age of the gradient `m` is currently
//! computing. `tau(k)` is shorthand for `tau(k, m_k)`, the delay of the
//! gradient applied at iteration `k`.
//!
//! The ledger never models time. It is driven by the event scheduler, by a
//! recorded trace, or by the live executor, one arrival at a time.
//!
//! Workers are identified by 0-based indices.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("ledger needs at least one worker")]
    NoWorkers,
    #[error("unknown worker id {worker} (ledger has {num_workers} workers)")]
    UnknownWorker { worker: usize, num_workers: usize },
    #[error("iteration {k} is not after worker {worker}'s dispatch at {dispatched}")]
    NotInFlight { worker: usize, k: u64, dispatched: u64 },
    #[error("malformed ledger csv at line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// One processed arrival: iteration `k` consumed worker `worker`'s gradient,
/// which had been dispatched at iteration `prev`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrivalEntry {
    pub k: u64,
    pub worker: usize,
    pub prev: u64,
}

impl ArrivalEntry {
    pub fn tau(&self) -> u64 {
        self.k - self.prev
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayLedger {
    num_workers: usize,
    dispatch_iter: Vec<u64>,
    arrival_count: u64,
    history: Vec<ArrivalEntry>,
}

impl DelayLedger {
    /// All workers start computing at the initial point, i.e. dispatched at 0.
    pub fn new(num_workers: usize) -> Result<Self, LedgerError> {
        if num_workers == 0 {
            return Err(LedgerError::NoWorkers);
        }
        Ok(Self {
            num_workers,
            dispatch_iter: vec![0; num_workers],
            arrival_count: 0,
            history: Vec::new(),
        })
    }

    /// Rebuild a ledger by replaying an arrival order.
    pub fn replay<I>(num_workers: usize, workers: I) -> Result<Self, LedgerError>
    where
        I: IntoIterator<Item = usize>,
    {
        let mut ledger = Self::new(num_workers)?;
        for w in workers {
            ledger.record_arrival(w)?;
        }
        Ok(ledger)
    }

    fn check_worker(&self, worker: usize) -> Result<(), LedgerError> {
        if worker >= self.num_workers {
            Err(LedgerError::UnknownWorker {
                worker,
                num_workers: self.num_workers,
            })
        } else {
            Ok(())
        }
    }

    /// Consume the in-flight gradient of `worker` as the next iteration and
    /// immediately re-dispatch the worker at that iteration.
    ///
    /// Returns `(k, tau(k))`.
    pub fn record_arrival(&mut self, worker: usize) -> Result<(u64, u64), LedgerError> {
        self.check_worker(worker)?;
        let k = self.arrival_count + 1;
        let prev = self.dispatch_iter[worker];
        self.arrival_count = k;
        self.dispatch_iter[worker] = k;
        self.history.push(ArrivalEntry { k, worker, prev });
        Ok((k, k - prev))
    }

    /// `tau(k, worker)`: age at iteration `k` of the gradient `worker` is
    /// computing. Requires `k` to be after the worker's current dispatch.
    pub fn tau_of_inflight(&self, worker: usize, k: u64) -> Result<u64, LedgerError> {
        self.check_worker(worker)?;
        let dispatched = self.dispatch_iter[worker];
        if k == 0 || k <= dispatched {
            return Err(LedgerError::NotInFlight { worker, k, dispatched });
        }
        Ok(k - dispatched)
    }

    /// Delay assigned to a gradient still in flight when the run stops at
    /// `horizon`: `max(1, horizon - prev)`. This keeps the eventual stepsize
    /// of every evaluated point well defined without waiting for it.
    pub fn tau_terminal(&self, worker: usize, horizon: u64) -> Result<u64, LedgerError> {
        self.check_worker(worker)?;
        Ok(terminal_delay(self.dispatch_iter[worker], horizon))
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    pub fn arrivals(&self) -> u64 {
        self.arrival_count
    }

    /// Iteration at which `worker`'s in-flight gradient was dispatched.
    pub fn dispatch_iter(&self, worker: usize) -> Option<u64> {
        self.dispatch_iter.get(worker).copied()
    }

    pub fn inflight(&self) -> &[u64] {
        &self.dispatch_iter
    }

    pub fn history(&self) -> &[ArrivalEntry] {
        &self.history
    }

    /// Trace export: `k,worker,prev,tau` with a header row and LF endings.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(b"k,worker,prev,tau\n")?;
        for e in &self.history {
            writeln!(out, "{},{},{},{}", e.k, e.worker, e.prev, e.tau())?;
        }
        Ok(())
    }

    /// Parse a ledger CSV and validate it by replay.
    pub fn read_csv<R: BufRead>(num_workers: usize, input: R) -> Result<Self, LedgerError> {
        let mut ledger = Self::new(num_workers)?;
        for (i, line) in input.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| LedgerError::Csv {
                line: lineno,
                msg: e.to_string(),
            })?;
            if i == 0 {
                if line.trim() != "k,worker,prev,tau" {
                    return Err(LedgerError::Csv {
                        line: lineno,
                        msg: format!("unexpected header {line:?}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<u64> = line
                .split(',')
                .map(|f| f.trim().parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|e| LedgerError::Csv {
                    line: lineno,
                    msg: e.to_string(),
                })?;
            let [k, worker, prev, tau] = fields[..] else {
                return Err(LedgerError::Csv {
                    line: lineno,
                    msg: "expected 4 fields".into(),
                });
            };
            let (got_k, got_tau) = ledger.record_arrival(worker as usize)?;
            let got_prev = got_k - got_tau;
            if (got_k, got_tau, got_prev) != (k, tau, prev) {
                return Err(LedgerError::Csv {
                    line: lineno,
                    msg: format!(
                        "row ({k},{worker},{prev},{tau}) disagrees with replay ({got_k},{worker},{got_prev},{got_tau})"
                    ),
                });
            }
        }
        Ok(ledger)
    }
}

/// `max(1, horizon - dispatched)`.
pub fn terminal_delay(dispatched: u64, horizon: u64) -> u64 {
    horizon.saturating_sub(dispatched).max(1)
}

/// A prefix at which the delay budget failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetViolation {
    pub horizon: u64,
    pub lhs: u128,
    pub rhs: u128,
}

/// For every prefix `K` of `history`, checks
/// `sum_{k<K} tau(k) + sum_m tau(K, m) <= K * M`.
///
/// Returns the largest slack ratio `lhs / rhs` seen (it is 1 on every valid
/// trace, the bound being attained with equality), or the first violation.
pub fn check_delay_budget(history: &[ArrivalEntry], num_workers: usize) -> Result<f64, BudgetViolation> {
    let m = num_workers as i128;
    let mut dispatch = vec![0i128; num_workers];
    let mut sum_dispatch: i128 = 0;
    let mut sum_tau_before: i128 = 0;
    let mut worst = 0.0_f64;
    for e in history {
        let k = e.k as i128;
        // sum_m tau(K, m) = K*M - sum_m prev(K, m)
        let lhs = sum_tau_before + k * m - sum_dispatch;
        let rhs = k * m;
        if lhs > rhs {
            return Err(BudgetViolation {
                horizon: e.k,
                lhs: lhs.max(0) as u128,
                rhs: rhs as u128,
            });
        }
        if rhs > 0 {
            worst = worst.max(lhs as f64 / rhs as f64);
        }
        // the recorded delay, not one recomputed from the dispatch table
        sum_tau_before += k - e.prev as i128;
        let w = e.worker.min(num_workers.saturating_sub(1));
        sum_dispatch += k - dispatch[w];
        dispatch[w] = k;
    }
    Ok(worst)
}

/// Number of arrivals among the first `K` with `tau(k) > 3M`, and the cap
/// `min(K/3, max(K - 3M, 0))` it must not exceed.
pub fn large_delay_count(history: &[ArrivalEntry], num_workers: usize) -> (u64, f64) {
    let k = history.len() as u64;
    let threshold = 3 * num_workers as u64;
    let count = history.iter().filter(|e| e.tau() > threshold).count() as u64;
    let cap = (k as f64 / 3.0).min(k.saturating_sub(threshold) as f64);
    (count, cap)
}
