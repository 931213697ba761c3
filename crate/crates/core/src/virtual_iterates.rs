//! Virtual iterates and the in-flight error identity.
//!
//! The virtual sequence applies every gradient with the stepsize it
//! eventually receives, but at the moment it was computed:
//!
//! ```text
//! xh_1     = x_0 - sum_m gamma_hat_0^m g_0^m
//! xh_{k+1} = xh_k - gamma_hat_k g_k
//! ```
//!
//! so `x_k - xh_k` is exactly the stepsize-weighted sum of the `M - 1`
//! gradients still in flight after iteration `k` (every worker except `m_k`).
//! Checking that identity iteration by iteration exercises all of the delay
//! bookkeeping at once.

use thiserror::Error;

use crate::optimizer::RunRecord;
use crate::scalar::{vecops, Scalar};
use crate::scheduler::ArrivalTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackError {
    #[error("run was recorded without diagnostics (iterates and gradient memo needed)")]
    MissingHistory,
    #[error("trace does not match the run: {0}")]
    TraceMismatch(String),
}

/// Deliberate bookkeeping bugs, used to show the check is sensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Look up each in-flight gradient one iteration too early.
    OffByOnePrev,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualTrack<S> {
    /// `x_hat[k - 1]` for `k = 1..=K`.
    pub x_hat: Vec<Vec<S>>,
    /// `e_k = x_k - xh_k`.
    pub residual: Vec<Vec<S>>,
    /// `sum_{m != m_k} gamma_next(k,m) g_prev(k,m)`.
    pub reconstruction: Vec<Vec<S>>,
    /// Number of terms in each reconstruction.
    pub terms: Vec<usize>,
    /// `||e_k - reconstruction_k|| / (1 + ||e_k||)`.
    pub rel_residual: Vec<f64>,
}

impl<S: Scalar> VirtualTrack<S> {
    pub fn max_error_norm(&self) -> f64 {
        self.residual
            .iter()
            .map(|e| vecops::norm(e).to_f64_lossy())
            .fold(0.0, f64::max)
    }
}

struct Lookup<'a, S> {
    at: Vec<Option<&'a [S]>>,
    initial: Vec<Option<&'a [S]>>,
}

impl<'a, S: Scalar> Lookup<'a, S> {
    /// Gradient that `worker` computed at `x_j`.
    fn grad(&self, j: u64, worker: usize) -> Option<&'a [S]> {
        if j == 0 {
            self.initial[worker]
        } else {
            self.at.get(j as usize).copied().flatten()
        }
    }
}

fn gamma_hat_of<S: Scalar>(run: &RunRecord<S>, j: u64, worker: usize) -> S {
    if j == 0 {
        run.gamma_hat_initial[worker]
    } else {
        run.gamma_hat[j as usize - 1]
    }
}

/// Build the virtual sequence for a run recorded with diagnostics on.
pub fn track<S: Scalar>(run: &RunRecord<S>, trace: &ArrivalTrace) -> Result<VirtualTrack<S>, TrackError> {
    track_with(run, trace, Mutation::None)
}

pub fn track_with<S: Scalar>(
    run: &RunRecord<S>,
    trace: &ArrivalTrace,
    mutation: Mutation,
) -> Result<VirtualTrack<S>, TrackError> {
    let (iterates, memo) = match (&run.iterates, &run.gradients) {
        (Some(i), Some(g)) => (i, g),
        _ => return Err(TrackError::MissingHistory),
    };
    let m = run.num_workers;
    let horizon = run.horizon as usize;
    if trace.num_workers != m || trace.entries.len() != horizon {
        return Err(TrackError::TraceMismatch(format!(
            "run has M = {m}, K = {horizon}; trace has M = {}, K = {}",
            trace.num_workers,
            trace.entries.len()
        )));
    }
    let mismatch = |k: u64| TrackError::TraceMismatch(format!("gradient missing near k = {k}"));

    let mut lookup = Lookup {
        at: vec![None; horizon + 1],
        initial: vec![None; m],
    };
    for (entry, g) in trace.entries.iter().zip(&memo.consumed) {
        let prev = entry.k - entry.tau;
        if prev == 0 {
            lookup.initial[entry.worker] = Some(g.as_slice());
        } else {
            lookup.at[prev as usize] = Some(g.as_slice());
        }
    }
    for (w, slot) in memo.inflight.iter().enumerate() {
        if let Some((j, g)) = slot {
            if *j == 0 {
                lookup.initial[w] = Some(g.as_slice());
            } else {
                lookup.at[*j as usize] = Some(g.as_slice());
            }
        }
    }

    let d = run.x0.len();
    let mut x_hat = Vec::with_capacity(horizon);
    let mut cur = run.x0.clone();
    for w in 0..m {
        let g = lookup.grad(0, w).ok_or_else(|| mismatch(0))?;
        vecops::axpy(-run.gamma_hat_initial[w], g, &mut cur);
    }
    for k in 1..=horizon {
        x_hat.push(cur.clone());
        if k < horizon {
            let g = lookup
                .grad(k as u64, trace.entries[k - 1].worker)
                .ok_or_else(|| mismatch(k as u64))?;
            vecops::axpy(-run.gamma_hat[k - 1], g, &mut cur);
        }
    }

    let mut dispatched = vec![0_u64; m];
    let mut residual = Vec::with_capacity(horizon);
    let mut reconstruction = Vec::with_capacity(horizon);
    let mut terms = Vec::with_capacity(horizon);
    let mut rel_residual = Vec::with_capacity(horizon);
    for (i, entry) in trace.entries.iter().enumerate() {
        let k = entry.k;
        dispatched[entry.worker] = k;
        let e = vecops::sub(&iterates[i + 1], &x_hat[i]);
        let mut recon = vec![S::zero(); d];
        let mut count = 0;
        for w in (0..m).filter(|&w| w != entry.worker) {
            let j = match mutation {
                Mutation::None => dispatched[w],
                Mutation::OffByOnePrev => dispatched[w].saturating_sub(1),
            };
            let g = match (lookup.grad(j, w), mutation) {
                (Some(g), _) => g,
                (None, Mutation::OffByOnePrev) => continue,
                (None, Mutation::None) => return Err(mismatch(k)),
            };
            vecops::axpy(gamma_hat_of(run, j, w), g, &mut recon);
            count += 1;
        }
        let diff = vecops::dist(&e, &recon).to_f64_lossy();
        rel_residual.push(diff / (1.0 + vecops::norm(&e).to_f64_lossy()));
        residual.push(e);
        reconstruction.push(recon);
        terms.push(count);
    }

    Ok(VirtualTrack {
        x_hat,
        residual,
        reconstruction,
        terms,
        rel_residual,
    })
}

/// Largest relative residual of the identity over the run (0 for `K = 0`).
pub fn check_lemma1<S: Scalar>(vt: &VirtualTrack<S>) -> f64 {
    vt.rel_residual.iter().copied().fold(0.0, f64::max)
}
