//! Deterministic simulation of asynchronous SGD with delay-adaptive
//! stepsizes.
//!
//! The pieces, bottom up:
//!
//! * [`ledger`]: per-worker dispatch bookkeeping and the delays `tau(k)`.
//! * [`scheduler`]: compute-time models that turn worker speeds into an
//!   arrival trace.
//! * [`schedules`]: stepsize rules and output rules.
//! * [`problems`]: objectives with known constants.
//! * [`optimizer`]: the asynchronous loop, the minibatch baseline and a
//!   real-thread executor.
//! * [`virtual_iterates`]: the virtual sequence and its in-flight identity.
//! * [`harness`]: configuration, commands and the invariant suite behind the
//!   CLI.

// `!(x > 0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod harness;
pub mod ledger;
pub mod optimizer;
pub mod problems;
pub mod rng;
pub mod scalar;
pub mod scheduler;
pub mod schedules;
pub mod virtual_iterates;

pub use ledger::DelayLedger;
pub use optimizer::{run_async, run_live, run_minibatch, RunOptions, RunRecord};
pub use problems::{NoiseMode, Problem};
pub use scalar::Scalar;
pub use scheduler::{simulate_trace, simulate_until, ArrivalTrace, SpeedModel};
pub use schedules::{OutputRule, ProblemConstants, ScheduleKind, StepSchedule};
pub use virtual_iterates::{check_lemma1, track, VirtualTrack};

pub type Problem64 = Problem<f64>;
pub type Problem32 = Problem<f32>;
pub type StepSchedule64 = StepSchedule<f64>;
pub type StepSchedule32 = StepSchedule<f32>;
pub type RunRecord64 = RunRecord<f64>;
pub type RunRecord32 = RunRecord<f32>;
pub type VirtualTrack64 = VirtualTrack<f64>;
pub type ProblemConstants64 = ProblemConstants<f64>;
