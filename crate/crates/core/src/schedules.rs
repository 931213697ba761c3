//! Stepsize rules and the output-selection rules that go with them.
//!
//! Every rule is a pure function of `(k, tau(k))` and the problem constants.
//! A branch whose formula divides by zero (noise-free `sigma = 0`, `mu = 0`,
//! missing Lipschitz bound in a cap) is the limit `+inf` and drops out of the
//! minimum.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::RunRecord;
use crate::scalar::{vecops, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("unknown schedule tag {0:?}")]
    UnknownTag(String),
    #[error("schedule {schedule} requires {what}")]
    MissingConstant { schedule: ScheduleKind, what: &'static str },
    #[error("schedule {schedule} requires K >= {factor}M (K = {horizon}, M = {workers})")]
    HorizonTooShort {
        schedule: ScheduleKind,
        factor: u64,
        horizon: u64,
        workers: usize,
    },
    #[error("tuned stepsize must be positive and finite")]
    BadStepsize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OutputError {
    #[error("output rule {0:?} needs the full iterate history")]
    MissingHistory(OutputRule),
    #[error("stepsize weights sum to zero")]
    ZeroWeight,
}

/// Problem constants consumed by the schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants<S> {
    /// Smoothness (gradient Lipschitz constant).
    pub l: S,
    /// Strong-convexity modulus, 0 when merely convex or non-convex.
    pub mu: S,
    /// Per-sample loss Lipschitz bound, when one exists.
    pub g: Option<S>,
    /// Gradient-noise standard-deviation bound.
    pub sigma: S,
    /// Bound on the initial distance to a minimizer.
    pub b: Option<S>,
    /// Bound on the initial suboptimality.
    pub delta: Option<S>,
    pub workers: usize,
    pub horizon: u64,
}

impl<S: Scalar> ProblemConstants<S> {
    fn m(&self) -> S {
        S::lit(self.workers as f64)
    }

    fn k(&self) -> S {
        S::lit(self.horizon as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Constant `B / (G sqrt(KM))` for convex Lipschitz losses.
    ConstLipschitz,
    /// Constant `min{1/(2ML), sqrt(D/(L s^2 K)), (D/(L^2 M^2 G^2 K))^(1/3)}`.
    LipschitzSmooth,
    AdaptiveConvex,
    AdaptiveStronglyConvex,
    AdaptiveNonconvex,
    AdaptiveHeterogeneous,
    /// Hand-picked constant stepsize (grid search baselines).
    Constant,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 7] = [
        ScheduleKind::ConstLipschitz,
        ScheduleKind::LipschitzSmooth,
        ScheduleKind::AdaptiveConvex,
        ScheduleKind::AdaptiveStronglyConvex,
        ScheduleKind::AdaptiveNonconvex,
        ScheduleKind::AdaptiveHeterogeneous,
        ScheduleKind::Constant,
    ];

    pub const ADAPTIVE: [ScheduleKind; 4] = [
        ScheduleKind::AdaptiveConvex,
        ScheduleKind::AdaptiveStronglyConvex,
        ScheduleKind::AdaptiveNonconvex,
        ScheduleKind::AdaptiveHeterogeneous,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ScheduleKind::ConstLipschitz => "const_lipschitz",
            ScheduleKind::LipschitzSmooth => "lipschitz_smooth",
            ScheduleKind::AdaptiveConvex => "adaptive_convex",
            ScheduleKind::AdaptiveStronglyConvex => "adaptive_strongly_convex",
            ScheduleKind::AdaptiveNonconvex => "adaptive_nonconvex",
            ScheduleKind::AdaptiveHeterogeneous => "adaptive_heterogeneous",
            ScheduleKind::Constant => "constant",
        }
    }

    pub fn is_adaptive(self) -> bool {
        Self::ADAPTIVE.contains(&self)
    }

    /// Output rule the matching convergence guarantee is stated for.
    pub fn output_rule(self) -> OutputRule {
        match self {
            ScheduleKind::ConstLipschitz => OutputRule::UniformAverage,
            ScheduleKind::LipschitzSmooth | ScheduleKind::AdaptiveNonconvex | ScheduleKind::AdaptiveHeterogeneous => {
                OutputRule::SampleProportional
            }
            ScheduleKind::AdaptiveConvex | ScheduleKind::Constant => OutputRule::WeightedAverage,
            ScheduleKind::AdaptiveStronglyConvex => OutputRule::PHatWeighted,
        }
    }

    /// `c` in the cap `gamma_k <= c / (L tau(k))` of the adaptive rules.
    pub fn delay_constant(self) -> Option<f64> {
        match self {
            ScheduleKind::AdaptiveHeterogeneous => Some(1.0 / 8.0),
            k if k.is_adaptive() => Some(1.0 / 4.0),
            _ => None,
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScheduleKind {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| ScheduleError::UnknownTag(s.to_string()))
    }
}

/// `num / den`, or `None` (an absent branch) when the ratio is not finite.
fn ratio<S: Scalar>(num: S, den: S) -> Option<S> {
    let r = num / den;
    (r.is_finite() && den != S::zero()).then_some(r)
}

fn min_present<S: Scalar>(branches: impl IntoIterator<Item = Option<S>>) -> S {
    branches.into_iter().flatten().fold(S::infinity(), |a, b| a.min(b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule<S> {
    kind: ScheduleKind,
    constants: ProblemConstants<S>,
    tuned: Option<S>,
}

impl<S: Scalar> StepSchedule<S> {
    pub fn new(kind: ScheduleKind, constants: ProblemConstants<S>) -> Result<Self, ScheduleError> {
        let missing = |what| ScheduleError::MissingConstant { schedule: kind, what };
        let c = &constants;
        let noisy = c.sigma > S::zero();
        if kind == ScheduleKind::Constant {
            return Err(missing("an explicit stepsize (use StepSchedule::constant)"));
        }
        if kind != ScheduleKind::ConstLipschitz && !(c.l > S::zero()) {
            return Err(missing("L > 0"));
        }
        if c.workers == 0 {
            return Err(missing("at least one worker"));
        }
        match kind {
            ScheduleKind::ConstLipschitz => {
                if !c.g.is_some_and(|g| g > S::zero()) {
                    return Err(missing("a loss Lipschitz bound G > 0"));
                }
                if c.b.is_none() {
                    return Err(missing("an initial distance bound B"));
                }
            }
            ScheduleKind::LipschitzSmooth => {
                if !c.g.is_some_and(|g| g > S::zero()) {
                    return Err(missing("a loss Lipschitz bound G > 0"));
                }
                if c.delta.is_none() {
                    return Err(missing("an initial suboptimality bound Delta"));
                }
            }
            ScheduleKind::AdaptiveConvex if noisy && c.b.is_none() => {
                return Err(missing("an initial distance bound B"));
            }
            ScheduleKind::AdaptiveStronglyConvex if noisy && c.mu > S::zero() && c.b.is_none() => {
                return Err(missing("an initial distance bound B"));
            }
            ScheduleKind::AdaptiveNonconvex | ScheduleKind::AdaptiveHeterogeneous if noisy && c.delta.is_none() => {
                return Err(missing("an initial suboptimality bound Delta"));
            }
            _ => {}
        }
        let factor = if kind == ScheduleKind::AdaptiveStronglyConvex {
            3
        } else {
            1
        };
        if c.horizon < factor * c.workers as u64 {
            return Err(ScheduleError::HorizonTooShort {
                schedule: kind,
                factor,
                horizon: c.horizon,
                workers: c.workers,
            });
        }
        Ok(Self {
            kind,
            constants,
            tuned: None,
        })
    }

    /// A fixed, hand-picked stepsize.
    pub fn constant(gamma: S, constants: ProblemConstants<S>) -> Result<Self, ScheduleError> {
        if !(gamma > S::zero() && gamma.is_finite()) {
            return Err(ScheduleError::BadStepsize);
        }
        Ok(Self {
            kind: ScheduleKind::Constant,
            constants,
            tuned: Some(gamma),
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn constants(&self) -> &ProblemConstants<S> {
        &self.constants
    }

    /// The `tau`-independent part of the rule (`gamma_max` in the stepsize
    /// lower bounds). For the constant rules this is the stepsize itself.
    pub fn gamma_max(&self) -> S {
        let c = &self.constants;
        let (l, m, k, sigma) = (c.l, c.m(), c.k(), c.sigma);
        let one = S::one();
        let lit = S::lit;
        let noise_sqrt = || c.delta.and_then(|d| ratio(d, k * l * sigma * sigma)).map(|r| r.sqrt());
        match self.kind {
            ScheduleKind::Constant => self.tuned.expect("constant schedule carries its stepsize"),
            ScheduleKind::ConstLipschitz => {
                let g = c.g.expect("validated");
                c.b.expect("validated") / (g * (k * m).sqrt())
            }
            ScheduleKind::LipschitzSmooth => {
                let g = c.g.expect("validated");
                let delta = c.delta.expect("validated");
                min_present([
                    Some(one / (lit(2.0) * m * l)),
                    noise_sqrt(),
                    ratio(delta, l * l * m * m * g * g * k).map(|r| r.cbrt()),
                ])
            }
            ScheduleKind::AdaptiveConvex => min_present([
                Some(one / (lit(4.0) * m * l)),
                c.b.and_then(|b| ratio(b, sigma * k.sqrt())),
            ]),
            ScheduleKind::AdaptiveStronglyConvex => {
                let log_branch = c.b.and_then(|b| {
                    let inner = ratio(c.mu * c.mu * k * k * b * b, sigma * sigma)?;
                    ratio(lit(504.0) * (lit(std::f64::consts::E) + inner).ln(), c.mu * k)
                });
                min_present([Some(one / (lit(8.0) * m * l)), log_branch])
            }
            ScheduleKind::AdaptiveNonconvex => min_present([Some(one / (lit(2.0) * m * l)), noise_sqrt()]),
            ScheduleKind::AdaptiveHeterogeneous => min_present([Some(one / (lit(4.0) * m * l)), noise_sqrt()]),
        }
    }

    /// Stepsize for iteration `k` whose gradient has delay `tau >= 1`.
    /// Only the adaptive rules depend on `tau`; none depends on `k` itself.
    pub fn gamma(&self, _k: u64, tau: u64) -> S {
        debug_assert!(tau >= 1, "delays start at 1");
        let tau = S::lit(tau.max(1) as f64);
        let c = &self.constants;
        let l = c.l;
        let base = self.gamma_max();
        match self.kind {
            ScheduleKind::AdaptiveConvex | ScheduleKind::AdaptiveNonconvex => {
                base.min(S::one() / (S::lit(4.0) * l * tau))
            }
            ScheduleKind::AdaptiveHeterogeneous => base.min(S::one() / (S::lit(8.0) * l * tau)),
            ScheduleKind::AdaptiveStronglyConvex => {
                let decay = (-(c.mu * tau) / (S::lit(4.0) * c.m() * l)).exp();
                base.min(decay / (S::lit(4.0) * l * tau))
            }
            _ => base,
        }
    }
}

/// Deterministic lower bounds on the stepsize sums the adaptive rules
/// guarantee on every delay sequence.
pub mod lower_bounds {
    use super::*;

    /// `sum_k gamma_hat_k >= min{K/(36LM), B sqrt(K)/(3 sigma)}`.
    pub fn adaptive_convex<S: Scalar>(c: &ProblemConstants<S>) -> S {
        let k = c.k();
        min_present([
            Some(k / (S::lit(36.0) * c.l * c.m())),
            c.b.and_then(|b| ratio(b * k.sqrt(), S::lit(3.0) * c.sigma)),
        ])
    }

    /// `sum_k gamma_hat_k >= K gamma_max / 9`.
    pub fn adaptive_nonconvex<S: Scalar>(schedule: &StepSchedule<S>) -> S {
        schedule.constants().k() * schedule.gamma_max() / S::lit(9.0)
    }

    /// `sum_k gamma_hat_k >= K gamma_max / 18`.
    pub fn adaptive_heterogeneous<S: Scalar>(schedule: &StepSchedule<S>) -> S {
        schedule.constants().k() * schedule.gamma_max() / S::lit(18.0)
    }

    /// Natural log of `max{K gamma_max/42, (gamma_max/7) exp(K mu gamma_max/504)}`,
    /// the bound on `sum_k gamma_hat_k P_k` (valid for K >= 3M).
    pub fn adaptive_strongly_convex_ln<S: Scalar>(schedule: &StepSchedule<S>) -> f64 {
        let c = schedule.constants();
        let gm = schedule.gamma_max().to_f64_lossy();
        let k = c.horizon as f64;
        let mu = c.mu.to_f64_lossy();
        (k * gm / 42.0).ln().max((gm / 7.0).ln() + k * mu * gm / 504.0)
    }
}

/// How the returned point is formed from the iterates `x_1..x_K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputRule {
    Last,
    UniformAverage,
    /// Weights proportional to `gamma_hat_k`.
    WeightedAverage,
    /// Weights proportional to `gamma_hat_k * P_k`, `P_k = exp(mu sum_{j<=k} gamma_hat_j)`.
    PHatWeighted,
    /// Random index with probability proportional to `gamma_hat_k`.
    SampleProportional,
}

/// Normalized weights over `x_1..x_K` for the averaging and sampling rules.
/// The P-weights are evaluated in log space and rescaled by `P_K`.
pub fn output_weights<S: Scalar>(rule: OutputRule, gamma_hat: &[S], mu: S) -> Result<Vec<f64>, OutputError> {
    let k = gamma_hat.len();
    let raw: Vec<f64> = match rule {
        OutputRule::Last => (0..k).map(|i| if i + 1 == k { 1.0 } else { 0.0 }).collect(),
        OutputRule::UniformAverage => vec![1.0; k],
        OutputRule::WeightedAverage | OutputRule::SampleProportional => {
            gamma_hat.iter().map(|g| g.to_f64_lossy()).collect()
        }
        OutputRule::PHatWeighted => {
            let mu = mu.to_f64_lossy();
            let mut cum = 0.0;
            let logs: Vec<f64> = gamma_hat
                .iter()
                .map(|g| {
                    let g = g.to_f64_lossy();
                    cum += g;
                    g.ln() + mu * cum
                })
                .collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logs.iter().map(|l| (l - top).exp()).collect()
        }
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(OutputError::ZeroWeight);
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Select the output point of a finished run according to `rule`.
///
/// The stepsize-weighted and uniform averages come from running sums kept
/// during the run; the other rules need the iterate history.
pub fn select_output<S: Scalar, R: Rng + ?Sized>(
    rule: OutputRule,
    run: &RunRecord<S>,
    mu: S,
    rng: &mut R,
) -> Result<Vec<S>, OutputError> {
    match rule {
        OutputRule::Last => Ok(run.final_x.clone()),
        OutputRule::WeightedAverage => {
            let total: S = run.gamma_hat.iter().copied().sum();
            if !(total > S::zero()) {
                return Err(OutputError::ZeroWeight);
            }
            Ok(run.weighted_sum.iter().map(|&v| v / total).collect())
        }
        OutputRule::UniformAverage => {
            let n = S::lit(run.horizon.max(1) as f64);
            Ok(run.uniform_sum.iter().map(|&v| v / n).collect())
        }
        OutputRule::PHatWeighted | OutputRule::SampleProportional => {
            let iterates = run.iterates.as_ref().ok_or(OutputError::MissingHistory(rule))?;
            let weights = output_weights(rule, &run.gamma_hat, mu)?;
            if rule == OutputRule::SampleProportional {
                let idx = sample_index(&weights, rng);
                return Ok(iterates[idx + 1].clone());
            }
            let mut out = vec![S::zero(); run.x0.len()];
            for (w, x) in weights.iter().zip(&iterates[1..]) {
                vecops::axpy(S::lit(*w), x, &mut out);
            }
            Ok(out)
        }
    }
}

/// Index drawn from normalized `weights`.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(l: f64, m: usize, k: u64) -> ProblemConstants<f64> {
        ProblemConstants {
            l,
            mu: 0.0,
            g: Some(1.0),
            sigma: 0.0,
            b: Some(1.0),
            delta: Some(1.0),
            workers: m,
            horizon: k,
        }
    }

    #[test]
    fn const_lipschitz_value() {
        let s = StepSchedule::new(ScheduleKind::ConstLipschitz, consts(1.0, 4, 100)).unwrap();
        assert!((s.gamma(1, 1) - 0.05).abs() < 1e-15);
        assert_eq!(s.gamma(7, 30), s.gamma(1, 1));
    }

    #[test]
    fn adaptive_convex_noise_free_drops_branch() {
        let s = StepSchedule::new(ScheduleKind::AdaptiveConvex, consts(1.0, 2, 10)).unwrap();
        assert_eq!(s.gamma(1, 1), 0.125);
        assert_eq!(s.gamma(5, 4), 1.0 / 16.0);
    }

    #[test]
    fn adaptive_nonconvex_large_delay_is_one_over_four_l_tau() {
        let s = StepSchedule::new(ScheduleKind::AdaptiveNonconvex, consts(2.0, 3, 30)).unwrap();
        for tau in [100_u64, 1_000, 1_000_000] {
            assert_eq!(s.gamma(1, tau), 1.0 / (8.0 * tau as f64));
        }
    }

    #[test]
    fn heterogeneous_uses_eighth() {
        let s = StepSchedule::new(ScheduleKind::AdaptiveHeterogeneous, consts(1.0, 1, 10)).unwrap();
        assert_eq!(s.gamma(1, 1), 0.125);
        assert_eq!(s.gamma(1, 2), 1.0 / 16.0);
    }

    #[test]
    fn strongly_convex_formula() {
        let mut c = consts(2.0, 2, 60);
        c.mu = 0.5;
        c.sigma = 1.0;
        let s = StepSchedule::new(ScheduleKind::AdaptiveStronglyConvex, c).unwrap();
        let third = 504.0 * (std::f64::consts::E + 0.25 * 3600.0 * 1.0 / 1.0).ln() / (0.5 * 60.0);
        let gm = (1.0_f64 / 32.0).min(third);
        assert_eq!(s.gamma_max(), gm);
        let tau = 3.0_f64;
        let expect = ((-0.5 * tau / 16.0).exp() / (8.0 * tau)).min(gm);
        assert!((s.gamma(1, 3) - expect).abs() < 1e-16);
    }

    #[test]
    fn lipschitz_smooth_formula() {
        let mut c = consts(1.0, 2, 100);
        c.sigma = 2.0;
        c.g = Some(3.0);
        let s = StepSchedule::new(ScheduleKind::LipschitzSmooth, c).unwrap();
        let expect = (0.25_f64)
            .min((1.0 / (4.0 * 100.0_f64)).sqrt())
            .min((1.0 / (4.0 * 9.0 * 100.0_f64)).cbrt());
        assert!((s.gamma(1, 1) - expect).abs() < 1e-16);
    }

    #[test]
    fn validation_errors() {
        let mut c = consts(1.0, 4, 100);
        c.g = None;
        assert!(matches!(
            StepSchedule::new(ScheduleKind::ConstLipschitz, c),
            Err(ScheduleError::MissingConstant { .. })
        ));
        assert!(matches!(
            StepSchedule::new(ScheduleKind::AdaptiveConvex, consts(1.0, 4, 3)),
            Err(ScheduleError::HorizonTooShort { .. })
        ));
        assert!(StepSchedule::new(ScheduleKind::AdaptiveStronglyConvex, consts(1.0, 4, 11)).is_err());
        assert!(StepSchedule::new(ScheduleKind::AdaptiveConvex, consts(0.0, 1, 3)).is_err());
        assert!(StepSchedule::constant(-1.0, consts(1.0, 1, 1)).is_err());
        assert!("bogus".parse::<ScheduleKind>().is_err());
        assert_eq!(
            "adaptive_convex".parse::<ScheduleKind>().unwrap(),
            ScheduleKind::AdaptiveConvex
        );
    }

    #[test]
    fn adaptive_rules_respect_delay_cap_and_monotonicity() {
        let mut c = consts(1.7, 5, 500);
        c.sigma = 0.3;
        c.mu = 0.2;
        for kind in ScheduleKind::ADAPTIVE {
            let s = StepSchedule::new(kind, c).unwrap();
            let cap = kind.delay_constant().unwrap();
            let mut last = f64::INFINITY;
            for tau in 1..2000 {
                let g = s.gamma(1, tau);
                assert!(g > 0.0);
                assert!(g <= cap / (c.l * tau as f64) * (1.0 + 1e-15));
                assert!(g <= last);
                last = g;
            }
        }
    }

    #[test]
    fn weights_degenerate_to_uniform() {
        let gh = [0.5_f64; 4];
        let w = output_weights(OutputRule::WeightedAverage, &gh, 0.0).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-16));
        let w = output_weights(OutputRule::PHatWeighted, &gh, 0.0).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-16));
        let w = output_weights(OutputRule::SampleProportional, &[1.0, 3.0], 0.0).unwrap();
        assert_eq!(w, vec![0.25, 0.75]);
        // P-weights increase along the run
        let w = output_weights(OutputRule::PHatWeighted, &gh, 1.0).unwrap();
        assert!(w.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn sampling_matches_weights() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let hits = (0..n).filter(|_| sample_index(&[0.25, 0.75], &mut rng) == 1).count();
        let p = hits as f64 / n as f64;
        // 5 standard errors
        assert!((p - 0.75).abs() < 5.0 * (0.75_f64 * 0.25 / n as f64).sqrt());
    }
}
