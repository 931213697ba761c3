//! Synthetic objectives with analytically known constants.
//!
//! Every problem is a finite sum over rows `(a_i, b_i)`:
//!
//! * quadratic: `F(x) = ||Ax - b||^2 / (2n)`
//! * robust: `F(x) = (1/n) sum_i rho(a_i.x - b_i)` with `rho(t) = t^2 / (1 + t^2)`
//!
//! optionally with per-worker linear shifts `c_m` (`F_m = F + c_m.x`,
//! `sum_m c_m = 0`). Constants are computed once in `f64` at construction.

use std::io::BufRead;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, Domain};
use crate::scalar::{vecops, Scalar};
use crate::schedules::ProblemConstants;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("need at least one sample row")]
    NoSamples,
    #[error("row {row} has {got} features, expected {expected}")]
    RaggedRow { row: usize, got: usize, expected: usize },
    #[error("noise level must be finite and non-negative, got {0}")]
    BadSigma(f64),
    #[error("heterogeneity zeta must be finite and non-negative, got {0}")]
    BadZeta(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("dataset line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Quadratic,
    /// `rho(t) = t^2 / (1 + t^2)`, bounded and non-convex.
    Robust,
}

/// How a stochastic gradient is formed from the full gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseMode {
    /// `g = grad F + sigma z / sqrt(d)`, `z ~ N(0, I)`, so `E||g - grad F||^2 = sigma^2`.
    Additive { sigma: f64 },
    /// Gradient of one uniformly sampled row.
    RowSample,
}

// sup |rho'| is attained where rho''(t) = (2 - 6t^2)/(1+t^2)^3 vanishes,
// t = 1/sqrt(3), giving 2t/(1+t^2)^2 = 3 sqrt(3) / 8.
pub const ROBUST_SUP_D1: f64 = 0.649_519_052_838_329; // 3 * sqrt(3) / 8
                                                      // |rho''| is largest at t = 0 where it equals 2 (at t^2 = 1 it is -1/2).
pub const ROBUST_SUP_D2: f64 = 2.0;

pub fn robust_rho(t: f64) -> f64 {
    t * t / (1.0 + t * t)
}

fn rho<S: Scalar>(t: S) -> S {
    let t2 = t * t;
    t2 / (S::one() + t2)
}

fn rho_d1<S: Scalar>(t: S) -> S {
    let q = S::one() + t * t;
    (t + t) / (q * q)
}

/// Rows per dimension for the generated least-squares instances.
pub const DEFAULT_ROWS_PER_DIM: usize = 4;

#[derive(Debug, Clone)]
pub struct Problem<S> {
    d: usize,
    n: usize,
    /// Row-major `n x d`.
    a: Vec<S>,
    b: Vec<S>,
    loss: Loss,
    noise: NoiseMode,
    /// `A^T A / n` and `A^T b / n`, quadratic loss only.
    hess: Vec<S>,
    lin: Vec<S>,
    shifts: Option<Vec<Vec<S>>>,
    zeta: S,
    l: S,
    mu: S,
    g: Option<S>,
    sigma: S,
    x0: Vec<S>,
    x_star: Option<Vec<S>>,
    f_star: Option<S>,
}

fn to_s<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::lit(x)).collect()
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn unit_vector<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = vecops::norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn check_sigma(noise: &NoiseMode) -> Result<(), ProblemError> {
    if let NoiseMode::Additive { sigma } = *noise {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(ProblemError::BadSigma(sigma));
        }
    }
    Ok(())
}

impl<S: Scalar> Problem<S> {
    /// Least squares on Gaussian data `A ~ N(0,1)^{n x d}`, `b ~ N(0,1)^n`.
    pub fn least_squares(d: usize, n: usize, noise: NoiseMode, seed: u64) -> Result<Self, ProblemError> {
        if d == 0 {
            return Err(ProblemError::ZeroDimension);
        }
        if n == 0 {
            return Err(ProblemError::NoSamples);
        }
        let mut rng = substream(seed, Domain::Data, 0);
        let a = gaussian_matrix(n, d, &mut rng);
        let b = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        Self::quadratic_from_matrix(a, b, noise, seed)
    }

    /// Least squares whose Hessian `A^T A / n` has exactly the eigenvalues
    /// `spectrum` (random eigenbasis, `n = d`), with minimizer at distance
    /// `radius` from the origin and `F* = 0`.
    pub fn least_squares_with_spectrum(
        spectrum: &[f64],
        radius: f64,
        noise: NoiseMode,
        seed: u64,
    ) -> Result<Self, ProblemError> {
        let d = spectrum.len();
        if d == 0 {
            return Err(ProblemError::ZeroDimension);
        }
        if spectrum.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(ProblemError::Invalid("spectrum must be finite and non-negative".into()));
        }
        let mut rng = substream(seed, Domain::Data, 0);
        let q = gaussian_matrix(d, d, &mut rng).qr().q();
        let scale = DMatrix::from_diagonal(&DVector::from_iterator(
            d,
            spectrum.iter().map(|&l| (l * d as f64).sqrt()),
        ));
        let a = scale * q.transpose();
        let x_star = DVector::from_vec(unit_vector(d, &mut rng)) * radius;
        let b = &a * &x_star;
        Self::quadratic_from_matrix(a, b, noise, seed)
    }

    /// Least squares on caller-supplied rows.
    pub fn from_data(
        rows: Vec<Vec<f64>>,
        targets: Vec<f64>,
        noise: NoiseMode,
        seed: u64,
    ) -> Result<Self, ProblemError> {
        let n = rows.len();
        if n == 0 {
            return Err(ProblemError::NoSamples);
        }
        if targets.len() != n {
            return Err(ProblemError::Invalid(format!(
                "{} rows but {} targets",
                n,
                targets.len()
            )));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(ProblemError::ZeroDimension);
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(ProblemError::RaggedRow {
                    row: i,
                    got: r.len(),
                    expected: d,
                });
            }
        }
        let a = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        Self::quadratic_from_matrix(a, DVector::from_vec(targets), noise, seed)
    }

    /// Least squares on a dense CSV dataset: one sample per line, features
    /// followed by the target. A non-numeric first line is taken as a header.
    pub fn from_csv<R: BufRead>(input: R, noise: NoiseMode, seed: u64) -> Result<Self, ProblemError> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parsed: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            match parsed {
                Ok(mut vals) => {
                    if vals.len() < 2 {
                        return Err(ProblemError::Csv {
                            line: i + 1,
                            msg: "need at least one feature and a target".into(),
                        });
                    }
                    if vals.iter().any(|v| !v.is_finite()) {
                        return Err(ProblemError::Csv {
                            line: i + 1,
                            msg: "non-finite value".into(),
                        });
                    }
                    targets.push(vals.pop().expect("len >= 2"));
                    rows.push(vals);
                }
                Err(_) if i == 0 => continue,
                Err(e) => {
                    return Err(ProblemError::Csv {
                        line: i + 1,
                        msg: e.to_string(),
                    })
                }
            }
        }
        Self::from_data(rows, targets, noise, seed).map_err(|e| match e {
            ProblemError::RaggedRow { row, got, expected } => ProblemError::Csv {
                line: row + 1,
                msg: format!("{got} features, expected {expected}"),
            },
            e => e,
        })
    }

    fn quadratic_from_matrix(
        a: DMatrix<f64>,
        b: DVector<f64>,
        noise: NoiseMode,
        seed: u64,
    ) -> Result<Self, ProblemError> {
        check_sigma(&noise)?;
        let (n, d) = a.shape();
        let nf = n as f64;
        let hess = a.transpose() * &a / nf;
        let lin = a.transpose() * &b / nf;
        let eig = hess.clone().symmetric_eigen();
        let l = eig.eigenvalues.max().max(0.0);
        let mut mu = eig.eigenvalues.min().max(0.0);
        if mu <= l * 1e-12 {
            mu = 0.0;
        }
        // minimum-norm least-squares solution, defined even when A^T A is singular
        let x_star = a
            .clone()
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| ProblemError::Invalid(e.to_string()))?;
        let resid = &a * &x_star - &b;
        let f_star = resid.norm_squared() / (2.0 * nf);

        let mut p = Problem {
            d,
            n,
            a: to_s(a.transpose().as_slice()),
            b: to_s(b.as_slice()),
            loss: Loss::Quadratic,
            noise,
            hess: to_s(hess.as_slice()),
            lin: to_s(lin.as_slice()),
            shifts: None,
            zeta: S::zero(),
            l: S::lit(l),
            mu: S::lit(mu),
            g: None,
            sigma: S::zero(),
            x0: vec![S::zero(); d],
            x_star: Some(to_s(x_star.as_slice())),
            f_star: Some(S::lit(f_star)),
        };
        p.sigma = match noise {
            NoiseMode::Additive { sigma } => S::lit(sigma),
            NoiseMode::RowSample => p.probe_row_sigma(seed),
        };
        Ok(p)
    }

    /// Bounded non-convex regression with the robust loss on Gaussian data.
    ///
    /// `G = max_i ||a_i|| sup|rho'|`, `L = max_i ||a_i||^2 sup|rho''|`.
    /// `F >= 0`, so `Delta = F(x0)` bounds the initial suboptimality.
    pub fn bounded_nonconvex(d: usize, seed: u64) -> Result<Self, ProblemError> {
        Self::bounded_nonconvex_with_noise(d, NoiseMode::RowSample, seed)
    }

    pub fn bounded_nonconvex_with_noise(d: usize, noise: NoiseMode, seed: u64) -> Result<Self, ProblemError> {
        if d == 0 {
            return Err(ProblemError::ZeroDimension);
        }
        check_sigma(&noise)?;
        let n = DEFAULT_ROWS_PER_DIM * d;
        let mut rng = substream(seed, Domain::Data, 0);
        let a = gaussian_matrix(n, d, &mut rng);
        let x_true: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b = DVector::from_fn(n, |i, _| {
            let clean: f64 = (0..d).map(|j| a[(i, j)] * x_true[j]).sum();
            clean + 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        });
        let max_row = (0..n).map(|i| a.row(i).norm()).fold(0.0, f64::max);
        let g = max_row * ROBUST_SUP_D1;
        let sigma = match noise {
            NoiseMode::Additive { sigma } => sigma,
            // ||g_i - grad F||^2 averages to at most E||g_i||^2 <= G^2
            NoiseMode::RowSample => g,
        };
        Ok(Problem {
            d,
            n,
            a: to_s(a.transpose().as_slice()),
            b: to_s(b.as_slice()),
            loss: Loss::Robust,
            noise,
            hess: Vec::new(),
            lin: Vec::new(),
            shifts: None,
            zeta: S::zero(),
            l: S::lit(max_row * max_row * ROBUST_SUP_D2),
            mu: S::zero(),
            g: Some(S::lit(g)),
            sigma: S::lit(sigma),
            x0: vec![S::zero(); d],
            x_star: None,
            f_star: None,
        })
    }

    /// Noise-free least squares with `M` heterogeneous local objectives
    /// `F_m = F + c_m.x`, `||c_m|| = zeta`, `sum_m c_m = 0`.
    pub fn heterogeneous_quadratics(d: usize, workers: usize, zeta: f64, seed: u64) -> Result<Self, ProblemError> {
        Self::least_squares(d, DEFAULT_ROWS_PER_DIM * d, NoiseMode::Additive { sigma: 0.0 }, seed)?
            .with_heterogeneity(workers, zeta, seed)
    }

    /// Attach per-worker shifts. Workers are paired with opposite shifts along
    /// random directions; an odd `M >= 3` uses one triple at 120 degrees.
    /// `zeta = 0` leaves the problem homogeneous.
    pub fn with_heterogeneity(mut self, workers: usize, zeta: f64, seed: u64) -> Result<Self, ProblemError> {
        if !(zeta >= 0.0 && zeta.is_finite()) {
            return Err(ProblemError::BadZeta(zeta));
        }
        if workers == 0 {
            return Err(ProblemError::Invalid("need at least one worker".into()));
        }
        if zeta == 0.0 {
            self.shifts = None;
            self.zeta = S::zero();
            return Ok(self);
        }
        if workers == 1 {
            return Err(ProblemError::Invalid(
                "a single worker cannot carry a non-zero shift with zero mean".into(),
            ));
        }
        let odd = workers % 2 == 1;
        if odd && self.d < 2 {
            return Err(ProblemError::Invalid(
                "odd worker counts need d >= 2 for zero-mean shifts".into(),
            ));
        }
        let mut rng = substream(seed, Domain::Data, 1);
        let mut shifts: Vec<Vec<f64>> = Vec::with_capacity(workers);
        let mut remaining = workers;
        if odd {
            let u = unit_vector(self.d, &mut rng);
            let mut v = unit_vector(self.d, &mut rng);
            let proj = vecops::dot(&u, &v);
            vecops::axpy(-proj, &u, &mut v);
            let vn = vecops::norm(&v);
            v.iter_mut().for_each(|x| *x /= vn);
            let h = 3.0_f64.sqrt() / 2.0;
            for (cu, cv) in [(1.0, 0.0), (-0.5, h), (-0.5, -h)] {
                shifts.push((0..self.d).map(|j| zeta * (cu * u[j] + cv * v[j])).collect());
            }
            remaining -= 3;
        }
        for _ in 0..remaining / 2 {
            let u = unit_vector(self.d, &mut rng);
            shifts.push(u.iter().map(|x| zeta * x).collect());
            shifts.push(u.iter().map(|x| -zeta * x).collect());
        }
        self.shifts = Some(shifts.iter().map(|c| to_s(c)).collect());
        self.zeta = S::lit(zeta);
        Ok(self)
    }

    /// Move the starting point; `B` and `Delta` follow it.
    pub fn with_initial_point(mut self, x0: Vec<S>) -> Result<Self, ProblemError> {
        if x0.len() != self.d {
            return Err(ProblemError::Invalid(format!(
                "initial point has dimension {}, expected {}",
                x0.len(),
                self.d
            )));
        }
        self.x0 = x0;
        Ok(self)
    }

    /// `sigma^2` for row sampling: the largest exact noise variance over a
    /// probe set (the start, the minimizer and random points around it).
    fn probe_row_sigma(&self, seed: u64) -> S {
        let mut rng = substream(seed, Domain::Data, 2);
        let center: Vec<f64> = self
            .x_star
            .as_ref()
            .map(|x| x.iter().map(|v| v.to_f64_lossy()).collect())
            .unwrap_or_else(|| vec![0.0; self.d]);
        let radius = 2.0 * vecops::norm(&center).max(1.0);
        let mut probes: Vec<Vec<S>> = vec![self.x0.clone(), to_s(&center)];
        for _ in 0..32 {
            let u = unit_vector(self.d, &mut rng);
            let r = radius * rng.random::<f64>();
            probes.push((0..self.d).map(|j| S::lit(center[j] + r * u[j])).collect());
        }
        probes
            .iter()
            .map(|x| self.row_sample_variance(x))
            .fold(S::zero(), |a, b| a.max(b))
            .sqrt()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn noise(&self) -> NoiseMode {
        self.noise
    }

    pub fn x0(&self) -> &[S] {
        &self.x0
    }

    pub fn x_star(&self) -> Option<&[S]> {
        self.x_star.as_deref()
    }

    pub fn f_star(&self) -> Option<S> {
        self.f_star
    }

    pub fn l(&self) -> S {
        self.l
    }

    pub fn mu(&self) -> S {
        self.mu
    }

    pub fn sigma(&self) -> S {
        self.sigma
    }

    pub fn zeta(&self) -> S {
        self.zeta
    }

    pub fn is_heterogeneous(&self) -> bool {
        self.shifts.is_some()
    }

    /// `c_m`, or `None` for homogeneous problems.
    pub fn shift(&self, worker: usize) -> Option<&[S]> {
        self.shifts.as_ref().map(|s| s[worker % s.len()].as_slice())
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.a[i * self.d..(i + 1) * self.d]
    }

    fn residual(&self, i: usize, x: &[S]) -> S {
        vecops::dot(self.row(i), x) - self.b[i]
    }

    /// `||x0 - x*||` when a minimizer is known.
    pub fn initial_distance(&self) -> Option<S> {
        self.x_star.as_ref().map(|xs| vecops::dist(&self.x0, xs))
    }

    /// `F(x0) - F*`, or `F(x0)` (valid since `F >= 0`) without a known optimum.
    pub fn initial_gap(&self) -> S {
        self.fgap(&self.x0)
    }

    /// Constants for a run with `workers` workers and horizon `horizon`.
    pub fn constants(&self, workers: usize, horizon: u64) -> ProblemConstants<S> {
        ProblemConstants {
            l: self.l,
            mu: self.mu,
            g: self.g,
            sigma: self.sigma,
            b: self.initial_distance(),
            delta: Some(self.initial_gap()),
            workers,
            horizon,
        }
    }

    /// `F(x)`; with shifts this is also the average of the local objectives.
    pub fn value(&self, x: &[S]) -> S {
        let n = S::lit(self.n as f64);
        let total: S = (0..self.n)
            .map(|i| {
                let r = self.residual(i, x);
                match self.loss {
                    Loss::Quadratic => r * r,
                    Loss::Robust => rho(r),
                }
            })
            .sum();
        match self.loss {
            Loss::Quadratic => total / (n + n),
            Loss::Robust => total / n,
        }
    }

    /// `F(x) - F*`. For least squares this is `(x-x*)^T H (x-x*) / 2`, which
    /// avoids cancellation near the optimum.
    pub fn fgap(&self, x: &[S]) -> S {
        match (&self.x_star, self.loss) {
            (Some(xs), Loss::Quadratic) => {
                let e = vecops::sub(x, xs);
                let he = self.hess_apply(&e);
                vecops::dot(&e, &he) / S::lit(2.0)
            }
            _ => self.value(x) - self.f_star.unwrap_or_else(S::zero),
        }
    }

    fn hess_apply(&self, x: &[S]) -> Vec<S> {
        self.hess.chunks(self.d).map(|row| vecops::dot(row, x)).collect()
    }

    /// `grad F(x)` into `out`.
    pub fn grad_into(&self, x: &[S], out: &mut [S]) {
        match self.loss {
            Loss::Quadratic => {
                for ((o, row), &c) in out.iter_mut().zip(self.hess.chunks(self.d)).zip(&self.lin) {
                    *o = vecops::dot(row, x) - c;
                }
            }
            Loss::Robust => {
                out.iter_mut().for_each(|o| *o = S::zero());
                let inv_n = S::one() / S::lit(self.n as f64);
                for i in 0..self.n {
                    let w = rho_d1(self.residual(i, x)) * inv_n;
                    vecops::axpy(w, self.row(i), out);
                }
            }
        }
    }

    pub fn grad(&self, x: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.d];
        self.grad_into(x, &mut out);
        out
    }

    pub fn grad_norm2(&self, x: &[S]) -> S {
        vecops::norm2(&self.grad(x))
    }

    /// `grad F_m(x) = grad F(x) + c_m`.
    pub fn local_grad(&self, worker: usize, x: &[S]) -> Vec<S> {
        let mut g = self.grad(x);
        if let Some(c) = self.shift(worker) {
            vecops::axpy(S::one(), c, &mut g);
        }
        g
    }

    /// Gradient of row `i`'s loss term.
    pub fn row_grad(&self, i: usize, x: &[S]) -> Vec<S> {
        let r = self.residual(i, x);
        let w = match self.loss {
            Loss::Quadratic => r,
            Loss::Robust => rho_d1(r),
        };
        self.row(i).iter().map(|&v| w * v).collect()
    }

    /// Stochastic gradient of worker `worker`'s objective at `x`, drawing
    /// noise from `rng`.
    pub fn stoch_grad<R: Rng + ?Sized>(&self, x: &[S], worker: usize, rng: &mut R) -> Vec<S> {
        let mut g = match self.noise {
            NoiseMode::Additive { sigma } => {
                let mut g = self.grad(x);
                if sigma > 0.0 {
                    let scale = sigma / (self.d as f64).sqrt();
                    for gi in g.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *gi = *gi + S::lit(scale * z);
                    }
                }
                g
            }
            NoiseMode::RowSample => {
                let i = rng.random_range(0..self.n);
                self.row_grad(i, x)
            }
        };
        if let Some(c) = self.shift(worker) {
            vecops::axpy(S::one(), c, &mut g);
        }
        g
    }

    /// Exact `E||g - grad F||^2` for row sampling at `x`.
    pub fn row_sample_variance(&self, x: &[S]) -> S {
        let full = self.grad(x);
        let total: S = (0..self.n)
            .map(|i| vecops::norm2(&vecops::sub(&self.row_grad(i, x), &full)))
            .sum();
        total / S::lit(self.n as f64)
    }

    /// Exact `E||g - grad F_m||^2` at `x` under the configured noise.
    pub fn noise_variance(&self, x: &[S]) -> S {
        match self.noise {
            NoiseMode::Additive { sigma } => S::lit(sigma * sigma),
            NoiseMode::RowSample => self.row_sample_variance(x),
        }
    }
}
