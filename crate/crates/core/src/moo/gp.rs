//! Gaussian-process surrogate with a Matérn-5/2 ARD kernel.
//!
//! Hyperparameters are fitted by maximizing the marginal likelihood penalized with a
//! half-Cauchy log-prior on the inverse squared lengthscales `rho_d = 1 / l_d^2`, which pushes
//! irrelevant input dimensions towards infinite lengthscale.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EvaluationRecord, MooError};
use crate::seed;

const SQRT5: f64 = 2.236_067_977_499_79;
const LOG_RHO_BOUNDS: (f64, f64) = (-11.5, 9.2);
const LOG_SIGNAL_MAX: f64 = 4.0;
const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Accuracy,
    Latency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpFitOptions {
    pub restarts: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub sparsity_tau: f64,
    /// Noise variance floor in standardized target units.
    pub noise_floor: f64,
    /// Signal variance floor in standardized target units.
    pub signal_floor: f64,
    pub seed: u64,
    /// Log-hyperparameters of a previous fit, tried as an extra starting point.
    pub warm_start: Option<Vec<f64>>,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions {
            restarts: 3,
            iterations: 120,
            learning_rate: 0.08,
            sparsity_tau: 0.5,
            noise_floor: 1e-10,
            signal_floor: 1e-6,
            seed: 0,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    pub lengthscales: Vec<f64>,
    /// In standardized target units; see [`GpSurrogate::prior_variance`].
    pub signal_variance: f64,
    pub noise_variance: f64,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    target_mean: f64,
    target_scale: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
}

fn matern52(r2: f64, signal: f64) -> f64 {
    let r = r2.max(0.0).sqrt();
    signal * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}

/// `d k / d (r^2)`.
fn matern52_dr2(r2: f64, signal: f64) -> f64 {
    let r = r2.max(0.0).sqrt();
    -5.0 / 6.0 * signal * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp()
}

fn scaled_dist2(a: &[f64], b: &[f64], rho: &[f64]) -> f64 {
    a.iter().zip(b).zip(rho).map(|((x, y), r)| r * (x - y) * (x - y)).sum()
}

fn gram(x: &[Vec<f64>], rho: &[f64], signal: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = signal;
        for j in 0..i {
            let v = matern52(scaled_dist2(&x[i], &x[j], rho), signal);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `k + (noise + jitter) I`, escalating the jitter until it succeeds.
fn factor(k: &DMatrix<f64>, noise: f64) -> Result<DMatrix<f64>, MooError> {
    let n = k.nrows();
    let mut jitter = 0.0;
    loop {
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += noise + jitter;
        }
        if let Some(c) = a.cholesky() {
            return Ok(c.l());
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > MAX_JITTER {
            return Err(MooError::NotPositiveDefinite);
        }
    }
}

fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("non-singular factor")
}

fn solve_chol(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let z = solve_lower(l, b);
    l.transpose().solve_upper_triangular(&z).expect("non-singular factor")
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: DVector<f64>,
    tau: f64,
    noise_floor: f64,
    signal_floor: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.x[0].len()
    }

    fn clamp(&self, theta: &mut [f64]) {
        let d = self.dim();
        for t in &mut theta[..d] {
            *t = t.clamp(LOG_RHO_BOUNDS.0, LOG_RHO_BOUNDS.1);
        }
        theta[d] = theta[d].clamp(self.signal_floor.ln(), LOG_SIGNAL_MAX);
        theta[d + 1] = theta[d + 1].clamp(self.noise_floor.ln(), 0.0);
    }

    /// Negative log posterior (up to a constant) and its gradient in log-parameters.
    fn evaluate(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let d = self.dim();
        let n = self.x.len();
        let rho: Vec<f64> = theta[..d].iter().map(|t| t.exp()).collect();
        let signal = theta[d].exp();
        let noise = theta[d + 1].exp();
        let k = gram(self.x, &rho, signal);
        let l = factor(&k, noise).ok()?;
        let alpha = solve_chol(&l, &self.y);
        let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let nll = 0.5 * self.y.dot(&alpha) + 0.5 * logdet;
        let penalty: f64 = rho.iter().map(|r| (1.0 + (r / self.tau).powi(2)).ln()).sum();

        // W = alpha alpha^T - K^-1
        let identity = DMatrix::<f64>::identity(n, n);
        let z = l.solve_lower_triangular(&identity).expect("non-singular factor");
        let kinv = z.transpose() * &z;
        let w = &alpha * alpha.transpose() - kinv;

        let mut grad = vec![0.0; d + 2];
        for i in 0..n {
            for j in 0..i {
                let r2 = scaled_dist2(&self.x[i], &self.x[j], &rho);
                let m = 2.0 * w[(i, j)] * matern52_dr2(r2, signal);
                for (g, ((a, b), r)) in grad[..d].iter_mut().zip(self.x[i].iter().zip(&self.x[j]).zip(&rho)) {
                    *g += m * r * (a - b) * (a - b);
                }
            }
        }
        for g in &mut grad[..d] {
            *g *= -0.5;
        }
        // dK/dlog(signal) is the noiseless gram
        let mut gs = 0.0;
        for i in 0..n {
            for j in 0..n {
                gs += w[(i, j)] * k[(i, j)];
            }
        }
        grad[d] = -0.5 * gs;
        grad[d + 1] = -0.5 * noise * w.trace();
        for (g, r) in grad[..d].iter_mut().zip(&rho) {
            let q = (r / self.tau).powi(2);
            *g += 2.0 * q / (1.0 + q);
        }
        let value = nll + penalty;
        value.is_finite().then_some((value, grad))
    }

    /// The posterior is nearly flat in the noise variance once the data are fitted, so
    /// gradient steps crawl there. A log-spaced scan down to the floor finishes the job.
    fn polish_noise(&self, value: f64, theta: Vec<f64>) -> Vec<f64> {
        let d = self.dim();
        let (lo, hi) = (self.noise_floor.ln(), (theta[d + 1] + 1.0).min(0.0));
        let steps = 48;
        let mut best = (value, theta.clone());
        for s in 0..=steps {
            let mut t = theta.clone();
            t[d + 1] = lo + (hi - lo) * s as f64 / steps as f64;
            if let Some((v, _)) = self.evaluate(&t) {
                if v < best.0 {
                    best = (v, t);
                }
            }
        }
        best.1
    }

    fn optimize(&self, mut theta: Vec<f64>, iterations: usize, lr: f64) -> (f64, Vec<f64>) {
        self.clamp(&mut theta);
        let mut best = match self.evaluate(&theta) {
            Some((v, _)) => (v, theta.clone()),
            None => (f64::INFINITY, theta.clone()),
        };
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        for t in 1..=iterations {
            let Some((value, grad)) = self.evaluate(&theta) else { break };
            if value < best.0 {
                best = (value, theta.clone());
            }
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                theta[i] -= lr * mh / (vh.sqrt() + eps);
            }
            self.clamp(&mut theta);
        }
        if let Some((value, _)) = self.evaluate(&theta) {
            if value < best.0 {
                best = (value, theta);
            }
        }
        best
    }
}

/// Fits a surrogate to raw inputs and targets.
pub fn fit_gp(inputs: &[Vec<f64>], targets: &[f64], options: &GpFitOptions) -> Result<GpSurrogate, MooError> {
    if inputs.len() < 2 || targets.len() != inputs.len() {
        return Err(MooError::TooFewObservations { needed: 2, got: inputs.len().min(targets.len()) });
    }
    let d = inputs[0].len();
    if let Some(bad) = inputs.iter().find(|x| x.len() != d) {
        return Err(MooError::Dimension { expected: d, got: bad.len() });
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let sd = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();

    if sd < 1e-12 * mean.abs().max(1.0) {
        // constant targets: shrink the prior to its floor
        let theta: Vec<f64> =
            std::iter::repeat(0.0).take(d).chain([options.signal_floor.ln(), options.noise_floor.ln()]).collect();
        return GpSurrogate::build(inputs.to_vec(), vec![0.0; targets.len()], mean, 1.0, &theta);
    }

    let y: Vec<f64> = targets.iter().map(|t| (t - mean) / sd).collect();
    let problem = Problem {
        x: inputs,
        y: DVector::from_vec(y.clone()),
        tau: options.sparsity_tau,
        noise_floor: options.noise_floor,
        signal_floor: options.signal_floor,
    };
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = options.warm_start.as_ref().filter(|w| w.len() == d + 2) {
        starts.push(w.clone());
    }
    starts.push(std::iter::repeat(0.0).take(d).chain([0.0, (1e-2f64).ln()]).collect());
    starts.push(std::iter::repeat((0.1f64).ln()).take(d).chain([0.0, options.noise_floor.ln()]).collect());
    let mut rng = seed::rng(options.seed, "gp/restarts");
    while starts.len() < options.restarts.max(1) + usize::from(options.warm_start.is_some()) {
        let mut t: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..2.5)).collect();
        t.push(rng.random_range(-1.0..1.0));
        t.push(rng.random_range(options.noise_floor.ln()..-2.0));
        starts.push(t);
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in starts {
        let (v, theta) = problem.optimize(s, options.iterations, options.learning_rate);
        if best.as_ref().is_none_or(|b| v < b.0) {
            best = Some((v, theta));
        }
    }
    let (value, theta) = best.expect("at least one start");
    if !value.is_finite() {
        return Err(MooError::NotPositiveDefinite);
    }
    let theta = problem.polish_noise(value, theta);
    GpSurrogate::build(inputs.to_vec(), y, mean, sd, &theta)
}

/// Fits a surrogate for one objective from the usable records.
pub fn fit_gp_records(records: &[EvaluationRecord], objective: Objective, options: &GpFitOptions) -> Result<GpSurrogate, MooError> {
    let usable: Vec<&EvaluationRecord> = records.iter().filter(|r| r.is_usable()).collect();
    let x: Vec<Vec<f64>> = usable.iter().map(|r| r.encoded.clone()).collect();
    let y: Vec<f64> = usable
        .iter()
        .map(|r| {
            let p = r.objectives.expect("usable");
            match objective {
                Objective::Accuracy => p.accuracy,
                Objective::Latency => p.latency_ms,
            }
        })
        .collect();
    fit_gp(&x, &y, options)
}

impl GpSurrogate {
    fn build(inputs: Vec<Vec<f64>>, targets: Vec<f64>, mean: f64, scale: f64, theta: &[f64]) -> Result<Self, MooError> {
        let d = inputs[0].len();
        let rho: Vec<f64> = theta[..d].iter().map(|t| t.exp()).collect();
        let signal = theta[d].exp();
        let noise = theta[d + 1].exp();
        let k = gram(&inputs, &rho, signal);
        let chol = factor(&k, noise)?;
        let alpha = solve_chol(&chol, &DVector::from_vec(targets.clone()));
        Ok(GpSurrogate {
            lengthscales: rho.iter().map(|r| 1.0 / r.sqrt()).collect(),
            signal_variance: signal,
            noise_variance: noise,
            inputs,
            targets,
            target_mean: mean,
            target_scale: scale,
            chol,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn prior_mean(&self) -> f64 {
        self.target_mean
    }

    /// Prior variance in target units.
    pub fn prior_variance(&self) -> f64 {
        self.signal_variance * self.target_scale * self.target_scale
    }

    /// Log-hyperparameters, usable as a warm start.
    pub fn log_hyperparameters(&self) -> Vec<f64> {
        self.lengthscales
            .iter()
            .map(|l| -2.0 * l.ln())
            .chain([self.signal_variance.ln(), self.noise_variance.ln()])
            .collect()
    }

    fn rho(&self) -> Vec<f64> {
        self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect()
    }

    fn cross(&self, x: &[f64], rho: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|xi| matern52(scaled_dist2(xi, x, rho), self.signal_variance)))
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), MooError> {
        if x.len() != self.dim() {
            return Err(MooError::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// Posterior mean and variance (target units) of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64), MooError> {
        self.check_dim(x)?;
        let rho = self.rho();
        let ks = self.cross(x, &rho);
        let mean = ks.dot(&self.alpha);
        let v = solve_lower(&self.chol, &ks);
        let var = (self.signal_variance - v.dot(&v)).max(0.0);
        Ok((self.target_mean + self.target_scale * mean, var * self.target_scale * self.target_scale))
    }

    /// Joint posterior mean vector and covariance matrix (target units) at `xs`.
    pub fn posterior_joint(&self, xs: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>), MooError> {
        for x in xs {
            self.check_dim(x)?;
        }
        let rho = self.rho();
        let m = xs.len();
        let n = self.inputs.len();
        let mut ks = DMatrix::zeros(n, m);
        for (j, x) in xs.iter().enumerate() {
            ks.set_column(j, &self.cross(x, &rho));
        }
        let mean: Vec<f64> = (ks.transpose() * &self.alpha).iter().map(|v| self.target_mean + self.target_scale * v).collect();
        let v = self.chol.solve_lower_triangular(&ks).expect("non-singular factor");
        let prior = gram(xs, &rho, self.signal_variance);
        let s2 = self.target_scale * self.target_scale;
        let mut cov = (prior - v.transpose() * v) * s2;
        for i in 0..m {
            cov[(i, i)] = cov[(i, i)].max(0.0);
        }
        Ok((mean, cov))
    }

    /// Same hyperparameters, with one more observation appended (used for fantasies).
    pub fn condition_on(&self, x: &[f64], y: f64) -> Result<GpSurrogate, MooError> {
        self.check_dim(x)?;
        let mut inputs = self.inputs.clone();
        inputs.push(x.to_vec());
        let mut targets = self.targets.clone();
        targets.push((y - self.target_mean) / self.target_scale);
        GpSurrogate::build(inputs, targets, self.target_mean, self.target_scale, &self.log_hyperparameters())
    }
}
