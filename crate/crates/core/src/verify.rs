//! Monte-Carlo estimates of incremental moment decay.
//!
//! Both trajectories of a pair are driven by the same noise realization.
//! Per-step estimates of `E[d^p(x′_k, x″_k)] / d^p(x′_0, x″_0)` are averaged
//! over paths; a log-linear least-squares fit gives the empirical rate
//! `λ̂ = exp(slope / p)` and prefactor `â = exp(intercept / p)`.
//!
//! Standard errors come from batch means over blocks of [`BATCH_SIZE`]
//! paths, and the slope error from a jackknife over those batches.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matcore::SymMatrix;
use crate::process::{sample_path_with, stream_rng, ProcessError, ProcessModel};
use crate::sysmodel::{simulate, SystemError, SystemModel, Trajectory};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("every pair starts at zero distance")]
    DegeneratePairs,
    #[error("moment order must be 1 or 2, got {0}")]
    InvalidOrder(u32),
    #[error("horizon must be at least {MIN_HORIZON}, got {0}")]
    HorizonTooShort(usize),
    #[error("need at least one path")]
    NoPaths,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Process(#[from] ProcessError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

pub const BATCH_SIZE: usize = 100;
pub const MIN_HORIZON: usize = 5;
/// Default number of leading steps left out of the regression.
pub const FIT_SKIP: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Distance {
    Euclidean,
    ConstantMetric(SymMatrix),
}

impl Distance {
    fn squared(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let d = a - b;
        match self {
            Distance::Euclidean => d.norm_squared(),
            Distance::ConstantMetric(p) => p.quad_form(&d).max(0.0),
        }
    }

    fn power(&self, a: &DVector<f64>, b: &DVector<f64>, p: u32) -> f64 {
        let d2 = self.squared(a, b);
        if p == 2 {
            d2
        } else {
            d2.sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub k: i64,
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// `λ̂`.
    pub rate: f64,
    /// Standard error of `λ̂`.
    pub rate_stderr: f64,
    /// `â`.
    pub prefactor: f64,
    /// Slope of `log E` against `k`, i.e. `p · log λ̂`.
    pub slope: f64,
    pub slope_stderr: f64,
    pub points_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub order: u32,
    pub distance: Distance,
    /// Whether estimates are divided by the initial `d^p`.
    pub normalized: bool,
    pub points: Vec<DecayPoint>,
    pub fit: Option<RateFit>,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub initial_mode: Option<usize>,
    pub n_paths: usize,
    pub horizon: usize,
    pub seed: u64,
    pub fit_skip: usize,
    /// First step from which every estimate is exactly zero.
    pub zero_from: Option<i64>,
}

impl VerificationReport {
    pub fn rate(&self) -> Option<f64> {
        self.fit.map(|f| f.rate)
    }

    /// Fitted rate, or `0` when the estimates reach exactly zero (finite-time extinction).
    pub fn effective_rate(&self) -> Option<f64> {
        self.rate().or(self.zero_from.map(|_| 0.0))
    }

    pub fn estimate_at(&self, k: i64) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).map(|p| p.estimate)
    }

    /// CSV with header `k,estimate,stderr`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,estimate,stderr")?;
        for p in &self.points {
            writeln!(w, "{},{:e},{:e}", p.k, p.estimate, p.stderr)?;
        }
        Ok(())
    }

    /// Plain-text summary block.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("moment order    : {}\n", self.order));
        s.push_str(&format!("paths           : {}\n", self.n_paths));
        s.push_str(&format!("horizon         : {}\n", self.horizon));
        s.push_str(&format!("seed            : {}\n", self.seed));
        if let Some(m) = self.initial_mode {
            s.push_str(&format!("initial mode    : {}\n", m + 1));
        }
        for (a, b) in &self.pairs {
            s.push_str(&format!("pair            : {a:?} / {b:?}\n"));
        }
        match &self.fit {
            Some(f) => {
                s.push_str(&format!("fitted rate     : {:.6} +/- {:.2e}\n", f.rate, f.rate_stderr));
                s.push_str(&format!("prefactor       : {:.4}\n", f.prefactor));
                s.push_str(&format!("fit points      : {} (first {} steps skipped)\n", f.points_used, self.fit_skip));
            }
            None => match self.zero_from {
                Some(k) => s.push_str(&format!("fitted rate     : none (exactly zero from k = {k})\n")),
                None => s.push_str("fitted rate     : none (no step above 10 standard errors)\n"),
            },
        }
        s
    }
}

/// Common inputs of the Monte-Carlo estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McSettings {
    pub horizon: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub k0: i64,
    /// Mode preceding the first step, for finite chains.
    pub initial_mode: Option<usize>,
    /// Leading steps left out of the regression.
    pub fit_skip: usize,
}

impl McSettings {
    pub fn new(horizon: usize, n_paths: usize, seed: u64) -> Self {
        McSettings { horizon, n_paths, seed, k0: 0, initial_mode: None, fit_skip: FIT_SKIP }
    }

    pub fn with_initial_mode(mut self, mode: usize) -> Self {
        self.initial_mode = Some(mode);
        self
    }

    pub fn with_fit_skip(mut self, skip: usize) -> Self {
        self.fit_skip = skip;
        self
    }

    fn path(&self, proc: &ProcessModel, p: usize) -> Result<crate::process::ProcessPath> {
        let mut rng = stream_rng(self.seed, p as u64);
        Ok(sample_path_with(proc, self.k0, self.horizon, self.initial_mode, self.seed, &mut rng)?)
    }
}

/// Per-step means and batch-mean standard errors of per-path series.
fn summarize(series: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let n = series.len();
    let len = series[0].len();
    let mut mean = vec![0.0; len];
    for s in series {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    // fewer than two full blocks: every path is its own batch
    let batches: Vec<Vec<f64>> = if n < 2 * BATCH_SIZE {
        series.to_vec()
    } else {
        series
            .chunks_exact(BATCH_SIZE)
            .map(|chunk| {
                let mut b = vec![0.0; len];
                for s in chunk {
                    for (m, v) in b.iter_mut().zip(s) {
                        *m += v;
                    }
                }
                b.iter_mut().for_each(|m| *m /= BATCH_SIZE as f64);
                b
            })
            .collect()
    };

    let g = batches.len() as f64;
    let stderr = (0..len)
        .map(|k| {
            if batches.len() < 2 {
                return 0.0;
            }
            let mu = batches.iter().map(|b| b[k]).sum::<f64>() / g;
            let var = batches.iter().map(|b| (b[k] - mu).powi(2)).sum::<f64>() / (g - 1.0);
            (var / g).sqrt()
        })
        .collect();
    (mean, stderr, batches)
}

fn least_squares(ks: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = ks.len() as f64;
    let kbar = ks.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = ks.iter().map(|k| (k - kbar).powi(2)).sum();
    let sxy: f64 = ks.iter().zip(ys).map(|(k, y)| (k - kbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * kbar;
    let resid: f64 = ks.iter().zip(ys).map(|(k, y)| (y - intercept - slope * k).powi(2)).sum();
    let se = if ks.len() > 2 { (resid / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    (slope, intercept, se)
}

fn fit_rate(k0: i64, skip: usize, mean: &[f64], stderr: &[f64], batches: &[Vec<f64>], order: u32) -> Option<RateFit> {
    let idx: Vec<usize> = (skip..mean.len())
        .filter(|&i| mean[i] > 10.0 * stderr[i] && mean[i] > 0.0 && mean[i].ln().is_finite())
        .collect();
    if idx.len() < 2 {
        return None;
    }
    let ks: Vec<f64> = idx.iter().map(|&i| (k0 + i as i64) as f64).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| mean[i].ln()).collect();
    let (slope, intercept, ols_se) = least_squares(&ks, &ys);

    let slope_stderr = if batches.len() >= 2 {
        let b = batches.len() as f64;
        let mut slopes = Vec::with_capacity(batches.len());
        for leave in 0..batches.len() {
            let ys: Option<Vec<f64>> = idx
                .iter()
                .map(|&i| {
                    let m = batches
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != leave)
                        .map(|(_, bt)| bt[i])
                        .sum::<f64>()
                        / (b - 1.0);
                    (m > 0.0).then(|| m.ln())
                })
                .collect();
            if let Some(ys) = ys {
                slopes.push(least_squares(&ks, &ys).0);
            }
        }
        if slopes.len() == batches.len() {
            let mu = slopes.iter().sum::<f64>() / b;
            ((b - 1.0) / b * slopes.iter().map(|s| (s - mu).powi(2)).sum::<f64>()).sqrt()
        } else {
            ols_se
        }
    } else {
        ols_se
    };

    let p = order as f64;
    let rate = (slope / p).exp();
    Some(RateFit {
        rate,
        rate_stderr: rate * slope_stderr / p,
        prefactor: (intercept / p).exp(),
        slope,
        slope_stderr,
        points_used: idx.len(),
    })
}

fn check_common(order: u32, mc: &McSettings) -> Result<()> {
    if order != 1 && order != 2 {
        return Err(VerifyError::InvalidOrder(order));
    }
    if mc.horizon < MIN_HORIZON {
        return Err(VerifyError::HorizonTooShort(mc.horizon));
    }
    if mc.n_paths == 0 {
        return Err(VerifyError::NoPaths);
    }
    Ok(())
}

/// Normalized incremental `p`-th moment decay over `pairs` of initial states.
pub fn estimate_decay(
    sys: &SystemModel,
    proc: &ProcessModel,
    pairs: &[(DVector<f64>, DVector<f64>)],
    order: u32,
    distance: &Distance,
    mc: &McSettings,
) -> Result<VerificationReport> {
    check_common(order, mc)?;
    let active: Vec<(&DVector<f64>, &DVector<f64>, f64)> = pairs
        .iter()
        .map(|(a, b)| (a, b, distance.power(a, b, order)))
        .filter(|(_, _, d)| *d > 0.0)
        .collect();
    if active.is_empty() {
        return Err(VerifyError::DegeneratePairs);
    }

    let series: Result<Vec<Vec<f64>>> = (0..mc.n_paths)
        .into_par_iter()
        .map(|p| {
            let path = mc.path(proc, p)?;
            let mut acc = vec![0.0; mc.horizon + 1];
            for (a, b, d0) in &active {
                let ta = simulate(sys, &path, a)?;
                let tb = simulate(sys, &path, b)?;
                for (k, slot) in acc.iter_mut().enumerate() {
                    *slot += distance.power(&ta.states[k], &tb.states[k], order) / d0;
                }
            }
            acc.iter_mut().for_each(|v| *v /= active.len() as f64);
            Ok(acc)
        })
        .collect();
    let series = series?;
    let (mean, stderr, batches) = summarize(&series);
    let fit = fit_rate(mc.k0, mc.fit_skip, &mean, &stderr, &batches, order);
    Ok(VerificationReport {
        order,
        distance: distance.clone(),
        normalized: true,
        points: points(mc.k0, &mean, &stderr),
        fit,
        pairs: active.iter().map(|(a, b, _)| (a.iter().copied().collect(), b.iter().copied().collect())).collect(),
        initial_mode: mc.initial_mode,
        n_paths: mc.n_paths,
        horizon: mc.horizon,
        seed: mc.seed,
        fit_skip: mc.fit_skip,
        zero_from: zero_from(mc.k0, &mean),
    })
}

fn zero_from(k0: i64, mean: &[f64]) -> Option<i64> {
    let nonzero = mean.iter().rposition(|v| *v != 0.0);
    match nonzero {
        None => Some(k0),
        Some(i) if i + 1 < mean.len() => Some(k0 + i as i64 + 1),
        Some(_) => None,
    }
}

fn points(k0: i64, mean: &[f64], stderr: &[f64]) -> Vec<DecayPoint> {
    mean.iter()
        .zip(stderr)
        .enumerate()
        .map(|(i, (m, s))| DecayPoint { k: k0 + i as i64, estimate: *m, stderr: *s })
        .collect()
}

/// Plant driven by finite-mode noise, observed through `y = C x`.
#[derive(Debug, Clone)]
pub struct ObservedPlant<'a> {
    pub plant: &'a SystemModel,
    pub process: &'a ProcessModel,
    pub output: &'a DMatrix<f64>,
}

/// Mean-square error `E|x̂_k − x_k|²` of the observer
/// `x̂_{k+1} = f(x̂_k, ξ_k) + H_{ξ_k} (C x̂_k − y_k)`.
///
/// Errors are absolute (not normalized). With `x̂₀ = x₀` every estimate is
/// zero and no rate is fitted.
pub fn estimate_observer_error(
    target: &ObservedPlant<'_>,
    gains: &[DMatrix<f64>],
    x0: &DVector<f64>,
    xhat0: &DVector<f64>,
    mc: &McSettings,
) -> Result<VerificationReport> {
    check_common(2, mc)?;
    let modes = target.process.mode_count().ok_or_else(|| {
        VerifyError::Dimension("observer estimation needs a finite-mode process".into())
    })?;
    if gains.len() != modes {
        return Err(VerifyError::Dimension(format!("{} gains for {modes} modes", gains.len())));
    }
    let c = target.output;
    let series: Result<Vec<Vec<f64>>> = (0..mc.n_paths)
        .into_par_iter()
        .map(|p| {
            let path = mc.path(target.process, p)?;
            let traj = simulate(target.plant, &path, x0)?;
            let mut xhat = xhat0.clone();
            let mut out = Vec::with_capacity(mc.horizon + 1);
            out.push((&xhat - x0).norm_squared());
            for (i, &xi) in path.values.iter().enumerate() {
                let k = path.start_time + i as i64;
                let j = xi.mode().expect("finite-mode noise");
                let innovation = c * (&xhat - &traj.states[i]);
                xhat = target.plant.step(k, &xhat, xi) + &gains[j] * innovation;
                if xhat.iter().any(|v| !v.is_finite()) {
                    return Err(VerifyError::System(SystemError::Diverged(k + 1)));
                }
                out.push((&xhat - &traj.states[i + 1]).norm_squared());
            }
            Ok(out)
        })
        .collect();
    let series = series?;
    let (mean, stderr, batches) = summarize(&series);
    let fit = fit_rate(mc.k0, mc.fit_skip, &mean, &stderr, &batches, 2);
    Ok(VerificationReport {
        order: 2,
        distance: Distance::Euclidean,
        normalized: false,
        points: points(mc.k0, &mean, &stderr),
        fit,
        pairs: vec![(x0.iter().copied().collect(), xhat0.iter().copied().collect())],
        initial_mode: mc.initial_mode,
        n_paths: mc.n_paths,
        horizon: mc.horizon,
        seed: mc.seed,
        fit_skip: mc.fit_skip,
        zero_from: zero_from(mc.k0, &mean),
    })
}

/// Independent trajectories from one initial state, path `p` using stream `p`.
pub fn simulate_paths(sys: &SystemModel, proc: &ProcessModel, x0: &DVector<f64>, mc: &McSettings) -> Result<Vec<Trajectory>> {
    if mc.n_paths == 0 {
        return Err(VerifyError::NoPaths);
    }
    (0..mc.n_paths)
        .into_par_iter()
        .map(|p| Ok(simulate(sys, &mc.path(proc, p)?, x0)?))
        .collect()
}

/// Fraction of trajectories with `|x_k| < tol` at step `k` (relative to `k₀`).
pub fn fraction_settled(trajs: &[Trajectory], k: usize, tol: f64) -> f64 {
    if trajs.is_empty() {
        return 0.0;
    }
    let n = trajs.iter().filter(|t| t.states.get(k).is_some_and(|x| x.norm() < tol)).count();
    n as f64 / trajs.len() as f64
}

/// Mean of `|x_k|²` across trajectories, per step.
pub fn mean_square_curve(trajs: &[Trajectory]) -> Vec<f64> {
    let len = trajs.iter().map(|t| t.states.len()).min().unwrap_or(0);
    (0..len)
        .map(|k| trajs.iter().map(|t| t.states[k].norm_squared()).sum::<f64>() / trajs.len() as f64)
        .collect()
}
