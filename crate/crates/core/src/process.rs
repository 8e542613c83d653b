//! Driving stochastic processes.
//!
//! Four classes are supported: i.i.d. uniform scalars, i.i.d. draws from a
//! user sampler, temporally independent families indexed by time, and
//! finite-mode Markov chains.
//!
//! Transition matrices are stored **column-stochastic**: entry `(j, i)` is
//! `P(ξ_{k+1} = j | ξ_k = i)`, so every column sums to one. For a Markov
//! chain the path starts from a deterministic mode `ξ_{k₀−1}` and the first
//! sampled value `ξ_{k₀}` is drawn from that mode's column.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::matcore::SymMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProcessError {
    #[error("mode {mode} out of range for a {modes}-mode chain")]
    ModeOutOfRange { mode: usize, modes: usize },
    #[error("initial mode is required for a Markov chain")]
    MissingInitialMode,
    #[error("invalid transition matrix: {0}")]
    InvalidTransition(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("closed-form moments unavailable for this process")]
    Unavailable,
    #[error("non-finite sample produced at draw {0}")]
    NonFiniteSample(usize),
    #[error("path length must be positive")]
    EmptyPath,
}

pub type Result<T> = std::result::Result<T, ProcessError>;

/// Value of `ξ_k` fed to the system dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    /// Mode index of a finite Markov chain (0-based).
    Mode(usize),
    /// Scalar real-valued parameter.
    Real(f64),
}

impl Noise {
    /// Real value of a scalar noise, or the mode index cast to `f64`.
    pub fn value(&self) -> f64 {
        match *self {
            Noise::Mode(m) => m as f64,
            Noise::Real(v) => v,
        }
    }

    pub fn mode(&self) -> Option<usize> {
        match *self {
            Noise::Mode(m) => Some(m),
            Noise::Real(_) => None,
        }
    }
}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Noise::Mode(m) => write!(f, "{}", m + 1),
            Noise::Real(v) => write!(f, "{v}"),
        }
    }
}

pub type Sampler = Arc<dyn Fn(&mut ChaCha8Rng) -> f64 + Send + Sync>;
pub type TimeSampler = Arc<dyn Fn(i64, &mut ChaCha8Rng) -> f64 + Send + Sync>;
pub type TransitionSchedule = Arc<dyn Fn(i64) -> TransitionMatrix + Send + Sync>;

/// First and second raw moments of a scalar distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub second_moment: f64,
}

impl Moments {
    pub fn variance(&self) -> f64 {
        (self.second_moment - self.mean * self.mean).max(0.0)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// Validated column-stochastic transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(DMatrix<f64>);

impl TransitionMatrix {
    /// Entry `(j, i)` of `m` is the probability of moving from mode `i` to mode `j`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(ProcessError::InvalidTransition(format!(
                "must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(ProcessError::InvalidTransition("entries must be finite and >= 0".into()));
        }
        for (i, col) in m.column_iter().enumerate() {
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(ProcessError::InvalidTransition(format!(
                    "column {} sums to {s}, expected 1",
                    i + 1
                )));
            }
        }
        Ok(TransitionMatrix(m))
    }

    pub fn from_row_slice(modes: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != modes * modes {
            return Err(ProcessError::InvalidTransition(format!(
                "expected {} entries, got {}",
                modes * modes,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(modes, modes, entries))
    }

    pub fn identity(modes: usize) -> Self {
        TransitionMatrix(DMatrix::identity(modes, modes))
    }

    pub fn modes(&self) -> usize {
        self.0.nrows()
    }

    /// `P(ξ_{k+1} = to | ξ_k = from)`.
    pub fn prob(&self, to: usize, from: usize) -> f64 {
        self.0[(to, from)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    fn sample_next<R: Rng>(&self, from: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let last = self.modes() - 1;
        for j in 0..=last {
            acc += self.0[(j, from)];
            if u < acc {
                return j;
            }
        }
        // round-off: fall back to the last mode with positive probability
        (0..=last).rev().find(|&j| self.0[(j, from)] > 0.0).unwrap_or(last)
    }
}

/// Transition law of a finite-mode chain, optionally time-varying.
#[derive(Clone)]
pub enum Transition {
    Stationary(TransitionMatrix),
    TimeVarying { modes: usize, schedule: TransitionSchedule },
}

impl Transition {
    pub fn modes(&self) -> usize {
        match self {
            Transition::Stationary(t) => t.modes(),
            Transition::TimeVarying { modes, .. } => *modes,
        }
    }

    /// Transition matrix used for the step `ξ_k → ξ_{k+1}`.
    pub fn at(&self, k: i64) -> Result<TransitionMatrix> {
        match self {
            Transition::Stationary(t) => Ok(t.clone()),
            Transition::TimeVarying { modes, schedule } => {
                let t = schedule(k);
                if t.modes() != *modes {
                    return Err(ProcessError::InvalidTransition(format!(
                        "schedule returned {} modes at k = {k}, expected {modes}",
                        t.modes()
                    )));
                }
                Ok(t)
            }
        }
    }
}

/// The stochastic process `ξ = (ξ_k)`.
#[derive(Clone)]
pub enum ProcessModel {
    /// i.i.d. `U[lo, hi]`.
    IidUniform { lo: f64, hi: f64 },
    /// i.i.d. draws from a sampler, with exact moments when known.
    IidSampler { sampler: Sampler, moments: Option<Moments> },
    /// Independent draws whose law may depend on `k`.
    IndependentFamily { sampler: TimeSampler },
    /// Finite-mode Markov chain.
    FiniteMarkov(Transition),
}

impl fmt::Debug for ProcessModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessModel::IidUniform { lo, hi } => write!(f, "IidUniform({lo}, {hi})"),
            ProcessModel::IidSampler { moments, .. } => write!(f, "IidSampler({moments:?})"),
            ProcessModel::IndependentFamily { .. } => write!(f, "IndependentFamily"),
            ProcessModel::FiniteMarkov(t) => write!(f, "FiniteMarkov({} modes)", t.modes()),
        }
    }
}

impl ProcessModel {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(ProcessError::InvalidDistribution(format!(
                "uniform bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(ProcessModel::IidUniform { lo, hi })
    }

    pub fn sampler<F>(f: F, moments: Option<Moments>) -> Self
    where
        F: Fn(&mut ChaCha8Rng) -> f64 + Send + Sync + 'static,
    {
        ProcessModel::IidSampler { sampler: Arc::new(f), moments }
    }

    /// A point mass at `value`: the zero-variance i.i.d. process.
    pub fn constant(value: f64) -> Self {
        Self::sampler(
            move |_| value,
            Some(Moments { mean: value, second_moment: value * value }),
        )
    }

    pub fn markov(t: TransitionMatrix) -> Self {
        ProcessModel::FiniteMarkov(Transition::Stationary(t))
    }

    pub fn is_iid(&self) -> bool {
        matches!(self, ProcessModel::IidUniform { .. } | ProcessModel::IidSampler { .. })
    }

    pub fn mode_count(&self) -> Option<usize> {
        match self {
            ProcessModel::FiniteMarkov(t) => Some(t.modes()),
            _ => None,
        }
    }

    /// Exact mean and second moment where a closed form is available.
    pub fn moments(&self) -> Result<Moments> {
        match self {
            ProcessModel::IidUniform { lo, hi } => {
                let mean = 0.5 * (lo + hi);
                let var = (hi - lo) * (hi - lo) / 12.0;
                Ok(Moments { mean, second_moment: var + mean * mean })
            }
            ProcessModel::IidSampler { moments: Some(m), .. } => Ok(*m),
            _ => Err(ProcessError::Unavailable),
        }
    }

    /// One draw of `ξ_k` for the independent classes.
    pub(crate) fn draw_independent(&self, k: i64, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            ProcessModel::IidUniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            ProcessModel::IidSampler { sampler, .. } => sampler(rng),
            ProcessModel::IndependentFamily { sampler } => sampler(k, rng),
            ProcessModel::FiniteMarkov(_) => unreachable!("Markov draws go through the chain"),
        }
    }
}

/// Deterministic RNG for one stream of a seeded experiment.
///
/// Every Monte-Carlo path `p` uses `stream_rng(seed, p)`, so results do not
/// depend on how paths are distributed across threads.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A realization `(ξ_{k₀}, …, ξ_{k₀+len−1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessPath {
    pub start_time: i64,
    pub values: Vec<Noise>,
    pub seed: u64,
    /// `ξ_{k₀−1}` for Markov chains.
    pub initial_mode: Option<usize>,
}

impl ProcessPath {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Noise at absolute time `k`.
    pub fn at(&self, k: i64) -> Option<Noise> {
        let idx = k.checked_sub(self.start_time)?;
        usize::try_from(idx).ok().and_then(|i| self.values.get(i).copied())
    }

    /// The path with its first value dropped, as seen from `k₀ + 1`.
    pub fn shifted(&self) -> ProcessPath {
        ProcessPath {
            start_time: self.start_time + 1,
            values: self.values.iter().skip(1).copied().collect(),
            seed: self.seed,
            initial_mode: self.values.first().and_then(Noise::mode),
        }
    }

    /// Build a path from explicit values (useful for replay and tests).
    pub fn from_values(start_time: i64, values: Vec<Noise>) -> Self {
        ProcessPath { start_time, values, seed: 0, initial_mode: None }
    }
}

/// Sample `length` values starting at `k₀` using stream 0 of `seed`.
pub fn sample_path(
    model: &ProcessModel,
    k0: i64,
    length: usize,
    initial_mode: Option<usize>,
    seed: u64,
) -> Result<ProcessPath> {
    let mut rng = stream_rng(seed, 0);
    sample_path_with(model, k0, length, initial_mode, seed, &mut rng)
}

/// Sample a path from an explicit generator; `seed` is recorded for provenance only.
pub fn sample_path_with(
    model: &ProcessModel,
    k0: i64,
    length: usize,
    initial_mode: Option<usize>,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<ProcessPath> {
    if length == 0 {
        return Err(ProcessError::EmptyPath);
    }
    let values = match model {
        ProcessModel::FiniteMarkov(tr) => {
            let modes = tr.modes();
            let mut mode = initial_mode.ok_or(ProcessError::MissingInitialMode)?;
            if mode >= modes {
                return Err(ProcessError::ModeOutOfRange { mode, modes });
            }
            let mut out = Vec::with_capacity(length);
            for step in 0..length {
                let k = k0 + step as i64;
                // ξ_{k} is drawn from the law of the step (k-1) -> k
                let t = tr.at(k - 1)?;
                mode = t.sample_next(mode, rng);
                out.push(Noise::Mode(mode));
            }
            out
        }
        _ => {
            let mut out = Vec::with_capacity(length);
            for step in 0..length {
                let v = model.draw_independent(k0 + step as i64, rng);
                if !v.is_finite() {
                    return Err(ProcessError::NonFiniteSample(step));
                }
                out.push(Noise::Real(v));
            }
            out
        }
    };
    Ok(ProcessPath { start_time: k0, values, seed, initial_mode })
}

/// `E[g(ξ_k) | ξ_{k−1} = given_mode]`.
///
/// Finite-mode chains are summed exactly over the successor modes; every
/// other class is averaged over `n_samples` draws from stream 0 of `seed`.
pub fn conditional_expectation_mc<G>(
    model: &ProcessModel,
    k: i64,
    given_mode: Option<usize>,
    g: G,
    n_samples: usize,
    seed: u64,
) -> Result<SymMatrix>
where
    G: Fn(Noise) -> SymMatrix,
{
    match model {
        ProcessModel::FiniteMarkov(tr) => {
            let from = given_mode.ok_or(ProcessError::MissingInitialMode)?;
            let t = tr.at(k - 1)?;
            if from >= t.modes() {
                return Err(ProcessError::ModeOutOfRange { mode: from, modes: t.modes() });
            }
            let mut acc: Option<DMatrix<f64>> = None;
            for j in 0..t.modes() {
                let p = t.prob(j, from);
                if p == 0.0 {
                    continue;
                }
                let v = g(Noise::Mode(j));
                if !v.is_finite() {
                    return Err(ProcessError::NonFiniteSample(j));
                }
                let term = v.as_matrix() * p;
                acc = Some(match acc {
                    Some(a) => a + term,
                    None => term,
                });
            }
            let m = acc.expect("a stochastic column has a positive entry");
            Ok(SymMatrix::new(m).expect("finite by construction"))
        }
        _ => {
            if n_samples == 0 {
                return Err(ProcessError::InvalidDistribution("n_samples must be >= 1".into()));
            }
            let mut rng = stream_rng(seed, 0);
            let mut acc: Option<DMatrix<f64>> = None;
            for s in 0..n_samples {
                let xi = model.draw_independent(k, &mut rng);
                let v = g(Noise::Real(xi));
                if !xi.is_finite() || !v.is_finite() {
                    return Err(ProcessError::NonFiniteSample(s));
                }
                acc = Some(match acc {
                    Some(a) => a + v.as_matrix(),
                    None => v.into_matrix(),
                });
            }
            let m = acc.expect("n_samples >= 1") / n_samples as f64;
            Ok(SymMatrix::new(m).expect("finite by construction"))
        }
    }
}

/// Three-mode chain of the observer example.
pub fn reference_three_mode_transition() -> TransitionMatrix {
    TransitionMatrix::from_row_slice(
        3,
        &[
            0.1, 0.5, 0.3, //
            0.8, 0.5, 0.1, //
            0.1, 0.0, 0.6,
        ],
    )
    .expect("reference chain is column-stochastic")
}
