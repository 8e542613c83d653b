//! Grid checks of contraction-certificate inequalities and the Gramian metric.
//!
//! Every checker evaluates, at each grid state `x` (and time `k`, and
//! conditioning mode `i` for finite chains), the smallest eigenvalue of
//!
//! ```text
//! rhs(x) − E[ Jᵀ P(f(x, ξ)) J ],     J = ∂f/∂x (x, ξ)
//! ```
//!
//! where `rhs` is `λ² P(x)` for rate conditions and `P(x) − c² I` for the
//! rate-free variant. The report keeps the smallest value and where it
//! occurred; a certificate passes when that value is non-negative.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matcore::{min_eig, relative_bounds, MatError, SymMatrix};
use crate::process::{sample_path_with, stream_rng, Noise, ProcessError, ProcessModel, Transition};
use crate::sysmodel::{simulate, SystemError, SystemModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertifyError {
    #[error("quadrature not supported: {0}")]
    QuadratureUnsupported(String),
    #[error("metric has {found} modes, process has {expected}")]
    ModeMismatch { expected: usize, found: usize },
    #[error("unsupported metric: {0}")]
    UnsupportedMetric(String),
    #[error("rate {0} must lie in (0, 1)")]
    InvalidRate(f64),
    #[error("metric matrix is not positive definite (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("process does not fit this checker: {0}")]
    ProcessKind(String),
    #[error("empty grid")]
    EmptyGrid,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Process(#[from] ProcessError),
}

pub type Result<T> = std::result::Result<T, CertifyError>;

/// Smallest eigenvalue allowed in a stored metric.
pub const METRIC_FLOOR: f64 = 1e-10;

/// Finite set of states (and times) on which inequalities are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    points: Vec<Vec<f64>>,
    times: Vec<i64>,
}

impl StateGrid {
    /// Tensor grid over the box `[lo, hi]`, spacing `step` per axis.
    ///
    /// Nodes are `lo + i·step` up to `hi`, and `hi` itself is always
    /// included. An axis with `lo == hi` contributes the single value `lo`.
    pub fn boxed(lo: &[f64], hi: &[f64], step: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != step.len() || lo.is_empty() {
            return Err(CertifyError::InvalidGrid("lo, hi and step must have the same non-zero length".into()));
        }
        let mut axes = Vec::with_capacity(lo.len());
        for d in 0..lo.len() {
            let (a, b, h) = (lo[d], hi[d], step[d]);
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(CertifyError::InvalidGrid(format!("axis {d}: bad bounds [{a}, {b}]")));
            }
            if a == b {
                axes.push(vec![a]);
                continue;
            }
            if !(h > 0.0 && h.is_finite()) {
                return Err(CertifyError::InvalidGrid(format!("axis {d}: step must be positive")));
            }
            let count = ((b - a) / h + 1e-9).floor() as usize;
            let mut nodes: Vec<f64> = (0..=count).map(|i| a + i as f64 * h).filter(|v| *v < b).collect();
            nodes.push(b);
            axes.push(nodes);
        }
        let mut points = vec![Vec::new()];
        for axis in &axes {
            let mut next = Vec::with_capacity(points.len() * axis.len());
            for p in &points {
                for v in axis {
                    let mut q = p.clone();
                    q.push(*v);
                    next.push(q);
                }
            }
            points = next;
        }
        Ok(StateGrid { points, times: vec![0] })
    }

    /// Explicit list of states.
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(CertifyError::EmptyGrid);
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(CertifyError::InvalidGrid("points must be finite and of equal length".into()));
        }
        Ok(StateGrid { points, times: vec![0] })
    }

    pub fn with_times(mut self, times: Vec<i64>) -> Self {
        if !times.is_empty() {
            self.times = times;
        }
        self
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.points.len() * self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    fn nearest(&self, x: &DVector<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.points.iter().enumerate() {
            let d: f64 = p.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

/// Piecewise-constant metric tabulated at grid nodes (nearest node lookup).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetric {
    pub grid: StateGrid,
    pub values: Vec<SymMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    Constant(SymMatrix),
    ModeDependent(Vec<SymMatrix>),
    StateGrid(GridMetric),
}

impl Metric {
    fn matrices(&self) -> &[SymMatrix] {
        match self {
            Metric::Constant(p) => std::slice::from_ref(p),
            Metric::ModeDependent(ps) => ps,
            Metric::StateGrid(g) => &g.values,
        }
    }

    fn at(&self, x: &DVector<f64>, mode: Option<usize>) -> &SymMatrix {
        match self {
            Metric::Constant(p) => p,
            Metric::ModeDependent(ps) => &ps[mode.unwrap_or(0)],
            Metric::StateGrid(g) => &g.values[g.grid.nearest(x)],
        }
    }

    fn is_constant_in_state(&self) -> bool {
        !matches!(self, Metric::StateGrid(_))
    }
}

/// Base metric of the distance being certified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseMetric {
    Constant(SymMatrix),
    /// Placeholder for state-dependent base metrics; every checker rejects it.
    StateDependent,
}

/// A candidate metric with its rate and bounds relative to the base metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub metric: Metric,
    pub base: BaseMetric,
    /// `c₁² P̂ ⪯ P` at every stored matrix.
    pub c1: f64,
    /// `P ⪯ c₂² P̂` at every stored matrix.
    pub c2: f64,
    /// Squared contraction rate.
    pub lambda2: f64,
}

impl Certificate {
    /// Certificate against the Euclidean base metric, bounds computed from the metric.
    pub fn new(metric: Metric, lambda2: f64) -> Result<Self> {
        let n = metric.matrices().first().map(SymMatrix::dim).ok_or(CertifyError::EmptyGrid)?;
        Self::with_base(metric, SymMatrix::identity(n), lambda2)
    }

    /// Certificate against a constant base metric `P̂`.
    pub fn with_base(metric: Metric, base: SymMatrix, lambda2: f64) -> Result<Self> {
        if !(lambda2 > 0.0 && lambda2 < 1.0) {
            return Err(CertifyError::InvalidRate(lambda2));
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for p in metric.matrices() {
            let (l, _) = min_eig(p)?;
            if l < METRIC_FLOOR {
                return Err(CertifyError::NotPositiveDefinite(l));
            }
            let (a, b) = relative_bounds(p, &base)?;
            lo = lo.min(a);
            hi = hi.max(b);
        }
        Ok(Certificate { metric, base: BaseMetric::Constant(base), c1: lo.sqrt(), c2: hi.sqrt(), lambda2 })
    }

    /// Override the bounds (they are then checked, not assumed).
    pub fn with_bounds(mut self, c1: f64, c2: f64) -> Self {
        self.c1 = c1;
        self.c2 = c2;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda2.sqrt()
    }
}

/// How `E_ξ[·]` is evaluated for independent noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Quadrature {
    /// Mean/variance expansion; needs a Jacobian affine in `ξ` and a state-constant metric.
    Exact,
    /// Gauss–Legendre rule with the given node count; uniform noise only.
    GaussLegendre(usize),
    /// Sample average over `samples` draws shared by all grid points.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPoint {
    pub state: Vec<f64>,
    pub time: i64,
    /// Conditioning mode (0-based) for finite chains.
    pub mode: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub worst_margin: f64,
    pub worst_point: WorstPoint,
    pub points_checked: usize,
}

impl CheckReport {
    fn from_margins(items: Vec<(f64, WorstPoint)>) -> Result<Self> {
        let points_checked = items.len();
        let (worst_margin, worst_point) = items
            .into_iter()
            .reduce(|a, b| if b.0 < a.0 { b } else { a })
            .ok_or(CertifyError::EmptyGrid)?;
        Ok(CheckReport { passed: worst_margin >= 0.0, worst_margin, worst_point, points_checked })
    }

    /// Combine two reports over the same grid.
    pub fn merge(self, other: CheckReport) -> CheckReport {
        let points_checked = self.points_checked.max(other.points_checked);
        let mut out = if other.worst_margin < self.worst_margin { other } else { self };
        out.points_checked = points_checked;
        out
    }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Right-hand side of the checked inequality.
#[derive(Debug, Clone, Copy)]
enum Rhs {
    Rate(f64),
    Offset(f64),
}

impl Rhs {
    fn apply(&self, p: &SymMatrix) -> DMatrix<f64> {
        match *self {
            Rhs::Rate(l2) => p.as_matrix() * l2,
            Rhs::Offset(c2) => p.as_matrix() - DMatrix::identity(p.dim(), p.dim()) * c2,
        }
    }
}

fn margin_of(rhs: DMatrix<f64>, lhs: &DMatrix<f64>) -> Result<f64> {
    let d = SymMatrix::new(rhs - lhs)?;
    Ok(min_eig(&d)?.0)
}

/// `Jᵀ P(f) J` for one noise value.
fn pulled_back(sys: &SystemModel, metric: &Metric, k: i64, x: &DVector<f64>, xi: Noise) -> DMatrix<f64> {
    let j = sys.jacobian(k, x, xi);
    let next = sys.step(k, x, xi);
    let p = metric.at(&next, xi.mode());
    j.transpose() * p.as_matrix() * j
}

fn grid_states(sys: &SystemModel, grid: &StateGrid) -> Result<Vec<(i64, DVector<f64>)>> {
    if grid.is_empty() {
        return Err(CertifyError::EmptyGrid);
    }
    if grid.dim() != sys.state_dim() {
        return Err(CertifyError::InvalidGrid(format!(
            "grid has dimension {}, system has {}",
            grid.dim(),
            sys.state_dim()
        )));
    }
    Ok(grid
        .times
        .iter()
        .flat_map(|&k| grid.points.iter().map(move |p| (k, DVector::from_column_slice(p))))
        .collect())
}

fn require_base(cert: &Certificate) -> Result<()> {
    if let BaseMetric::StateDependent = cert.base {
        return Err(CertifyError::UnsupportedMetric("state-dependent base metrics are not supported".into()));
    }
    Ok(())
}

fn expectation_plan(
    sys: &SystemModel,
    proc: &ProcessModel,
    metric: &Metric,
    quadrature: Quadrature,
) -> Result<Plan> {
    match quadrature {
        Quadrature::Exact => {
            if sys.affine_jacobian().is_none() {
                return Err(CertifyError::QuadratureUnsupported(
                    "exact expansion needs a Jacobian affine in the noise".into(),
                ));
            }
            if !metric.is_constant_in_state() {
                return Err(CertifyError::QuadratureUnsupported(
                    "exact expansion needs a state-constant metric".into(),
                ));
            }
            let m = proc
                .moments()
                .map_err(|_| CertifyError::QuadratureUnsupported("process moments are not available".into()))?;
            Ok(Plan::Moments { mean: m.mean, variance: m.variance() })
        }
        Quadrature::GaussLegendre(n) => match proc {
            ProcessModel::IidUniform { lo, hi } if n > 0 => {
                let (nodes, weights) = gauss_legendre(n);
                let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
                Ok(Plan::Weighted(
                    nodes.iter().zip(&weights).map(|(t, w)| (mid + half * t, 0.5 * w)).collect(),
                ))
            }
            _ => Err(CertifyError::QuadratureUnsupported(
                "Gauss-Legendre needs uniform noise and at least one node".into(),
            )),
        },
        Quadrature::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(CertifyError::QuadratureUnsupported("Monte Carlo needs at least one sample".into()));
            }
            Ok(Plan::Sampled { samples, seed })
        }
    }
}

enum Plan {
    Moments { mean: f64, variance: f64 },
    Weighted(Vec<(f64, f64)>),
    Sampled { samples: usize, seed: u64 },
}

impl Plan {
    fn expectation(
        &self,
        sys: &SystemModel,
        proc: &ProcessModel,
        metric: &Metric,
        k: i64,
        x: &DVector<f64>,
    ) -> DMatrix<f64> {
        match self {
            Plan::Moments { mean, variance } => {
                let (j0, j1) = sys.affine_jacobian().expect("checked in plan")(k, x);
                let p = metric.at(x, None).as_matrix();
                let jm = &j0 + &j1 * *mean;
                jm.transpose() * p * &jm + j1.transpose() * p * &j1 * *variance
            }
            Plan::Weighted(rule) => {
                let n = sys.state_dim();
                rule.iter().fold(DMatrix::zeros(n, n), |acc, (xi, w)| {
                    acc + pulled_back(sys, metric, k, x, Noise::Real(*xi)) * *w
                })
            }
            Plan::Sampled { samples, seed } => {
                let n = sys.state_dim();
                let mut rng = stream_rng(*seed, 0);
                let mut acc = DMatrix::zeros(n, n);
                for _ in 0..*samples {
                    let xi = proc.draw_independent(k, &mut rng);
                    acc += pulled_back(sys, metric, k, x, Noise::Real(xi));
                }
                acc / *samples as f64
            }
        }
    }
}

fn check_independent(
    sys: &SystemModel,
    proc: &ProcessModel,
    metric: &Metric,
    grid: &StateGrid,
    quadrature: Quadrature,
    rhs: Rhs,
) -> Result<CheckReport> {
    if matches!(metric, Metric::ModeDependent(_)) {
        return Err(CertifyError::UnsupportedMetric("independent noise needs a constant or grid metric".into()));
    }
    let plan = expectation_plan(sys, proc, metric, quadrature)?;
    let states = grid_states(sys, grid)?;
    let items: Result<Vec<_>> = states
        .par_iter()
        .map(|(k, x)| {
            let lhs = plan.expectation(sys, proc, metric, *k, x);
            let m = margin_of(rhs.apply(metric.at(x, None)), &lhs)?;
            Ok((m, WorstPoint { state: x.iter().copied().collect(), time: *k, mode: None }))
        })
        .collect();
    CheckReport::from_margins(items?)
}

fn check_markov(
    sys: &SystemModel,
    transition: &Transition,
    metric: &Metric,
    grid: &StateGrid,
    rhs: Rhs,
) -> Result<CheckReport> {
    let modes = transition.modes();
    match metric {
        Metric::ModeDependent(ps) if ps.len() != modes => {
            return Err(CertifyError::ModeMismatch { expected: modes, found: ps.len() })
        }
        Metric::StateGrid(_) => {
            return Err(CertifyError::UnsupportedMetric("finite chains need a constant or mode-dependent metric".into()))
        }
        _ => {}
    }
    let states = grid_states(sys, grid)?;
    let mut jobs = Vec::with_capacity(states.len() * modes);
    for (k, x) in &states {
        for i in 0..modes {
            jobs.push((*k, x, i));
        }
    }
    let items: Result<Vec<_>> = jobs
        .par_iter()
        .map(|&(k, x, i)| {
            let t = transition.at(k - 1)?;
            let n = sys.state_dim();
            let mut lhs = DMatrix::zeros(n, n);
            for j in 0..modes {
                let w = t.prob(j, i);
                if w > 0.0 {
                    lhs += pulled_back(sys, metric, k, x, Noise::Mode(j)) * w;
                }
            }
            let m = margin_of(rhs.apply(metric.at(x, Some(i))), &lhs)?;
            Ok((m, WorstPoint { state: x.iter().copied().collect(), time: k, mode: Some(i) }))
        })
        .collect();
    CheckReport::from_margins(items?)
}

/// `E[Jᵀ P(f(x, ξ)) J] ⪯ λ² P(x)` for independent noise.
pub fn check_iid(
    sys: &SystemModel,
    proc: &ProcessModel,
    cert: &Certificate,
    grid: &StateGrid,
    quadrature: Quadrature,
) -> Result<CheckReport> {
    require_base(cert)?;
    if matches!(proc, ProcessModel::FiniteMarkov(_)) {
        return Err(CertifyError::ProcessKind("finite chains go through check_finite_markov".into()));
    }
    check_independent(sys, proc, &cert.metric, grid, quadrature, Rhs::Rate(cert.lambda2))
}

/// `Σ_j π_{j,i} J(x, j)ᵀ P_j J(x, j) ⪯ λ² P_i` for every conditioning mode `i`.
///
/// A [`Metric::Constant`] is used for every mode.
pub fn check_finite_markov(
    sys: &SystemModel,
    proc: &ProcessModel,
    cert: &Certificate,
    grid: &StateGrid,
) -> Result<CheckReport> {
    require_base(cert)?;
    let ProcessModel::FiniteMarkov(tr) = proc else {
        return Err(CertifyError::ProcessKind("expected a finite-mode chain".into()));
    };
    check_markov(sys, tr, &cert.metric, grid, Rhs::Rate(cert.lambda2))
}

/// Rate-free condition `E[Jᵀ P(f) J] ⪯ P(x) − c² I`, dispatched on the process class.
///
/// Independent noise uses `quadrature`; finite chains are summed exactly.
pub fn check_lambda_free(
    sys: &SystemModel,
    proc: &ProcessModel,
    metric: &Metric,
    grid: &StateGrid,
    c: f64,
    quadrature: Quadrature,
) -> Result<CheckReport> {
    match proc {
        ProcessModel::FiniteMarkov(tr) => check_markov(sys, tr, metric, grid, Rhs::Offset(c * c)),
        _ => check_independent(sys, proc, metric, grid, quadrature, Rhs::Offset(c * c)),
    }
}

/// First-moment check for a constant base metric `P̂`.
///
/// Verifies `c₁² P̂ ⪯ P(x) ⪯ c₂² P̂` at every grid state and the rate condition
/// appropriate to the process class; the report carries the worst of both.
pub fn check_first_moment_riemann(
    sys: &SystemModel,
    proc: &ProcessModel,
    cert: &Certificate,
    grid: &StateGrid,
    quadrature: Quadrature,
) -> Result<CheckReport> {
    let BaseMetric::Constant(base) = &cert.base else {
        return Err(CertifyError::UnsupportedMetric("state-dependent base metrics are not supported".into()));
    };
    let rate = match proc {
        ProcessModel::FiniteMarkov(tr) => check_markov(sys, tr, &cert.metric, grid, Rhs::Rate(cert.lambda2))?,
        _ if sys.is_noise_free() => check_deterministic(sys, &cert.metric, grid, cert.lambda2)?,
        _ => check_independent(sys, proc, &cert.metric, grid, quadrature, Rhs::Rate(cert.lambda2))?,
    };
    let (lo, hi) = (cert.c1 * cert.c1, cert.c2 * cert.c2);
    let modes = match &cert.metric {
        Metric::ModeDependent(ps) => ps.len(),
        _ => 1,
    };
    let states = grid_states(sys, grid)?;
    let mut items = Vec::with_capacity(states.len() * modes);
    for (k, x) in &states {
        for i in 0..modes {
            let p = cert.metric.at(x, Some(i));
            let below = margin_of(p.as_matrix().clone(), &(base.as_matrix() * lo))?;
            let above = margin_of(base.as_matrix() * hi, p.as_matrix())?;
            let mode = matches!(cert.metric, Metric::ModeDependent(_)).then_some(i);
            items.push((below.min(above), WorstPoint { state: x.iter().copied().collect(), time: *k, mode }));
        }
    }
    Ok(rate.merge(CheckReport::from_margins(items)?))
}

/// `Jᵀ P(f(x)) J ⪯ λ² P(x)` for a noise-free system.
pub fn check_deterministic(sys: &SystemModel, metric: &Metric, grid: &StateGrid, lambda2: f64) -> Result<CheckReport> {
    if !sys.is_noise_free() {
        return Err(CertifyError::ProcessKind(format!("system '{}' depends on noise", sys.name())));
    }
    if matches!(metric, Metric::ModeDependent(_)) {
        return Err(CertifyError::UnsupportedMetric("noise-free systems need a constant or grid metric".into()));
    }
    let states = grid_states(sys, grid)?;
    let items: Result<Vec<_>> = states
        .par_iter()
        .map(|(k, x)| {
            let lhs = pulled_back(sys, metric, *k, x, Noise::Real(0.0));
            let m = margin_of(Rhs::Rate(lambda2).apply(metric.at(x, None)), &lhs)?;
            Ok((m, WorstPoint { state: x.iter().copied().collect(), time: *k, mode: None }))
        })
        .collect();
    CheckReport::from_margins(items?)
}

/// Sample average of the truncated Gramian metric and its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramianEstimate {
    pub lambda1: f64,
    pub k0: i64,
    pub horizon: i64,
    /// Mean of `P_K` at the final horizon.
    pub mean: SymMatrix,
    /// Elementwise standard error of `mean`.
    pub stderr: DMatrix<f64>,
    /// Mean of `P_{K'}` for `K' = k₀, …, K`.
    pub history: Vec<SymMatrix>,
    /// Largest entry of `|λ₁² P_{K'}(k₀) − Jᵀ P_{K'}(k₀+1) J − I|` over paths and `K'`.
    pub identity_residual: f64,
    pub sample_count: usize,
}

/// Options for [`gramian_certificate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramianQuery<'a> {
    pub x: &'a DVector<f64>,
    pub k0: i64,
    pub horizon: i64,
    pub lambda1: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub initial_mode: Option<usize>,
}

/// Average over paths of `P_K = λ₁⁻² Σ_{k=k₀}^{K} λ₁^{−2(k−k₀)} Φ_kᵀ Φ_k`.
///
/// Each path also evaluates the metric at `(k₀+1, f(x, ξ_{k₀}))` along the
/// shifted realization so the one-step identity can be checked exactly.
pub fn gramian_certificate(sys: &SystemModel, proc: &ProcessModel, q: &GramianQuery) -> Result<GramianEstimate> {
    if !(q.lambda1 > 0.0 && q.lambda1 < 1.0) {
        return Err(CertifyError::InvalidRate(q.lambda1));
    }
    if q.horizon < q.k0 || q.n_paths == 0 {
        return Err(CertifyError::InvalidGrid("horizon must be >= k0 and n_paths >= 1".into()));
    }
    let n = sys.state_dim();
    let l2 = q.lambda1 * q.lambda1;
    let steps = (q.horizon - q.k0) as usize;
    let eye = DMatrix::<f64>::identity(n, n);

    struct PathResult {
        history: Vec<DMatrix<f64>>,
        residual: f64,
    }

    let per_path: Result<Vec<PathResult>> = (0..q.n_paths)
        .into_par_iter()
        .map(|p| {
            if steps == 0 {
                return Ok(PathResult { history: vec![&eye / l2], residual: 0.0 });
            }
            let mut rng = stream_rng(q.seed, p as u64);
            let path = sample_path_with(proc, q.k0, steps, q.initial_mode, q.seed, &mut rng)?;
            let traj = simulate(sys, &path, q.x)?;
            // Φ from k₀ and Φ' from k₀+1, accumulated side by side
            let j0 = sys.jacobian(q.k0, q.x, path.values[0]);
            let mut phi = eye.clone();
            let mut phi_next = eye.clone();
            let mut sum = eye.clone();
            let mut sum_next = DMatrix::zeros(n, n);
            let mut weight = 1.0;
            let mut history = vec![&sum / l2];
            let mut residual: f64 = 0.0;
            for s in 0..steps {
                let k = q.k0 + s as i64;
                let j = sys.jacobian(k, &traj.states[s], path.values[s]);
                phi = &j * &phi;
                if s > 0 {
                    phi_next = &j * &phi_next;
                }
                // next-path term carries one fewer factor of λ₁⁻²
                let w_next = weight;
                weight /= l2;
                sum += phi.transpose() * &phi * weight;
                sum_next += phi_next.transpose() * &phi_next * w_next;
                let pk = &sum / l2;
                let pk_next = &sum_next / l2;
                let r = (&pk * l2 - j0.transpose() * &pk_next * &j0 - &eye).amax();
                residual = residual.max(r);
                history.push(pk);
            }
            Ok(PathResult { history, residual })
        })
        .collect();
    let per_path = per_path?;

    let count = per_path.len() as f64;
    let mut history = Vec::with_capacity(steps + 1);
    for idx in 0..=steps {
        let mean = per_path.iter().fold(DMatrix::zeros(n, n), |acc, r| acc + &r.history[idx]) / count;
        history.push(SymMatrix::new(mean)?);
    }
    let mean = history.last().expect("non-empty").clone();
    let stderr = if per_path.len() > 1 {
        let var = per_path.iter().fold(DMatrix::zeros(n, n), |acc, r| {
            let d = &r.history[steps] - mean.as_matrix();
            acc + d.component_mul(&d)
        }) / (count - 1.0);
        var.map(|v| (v / count).sqrt())
    } else {
        DMatrix::zeros(n, n)
    };
    let identity_residual = per_path.iter().map(|r| r.residual).fold(0.0, f64::max);
    Ok(GramianEstimate {
        lambda1: q.lambda1,
        k0: q.k0,
        horizon: q.horizon,
        mean,
        stderr,
        history,
        identity_residual,
        sample_count: per_path.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::TransitionMatrix;

    fn scalar_sys(name: &str, a0: f64, a1: f64) -> SystemModel {
        SystemModel::scalar_noise_linear(name, DMatrix::from_element(1, 1, a0), DMatrix::from_element(1, 1, a1))
    }

    fn unit() -> Metric {
        Metric::Constant(SymMatrix::identity(1))
    }

    fn line(lo: f64, hi: f64, step: f64) -> StateGrid {
        StateGrid::boxed(&[lo], &[hi], &[step]).unwrap()
    }

    #[test]
    fn grid_includes_endpoint() {
        let g = line(-1.0, 1.0, 0.3);
        assert_eq!(g.points().first().unwrap()[0], -1.0);
        assert_eq!(g.points().last().unwrap()[0], 1.0);
        assert_eq!(g.len(), 8);
        let pendulum = StateGrid::boxed(&[-std::f64::consts::PI, 0.0, 0.0], &[std::f64::consts::PI, 0.0, 0.0], &[0.01, 1.0, 1.0]).unwrap();
        assert_eq!(pendulum.len(), 630);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(16);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        for p in 0..32 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-13, "degree {p}: {q} vs {exact}");
        }
    }

    #[test]
    fn uniform_scalar_second_moment() {
        let sys = scalar_sys("xi_x", 0.0, 1.0);
        let proc = ProcessModel::uniform(0.0, 1.0).unwrap();
        let grid = line(-2.0, 2.0, 0.5);
        for q in [Quadrature::Exact, Quadrature::GaussLegendre(16)] {
            let pass = check_iid(&sys, &proc, &Certificate::new(unit(), 0.4).unwrap(), &grid, q).unwrap();
            let fail = check_iid(&sys, &proc, &Certificate::new(unit(), 0.3).unwrap(), &grid, q).unwrap();
            assert!(pass.passed && !fail.passed);
            assert!((pass.worst_margin - (0.4 - 1.0 / 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_rejects_non_affine() {
        let sys = SystemModel::new("sin", 1, crate::sysmodel::NoiseKind::Real, |_, x, xi| x * xi.value().sin(), |_, _, xi| {
            DMatrix::from_element(1, 1, xi.value().sin())
        });
        let proc = ProcessModel::uniform(0.0, 1.0).unwrap();
        let r = check_iid(&sys, &proc, &Certificate::new(unit(), 0.5).unwrap(), &line(0.0, 1.0, 0.5), Quadrature::Exact);
        assert!(matches!(r, Err(CertifyError::QuadratureUnsupported(_))));
    }

    #[test]
    fn boundary_margin_is_zero() {
        let sys = SystemModel::linear("half", DMatrix::from_element(1, 1, 0.5));
        let r = check_deterministic(&sys, &unit(), &line(-1.0, 1.0, 0.5), 0.25).unwrap();
        assert_eq!(r.worst_margin, 0.0);
        assert!(r.passed);
        assert!(!check_deterministic(&sys, &unit(), &line(-1.0, 1.0, 0.5), 0.16).unwrap().passed);
    }

    #[test]
    fn absorbing_unstable_mode_fails() {
        let sys = SystemModel::markov_linear(
            "two",
            vec![DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 2.0)],
        );
        let proc = ProcessModel::markov(TransitionMatrix::identity(2));
        let cert = Certificate::new(Metric::ModeDependent(vec![SymMatrix::identity(1); 2]), 0.81).unwrap();
        let r = check_finite_markov(&sys, &proc, &cert, &line(0.0, 1.0, 1.0)).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_point.mode, Some(1));
        let bad = Certificate::new(Metric::ModeDependent(vec![SymMatrix::identity(1); 3]), 0.81).unwrap();
        assert!(matches!(
            check_finite_markov(&sys, &proc, &bad, &line(0.0, 1.0, 1.0)),
            Err(CertifyError::ModeMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn lambda_free_scalar() {
        let sys = SystemModel::linear("half", DMatrix::from_element(1, 1, 0.5));
        let proc = ProcessModel::constant(0.0);
        let g = line(-1.0, 1.0, 1.0);
        assert!(check_lambda_free(&sys, &proc, &unit(), &g, 0.75f64.sqrt(), Quadrature::Exact).unwrap().worst_margin.abs() < 1e-15);
        assert!(!check_lambda_free(&sys, &proc, &unit(), &g, 0.9, Quadrature::Exact).unwrap().passed);
        let grow = SystemModel::linear("grow", DMatrix::from_element(1, 1, 1.1));
        assert!(!check_lambda_free(&grow, &proc, &unit(), &g, 0.1, Quadrature::Exact).unwrap().passed);
    }

    #[test]
    fn riemann_diagonal_case() {
        let sys = SystemModel::linear("half2", DMatrix::identity(2, 2) * 0.5);
        let d = SymMatrix::from_diagonal(&[4.0, 1.0]).unwrap();
        let cert = Certificate::with_base(Metric::Constant(d.clone()), d, 0.25 + 1e-12).unwrap();
        assert!((cert.c1 - 1.0).abs() < 1e-12 && (cert.c2 - 1.0).abs() < 1e-12);
        let g = StateGrid::boxed(&[-1.0, -1.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        let r = check_first_moment_riemann(&sys, &ProcessModel::constant(0.0), &cert, &g, Quadrature::Exact).unwrap();
        assert!(r.passed, "{r:?}");
        let mut rejected = cert.clone();
        rejected.base = BaseMetric::StateDependent;
        assert!(matches!(
            check_first_moment_riemann(&sys, &ProcessModel::constant(0.0), &rejected, &g, Quadrature::Exact),
            Err(CertifyError::UnsupportedMetric(_))
        ));
    }

    #[test]
    fn gramian_deterministic_closed_form() {
        let a = 0.6;
        let l1: f64 = 0.8;
        let sys = SystemModel::linear("lin", DMatrix::from_element(1, 1, a));
        let x = DVector::from_element(1, 1.0);
        for horizon in [0i64, 1, 7, 30] {
            let est = gramian_certificate(
                &sys,
                &ProcessModel::constant(0.0),
                &GramianQuery { x: &x, k0: 0, horizon, lambda1: l1, n_paths: 2, seed: 1, initial_mode: None },
            )
            .unwrap();
            let r = a * a / (l1 * l1);
            let closed = (1.0 - r.powi(horizon as i32 + 1)) / (1.0 - r) / (l1 * l1);
            assert!((est.mean.get(0, 0) - closed).abs() < 1e-12, "K = {horizon}");
            assert!(est.identity_residual < 1e-12);
        }
        assert!(matches!(
            gramian_certificate(&sys, &ProcessModel::constant(0.0), &GramianQuery { x: &x, k0: 0, horizon: 3, lambda1: 1.0, n_paths: 1, seed: 0, initial_mode: None }),
            Err(CertifyError::InvalidRate(_))
        ));
    }
}
