//! Polytopic relaxation and LMI synthesis of controllers and observers.
//!
//! Both templates are homogeneous LMIs in a metric-like variable and a gain
//! variable; gains are recovered by inverting the metric variable.
//!
//! * Controller for `x⁺ = A x + B u + ξ F(x)` with scalar i.i.d. `ξ`: per
//!   vertex `F⁽ℓ⁾`
//!
//! ```text
//! ⎡ λ² Q                    *   * ⎤
//! ⎢ (A + μ F⁽ℓ⁾) Q + B Y    Q   * ⎥ ⪰ 0,   K = Y Q⁻¹,  metric = Q⁻¹
//! ⎣ σ F⁽ℓ⁾ Q                0   Q ⎦
//! ```
//!
//! * Observer for a Markov jump plant with output `y = C x`: per conditioning
//!   mode `i` and vertex choice, an `(n + n·M)`-square block matrix with
//!   `√π_{j,i} (P_j A_j + Z_j C)` in the first block column and `P_j` on the
//!   diagonal; `H_j = P_j⁻¹ Z_j`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lmi::{solve, AffineExpr, LmiError, LmiProblem, LmiSolution, LmiStatus, SolverOptions, Var};
use crate::matcore::{inverse_spd, MatError, SymMatrix};
use crate::process::{Moments, TransitionMatrix};
use crate::sysmodel::{MarkovJumpPlant, PendulumPlant};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("unsupported Jacobian structure: {0}")]
    UnsupportedStructure(String),
    #[error("synthesis infeasible at lambda^2 = {0}")]
    SynthesisInfeasible(f64),
    #[error("solver hit its iteration limit at lambda^2 = {0}")]
    SolverTimeout(f64),
    #[error("squared rate {0} must lie in (0, 1]")]
    InvalidRate(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Mat(#[from] MatError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

const CONDITION_WARN: f64 = 1e8;

/// Closed interval for one Jacobian entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryBound {
    pub row: usize,
    pub col: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Jacobian family of one mode: `base` with the listed entries ranging over intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeJacobianBounds {
    pub base: DMatrix<f64>,
    pub varying: Vec<EntryBound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeVertices {
    pub vertices: Vec<DMatrix<f64>>,
    /// The single entry that varies between the two vertices, if any.
    pub varying: Option<EntryBound>,
}

/// Per-mode vertex lists whose convex hulls contain the Jacobian family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolytopicRelaxation {
    pub modes: Vec<ModeVertices>,
}

impl PolytopicRelaxation {
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn vertices(&self, mode: usize) -> &[DMatrix<f64>] {
        &self.modes[mode].vertices
    }

    /// Convex weights of `m` with respect to the vertices of `mode`.
    ///
    /// Fails when `m` differs from the vertices outside the varying entry or
    /// lies outside the interval (with `1e-12` slack).
    pub fn weights(&self, mode: usize, m: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mv = self
            .modes
            .get(mode)
            .ok_or_else(|| SynthError::Dimension(format!("mode {mode} out of range")))?;
        let v0 = &mv.vertices[0];
        if m.shape() != v0.shape() {
            return Err(SynthError::Dimension("matrix shape differs from vertices".into()));
        }
        let tol = 1e-12;
        let off = |i: usize, j: usize| mv.varying.is_some_and(|e| e.row == i && e.col == j);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if !off(i, j) && (m[(i, j)] - v0[(i, j)]).abs() > tol * (1.0 + v0[(i, j)].abs()) {
                    return Err(SynthError::UnsupportedStructure(format!(
                        "entry ({i},{j}) = {} is outside the relaxation",
                        m[(i, j)]
                    )));
                }
            }
        }
        match mv.varying {
            None => Ok(vec![1.0]),
            Some(e) => {
                let v = m[(e.row, e.col)];
                if v < e.lo - tol || v > e.hi + tol {
                    return Err(SynthError::UnsupportedStructure(format!(
                        "entry value {v} outside [{}, {}]",
                        e.lo, e.hi
                    )));
                }
                let t = ((e.hi - v) / (e.hi - e.lo)).clamp(0.0, 1.0);
                Ok(vec![t, 1.0 - t])
            }
        }
    }

    pub fn contains(&self, mode: usize, m: &DMatrix<f64>) -> bool {
        self.weights(mode, m).is_ok()
    }

    /// Every choice of one vertex per mode (product order, last mode fastest).
    pub fn vertex_combinations(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for mv in &self.modes {
            let mut next = Vec::with_capacity(out.len() * mv.vertices.len());
            for prefix in &out {
                for l in 0..mv.vertices.len() {
                    let mut c = prefix.clone();
                    c.push(l);
                    next.push(c);
                }
            }
            out = next;
        }
        out
    }
}

/// Vertex lists from per-entry interval bounds.
pub fn relax_jacobian(bounds: &[ModeJacobianBounds]) -> Result<PolytopicRelaxation> {
    let mut modes = Vec::with_capacity(bounds.len());
    for (mode, b) in bounds.iter().enumerate() {
        let mut base = b.base.clone();
        let mut varying = None;
        for e in &b.varying {
            if e.row >= base.nrows() || e.col >= base.ncols() {
                return Err(SynthError::Dimension(format!("entry ({}, {}) outside the matrix", e.row, e.col)));
            }
            if !(e.lo <= e.hi) || !e.lo.is_finite() || !e.hi.is_finite() {
                return Err(SynthError::UnsupportedStructure(format!("invalid interval [{}, {}]", e.lo, e.hi)));
            }
            if e.lo == e.hi {
                base[(e.row, e.col)] = e.lo;
                continue;
            }
            if varying.is_some() {
                return Err(SynthError::UnsupportedStructure(format!(
                    "mode {mode} has more than one independently varying entry"
                )));
            }
            varying = Some(*e);
        }
        let vertices = match varying {
            None => vec![base],
            Some(e) => {
                let mut lo = base.clone();
                let mut hi = base;
                lo[(e.row, e.col)] = e.lo;
                hi[(e.row, e.col)] = e.hi;
                vec![lo, hi]
            }
        };
        modes.push(ModeVertices { vertices, varying });
    }
    Ok(PolytopicRelaxation { modes })
}

/// Relaxation of the noise coefficient `F(x)` of the pendulum Jacobian.
pub fn pendulum_relaxation(plant: &PendulumPlant) -> PolytopicRelaxation {
    let ((row, col), lo, hi) = plant.noise_jacobian_interval();
    let n = plant.a.nrows();
    relax_jacobian(&[ModeJacobianBounds {
        base: DMatrix::zeros(n, n),
        varying: vec![EntryBound { row, col, lo, hi }],
    }])
    .expect("single varying entry")
}

/// Relaxation of the plant Jacobians of the Markov jump example, one entry per mode.
pub fn observer_relaxation(plant: &MarkovJumpPlant) -> PolytopicRelaxation {
    let bounds: Vec<ModeJacobianBounds> = plant
        .slope_intervals
        .iter()
        .map(|&(lo, hi)| ModeJacobianBounds {
            base: MarkovJumpPlant::jacobian_with_slope(0.0),
            varying: vec![EntryBound { row: 1, col: 0, lo, hi }],
        })
        .collect();
    relax_jacobian(&bounds).expect("single varying entry")
}

/// Relaxation of the observer error Jacobians `∂f/∂x + H_j C` for fixed gains.
pub fn observer_error_relaxation(plant: &MarkovJumpPlant, gains: &[DMatrix<f64>]) -> Result<PolytopicRelaxation> {
    if gains.len() != plant.mode_count() {
        return Err(SynthError::Dimension(format!("{} gains for {} modes", gains.len(), plant.mode_count())));
    }
    let bounds: Vec<ModeJacobianBounds> = plant
        .slope_intervals
        .iter()
        .zip(gains)
        .map(|(&(lo, hi), h)| {
            let hc = h * &plant.c;
            ModeJacobianBounds {
                base: MarkovJumpPlant::jacobian_with_slope(0.0) + &hc,
                varying: vec![EntryBound { row: 1, col: 0, lo: lo + hc[(1, 0)], hi: hi + hc[(1, 0)] }],
            }
        })
        .collect();
    relax_jacobian(&bounds)
}

fn check_rate(lambda2: f64) -> Result<()> {
    if !(lambda2 > 0.0 && lambda2 <= 1.0) {
        return Err(SynthError::InvalidRate(lambda2));
    }
    Ok(())
}

fn surface(sol: &LmiSolution, lambda2: f64) -> Result<()> {
    match sol.status {
        LmiStatus::Feasible => Ok(()),
        LmiStatus::Infeasible => Err(SynthError::SynthesisInfeasible(lambda2)),
        LmiStatus::MaxIterations => Err(SynthError::SolverTimeout(lambda2)),
    }
}

fn recover_inverse(m: SymMatrix, what: &str) -> Result<(SymMatrix, f64)> {
    let (inv, cond) = inverse_spd(&m)?;
    if cond > CONDITION_WARN {
        log::warn!("{what} has condition number {cond:.3e}");
    }
    Ok((inv, cond))
}

/// State-feedback design for the scalar-noise template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerDesign {
    /// `u = K x`.
    pub gain: DMatrix<f64>,
    /// Constant metric `P = Q⁻¹`.
    pub metric: SymMatrix,
    /// Solver variable `Q`.
    pub inverse_metric: SymMatrix,
    pub lambda2: f64,
    pub solver_margin: f64,
    pub condition_number: f64,
}

/// Controller LMIs for `x⁺ = A x + B u + ξ F(x)`, `F(x) ∈ conv(relax.vertices(0))`.
pub fn synth_controller(
    plant: &PendulumPlant,
    moments: &Moments,
    lambda2: f64,
    relax: &PolytopicRelaxation,
    options: &SolverOptions,
) -> Result<ControllerDesign> {
    check_rate(lambda2)?;
    let (a, b) = (&plant.a, &plant.b);
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || relax.mode_count() != 1 {
        return Err(SynthError::Dimension("controller template expects square A, matching B and one vertex family".into()));
    }
    let mu = moments.mean;
    let sigma = moments.std_dev();

    let mut p = LmiProblem::new();
    let q = p.symmetric("Q", n);
    let y = p.rect("Y", b.ncols(), n);
    let qe = p.expr(q);
    let ye = p.expr(y);
    for (l, f) in relax.vertices(0).iter().enumerate() {
        if f.shape() != (n, n) {
            return Err(SynthError::Dimension("vertex shape differs from A".into()));
        }
        let mean_part = qe.lmul(&(a + f * mu))?.add(&ye.lmul(b)?)?;
        let spread = qe.lmul(&(f * sigma))?;
        let g = AffineExpr::sym_block(&[
            vec![Some(qe.scale(lambda2))],
            vec![Some(mean_part), Some(qe.clone())],
            vec![Some(spread), None, Some(qe.clone())],
        ])?;
        p.add_constraint(&format!("vertex{}", l + 1), g)?;
    }
    p.add_constraint("Q", qe)?;

    let sol = solve(&p, options)?;
    surface(&sol, lambda2)?;
    let qv = sol.sym_value(q);
    let (metric, cond) = recover_inverse(qv.clone(), "controller metric variable")?;
    let gain = sol.value(y) * metric.as_matrix();
    if gain.iter().any(|v| !v.is_finite()) {
        return Err(SynthError::Lmi(LmiError::SolverBreakdown("recovered gain is not finite".into())));
    }
    Ok(ControllerDesign {
        gain,
        metric,
        inverse_metric: qv,
        lambda2,
        solver_margin: sol.achieved_margin,
        condition_number: cond,
    })
}

/// How vertex indices are chosen across modes in one observer constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum VertexCoupling {
    /// Every combination of one vertex per mode; sound when the modes'
    /// interpolation weights are unrelated.
    #[default]
    AllCombinations,
    /// The same vertex index for every mode (fewer constraints; sound only
    /// when all modes share their interpolation weights).
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ObserverOptions {
    pub common_gain: bool,
    pub coupling: VertexCoupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverDesign {
    /// One gain per mode (all equal for a common gain).
    pub gains: Vec<DMatrix<f64>>,
    /// One metric per mode (all equal for a common gain).
    pub metrics: Vec<SymMatrix>,
    pub lambda2: f64,
    pub common_gain: bool,
    pub coupling: VertexCoupling,
    pub solver_margin: f64,
    pub condition_number: f64,
}

fn vertex_choices(relax: &PolytopicRelaxation, coupling: VertexCoupling) -> Result<Vec<Vec<usize>>> {
    match coupling {
        VertexCoupling::AllCombinations => Ok(relax.vertex_combinations()),
        VertexCoupling::Shared => {
            let counts: Vec<usize> = relax.modes.iter().map(|m| m.vertices.len()).collect();
            let max = counts.iter().copied().max().unwrap_or(0);
            if counts.iter().any(|&c| c != max && c != 1) {
                return Err(SynthError::UnsupportedStructure(
                    "shared vertex indexing needs equal vertex counts per mode".into(),
                ));
            }
            Ok((0..max)
                .map(|l| counts.iter().map(|&c| if c == 1 { 0 } else { l }).collect())
                .collect())
        }
    }
}

/// Observer LMIs for a Markov jump plant with output matrix `c`.
pub fn synth_observer(
    c: &DMatrix<f64>,
    transition: &TransitionMatrix,
    relax: &PolytopicRelaxation,
    lambda2: f64,
    obs: ObserverOptions,
    options: &SolverOptions,
) -> Result<ObserverDesign> {
    check_rate(lambda2)?;
    let modes = transition.modes();
    if relax.mode_count() != modes {
        return Err(SynthError::Dimension(format!(
            "{} vertex families for {modes} modes",
            relax.mode_count()
        )));
    }
    let n = c.ncols();
    let outputs = c.nrows();

    let mut p = LmiProblem::new();
    let (pvars, zvars): (Vec<Var>, Vec<Var>) = if obs.common_gain {
        let pv = p.symmetric("P", n);
        let zv = p.rect("Z", n, outputs);
        (vec![pv; modes], vec![zv; modes])
    } else {
        (0..modes)
            .map(|j| (p.symmetric(&format!("P{}", j + 1), n), p.rect(&format!("Z{}", j + 1), n, outputs)))
            .unzip()
    };
    let pe: Vec<AffineExpr> = pvars.iter().map(|v| p.expr(*v)).collect();
    let ze: Vec<AffineExpr> = zvars.iter().map(|v| p.expr(*v)).collect();
    let zc: Vec<AffineExpr> = ze.iter().map(|z| z.rmul(c)).collect::<std::result::Result<_, _>>()?;

    let choices = vertex_choices(relax, obs.coupling)?;
    for i in 0..modes {
        for choice in &choices {
            let mut rows: Vec<Vec<Option<AffineExpr>>> = vec![vec![Some(pe[i].scale(lambda2))]];
            for j in 0..modes {
                let vertex = &relax.vertices(j)[choice[j]];
                if vertex.shape() != (n, n) {
                    return Err(SynthError::Dimension("vertex shape differs from the state dimension".into()));
                }
                let w = transition.prob(j, i).sqrt();
                let off = pe[j].rmul(vertex)?.add(&zc[j])?.scale(w);
                let mut row = vec![Some(off)];
                row.extend((0..j).map(|_| None));
                row.push(Some(pe[j].clone()));
                rows.push(row);
            }
            let label: Vec<String> = choice.iter().map(|l| (l + 1).to_string()).collect();
            p.add_constraint(&format!("mode{}/vertex{}", i + 1, label.join("")), AffineExpr::sym_block(&rows)?)?;
        }
    }
    let distinct = if obs.common_gain { 1 } else { modes };
    for j in 0..distinct {
        p.add_constraint(&format!("P{}", j + 1), pe[j].clone())?;
    }

    let sol = solve(&p, options)?;
    surface(&sol, lambda2)?;
    let mut gains = Vec::with_capacity(modes);
    let mut metrics = Vec::with_capacity(modes);
    let mut worst_cond: f64 = 1.0;
    for j in 0..modes {
        let pj = sol.sym_value(pvars[j]);
        let (inv, cond) = recover_inverse(pj.clone(), "observer metric")?;
        worst_cond = worst_cond.max(cond);
        let h = inv.as_matrix() * sol.value(zvars[j]);
        if h.iter().any(|v| !v.is_finite()) {
            return Err(SynthError::Lmi(LmiError::SolverBreakdown("recovered gain is not finite".into())));
        }
        gains.push(h);
        metrics.push(pj);
    }
    Ok(ObserverDesign {
        gains,
        metrics,
        lambda2,
        common_gain: obs.common_gain,
        coupling: obs.coupling,
        solver_margin: sol.achieved_margin,
        condition_number: worst_cond,
    })
}

/// Constant metric for fixed Jacobians affine in a scalar i.i.d. parameter.
///
/// Solves `λ² P − (J₀ + μF)ᵀ P (J₀ + μF) − σ² Fᵀ P F ⪰ 0` for every vertex
/// `F` of `relax` (one family), with `J₀` the noise-free part.
pub fn analysis_metric_iid(
    j0: &DMatrix<f64>,
    relax: &PolytopicRelaxation,
    moments: &Moments,
    lambda2: f64,
    options: &SolverOptions,
) -> Result<(SymMatrix, f64)> {
    check_rate(lambda2)?;
    let n = j0.nrows();
    let mut p = LmiProblem::new();
    let pv = p.symmetric("P", n);
    let pe = p.expr(pv);
    let sigma2 = moments.variance();
    for (l, f) in relax.vertices(0).iter().enumerate() {
        let mean = j0 + f * moments.mean;
        let g = pe
            .scale(lambda2)
            .sub(&pe.lmul(&mean.transpose())?.rmul(&mean)?)?
            .sub(&pe.lmul(&f.transpose())?.rmul(f)?.scale(sigma2))?;
        p.add_constraint(&format!("vertex{}", l + 1), g)?;
    }
    p.add_constraint("P", pe)?;
    let sol = solve(&p, options)?;
    surface(&sol, lambda2)?;
    Ok((sol.sym_value(pv), sol.achieved_margin))
}

/// Mode-dependent metrics for fixed per-mode Jacobian families.
///
/// Solves `λ² P_i − Σ_j π_{j,i} J_jᵀ P_j J_j ⪰ 0` for every mode `i` and every
/// combination of vertices `J_j` from `relax`.
pub fn analysis_metric_markov(
    transition: &TransitionMatrix,
    relax: &PolytopicRelaxation,
    lambda2: f64,
    options: &SolverOptions,
) -> Result<(Vec<SymMatrix>, f64)> {
    check_rate(lambda2)?;
    let modes = transition.modes();
    if relax.mode_count() != modes {
        return Err(SynthError::Dimension(format!("{} vertex families for {modes} modes", relax.mode_count())));
    }
    let n = relax.vertices(0)[0].nrows();
    let mut p = LmiProblem::new();
    let pvars: Vec<Var> = (0..modes).map(|j| p.symmetric(&format!("P{}", j + 1), n)).collect();
    let pe: Vec<AffineExpr> = pvars.iter().map(|v| p.expr(*v)).collect();
    for i in 0..modes {
        for choice in relax.vertex_combinations() {
            let mut g = pe[i].scale(lambda2);
            for j in 0..modes {
                let w = transition.prob(j, i);
                if w == 0.0 {
                    continue;
                }
                let jm = &relax.vertices(j)[choice[j]];
                g = g.sub(&pe[j].lmul(&jm.transpose())?.rmul(jm)?.scale(w))?;
            }
            p.add_constraint(&format!("mode{}", i + 1), g)?;
        }
    }
    for (j, e) in pe.iter().enumerate() {
        p.add_constraint(&format!("P{}", j + 1), e.clone())?;
    }
    let sol = solve(&p, options)?;
    surface(&sol, lambda2)?;
    Ok((pvars.iter().map(|v| sol.sym_value(*v)).collect(), sol.achieved_margin))
}

/// Smallest feasible squared rate in `(lo, hi]` found by bisection.
///
/// `attempt` is run at `hi` first; infeasibility there is returned as is.
/// Only [`SynthError::SynthesisInfeasible`] moves the search upward; any other
/// error aborts.
pub fn bisect_lambda2<T, F>(lo: f64, hi: f64, steps: usize, mut attempt: F) -> Result<(f64, T)>
where
    F: FnMut(f64) -> Result<T>,
{
    let mut best = (hi, attempt(hi)?);
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        match attempt(mid) {
            Ok(d) => {
                best = (mid, d);
                hi = mid;
            }
            Err(SynthError::SynthesisInfeasible(_)) => lo = mid,
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

pub const DEFAULT_BISECTION_STEPS: usize = 8;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::min_eig;
    use crate::process::ProcessModel;

    fn pendulum_moments() -> Moments {
        PendulumPlant::noise().moments().unwrap()
    }

    #[test]
    fn pendulum_vertices() {
        let plant = PendulumPlant::reference();
        let r = pendulum_relaxation(&plant);
        assert_eq!(r.vertices(0).len(), 2);
        assert_eq!(r.vertices(0)[0][(1, 0)], -1.0 / 20.0);
        assert_eq!(r.vertices(0)[1][(1, 0)], 1.0 / 20.0);
        let x = nalgebra::DVector::from_column_slice(&[0.3, 0.0, 0.0]);
        let w = r.weights(0, &plant.noise_jacobian(&x)).unwrap();
        assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
        let recon = &r.vertices(0)[0] * w[0] + &r.vertices(0)[1] * w[1];
        assert!((recon - plant.noise_jacobian(&x)).amax() < 1e-15);
    }

    #[test]
    fn observer_vertices_match_slopes() {
        let r = observer_relaxation(&MarkovJumpPlant::reference());
        assert_eq!(r.vertices(0)[0], DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -0.75, 0.0]));
        assert_eq!(r.vertices(0)[1], DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -0.25, 0.0]));
        assert_eq!(r.vertex_combinations().len(), 8);
    }

    #[test]
    fn degenerate_interval_and_structure_errors() {
        let base = DMatrix::zeros(2, 2);
        let r = relax_jacobian(&[ModeJacobianBounds {
            base: base.clone(),
            varying: vec![EntryBound { row: 0, col: 1, lo: 0.5, hi: 0.5 }],
        }])
        .unwrap();
        assert_eq!(r.vertices(0).len(), 1);
        assert_eq!(r.vertices(0)[0][(0, 1)], 0.5);
        let err = relax_jacobian(&[ModeJacobianBounds {
            base,
            varying: vec![
                EntryBound { row: 0, col: 0, lo: 0.0, hi: 1.0 },
                EntryBound { row: 1, col: 1, lo: 0.0, hi: 1.0 },
            ],
        }]);
        assert!(matches!(err, Err(SynthError::UnsupportedStructure(_))));
    }

    #[test]
    fn pendulum_controller_round_trip() {
        let plant = PendulumPlant::reference();
        let relax = pendulum_relaxation(&plant);
        let d = synth_controller(&plant, &pendulum_moments(), 0.9, &relax, &SolverOptions::default()).unwrap();
        assert!(d.solver_margin >= 1e-6);
        // pre-Schur inequality at the vertices with the recovered metric and gain
        let acl = &plant.a + &plant.b * &d.gain;
        let m = pendulum_moments();
        for f in relax.vertices(0) {
            let mean = &acl + f * m.mean;
            let lhs = d.metric.scale(0.9).as_matrix()
                - mean.transpose() * d.metric.as_matrix() * &mean
                - f.transpose() * d.metric.as_matrix() * f * m.variance();
            let (l, _) = min_eig(&SymMatrix::new(lhs).unwrap()).unwrap();
            assert!(l > -1e-9, "vertex margin {l}");
        }
    }

    #[test]
    fn absurd_rate_is_infeasible() {
        let plant = PendulumPlant::reference();
        let relax = pendulum_relaxation(&plant);
        let r = synth_controller(&plant, &pendulum_moments(), 1e-6, &relax, &SolverOptions::default());
        assert!(matches!(r, Err(SynthError::SynthesisInfeasible(_))), "{r:?}");
    }

    #[test]
    fn observer_designs_are_feasible() {
        let plant = MarkovJumpPlant::reference();
        let relax = observer_relaxation(&plant);
        for common_gain in [false, true] {
            let d = synth_observer(
                &plant.c,
                &plant.transition,
                &relax,
                0.9,
                ObserverOptions { common_gain, coupling: VertexCoupling::AllCombinations },
                &SolverOptions::default(),
            )
            .unwrap();
            assert_eq!(d.gains.len(), 3);
            assert!(d.solver_margin >= 1e-6);
        }
    }

    #[test]
    fn unobservable_unstable_mode_is_infeasible() {
        let relax = relax_jacobian(&[ModeJacobianBounds { base: DMatrix::from_element(1, 1, 2.0), varying: vec![] }]).unwrap();
        let c = DMatrix::zeros(1, 1);
        let r = synth_observer(&c, &TransitionMatrix::identity(1), &relax, 0.81, ObserverOptions::default(), &SolverOptions::default());
        assert!(matches!(r, Err(SynthError::SynthesisInfeasible(_))), "{r:?}");
    }

    #[test]
    fn analysis_metric_for_stable_linear_chain() {
        let t = TransitionMatrix::from_row_slice(2, &[0.9, 0.2, 0.1, 0.8]).unwrap();
        let relax = relax_jacobian(&[
            ModeJacobianBounds { base: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]), varying: vec![] },
            ModeJacobianBounds { base: DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.2, 0.6]), varying: vec![] },
        ])
        .unwrap();
        let (ps, margin) = analysis_metric_markov(&t, &relax, 0.64, &SolverOptions::default()).unwrap();
        assert_eq!(ps.len(), 2);
        assert!(margin >= 1e-6);
    }

    #[test]
    fn bisection_is_monotone() {
        let plant = PendulumPlant::reference();
        let relax = pendulum_relaxation(&plant);
        let m = ProcessModel::uniform(1.0, 2.0).unwrap().moments().unwrap();
        let (l2, d) = bisect_lambda2(0.0, 0.95, 5, |l2| {
            synth_controller(&plant, &m, l2, &relax, &SolverOptions::default())
        })
        .unwrap();
        assert!(l2 <= 0.95 && d.lambda2 == l2);
        assert!(synth_controller(&plant, &m, (l2 + 0.95) / 2.0, &relax, &SolverOptions::default()).is_ok());
    }
}
