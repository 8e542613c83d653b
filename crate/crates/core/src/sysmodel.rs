//! Discrete-time stochastic dynamics `x_{k+1} = f_k(x_k, ξ_k)`.
//!
//! A [`SystemModel`] carries the step map and its state Jacobian. Where the
//! Jacobian is affine in a scalar noise, `∂f/∂x = J₀(x) + ξ·J₁(x)`, the model
//! can expose that split so certificate checks can take expectations exactly.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::process::{
    reference_three_mode_transition, Noise, ProcessModel, ProcessPath, TransitionMatrix,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error("state diverged (non-finite) at k = {0}")]
    Diverged(i64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unknown system '{0}'")]
    UnknownSystem(String),
    #[error("noise {noise} is incompatible with system '{system}'")]
    NoiseMismatch { system: String, noise: String },
    #[error("empty process path")]
    EmptyPath,
}

pub type Result<T> = std::result::Result<T, SystemError>;

pub type StepFn = Arc<dyn Fn(i64, &DVector<f64>, Noise) -> DVector<f64> + Send + Sync>;
pub type JacFn = Arc<dyn Fn(i64, &DVector<f64>, Noise) -> DMatrix<f64> + Send + Sync>;
/// `(J₀, J₁)` with `∂f/∂x = J₀ + ξ J₁`.
pub type AffineJacFn = Arc<dyn Fn(i64, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync>;

/// What kind of noise a system consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Dynamics do not depend on `ξ`.
    None,
    Real,
    Modes(usize),
}

#[derive(Clone)]
pub struct SystemModel {
    name: String,
    state_dim: usize,
    noise: NoiseKind,
    time_varying: bool,
    step: StepFn,
    jac: JacFn,
    affine_jac: Option<AffineJacFn>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("noise", &self.noise)
            .field("time_varying", &self.time_varying)
            .field("affine_in_noise", &self.affine_jac.is_some())
            .finish()
    }
}

impl SystemModel {
    pub fn new<S, J>(name: impl Into<String>, state_dim: usize, noise: NoiseKind, step: S, jac: J) -> Self
    where
        S: Fn(i64, &DVector<f64>, Noise) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(i64, &DVector<f64>, Noise) -> DMatrix<f64> + Send + Sync + 'static,
    {
        SystemModel {
            name: name.into(),
            state_dim,
            noise,
            time_varying: false,
            step: Arc::new(step),
            jac: Arc::new(jac),
            affine_jac: None,
        }
    }

    /// Noise-free, time-invariant map `x ↦ g(x)`.
    pub fn deterministic<G, DG>(name: impl Into<String>, state_dim: usize, g: G, dg: DG) -> Self
    where
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        DG: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::new(name, state_dim, NoiseKind::None, move |_, x, _| g(x), move |_, x, _| dg(x))
    }

    /// `x ↦ A x`.
    pub fn linear(name: impl Into<String>, a: DMatrix<f64>) -> Self {
        let n = a.nrows();
        let (s, j, aff) = (a.clone(), a.clone(), a);
        Self::new(name, n, NoiseKind::None, move |_, x, _| &s * x, move |_, _, _| j.clone())
            .with_affine_jacobian(move |_, _| (aff.clone(), DMatrix::zeros(n, n)))
    }

    /// `x ↦ (A₀ + ξ A₁) x` with scalar `ξ`.
    pub fn scalar_noise_linear(name: impl Into<String>, a0: DMatrix<f64>, a1: DMatrix<f64>) -> Self {
        let n = a0.nrows();
        let (s0, s1) = (a0.clone(), a1.clone());
        let (j0, j1) = (a0.clone(), a1.clone());
        Self::new(
            name,
            n,
            NoiseKind::Real,
            move |_, x, xi| (&s0 + &s1 * xi.value()) * x,
            move |_, _, xi| &j0 + &j1 * xi.value(),
        )
        .with_affine_jacobian(move |_, _| (a0.clone(), a1.clone()))
    }

    /// Markov jump linear system `x ↦ A_j x` with `j = ξ_k`.
    pub fn markov_linear(name: impl Into<String>, modes: Vec<DMatrix<f64>>) -> Self {
        let n = modes[0].nrows();
        let m = modes.len();
        let step_modes = modes.clone();
        Self::new(
            name,
            n,
            NoiseKind::Modes(m),
            move |_, x, xi| &step_modes[xi.mode().expect("mode noise")] * x,
            move |_, _, xi| modes[xi.mode().expect("mode noise")].clone(),
        )
    }

    pub fn with_affine_jacobian<F>(mut self, f: F) -> Self
    where
        F: Fn(i64, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync + 'static,
    {
        self.affine_jac = Some(Arc::new(f));
        self
    }

    pub fn with_time_varying(mut self, time_varying: bool) -> Self {
        self.time_varying = time_varying;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_kind(&self) -> NoiseKind {
        self.noise
    }

    pub fn is_time_varying(&self) -> bool {
        self.time_varying
    }

    pub fn is_noise_free(&self) -> bool {
        self.noise == NoiseKind::None
    }

    pub fn affine_jacobian(&self) -> Option<&AffineJacFn> {
        self.affine_jac.as_ref()
    }

    pub fn step(&self, k: i64, x: &DVector<f64>, xi: Noise) -> DVector<f64> {
        (self.step)(k, x, xi)
    }

    pub fn jacobian(&self, k: i64, x: &DVector<f64>, xi: Noise) -> DMatrix<f64> {
        (self.jac)(k, x, xi)
    }

    /// Ensure `xi` is a value this system can consume.
    pub fn accepts(&self, xi: Noise) -> Result<()> {
        let ok = match (self.noise, xi) {
            (NoiseKind::None, _) => true,
            (NoiseKind::Real, Noise::Real(_)) => true,
            (NoiseKind::Modes(m), Noise::Mode(j)) => j < m,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(SystemError::NoiseMismatch { system: self.name.clone(), noise: format!("{xi:?}") })
        }
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(SystemError::Dimension(format!(
                "state has length {}, system '{}' expects {}",
                x.len(),
                self.name,
                self.state_dim
            )));
        }
        Ok(())
    }
}

/// A simulated solution `x_{k₀}, …, x_{k₀+len}` and the path that drove it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub k0: i64,
    pub states: Vec<DVector<f64>>,
    pub path: ProcessPath,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    /// CSV with columns `k, x1..xn, xi`; the final row has an empty `xi`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.states[0].len();
        let mut header = vec!["k".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.push("xi".into());
        writeln!(w, "{}", header.join(","))?;
        for (i, x) in self.states.iter().enumerate() {
            let k = self.k0 + i as i64;
            let mut row = vec![k.to_string()];
            row.extend(x.iter().map(|v| format!("{v:.17e}")));
            row.push(self.path.values.get(i).map(|xi| xi.to_string()).unwrap_or_default());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Run the recursion along `path` from `x0`.
pub fn simulate(sys: &SystemModel, path: &ProcessPath, x0: &DVector<f64>) -> Result<Trajectory> {
    sys.check_state(x0)?;
    if path.is_empty() {
        return Err(SystemError::EmptyPath);
    }
    let mut states = Vec::with_capacity(path.len() + 1);
    states.push(x0.clone());
    let mut x = x0.clone();
    for (i, &xi) in path.values.iter().enumerate() {
        sys.accepts(xi)?;
        let k = path.start_time + i as i64;
        x = sys.step(k, &x, xi);
        if x.len() != sys.state_dim {
            return Err(SystemError::Dimension(format!("step returned length {}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::Diverged(k + 1));
        }
        states.push(x.clone());
    }
    Ok(Trajectory { k0: path.start_time, states, path: path.clone() })
}

/// `Φ_{k₀} = I, Φ_{k+1} = ∂f_k(x_k, ξ_k)/∂x · Φ_k` along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalProduct {
    pub k0: i64,
    pub phi: Vec<DMatrix<f64>>,
}

pub fn variational(sys: &SystemModel, traj: &Trajectory) -> Result<VariationalProduct> {
    let n = sys.state_dim();
    let mut phi = Vec::with_capacity(traj.states.len());
    let mut current = DMatrix::<f64>::identity(n, n);
    phi.push(current.clone());
    for (i, &xi) in traj.path.values.iter().enumerate() {
        let k = traj.k0 + i as i64;
        let j = sys.jacobian(k, &traj.states[i], xi);
        current = j * current;
        if current.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::Diverged(k + 1));
        }
        phi.push(current.clone());
    }
    Ok(VariationalProduct { k0: traj.k0, phi })
}

/// Discretized pendulum driven by a DC motor with a random stiffness-like parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct PendulumPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub dt: f64,
}

impl PendulumPlant {
    /// Euler discretization with sampling period 1/20.
    pub fn reference() -> Self {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0, 1.0 / 20.0, 0.0, //
                0.0, 3.0 / 4.0, 1.0 / 10.0, //
                0.0, -1.0 / 10.0, 3.0 / 4.0,
            ],
        );
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0 / 2.0]);
        PendulumPlant { a, b, dt: 1.0 / 20.0 }
    }

    /// Reference stabilizing gain (a fixture, not a synthesized design).
    pub fn reference_gain() -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 3, &[-20.6, -4.09, -1.75])
    }

    /// Noise coefficient of the Jacobian: `F(x)` with entry `(2,1) = −cos(x_p)/20`.
    pub fn noise_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut f = DMatrix::zeros(3, 3);
        f[(1, 0)] = -x[0].cos() * self.dt;
        f
    }

    /// Bounds of the only varying entry of `F(x)`.
    pub fn noise_jacobian_interval(&self) -> ((usize, usize), f64, f64) {
        ((1, 0), -self.dt, self.dt)
    }

    /// Closed loop `u = K x`.
    pub fn closed_loop(&self, gain: &DMatrix<f64>) -> SystemModel {
        let acl = &self.a + &self.b * gain;
        let dt = self.dt;
        let plant = self.clone();
        let plant2 = self.clone();
        let (acl_step, acl_jac, acl_aff) = (acl.clone(), acl.clone(), acl);
        SystemModel::new(
            "pendulum_cl",
            3,
            NoiseKind::Real,
            move |_, x, xi| {
                let mut next = &acl_step * x;
                next[1] -= xi.value() * x[0].sin() * dt;
                next
            },
            move |_, x, xi| &acl_jac + plant.noise_jacobian(x) * xi.value(),
        )
        .with_affine_jacobian(move |_, x| (acl_aff.clone(), plant2.noise_jacobian(x)))
    }

    pub fn open_loop(&self) -> SystemModel {
        let mut s = self.closed_loop(&DMatrix::zeros(1, 3));
        s.name = "pendulum".into();
        s
    }

    pub fn noise() -> ProcessModel {
        ProcessModel::uniform(1.0, 2.0).expect("valid interval")
    }
}

/// Planar three-mode Markov jump plant with a mode-dependent scalar nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovJumpPlant {
    pub c: DMatrix<f64>,
    pub transition: TransitionMatrix,
    /// Interval containing `d f₂(z, j)/dz` for each mode.
    pub slope_intervals: Vec<(f64, f64)>,
}

impl MarkovJumpPlant {
    pub fn reference() -> Self {
        MarkovJumpPlant {
            c: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            transition: reference_three_mode_transition(),
            slope_intervals: vec![(-0.75, -0.25), (-0.25, 0.25), (0.25, 0.75)],
        }
    }

    /// Second state update used for simulation.
    pub fn f2(z: f64, mode: usize) -> f64 {
        match mode {
            0 => z.cos() / 4.0 - z / 2.0,
            1 => z.sin() / 4.0,
            2 => z.cos() / 4.0 + z / 2.0,
            _ => panic!("mode {mode} out of range"),
        }
    }

    pub fn df2(z: f64, mode: usize) -> f64 {
        match mode {
            0 => -z.sin() / 4.0 - 0.5,
            1 => z.cos() / 4.0,
            2 => -z.sin() / 4.0 + 0.5,
            _ => panic!("mode {mode} out of range"),
        }
    }

    pub fn mode_count(&self) -> usize {
        self.transition.modes()
    }

    /// `∂f/∂x = [[1, 1], [s, 0]]` for slope `s`.
    pub fn jacobian_with_slope(s: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, s, 0.0])
    }

    pub fn plant(&self) -> SystemModel {
        SystemModel::new(
            "mjs_observer_plant",
            2,
            NoiseKind::Modes(self.mode_count()),
            |_, x, xi| {
                let j = xi.mode().expect("mode noise");
                DVector::from_column_slice(&[x[0] + x[1], Self::f2(x[0], j)])
            },
            |_, x, xi| Self::jacobian_with_slope(Self::df2(x[0], xi.mode().expect("mode noise"))),
        )
    }

    /// Observer dynamics `x̂ ↦ f(x̂, j) + H_j C x̂` with the measurement treated as an
    /// exogenous input; its Jacobian `∂f/∂x + H_j C` is what a contraction
    /// certificate for the observer must bound.
    pub fn observer_error(&self, gains: &[DMatrix<f64>]) -> SystemModel {
        assert_eq!(gains.len(), self.mode_count(), "one gain per mode");
        let hc: Vec<DMatrix<f64>> = gains.iter().map(|h| h * &self.c).collect();
        let hc2 = hc.clone();
        SystemModel::new(
            "mjs_observer_error",
            2,
            NoiseKind::Modes(self.mode_count()),
            move |_, x, xi| {
                let j = xi.mode().expect("mode noise");
                DVector::from_column_slice(&[x[0] + x[1], Self::f2(x[0], j)]) + &hc[j] * x
            },
            move |_, x, xi| {
                let j = xi.mode().expect("mode noise");
                Self::jacobian_with_slope(Self::df2(x[0], j)) + &hc2[j]
            },
        )
    }

    /// Reference mode-dependent observer gains (fixtures).
    pub fn reference_mode_gains() -> Vec<DMatrix<f64>> {
        vec![
            DMatrix::from_column_slice(2, 1, &[-1.00, 0.824]),
            DMatrix::from_column_slice(2, 1, &[-1.00, 0.338]),
            DMatrix::from_column_slice(2, 1, &[-1.00, 0.00470]),
        ]
    }

    /// Reference common observer gain (fixture).
    pub fn reference_common_gain() -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0751, -0.00214])
    }

    pub fn noise(&self) -> ProcessModel {
        ProcessModel::markov(self.transition.clone())
    }
}

/// Named systems shipped with the crate.
///
/// * `pendulum` – open-loop pendulum (`u = 0`), noise `U[1,2]`
/// * `pendulum_cl` – pendulum closed with the reference gain
/// * `mjs_observer_plant` – three-mode Markov jump plant
/// * `mjs_observer_error` – observer dynamics with the reference mode-dependent gains
///
/// Hyphens and underscores are interchangeable in names.
pub fn builtin(name: &str) -> Result<(SystemModel, ProcessModel)> {
    let key = name.replace('-', "_");
    match key.as_str() {
        "pendulum" => {
            let p = PendulumPlant::reference();
            Ok((p.open_loop(), PendulumPlant::noise()))
        }
        "pendulum_cl" => {
            let p = PendulumPlant::reference();
            Ok((p.closed_loop(&PendulumPlant::reference_gain()), PendulumPlant::noise()))
        }
        "mjs_observer_plant" | "mjs_observer" => {
            let p = MarkovJumpPlant::reference();
            Ok((p.plant(), p.noise()))
        }
        "mjs_observer_error" => {
            let p = MarkovJumpPlant::reference();
            Ok((p.observer_error(&MarkovJumpPlant::reference_mode_gains()), p.noise()))
        }
        _ => Err(SystemError::UnknownSystem(name.to_string())),
    }
}

/// Central finite-difference Jacobian of `sys.step` (test and diagnostics helper).
pub fn finite_difference_jacobian(sys: &SystemModel, k: i64, x: &DVector<f64>, xi: Noise, h: f64) -> DMatrix<f64> {
    let n = sys.state_dim();
    let mut j = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += h;
        xm[c] -= h;
        let d = (sys.step(k, &xp, xi) - sys.step(k, &xm, xi)) / (2.0 * h);
        j.set_column(c, &d);
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::sample_path;

    #[test]
    fn pendulum_reference_matrices() {
        let p = PendulumPlant::reference();
        assert_eq!(p.a[(0, 1)], 1.0 / 20.0);
        assert_eq!(p.a[(2, 1)], -1.0 / 10.0);
        assert_eq!(p.b[(2, 0)], 0.5);
    }

    #[test]
    fn pendulum_origin_is_fixed() {
        let (sys, noise) = builtin("pendulum_cl").unwrap();
        let path = sample_path(&noise, 0, 30, None, 1).unwrap();
        let traj = simulate(&sys, &path, &DVector::zeros(3)).unwrap();
        assert!(traj.states.iter().all(|x| x.iter().all(|v| *v == 0.0)));
        assert_eq!(traj.states.len(), 31);
    }

    #[test]
    fn halving_map_is_geometric() {
        let sys = SystemModel::linear("half", DMatrix::from_element(1, 1, 0.5));
        let path = ProcessPath::from_values(0, vec![Noise::Real(0.0); 10]);
        let traj = simulate(&sys, &path, &DVector::from_element(1, 1.0)).unwrap();
        for (k, x) in traj.states.iter().enumerate() {
            assert_eq!(x[0], 0.5f64.powi(k as i32));
        }
    }

    #[test]
    fn variational_starts_at_identity_and_chains_linear_maps() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.2, 0.3]);
        let sys = SystemModel::linear("lin", a.clone());
        let path = ProcessPath::from_values(3, vec![Noise::Real(0.0); 6]);
        let traj = simulate(&sys, &path, &DVector::from_column_slice(&[1.0, -1.0])).unwrap();
        let var = variational(&sys, &traj).unwrap();
        assert_eq!(var.k0, 3);
        assert_eq!(var.phi[0], DMatrix::identity(2, 2));
        let mut pow = DMatrix::identity(2, 2);
        for phi in &var.phi {
            assert!((phi - &pow).norm() < 1e-14);
            pow = &a * pow;
        }
    }

    #[test]
    fn diverging_state_is_reported() {
        let sys = SystemModel::linear("blowup", DMatrix::from_element(1, 1, 1e200));
        let path = ProcessPath::from_values(0, vec![Noise::Real(0.0); 5]);
        let r = simulate(&sys, &path, &DVector::from_element(1, 1e200));
        assert_eq!(r, Err(SystemError::Diverged(1)));
    }

    #[test]
    fn unknown_builtin() {
        assert!(matches!(builtin("double-pendulum"), Err(SystemError::UnknownSystem(_))));
    }

    #[test]
    fn markov_plant_slopes_and_chain() {
        let (_, noise) = builtin("mjs_observer_plant").unwrap();
        let ProcessModel::FiniteMarkov(crate::process::Transition::Stationary(t)) = noise else {
            panic!("expected a stationary chain")
        };
        for i in 0..3 {
            let s: f64 = (0..3).map(|j| t.prob(j, i)).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(MarkovJumpPlant::df2(0.0, 1), 0.25);
        let plant = MarkovJumpPlant::reference();
        for mode in 0..3 {
            let (lo, hi) = plant.slope_intervals[mode];
            for i in 0..2000 {
                let z = -10.0 + 0.01 * i as f64;
                let s = MarkovJumpPlant::df2(z, mode);
                assert!(s >= lo - 1e-15 && s <= hi + 1e-15);
            }
        }
    }

    #[test]
    fn mode_noise_is_validated() {
        let (sys, _) = builtin("mjs_observer_plant").unwrap();
        let path = ProcessPath::from_values(0, vec![Noise::Mode(5)]);
        assert!(matches!(
            simulate(&sys, &path, &DVector::zeros(2)),
            Err(SystemError::NoiseMismatch { .. })
        ));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let sys = SystemModel::linear("half", DMatrix::from_element(1, 1, 0.5));
        let path = ProcessPath::from_values(0, vec![Noise::Real(0.0); 2]);
        let traj = simulate(&sys, &path, &DVector::from_element(1, 1.0)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "k,x1,xi");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(','));
    }
}
