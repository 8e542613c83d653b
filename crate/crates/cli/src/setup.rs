//! Resolution of system names, processes and design files into library objects.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use stochastic_contraction::certify::{CertifyError, StateGrid};
use stochastic_contraction::lmi::LmiError;
use stochastic_contraction::matcore::SymMatrix;
use stochastic_contraction::process::{ProcessModel, TransitionMatrix};
use stochastic_contraction::synth::{
    observer_error_relaxation, pendulum_relaxation, ControllerDesign, ObserverDesign, PolytopicRelaxation, SynthError,
};
use stochastic_contraction::sysmodel::{MarkovJumpPlant, PendulumPlant, SystemError, SystemModel};

use crate::config::{GridSpec, Num, ProcessSpec};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs (exit 2).
    Usage(String),
    /// The solver broke down or ran out of iterations (exit 3).
    Breakdown(String),
    /// Anything else, such as I/O (exit 1).
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Breakdown(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Breakdown(m) => write!(f, "numerical breakdown: {m}"),
            CliError::Other(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::SolverTimeout(_) | SynthError::Lmi(LmiError::SolverBreakdown(_)) => CliError::Breakdown(e.to_string()),
            SynthError::InvalidRate(_) | SynthError::Dimension(_) => CliError::Usage(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<CertifyError> for CliError {
    fn from(e: CertifyError) -> Self {
        match e {
            CertifyError::InvalidRate(_)
            | CertifyError::ModeMismatch { .. }
            | CertifyError::InvalidGrid(_)
            | CertifyError::EmptyGrid
            | CertifyError::ProcessKind(_) => CliError::Usage(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<SystemError> for CliError {
    fn from(e: SystemError) -> Self {
        match e {
            SystemError::UnknownSystem(_) | SystemError::NoiseMismatch { .. } | SystemError::Dimension(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Other(other.into()),
        }
    }
}

impl From<stochastic_contraction::verify::VerifyError> for CliError {
    fn from(e: stochastic_contraction::verify::VerifyError) -> Self {
        use stochastic_contraction::verify::VerifyError as V;
        match e {
            V::HorizonTooShort(_) | V::NoPaths | V::Dimension(_) | V::DegeneratePairs => CliError::Usage(e.to_string()),
            other => CliError::Other(other.into()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// A synthesized design as written by the synthesis subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DesignFile {
    Controller(ControllerDesign),
    Observer(ObserverDesign),
}

impl DesignFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read design '{}': {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("design '{}': {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("design serializes"))?;
        Ok(())
    }
}

/// A built-in system together with the data the analyses need.
#[derive(Debug, Clone)]
pub enum Setup {
    Pendulum { plant: PendulumPlant, gain: Option<DMatrix<f64>>, metric: Option<SymMatrix>, lambda2: Option<f64> },
    MjsPlant { plant: MarkovJumpPlant },
    MjsError { plant: MarkovJumpPlant, gains: Vec<DMatrix<f64>>, metrics: Option<Vec<SymMatrix>>, lambda2: Option<f64> },
}

pub const SYSTEMS: &str = "pendulum, pendulum-cl, mjs-observer-plant, mjs-observer-error";

impl Setup {
    /// `system` may be omitted when a design names its own system.
    pub fn resolve(system: Option<&str>, design: Option<DesignFile>, common_gain: bool) -> CliResult<Self> {
        let key = match (system, &design) {
            (Some(s), _) => s.replace('_', "-"),
            (None, Some(DesignFile::Controller(_))) => "pendulum-cl".into(),
            (None, Some(DesignFile::Observer(_))) => "mjs-observer-error".into(),
            (None, None) => return usage(format!("--system is required (one of {SYSTEMS})")),
        };
        let setup = match (key.as_str(), design) {
            ("pendulum", None) => Setup::Pendulum { plant: PendulumPlant::reference(), gain: None, metric: None, lambda2: None },
            ("pendulum-cl" | "pendulum", Some(DesignFile::Controller(d))) => Setup::Pendulum {
                plant: PendulumPlant::reference(),
                gain: Some(d.gain),
                metric: Some(d.metric),
                lambda2: Some(d.lambda2),
            },
            ("pendulum-cl", None) => Setup::Pendulum {
                plant: PendulumPlant::reference(),
                gain: Some(PendulumPlant::reference_gain()),
                metric: None,
                lambda2: None,
            },
            ("mjs-observer-plant" | "mjs-observer", None) => Setup::MjsPlant { plant: MarkovJumpPlant::reference() },
            ("mjs-observer-error", Some(DesignFile::Observer(d))) => Setup::MjsError {
                plant: MarkovJumpPlant::reference(),
                gains: d.gains,
                metrics: Some(d.metrics),
                lambda2: Some(d.lambda2),
            },
            ("mjs-observer-error", None) => {
                let plant = MarkovJumpPlant::reference();
                let gains = if common_gain {
                    vec![MarkovJumpPlant::reference_common_gain(); plant.mode_count()]
                } else {
                    MarkovJumpPlant::reference_mode_gains()
                };
                Setup::MjsError { plant, gains, metrics: None, lambda2: None }
            }
            (k, Some(_)) if ["pendulum", "pendulum-cl", "mjs-observer-plant", "mjs-observer", "mjs-observer-error"].contains(&k) => {
                return usage(format!("the design file does not match system '{k}'"))
            }
            (k, _) => return usage(format!("unknown system '{k}' (one of {SYSTEMS})")),
        };
        Ok(setup)
    }

    pub fn model(&self) -> SystemModel {
        match self {
            Setup::Pendulum { plant, gain: Some(k), .. } => plant.closed_loop(k),
            Setup::Pendulum { plant, gain: None, .. } => plant.open_loop(),
            Setup::MjsPlant { plant } => plant.plant(),
            Setup::MjsError { plant, gains, .. } => plant.observer_error(gains),
        }
    }

    pub fn is_markov(&self) -> bool {
        !matches!(self, Setup::Pendulum { .. })
    }

    pub fn modes(&self) -> Option<usize> {
        match self {
            Setup::Pendulum { .. } => None,
            Setup::MjsPlant { plant } | Setup::MjsError { plant, .. } => Some(plant.mode_count()),
        }
    }

    pub fn default_x0(&self) -> DVector<f64> {
        match self {
            Setup::Pendulum { .. } => DVector::from_column_slice(&[2.0, 0.0, 0.0]),
            _ => DVector::from_column_slice(&[2.0, 2.0]),
        }
    }

    /// The grids used when `--grid` is absent.
    pub fn default_grid(&self) -> GridSpec {
        let text = match self {
            Setup::Pendulum { .. } => "-pi:pi:0.01,0,0",
            _ => "-10:10:0.01,0",
        };
        text.parse().expect("default grid parses")
    }

    /// Noise-free Jacobian part and the relaxation of the noise coefficient.
    pub fn iid_structure(&self) -> Option<(DMatrix<f64>, PolytopicRelaxation)> {
        match self {
            Setup::Pendulum { plant, gain, .. } => {
                let j0 = match gain {
                    Some(k) => &plant.a + &plant.b * k,
                    None => plant.a.clone(),
                };
                Some((j0, pendulum_relaxation(plant)))
            }
            _ => None,
        }
    }

    /// Per-mode Jacobian relaxation for the Markov systems.
    pub fn markov_relaxation(&self) -> CliResult<Option<PolytopicRelaxation>> {
        Ok(match self {
            Setup::Pendulum { .. } => None,
            Setup::MjsPlant { plant } => {
                let zero = vec![DMatrix::zeros(2, 1); plant.mode_count()];
                Some(observer_error_relaxation(plant, &zero)?)
            }
            Setup::MjsError { plant, gains, .. } => Some(observer_error_relaxation(plant, gains)?),
        })
    }

    pub fn reference_process(&self) -> ProcessModel {
        match self {
            Setup::Pendulum { .. } => PendulumPlant::noise(),
            Setup::MjsPlant { plant } | Setup::MjsError { plant, .. } => plant.noise(),
        }
    }
}

/// A process with the initial mode (0-based) used for finite chains.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub process: ProcessModel,
    pub initial_mode: Option<usize>,
}

pub fn resolve_process(spec: Option<&ProcessSpec>, setup: &Setup) -> CliResult<Resolved> {
    let spec = spec.cloned().unwrap_or(ProcessSpec::Reference);
    let process = match &spec {
        ProcessSpec::Reference => setup.reference_process(),
        ProcessSpec::Uniform { lo, hi } => {
            ProcessModel::uniform(lo.get(), hi.get()).map_err(|e| CliError::Usage(e.to_string()))?
        }
        ProcessSpec::Constant { value } => ProcessModel::constant(value.get()),
        ProcessSpec::Markov { transition, .. } => {
            let m = transition.len();
            if m == 0 || transition.iter().any(|r| r.len() != m) {
                return usage("transition matrix must be square");
            }
            let entries: Vec<f64> = transition.iter().flatten().map(|n| n.get()).collect();
            let t = TransitionMatrix::from_row_slice(m, &entries).map_err(|e| CliError::Usage(e.to_string()))?;
            ProcessModel::markov(t)
        }
    };
    match (setup.modes(), process.mode_count()) {
        (Some(a), Some(b)) if a != b => return usage(format!("system has {a} modes, process has {b}")),
        (Some(_), None) => return usage("this system needs a finite-mode (markov) process"),
        (None, Some(_)) => return usage("this system needs an independent real-valued process"),
        _ => {}
    }
    let initial_mode = match (&spec, process.mode_count()) {
        (_, None) => None,
        (ProcessSpec::Markov { initial_mode: Some(i), .. }, Some(m)) => {
            if *i == 0 || *i > m {
                return usage(format!("initial mode {i} outside 1..={m}"));
            }
            Some(i - 1)
        }
        (_, Some(_)) => Some(0),
    };
    Ok(Resolved { process, initial_mode })
}

pub fn build_grid(spec: &GridSpec, dim: usize) -> CliResult<StateGrid> {
    if spec.lo.len() != dim || spec.hi.len() != dim || spec.step.len() != dim {
        return usage(format!("grid has {} axes, the system state has {dim}", spec.lo.len()));
    }
    let f = |v: &[Num]| v.iter().map(|n| n.get()).collect::<Vec<_>>();
    Ok(StateGrid::boxed(&f(&spec.lo), &f(&spec.hi), &f(&spec.step))?)
}

pub fn vector(v: &[Num], dim: usize, what: &str) -> CliResult<DVector<f64>> {
    if v.len() != dim {
        return usage(format!("{what} has {} entries, the system state has {dim}", v.len()));
    }
    Ok(DVector::from_iterator(dim, v.iter().map(|n| n.get())))
}
