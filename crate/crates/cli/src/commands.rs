//! Subcommand implementations. Each returns whether its checks passed.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use stochastic_contraction::certify::{
    check_finite_markov, check_iid, CheckReport, Certificate, Metric, Quadrature, StateGrid,
};
use stochastic_contraction::lmi::SolverOptions;
use stochastic_contraction::matcore::SymMatrix;
use stochastic_contraction::process::{sample_path, ProcessModel, Transition, TransitionMatrix};
use stochastic_contraction::synth::{
    analysis_metric_iid, analysis_metric_markov, observer_error_relaxation, observer_relaxation, pendulum_relaxation,
    synth_controller, synth_observer, ObserverDesign, ObserverOptions, PolytopicRelaxation, SynthError, VertexCoupling,
};
use stochastic_contraction::sysmodel::{MarkovJumpPlant, PendulumPlant, SystemModel, Trajectory};
use stochastic_contraction::verify::{
    estimate_decay, estimate_observer_error, fraction_settled, mean_square_curve, simulate_paths, Distance,
    McSettings, ObservedPlant, VerificationReport,
};

use crate::config::RunConfig;
use crate::report::{ensure_dir, line_chart, Report, Series};
use crate::setup::{build_grid, resolve_process, usage, vector, CliError, CliResult, DesignFile, Resolved, Setup};

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_LAMBDA2: f64 = 0.9;
/// Slack allowed between a Monte-Carlo rate and the certified rate.
pub const RATE_SLACK: f64 = 0.02;
const SETTLE_TOL: f64 = 1e-3;
const SAMPLE_PATHS_WRITTEN: usize = 20;

struct Context {
    cfg: RunConfig,
    setup: Setup,
    proc: Resolved,
    out: PathBuf,
}

impl Context {
    fn new(cfg: RunConfig) -> CliResult<Self> {
        let design = cfg.design.as_deref().map(DesignFile::load).transpose()?;
        let setup = Setup::resolve(cfg.system.as_deref(), design, cfg.common_gain.unwrap_or(false))?;
        let proc = resolve_process(cfg.process.as_ref(), &setup)?;
        let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("scontract-out"));
        Ok(Context { cfg, setup, proc, out })
    }

    fn seed(&self) -> u64 {
        self.cfg.seed.unwrap_or(DEFAULT_SEED)
    }

    fn x0(&self, sys: &SystemModel) -> CliResult<DVector<f64>> {
        match &self.cfg.x0 {
            Some(v) => vector(v, sys.state_dim(), "--x0"),
            None => Ok(self.setup.default_x0()),
        }
    }

    fn grid(&self, sys: &SystemModel) -> CliResult<StateGrid> {
        let spec = self.cfg.grid.clone().unwrap_or_else(|| self.setup.default_grid());
        build_grid(&spec, sys.state_dim())
    }

    fn mc(&self, horizon: usize, paths: usize) -> McSettings {
        let mc = McSettings::new(self.cfg.horizon.unwrap_or(horizon), self.cfg.paths.unwrap_or(paths), self.seed());
        match self.proc.initial_mode {
            Some(m) => mc.with_initial_mode(m),
            None => mc,
        }
    }

    fn transition(&self) -> CliResult<TransitionMatrix> {
        match &self.proc.process {
            ProcessModel::FiniteMarkov(Transition::Stationary(t)) => Ok(t.clone()),
            _ => usage("a stationary finite-mode process is required"),
        }
    }

    fn lambda2(&self, fallback: Option<f64>) -> Option<f64> {
        self.cfg.lambda2.map(|n| n.get()).or(fallback)
    }

    fn dir(&self) -> CliResult<PathBuf> {
        Ok(ensure_dir(&self.out)?)
    }
}

/// Write the report and the resolved configuration, then echo the report.
fn finish(ctx: &Context, report: &Report, dir: &Path) -> CliResult<bool> {
    report.write(dir)?;
    std::fs::write(dir.join("config.toml"), ctx.cfg.to_toml())?;
    print!("{}", report.text());
    println!("artifacts written to {}", dir.display());
    Ok(report.passed)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_mat(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m.row_iter().map(|r| fmt_vec(&r.iter().copied().collect::<Vec<_>>())).collect();
    format!("[{}]", rows.join(", "))
}

fn check_report(report: &mut Report, name: &str, r: &CheckReport) {
    report.line(&format!("{name} worst margin"), format!("{:.6e}", r.worst_margin));
    let mut at = format!("x = {}", fmt_vec(&r.worst_point.state));
    if let Some(m) = r.worst_point.mode {
        at.push_str(&format!(", mode {}", m + 1));
    }
    report.line(&format!("{name} worst point"), at);
    report.line(&format!("{name} points"), r.points_checked);
    report.verdict(name, r.passed);
}

/// Certificate check at every vertex of the relaxation, taken at the origin.
///
/// The vertex systems are linear, so a single state suffices; together with
/// the grid check this covers the whole Jacobian family.
fn vertex_check(
    setup: &Setup,
    proc: &ProcessModel,
    cert: &Certificate,
    relax: &PolytopicRelaxation,
) -> CliResult<CheckReport> {
    let origin = StateGrid::from_points(vec![vec![0.0; relax.vertices(0)[0].nrows()]])?;
    let mut out: Option<CheckReport> = None;
    let mut count = 0;
    if setup.is_markov() {
        for combo in relax.vertex_combinations() {
            let mats: Vec<DMatrix<f64>> = combo.iter().enumerate().map(|(j, &l)| relax.vertices(j)[l].clone()).collect();
            let sys = SystemModel::markov_linear("vertex", mats);
            let r = check_finite_markov(&sys, proc, cert, &origin)?;
            count += r.points_checked;
            out = Some(match out {
                Some(prev) => prev.merge(r),
                None => r,
            });
        }
    } else {
        let (j0, _) = setup.iid_structure().expect("independent-noise setup");
        for f in relax.vertices(0) {
            let sys = SystemModel::scalar_noise_linear("vertex", j0.clone(), f.clone());
            let r = check_iid(&sys, proc, cert, &origin, Quadrature::Exact)?;
            count += r.points_checked;
            out = Some(match out {
                Some(prev) => prev.merge(r),
                None => r,
            });
        }
    }
    let mut out = out.expect("at least one vertex");
    out.points_checked = count;
    Ok(out)
}

fn grid_check(sys: &SystemModel, setup: &Setup, proc: &ProcessModel, cert: &Certificate, grid: &StateGrid) -> CliResult<CheckReport> {
    Ok(if setup.is_markov() {
        check_finite_markov(sys, proc, cert, grid)?
    } else {
        check_iid(sys, proc, cert, grid, Quadrature::Exact)?
    })
}

fn trajectories_csv(path: &Path, trajs: &[Trajectory]) -> CliResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = trajs.first().map(|t| t.states[0].len()).unwrap_or(0);
    let mut header = vec!["path".to_string(), "k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.push("xi".into());
    writeln!(w, "{}", header.join(","))?;
    for (p, t) in trajs.iter().enumerate() {
        for (i, x) in t.states.iter().enumerate() {
            let mut row = vec![p.to_string(), (t.k0 + i as i64).to_string()];
            row.extend(x.iter().map(|v| format!("{v:.12e}")));
            row.push(t.path.values.get(i).map(|xi| xi.to_string()).unwrap_or_default());
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

fn trajectory_series(trajs: &[Trajectory], component: usize) -> Vec<Series> {
    trajs
        .iter()
        .take(SAMPLE_PATHS_WRITTEN)
        .enumerate()
        .map(|(p, t)| Series {
            name: format!("path {p}"),
            points: t.states.iter().enumerate().map(|(i, x)| ((t.k0 + i as i64) as f64, x[component])).collect(),
        })
        .collect()
}

fn decay_series(name: &str, r: &VerificationReport) -> Series {
    Series { name: name.into(), points: r.points.iter().map(|p| (p.k as f64, p.estimate)).collect() }
}

pub fn simulate(cfg: RunConfig) -> CliResult<bool> {
    let ctx = Context::new(cfg)?;
    let steps = ctx.cfg.steps.unwrap_or(200);
    if steps == 0 {
        return usage("--steps must be at least 1");
    }
    let paths = ctx.cfg.paths.unwrap_or(1);
    if paths == 0 {
        return usage("--paths must be at least 1");
    }
    let sys = ctx.setup.model();
    let x0 = ctx.x0(&sys)?;
    let mut mc = ctx.mc(steps, paths);
    mc.horizon = steps;
    let trajs = simulate_paths(&sys, &ctx.proc.process, &x0, &mc)?;
    let dir = ctx.dir()?;
    trajectories_csv(&dir.join("trajectories.csv"), &trajs)?;
    let svg = line_chart(&format!("{} sample paths", sys.name()), "k", "x1", &trajectory_series(&trajs, 0), false);
    std::fs::write(dir.join("curves.svg"), svg)?;

    let mut report = Report::new("simulate");
    report.line("system", sys.name());
    report.line("process", format!("{:?}", ctx.proc.process));
    report.line("paths", paths);
    report.line("steps", steps);
    report.line("seed", ctx.seed());
    report.line("x0", fmt_vec(x0.as_slice()));
    let ms = mean_square_curve(&trajs);
    report.line("final mean square", format!("{:.6e}", ms.last().copied().unwrap_or(f64::NAN)));
    report.line("fraction settled at end", fraction_settled(&trajs, steps, SETTLE_TOL));
    finish(&ctx, &report, &dir)
}

/// Where the metric of a check came from.
enum MetricSource {
    Design(Metric),
    Analysis(Metric, f64),
    Fallback(Metric),
}

fn find_metric(ctx: &Context, lambda2: f64, relax: &PolytopicRelaxation) -> CliResult<MetricSource> {
    match &ctx.setup {
        Setup::Pendulum { metric: Some(p), .. } => return Ok(MetricSource::Design(Metric::Constant(p.clone()))),
        Setup::MjsError { metrics: Some(ps), .. } => return Ok(MetricSource::Design(Metric::ModeDependent(ps.clone()))),
        _ => {}
    }
    let opts = SolverOptions::default();
    let found = if ctx.setup.is_markov() {
        analysis_metric_markov(&ctx.transition()?, relax, lambda2, &opts).map(|(ps, m)| (Metric::ModeDependent(ps), m))
    } else {
        let (j0, _) = ctx.setup.iid_structure().expect("independent-noise setup");
        let moments = ctx.proc.process.moments().map_err(|e| CliError::Usage(e.to_string()))?;
        analysis_metric_iid(&j0, relax, &moments, lambda2, &opts).map(|(p, m)| (Metric::Constant(p), m))
    };
    match found {
        Ok((metric, margin)) => Ok(MetricSource::Analysis(metric, margin)),
        Err(SynthError::SynthesisInfeasible(_)) => {
            let n = relax.vertices(0)[0].nrows();
            Ok(MetricSource::Fallback(Metric::Constant(SymMatrix::identity(n))))
        }
        Err(e) => Err(e.into()),
    }
}

fn relaxation(setup: &Setup) -> CliResult<PolytopicRelaxation> {
    Ok(match setup.markov_relaxation()? {
        Some(r) => r,
        None => setup.iid_structure().expect("independent-noise setup").1,
    })
}

pub fn check(cfg: RunConfig) -> CliResult<bool> {
    let ctx = Context::new(cfg)?;
    let design_rate = match &ctx.setup {
        Setup::Pendulum { lambda2, .. } | Setup::MjsError { lambda2, .. } => *lambda2,
        Setup::MjsPlant { .. } => None,
    };
    let Some(lambda2) = ctx.lambda2(design_rate) else {
        return usage("--lambda2 is required");
    };
    let sys = ctx.setup.model();
    let grid = ctx.grid(&sys)?;
    let relax = relaxation(&ctx.setup)?;
    let mut report = Report::new("check");
    report.line("system", sys.name());
    report.line("process", format!("{:?}", ctx.proc.process));
    report.line("lambda^2", lambda2);
    let metric = match find_metric(&ctx, lambda2, &relax)? {
        MetricSource::Design(m) => {
            report.line("metric source", "design file");
            m
        }
        MetricSource::Analysis(m, margin) => {
            report.line("metric source", "analysis LMI");
            report.line("solver margin", format!("{margin:.6e}"));
            m
        }
        MetricSource::Fallback(m) => {
            report.line("metric source", "Euclidean (analysis LMI infeasible)");
            report.note("no metric satisfies the relaxed conditions at this rate; the identity metric is checked instead");
            m
        }
    };
    report.data("metric", &metric);
    let cert = Certificate::new(metric, lambda2)?;
    report.section("vertices");
    let v = vertex_check(&ctx.setup, &ctx.proc.process, &cert, &relax)?;
    check_report(&mut report, "vertex check", &v);
    report.section("grid");
    let g = grid_check(&sys, &ctx.setup, &ctx.proc.process, &cert, &grid)?;
    check_report(&mut report, "grid check", &g);
    finish(&ctx, &report, &ctx.dir()?)
}

/// Synthesize a controller and check it; `None` when infeasible.
fn controller_stage(
    ctx: &Context,
    lambda2: f64,
    report: &mut Report,
) -> CliResult<Option<stochastic_contraction::synth::ControllerDesign>> {
    let plant = PendulumPlant::reference();
    let moments = ctx.proc.process.moments().map_err(|e| CliError::Usage(e.to_string()))?;
    let relax = pendulum_relaxation(&plant);
    report.section("synthesis");
    report.line("lambda^2", lambda2);
    let design = match synth_controller(&plant, &moments, lambda2, &relax, &SolverOptions::default()) {
        Ok(d) => d,
        Err(SynthError::SynthesisInfeasible(_)) => {
            report.verdict("synthesis feasible", false);
            return Ok(None);
        }
        Err(e) => return Err(e.into()),
    };
    report.verdict("synthesis feasible", true);
    report.line("gain", fmt_mat(&design.gain));
    report.line("metric", fmt_mat(design.metric.as_matrix()));
    report.line("solver margin", format!("{:.6e}", design.solver_margin));
    report.line("condition number", format!("{:.4e}", design.condition_number));
    report.data("design", &design);

    let setup = Setup::Pendulum { plant: plant.clone(), gain: Some(design.gain.clone()), metric: None, lambda2: None };
    let sys = setup.model();
    let cert = Certificate::new(Metric::Constant(design.metric.clone()), lambda2)?;
    let grid = ctx.grid(&sys)?;
    report.section("certificate");
    let v = vertex_check(&setup, &ctx.proc.process, &cert, &relax)?;
    check_report(report, "vertex check", &v);
    let g = grid_check(&sys, &setup, &ctx.proc.process, &cert, &grid)?;
    check_report(report, "grid check", &g);
    Ok(Some(design))
}

fn pendulum_context(cfg: RunConfig) -> CliResult<Context> {
    let mut cfg = cfg;
    let sys = cfg.system.get_or_insert_with(|| "pendulum".into()).replace('_', "-");
    if !sys.starts_with("pendulum") {
        return usage("controller synthesis applies to the pendulum");
    }
    cfg.design = None;
    Context::new(cfg)
}

fn observer_context(cfg: RunConfig) -> CliResult<Context> {
    let mut cfg = cfg;
    let sys = cfg.system.get_or_insert_with(|| "mjs-observer-plant".into()).replace('_', "-");
    if !sys.starts_with("mjs-observer") {
        return usage("observer synthesis applies to the Markov jump plant");
    }
    cfg.system = Some("mjs-observer-plant".into());
    cfg.design = None;
    Context::new(cfg)
}

pub fn synth_controller_cmd(cfg: RunConfig) -> CliResult<bool> {
    let ctx = pendulum_context(cfg)?;
    let lambda2 = ctx.lambda2(None).unwrap_or(DEFAULT_LAMBDA2);
    let mut report = Report::new("synth-controller");
    let dir = ctx.dir()?;
    if let Some(d) = controller_stage(&ctx, lambda2, &mut report)? {
        DesignFile::Controller(d).save(&dir.join("design.json"))?;
        report.line("design file", dir.join("design.json").display().to_string());
    }
    finish(&ctx, &report, &dir)
}

/// Synthesize an observer and check it; `None` when infeasible.
fn observer_stage(
    ctx: &Context,
    lambda2: f64,
    options: ObserverOptions,
    label: &str,
    report: &mut Report,
) -> CliResult<Option<ObserverDesign>> {
    let plant = MarkovJumpPlant::reference();
    let t = ctx.transition()?;
    report.section(&format!("{label} synthesis"));
    report.line(&format!("{label} lambda^2"), lambda2);
    let design = match synth_observer(&plant.c, &t, &observer_relaxation(&plant), lambda2, options, &SolverOptions::default()) {
        Ok(d) => d,
        Err(SynthError::SynthesisInfeasible(_)) => {
            report.verdict(&format!("{label} feasible"), false);
            return Ok(None);
        }
        Err(e) => return Err(e.into()),
    };
    report.verdict(&format!("{label} feasible"), true);
    for (j, h) in design.gains.iter().enumerate() {
        report.line(&format!("{label} gain mode {}", j + 1), fmt_vec(h.as_slice()));
    }
    report.line(&format!("{label} solver margin"), format!("{:.6e}", design.solver_margin));
    report.line(&format!("{label} condition number"), format!("{:.4e}", design.condition_number));
    report.data(&format!("{label} design"), &design);

    let setup = Setup::MjsError { plant: plant.clone(), gains: design.gains.clone(), metrics: None, lambda2: None };
    let sys = setup.model();
    let relax = observer_error_relaxation(&plant, &design.gains)?;
    let cert = Certificate::new(Metric::ModeDependent(design.metrics.clone()), lambda2)?;
    let v = vertex_check(&setup, &ctx.proc.process, &cert, &relax)?;
    check_report(report, &format!("{label} vertex check"), &v);
    let g = grid_check(&sys, &setup, &ctx.proc.process, &cert, &ctx.grid(&sys)?)?;
    check_report(report, &format!("{label} grid check"), &g);
    Ok(Some(design))
}

pub fn synth_observer_cmd(cfg: RunConfig, coupling: VertexCoupling) -> CliResult<bool> {
    let ctx = observer_context(cfg)?;
    let lambda2 = ctx.lambda2(None).unwrap_or(DEFAULT_LAMBDA2);
    let common_gain = ctx.cfg.common_gain.unwrap_or(false);
    let label = if common_gain { "common gain" } else { "mode-dependent" };
    let mut report = Report::new("synth-observer");
    let dir = ctx.dir()?;
    if let Some(d) = observer_stage(&ctx, lambda2, ObserverOptions { common_gain, coupling }, label, &mut report)? {
        DesignFile::Observer(d).save(&dir.join("design.json"))?;
        report.line("design file", dir.join("design.json").display().to_string());
    }
    finish(&ctx, &report, &dir)
}

fn rate_verdict(report: &mut Report, name: &str, r: &VerificationReport, lambda2: Option<f64>) {
    let rate = r.effective_rate();
    match rate {
        Some(v) => report.line(&format!("{name} rate"), format!("{v:.6}")),
        None => report.line(&format!("{name} rate"), "none"),
    }
    let bound = lambda2.map(|l| l.sqrt() + RATE_SLACK).unwrap_or(1.0);
    report.line(&format!("{name} rate bound"), format!("{bound:.6}"));
    report.verdict(&format!("{name} decay"), rate.is_some_and(|v| v <= bound && (lambda2.is_some() || v < 1.0)));
}

pub fn verify(cfg: RunConfig) -> CliResult<bool> {
    let ctx = Context::new(cfg)?;
    let sys = ctx.setup.model();
    let x0 = ctx.x0(&sys)?;
    let mc = ctx.mc(if ctx.setup.is_markov() { 100 } else { 200 }, 1000);
    let mut report = Report::new("verify");
    report.line("system", sys.name());
    report.line("process", format!("{:?}", ctx.proc.process));
    let (decay, lambda2) = match &ctx.setup {
        Setup::MjsError { plant, gains, lambda2, .. } => {
            let plant_sys = plant.plant();
            let target = ObservedPlant { plant: &plant_sys, process: &ctx.proc.process, output: &plant.c };
            let xhat0 = DVector::zeros(2);
            report.line("observer start", fmt_vec(xhat0.as_slice()));
            (estimate_observer_error(&target, gains, &x0, &xhat0, &mc)?, *lambda2)
        }
        Setup::Pendulum { lambda2, .. } => {
            let pairs = [(x0.clone(), DVector::zeros(sys.state_dim()))];
            (estimate_decay(&sys, &ctx.proc.process, &pairs, 2, &Distance::Euclidean, &mc)?, *lambda2)
        }
        Setup::MjsPlant { .. } => {
            let pairs = [(x0.clone(), DVector::zeros(sys.state_dim()))];
            (estimate_decay(&sys, &ctx.proc.process, &pairs, 2, &Distance::Euclidean, &mc)?, None)
        }
    };
    report.line("x0", fmt_vec(x0.as_slice()));
    report.note(decay.summary().trim_end());
    report.data("decay", &decay);
    rate_verdict(&mut report, "second moment", &decay, ctx.lambda2(lambda2));
    let dir = ctx.dir()?;
    decay.write_csv(std::fs::File::create(dir.join("decay.csv"))?)?;
    let svg = line_chart("second-moment decay", "k", "estimate (log scale)", &[decay_series(sys.name(), &decay)], true);
    std::fs::write(dir.join("curves.svg"), svg)?;
    finish(&ctx, &report, &dir)
}

pub fn reproduce_pendulum(cfg: RunConfig) -> CliResult<bool> {
    let ctx = pendulum_context(cfg)?;
    let lambda2 = ctx.lambda2(None).unwrap_or(DEFAULT_LAMBDA2);
    let mut report = Report::new("reproduce pendulum");
    let dir = ctx.dir()?;
    let Some(design) = controller_stage(&ctx, lambda2, &mut report)? else {
        return finish(&ctx, &report, &dir);
    };
    DesignFile::Controller(design.clone()).save(&dir.join("design.json"))?;

    let plant = PendulumPlant::reference();
    let sys = plant.closed_loop(&design.gain);
    let x0 = ctx.x0(&sys)?;
    let mc = ctx.mc(200, 1000);
    report.section("simulation");
    report.line("x0", fmt_vec(x0.as_slice()));
    report.line("paths", mc.n_paths);
    report.line("horizon", mc.horizon);
    report.line("seed", mc.seed);
    let trajs = simulate_paths(&sys, &ctx.proc.process, &x0, &mc)?;
    let settled = fraction_settled(&trajs, mc.horizon, SETTLE_TOL);
    let first_99 = (0..=mc.horizon).find(|&k| fraction_settled(&trajs, k, SETTLE_TOL) >= 0.99);
    report.line("fraction settled at end", settled);
    report.line("first k with 99% settled", first_99.map(|k| k.to_string()).unwrap_or_else(|| "never".into()));
    report.verdict("all paths settle", settled == 1.0);
    trajectories_csv(&dir.join("trajectories.csv"), &trajs[..trajs.len().min(SAMPLE_PATHS_WRITTEN)])?;

    report.section("decay");
    let pairs = [(x0.clone(), DVector::zeros(3))];
    let decay = estimate_decay(&sys, &ctx.proc.process, &pairs, 2, &Distance::Euclidean, &mc)?;
    report.note(decay.summary().trim_end());
    report.data("decay", &decay);
    rate_verdict(&mut report, "second moment", &decay, Some(lambda2));
    decay.write_csv(std::fs::File::create(dir.join("decay.csv"))?)?;

    let mut series = trajectory_series(&trajs, 0);
    series.truncate(10);
    std::fs::write(dir.join("curves.svg"), line_chart("pendulum angle, sample paths", "k", "angle", &series, false))?;
    let ms: Vec<(f64, f64)> = mean_square_curve(&trajs).into_iter().enumerate().map(|(k, v)| (k as f64, v)).collect();
    let decay_svg = line_chart(
        "mean square and normalized decay",
        "k",
        "log scale",
        &[Series { name: "E|x|^2".into(), points: ms }, decay_series("normalized", &decay)],
        true,
    );
    std::fs::write(dir.join("decay.svg"), decay_svg)?;
    finish(&ctx, &report, &dir)
}

/// One plant path with both observers run along it.
fn observer_traces(
    ctx: &Context,
    plant: &MarkovJumpPlant,
    x0: &DVector<f64>,
    designs: &[(&str, &[DMatrix<f64>])],
    horizon: usize,
) -> CliResult<(String, Vec<Series>)> {
    let sys = plant.plant();
    let path = sample_path(&ctx.proc.process, 0, horizon, ctx.proc.initial_mode, ctx.seed())
        .map_err(|e| CliError::Other(e.into()))?;
    let traj = stochastic_contraction::sysmodel::simulate(&sys, &path, x0)?;
    let mut estimates: Vec<Vec<DVector<f64>>> = Vec::new();
    for (_, gains) in designs {
        let mut xhat = DVector::zeros(2);
        let mut est = vec![xhat.clone()];
        for (i, &xi) in path.values.iter().enumerate() {
            let j = xi.mode().expect("mode noise");
            let innovation = &plant.c * (&xhat - &traj.states[i]);
            xhat = sys.step(i as i64, &xhat, xi) + &gains[j] * innovation;
            est.push(xhat.clone());
        }
        estimates.push(est);
    }
    let mut csv = String::from("k,mode,x1,x2");
    for (name, _) in designs {
        let tag = name.replace(' ', "_");
        csv.push_str(&format!(",{tag}_x1,{tag}_x2"));
    }
    csv.push('\n');
    for (i, x) in traj.states.iter().enumerate() {
        let mode = path.values.get(i).and_then(|v| v.mode()).map(|m| (m + 1).to_string()).unwrap_or_default();
        csv.push_str(&format!("{i},{mode},{:.12e},{:.12e}", x[0], x[1]));
        for est in &estimates {
            csv.push_str(&format!(",{:.12e},{:.12e}", est[i][0], est[i][1]));
        }
        csv.push('\n');
    }
    let mut series = vec![Series {
        name: "x1".into(),
        points: traj.states.iter().enumerate().map(|(i, x)| (i as f64, x[0])).collect(),
    }];
    for ((name, _), est) in designs.iter().zip(&estimates) {
        series.push(Series { name: format!("{name} x1"), points: est.iter().enumerate().map(|(i, x)| (i as f64, x[0])).collect() });
    }
    Ok((csv, series))
}

pub fn reproduce_mjs(cfg: RunConfig) -> CliResult<bool> {
    let ctx = observer_context(cfg)?;
    let lambda2 = ctx.lambda2(None).unwrap_or(DEFAULT_LAMBDA2);
    let mut report = Report::new("reproduce mjs-observer");
    let dir = ctx.dir()?;
    let md = observer_stage(&ctx, lambda2, ObserverOptions { common_gain: false, ..Default::default() }, "mode-dependent", &mut report)?;
    let common = observer_stage(&ctx, lambda2, ObserverOptions { common_gain: true, ..Default::default() }, "common gain", &mut report)?;
    let (Some(md), Some(common)) = (md, common) else {
        return finish(&ctx, &report, &dir);
    };
    DesignFile::Observer(md.clone()).save(&dir.join("design_mode_dependent.json"))?;
    DesignFile::Observer(common.clone()).save(&dir.join("design_common.json"))?;

    let plant = MarkovJumpPlant::reference();
    let plant_sys = plant.plant();
    let x0 = ctx.x0(&plant_sys)?;
    let xhat0 = DVector::zeros(2);
    let mc = ctx.mc(100, 1000);
    report.section("observer error");
    report.line("x0", fmt_vec(x0.as_slice()));
    report.line("observer start", fmt_vec(xhat0.as_slice()));
    report.line("paths", mc.n_paths);
    report.line("horizon", mc.horizon);
    report.line("seed", mc.seed);
    let target = ObservedPlant { plant: &plant_sys, process: &ctx.proc.process, output: &plant.c };
    let md_err = estimate_observer_error(&target, &md.gains, &x0, &xhat0, &mc)?;
    let common_err = estimate_observer_error(&target, &common.gains, &x0, &xhat0, &mc)?;
    rate_verdict(&mut report, "mode-dependent", &md_err, Some(lambda2));
    rate_verdict(&mut report, "common gain", &common_err, Some(lambda2));
    let (a, b) = (md_err.effective_rate(), common_err.effective_rate());
    report.verdict("mode-dependent at least as fast", matches!((a, b), (Some(a), Some(b)) if a <= b + RATE_SLACK));
    report.data("mode-dependent decay", &md_err);
    report.data("common gain decay", &common_err);

    let mut csv = String::from("k,mode_dependent,mode_dependent_stderr,common,common_stderr\n");
    for (p, q) in md_err.points.iter().zip(&common_err.points) {
        csv.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", p.k, p.estimate, p.stderr, q.estimate, q.stderr));
    }
    std::fs::write(dir.join("decay.csv"), csv)?;

    let designs: [(&str, &[DMatrix<f64>]); 2] = [("mode-dependent", &md.gains), ("common gain", &common.gains)];
    let (traj_csv, traces) = observer_traces(&ctx, &plant, &x0, &designs, mc.horizon.min(40))?;
    std::fs::write(dir.join("trajectories.csv"), traj_csv)?;
    std::fs::write(dir.join("curves.svg"), line_chart("state and estimates along one path", "k", "x1", &traces, false))?;
    let decay_svg = line_chart(
        "observer mean-square error",
        "k",
        "E|error|^2 (log scale)",
        &[decay_series("mode-dependent", &md_err), decay_series("common gain", &common_err)],
        true,
    );
    std::fs::write(dir.join("decay.svg"), decay_svg)?;
    finish(&ctx, &report, &dir)
}
