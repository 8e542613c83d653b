//! `scontract`: synthesize, check and verify stochastic contraction certificates.
//!
//! Exit codes: 0 all checks passed, 1 a check failed or a design is
//! infeasible, 2 usage or configuration error, 3 numerical breakdown.

mod commands;
mod config;
mod report;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stochastic_contraction::synth::VertexCoupling;

use config::{parse_vector, GridSpec, Num, ProcessSpec, RunConfig};
use setup::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "scontract", version, about = "Stochastic contraction certificates: synthesis, checks and Monte-Carlo verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sample paths of a system.
    Simulate(Common),
    /// Check a contraction certificate on a state grid and at the relaxation vertices.
    Check(Common),
    /// Design a state-feedback controller for the pendulum.
    SynthController(Common),
    /// Design an observer for the Markov jump plant.
    SynthObserver {
        #[command(flatten)]
        common: Common,
        /// How vertex indices combine across modes.
        #[arg(long, value_enum, default_value_t = Coupling::All)]
        coupling: Coupling,
    },
    /// Estimate the second-moment decay rate by Monte-Carlo.
    Verify(Common),
    /// Run a complete example: synthesis, checks, simulation and figures.
    Reproduce {
        #[arg(value_enum)]
        example: Example,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Coupling {
    All,
    Shared,
}

#[derive(Clone, Copy, ValueEnum)]
enum Example {
    Pendulum,
    MjsObserver,
}

#[derive(Args, Default)]
struct Common {
    /// TOML file with any of the settings below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// pendulum, pendulum-cl, mjs-observer-plant or mjs-observer-error.
    #[arg(long)]
    system: Option<String>,
    /// reference, uniform:LO,HI, constant:V or markov:ROW;ROW;...
    #[arg(long, allow_hyphen_values = true)]
    process: Option<ProcessSpec>,
    /// Squared contraction rate (rationals such as 9/10 accepted).
    #[arg(long)]
    lambda2: Option<Num>,
    /// Comma-separated axes, each lo:hi:step or a fixed value.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<GridSpec>,
    /// Monte-Carlo horizon in steps.
    #[arg(long)]
    horizon: Option<usize>,
    /// Number of Monte-Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulation length in steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Initial state, comma-separated.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_vector)]
    x0: Option<::std::vec::Vec<Num>>,
    /// Use a single gain for all modes.
    #[arg(long)]
    common_gain: bool,
    /// Design file written by a synthesis subcommand.
    #[arg(long)]
    design: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(self) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config '{}': {e}", path.display())))?;
                RunConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("config '{}': {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            system: self.system,
            lambda2: self.lambda2,
            horizon: self.horizon,
            paths: self.paths,
            seed: self.seed,
            steps: self.steps,
            x0: self.x0,
            common_gain: self.common_gain.then_some(true),
            design: self.design,
            out: self.out,
            process: self.process,
            grid: self.grid,
        };
        Ok(base.overlay(flags))
    }
}

fn run(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Simulate(c) => commands::simulate(c.resolve()?),
        Command::Check(c) => commands::check(c.resolve()?),
        Command::SynthController(c) => commands::synth_controller_cmd(c.resolve()?),
        Command::SynthObserver { common, coupling } => {
            let coupling = match coupling {
                Coupling::All => VertexCoupling::AllCombinations,
                Coupling::Shared => VertexCoupling::Shared,
            };
            commands::synth_observer_cmd(common.resolve()?, coupling)
        }
        Command::Verify(c) => commands::verify(c.resolve()?),
        Command::Reproduce { example: Example::Pendulum, common } => commands::reproduce_pendulum(common.resolve()?),
        Command::Reproduce { example: Example::MjsObserver, common } => commands::reproduce_mjs(common.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
