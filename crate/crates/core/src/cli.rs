//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{error, info};
use thiserror::Error;

use crate::io::{
    csv_metrics, parse_problem, read_nodal_displacements, write_results, write_vtk, CellFields, ConfigError, OutputError,
    OutputSelection, Problem,
};
use crate::solver::{error_metrics, gradient_check, r_adapt, rate_study, SolutionState, SolverError, RATE_STUDY_HEADER};
use crate::spectral::EigenConfig;

pub const THREADS_ENV: &str = "PLASTICGRAPH_THREADS";

#[derive(Debug, Parser)]
#[command(name = "plasticgraph", version, about = "Data-free J2 elastoplasticity by incremental energy minimization")]
pub struct Cli {
    /// Worker threads for element loops (falls back to PLASTICGRAPH_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for randomized checks.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the output directory of the problem file.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs the load history and writes fields, traces and a summary.
    Solve {
        problem: PathBuf,
        /// Continue with later steps after a non-converged step.
        #[arg(long)]
        keep_going: bool,
    },
    /// Spectral report and iterations-to-tolerance per mesh.
    Conditioning {
        problem: PathBuf,
        /// Further problem files forming the refinement sequence.
        #[arg(long, num_args = 1..)]
        meshes: Vec<PathBuf>,
        /// Relative L2 tolerance against the direct reference.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Largest gradient-descent run used to measure the rate.
        #[arg(long, default_value_t = 200_000)]
        gd_cap: usize,
    },
    /// MAE and relative L2 error of a field CSV against a reference CSV.
    Metrics { fields: PathBuf, reference: PathBuf },
    /// Parses and validates a problem, printing the resolved configuration.
    Validate { problem: PathBuf },
    /// Finite-difference check of both loss gradients on the first step.
    Gradcheck {
        problem: PathBuf,
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Half-width of the random displacement box.
        #[arg(long, default_value_t = 1e-3)]
        amplitude: f64,
        #[arg(long, default_value_t = 1e-5)]
        energy_tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        galerkin_tol: f64,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("invalid --threads value {0:?}")]
    Threads(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Threads(_) => 2,
            CliError::Output(OutputError::Read { .. } | OutputError::Parse { .. }) => 2,
            CliError::Output(OutputError::NoCommonColumns(..) | OutputError::RowCount(..)) => 2,
            _ => 1,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_count(cli: &Cli) -> Result<Option<usize>, CliError> {
    if let Some(n) = cli.threads {
        return if n == 0 { Err(CliError::Threads("0".into())) } else { Ok(Some(n)) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Threads(v)),
        },
        Err(_) => Ok(None),
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli)? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Threads(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Solve { problem, keep_going } => solve(problem, cli.output_dir.as_deref(), *keep_going),
        Command::Conditioning { problem, meshes, tol, gd_cap } => {
            conditioning(problem, meshes, *tol, *gd_cap, cli.seed, cli.output_dir.as_deref())
        }
        Command::Metrics { fields, reference } => {
            let m = csv_metrics(fields, reference)?;
            let l2 = m.l2.map_or_else(|| "NA".to_string(), |v| format!("{v:e}"));
            println!("MAE={:e} L2={l2}", m.mae);
            Ok(())
        }
        Command::Validate { problem } => validate(problem),
        Command::Gradcheck { problem, points, amplitude, energy_tol, galerkin_tol } => {
            let p = load(problem)?;
            let model = &p.solver.model;
            let check = gradient_check(model, &p.steps[0], *points, *amplitude, cli.seed)?;
            println!(
                "points={} plastic_points={} energy_rel_err={:e} galerkin_rel_err={:e}",
                check.points, check.plastic_points, check.energy, check.galerkin
            );
            if check.energy > *energy_tol || check.galerkin > *galerkin_tol {
                return Err(CliError::CheckFailed(format!(
                    "gradient check exceeded tolerance (energy {energy_tol:e}, galerkin {galerkin_tol:e})"
                )));
            }
            Ok(())
        }
    })
}

fn load(path: &Path) -> Result<Problem, CliError> {
    Ok(parse_problem(path)?.build()?)
}

fn validate(path: &Path) -> Result<(), CliError> {
    let config = parse_problem(path)?;
    let problem = config.build()?;
    let mesh = problem.solver.model.disc.mesh();
    println!(
        "valid: {} nodes, {} elements, {} dofs, {} gauss points, {} steps, loss {}, hardening {}",
        mesh.n_nodes(),
        mesh.n_elements(),
        mesh.n_dofs(),
        problem.solver.model.disc.n_gauss(),
        problem.steps.len(),
        problem.solver.loss,
        format!("{:?}", problem.solver.model.mode).to_lowercase()
    );
    println!("{}", config.echo());
    Ok(())
}

fn solve(path: &Path, output_dir: Option<&Path>, keep_going: bool) -> Result<(), CliError> {
    let problem = load(path)?;
    let dir = output_dir.map_or_else(|| problem.output.directory.clone(), Path::to_path_buf);
    let solver = &problem.solver;
    let states = solver.run_history(&problem.steps, keep_going)?;
    let mut metrics = Vec::with_capacity(states.len());
    for (i, st) in states.iter().enumerate() {
        let m = match problem.references.get(i) {
            Some(r) => {
                let reference = read_nodal_displacements(r)?;
                if reference.len() != st.u.len() {
                    return Err(OutputError::LengthMismatch { expected: st.u.len(), got: reference.len() }.into());
                }
                let m = error_metrics(&st.u, &reference);
                info!("step {:?}: MAE {:e}, L2 {:?}", st.label, m.mae, m.l2);
                Some(m)
            }
            None => None,
        };
        metrics.push(m);
    }
    let select = OutputSelection { vtk: problem.output.vtk, nodal_csv: problem.output.nodal_csv, gauss_csv: problem.output.gauss_csv };
    write_results(&dir, &solver.model, &states, &metrics, select)?;
    let failed: Vec<&str> = states.iter().filter(|s| !s.converged).map(|s| s.label.as_str()).collect();
    if let Some((step, config)) = &problem.r_adapt {
        if failed.is_empty() && *step < states.len() {
            let prev = if *step == 0 { SolutionState::virgin(&solver.model) } else { states[step - 1].clone() };
            let result = r_adapt(solver, &prev, &states[*step], &problem.steps[*step], config)?;
            let cells = CellFields::from_history(&result.model, &result.state.history);
            write_vtk(&dir.join("r_adapt.vtk"), &result.model, &result.state.u, &cells)?;
            let text = format!(
                "energy_before,energy_after\n{},{}\n",
                crate::io::fmt_f64(result.energy_before),
                crate::io::fmt_f64(result.energy_after)
            );
            std::fs::write(dir.join("r_adapt.csv"), text)
                .map_err(|source| OutputError::Write { path: dir.join("r_adapt.csv"), source })?;
            println!("r-adapt: energy {:e} -> {:e}", result.energy_before, result.energy_after);
        }
    }
    for st in &states {
        println!(
            "{}: {} iterations, {}, residual {:e}",
            st.label,
            st.iterations(),
            st.termination().map_or_else(|| "no iterations".to_string(), |t| t.to_string()),
            st.residual_inf
        );
    }
    if !failed.is_empty() || states.len() < problem.steps.len() {
        return Err(CliError::NotConverged(format!("steps not converged: {}", failed.join(", "))));
    }
    Ok(())
}

fn conditioning(
    problem: &Path,
    meshes: &[PathBuf],
    tol: f64,
    gd_cap: usize,
    seed: u64,
    output_dir: Option<&Path>,
) -> Result<(), CliError> {
    let mut cases = Vec::with_capacity(meshes.len() + 1);
    for path in std::iter::once(problem).chain(meshes.iter().map(PathBuf::as_path)) {
        let p = load(path)?;
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        cases.push((label, p.solver, p.steps[0].clone()));
    }
    let eigen = EigenConfig { seed, ..Default::default() };
    let rows = rate_study(&cases, tol, &eigen, gd_cap)?;
    let mut text = format!("{RATE_STUDY_HEADER}\n");
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    print!("{text}");
    if let Some(dir) = output_dir {
        std::fs::create_dir_all(dir).map_err(|source| OutputError::Write { path: dir.to_path_buf(), source })?;
        let path = dir.join("conditioning.csv");
        std::fs::write(&path, text).map_err(|source| OutputError::Write { path, source })?;
    }
    Ok(())
}
