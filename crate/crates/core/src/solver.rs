//! Load-step driver: Dirichlet masking, per-step minimization with history
//! carry-over, a Newton reference solver, r-adaptivity and error metrics.


use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{
    assemble_external_force, assemble_tangent_stiffness, coordinate_gradient, energy_gradient, energy_loss,
    galerkin_gradient, galerkin_loss, residual, FieldError, FieldState, Model, Traction,
};
use crate::material::GaussHistory;
use crate::mesh::NodeElementGraph;
use crate::optim::{lbfgs_minimize_with, norm_inf, LbfgsConfig, OptimError, OptimTrace, Termination};
use crate::sparse::FactorError;
use crate::spectral::{spectral_report, EigenConfig, FactoredMatrix, SpectralError, SpectralReport};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("unknown node set {0:?}")]
    UnknownNodeSet(String),
    #[error("conflicting Dirichlet values on node {node} component {component}: {first} vs {second}")]
    ConflictingBc { node: usize, component: usize, first: f64, second: f64 },
    #[error("Dirichlet value given for component {component} on a {dim}D mesh")]
    InvalidComponent { component: usize, dim: usize },
    #[error("vector length {got} does not match {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("node {0} carries a traction and cannot be moved")]
    MovableLoadedNode(usize),
    #[error("Newton reference solve stalled after {iters} iterations (residual {residual:.3e})")]
    NewtonNotConverged { iters: usize, residual: f64 },
    #[error("no load steps to run")]
    NoSteps,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Energy,
    Galerkin,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Energy => "energy",
            LossKind::Galerkin => "galerkin",
        })
    }
}

/// Unknown displacements, Dirichlet mask (`true` = free) and prescribed
/// values; the composed field is `u_var ⊙ m + ū`.
#[derive(Clone, Debug, PartialEq)]
pub struct DofField {
    pub u_var: Vec<f64>,
    pub free: Vec<bool>,
    pub u_bar: Vec<f64>,
}

impl DofField {
    pub fn unconstrained(n: usize) -> Self {
        DofField { u_var: vec![0.0; n], free: vec![true; n], u_bar: vec![0.0; n] }
    }

    pub fn compose(&self) -> Result<Vec<f64>, SolverError> {
        compose_with(&self.u_var, &self.free, &self.u_bar)
    }

    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|&&m| m).count()
    }
}

pub fn compose_with(u_var: &[f64], free: &[bool], u_bar: &[f64]) -> Result<Vec<f64>, SolverError> {
    let n = free.len();
    for got in [u_var.len(), u_bar.len()] {
        if got != n {
            return Err(SolverError::LengthMismatch { expected: n, got });
        }
    }
    Ok(u_var.iter().zip(free).zip(u_bar).map(|((v, &m), b)| if m { *v } else { *b }).collect())
}

/// Prescribed displacement components on a node set (`None` = free).
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletBc {
    pub node_set: String,
    pub values: [Option<f64>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadStep {
    pub label: String,
    pub dirichlet: Vec<DirichletBc>,
    pub tractions: Vec<Traction>,
    pub body_force: Option<[f64; 3]>,
    pub optimizer: Option<LbfgsConfig>,
    /// Number of sub-increments the step is split into (≥ 1).
    pub substeps: usize,
}

impl LoadStep {
    pub fn new(label: &str) -> Self {
        LoadStep {
            label: label.to_string(),
            dirichlet: Vec::new(),
            tractions: Vec::new(),
            body_force: None,
            optimizer: None,
            substeps: 1,
        }
    }
}

/// Dirichlet mask and prescribed values of a step; the same DOF may be
/// prescribed twice only with the same value.
pub fn build_dof_field(mesh: &NodeElementGraph, bcs: &[DirichletBc]) -> Result<DofField, SolverError> {
    let dim = mesh.dim();
    let mut field = DofField::unconstrained(mesh.n_dofs());
    for bc in bcs {
        let nodes = mesh.node_set(&bc.node_set).ok_or_else(|| SolverError::UnknownNodeSet(bc.node_set.clone()))?;
        for (component, value) in bc.values.iter().enumerate() {
            let Some(value) = *value else { continue };
            if component >= dim {
                return Err(SolverError::InvalidComponent { component, dim });
            }
            for &node in nodes {
                let dof = node * dim + component;
                if !field.free[dof] && field.u_bar[dof] != value {
                    return Err(SolverError::ConflictingBc { node, component, first: field.u_bar[dof], second: value });
                }
                field.free[dof] = false;
                field.u_bar[dof] = value;
            }
        }
    }
    Ok(field)
}

/// Converged (or budget-exhausted) result of one load step.
#[derive(Clone, Debug)]
pub struct SolutionState {
    pub label: String,
    pub u: Vec<f64>,
    pub history: Vec<GaussHistory>,
    pub f_ext: Vec<f64>,
    pub loss: f64,
    /// Sup-norm of `f_int − f_ext` over the free DOFs.
    pub residual_inf: f64,
    pub traces: Vec<OptimTrace>,
    pub converged: bool,
}

impl SolutionState {
    pub fn virgin(model: &Model) -> Self {
        let n = model.disc.n_dofs();
        SolutionState {
            label: "initial".into(),
            u: vec![0.0; n],
            history: model.virgin_history(),
            f_ext: vec![0.0; n],
            loss: 0.0,
            residual_inf: 0.0,
            traces: Vec::new(),
            converged: true,
        }
    }

    pub fn iterations(&self) -> usize {
        self.traces.iter().map(OptimTrace::iterations).sum()
    }

    pub fn termination(&self) -> Option<Termination> {
        self.traces.last().map(|t| t.termination)
    }
}

/// Loss of the current step as a function of the unknown vector `u_var`.
pub struct StepObjective<'a> {
    pub model: &'a Model,
    pub history: &'a [GaussHistory],
    pub free: &'a [bool],
    pub u_bar: &'a [f64],
    pub f_ext: &'a [f64],
    pub loss: LossKind,
    pub evaluations: usize,
}

impl StepObjective<'_> {
    pub fn state(&self, u_var: &[f64]) -> FieldState {
        let u = compose_with(u_var, self.free, self.u_bar).expect("lengths checked at construction");
        FieldState::evaluate(self.model, self.history, &u)
    }

    pub fn value_and_gradient(&self, state: &FieldState) -> (f64, Vec<f64>) {
        match self.loss {
            LossKind::Energy => (energy_loss(state, self.f_ext), energy_gradient(state, self.f_ext, self.free)),
            LossKind::Galerkin => (
                galerkin_loss(state, self.f_ext, self.free),
                galerkin_gradient(self.model, state, self.f_ext, self.free),
            ),
        }
    }
}

impl crate::optim::Objective for StepObjective<'_> {
    fn evaluate(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.evaluations += 1;
        let state = self.state(x);
        self.value_and_gradient(&state)
    }
}

/// Solves load steps of one problem.
#[derive(Clone, Debug)]
pub struct Solver {
    pub model: Model,
    pub loss: LossKind,
    pub optimizer: LbfgsConfig,
}

/// Load data of one (sub-)increment.
struct Increment {
    free: Vec<bool>,
    u_bar: Vec<f64>,
    f_ext: Vec<f64>,
}

impl Solver {
    pub fn new(model: Model, loss: LossKind, optimizer: LbfgsConfig) -> Self {
        Solver { model, loss, optimizer }
    }

    pub fn external_force(&self, step: &LoadStep) -> Result<Vec<f64>, SolverError> {
        Ok(assemble_external_force(&self.model.disc, &step.tractions, step.body_force)?)
    }

    /// Runs one load step from `prev`; `warm` initializes the unknowns with
    /// the previous converged displacements, otherwise with zero.
    pub fn run_load_step(&self, prev: &SolutionState, step: &LoadStep, warm: bool) -> Result<SolutionState, SolverError> {
        self.run_load_step_with(prev, step, warm, &mut |_, _| false)
    }

    /// As [`Solver::run_load_step`], with a monitor receiving the composed
    /// displacements at every iterate of the last sub-increment; returning
    /// `true` stops the optimizer.
    pub fn run_load_step_with(
        &self,
        prev: &SolutionState,
        step: &LoadStep,
        warm: bool,
        monitor: &mut dyn FnMut(usize, &[f64]) -> bool,
    ) -> Result<SolutionState, SolverError> {
        let mesh = self.model.disc.mesh();
        let n = mesh.n_dofs();
        for got in [prev.u.len(), prev.f_ext.len()] {
            if got != n {
                return Err(SolverError::LengthMismatch { expected: n, got });
            }
        }
        let target = build_dof_field(mesh, &step.dirichlet)?;
        let f_target = self.external_force(step)?;
        let config = step.optimizer.clone().unwrap_or_else(|| self.optimizer.clone());
        let substeps = step.substeps.max(1);
        let mut history = prev.history.clone();
        let mut u_start = if warm { prev.u.clone() } else { vec![0.0; n] };
        let mut traces = Vec::with_capacity(substeps);
        let mut last = None;
        for k in 1..=substeps {
            let s = k as f64 / substeps as f64;
            let inc = Increment {
                free: target.free.clone(),
                u_bar: if k == substeps {
                    target.u_bar.clone()
                } else {
                    (0..n).map(|i| if target.free[i] { 0.0 } else { prev.u[i] + s * (target.u_bar[i] - prev.u[i]) }).collect()
                },
                f_ext: if k == substeps {
                    f_target.clone()
                } else {
                    (0..n).map(|i| prev.f_ext[i] + s * (f_target[i] - prev.f_ext[i])).collect()
                },
            };
            let final_sub = k == substeps;
            let (u, trace) = self.minimize(&history, &inc, &u_start, &config, &mut |iter, u| final_sub && monitor(iter, u))?;
            let state = FieldState::evaluate(&self.model, &history, &u);
            if !final_sub {
                history = state.history();
            }
            u_start = u;
            traces.push(trace);
            last = Some((state, inc));
        }
        let (state, inc) = last.expect("at least one substep");
        let obj = self.objective(&history, &inc);
        let (loss, _) = obj.value_and_gradient(&state);
        let residual_inf = norm_inf(&residual(&state, &inc.f_ext, &inc.free));
        let converged = traces.iter().all(|t| t.termination.converged());
        if !converged {
            warn!("step {:?} stopped with {}", step.label, traces.last().map(|t| t.termination).unwrap());
        }
        info!(
            "step {:?}: loss {loss:.6e}, residual {residual_inf:.3e}, {} iterations",
            step.label,
            traces.iter().map(OptimTrace::iterations).sum::<usize>()
        );
        Ok(SolutionState {
            label: step.label.clone(),
            u: state.u.clone(),
            history: state.history(),
            f_ext: inc.f_ext,
            loss,
            residual_inf,
            traces,
            converged,
        })
    }

    fn objective<'a>(&'a self, history: &'a [GaussHistory], inc: &'a Increment) -> StepObjective<'a> {
        StepObjective {
            model: &self.model,
            history,
            free: &inc.free,
            u_bar: &inc.u_bar,
            f_ext: &inc.f_ext,
            loss: self.loss,
            evaluations: 0,
        }
    }

    fn minimize(
        &self,
        history: &[GaussHistory],
        inc: &Increment,
        u_start: &[f64],
        config: &LbfgsConfig,
        monitor: &mut dyn FnMut(usize, &[f64]) -> bool,
    ) -> Result<(Vec<f64>, OptimTrace), SolverError> {
        let x0: Vec<f64> = u_start.iter().zip(&inc.free).map(|(u, &m)| if m { *u } else { 0.0 }).collect();
        let mut obj = self.objective(history, inc);
        let (free, u_bar) = (&inc.free, &inc.u_bar);
        let mut mon = |info: &crate::optim::IterInfo| {
            let u = compose_with(info.x, free, u_bar).expect("consistent lengths");
            monitor(info.iter, &u)
        };
        let result = lbfgs_minimize_with(&mut obj, &x0, config, &mut mon)?;
        debug!("{} iterations, {} evaluations, {}", result.trace.iterations(), result.trace.fevals(), result.trace.termination);
        Ok((compose_with(&result.x, free, u_bar)?, result.trace))
    }

    /// Runs all steps in order, carrying history forward. Stops after the
    /// first non-converged step unless `keep_going`.
    pub fn run_history(&self, steps: &[LoadStep], keep_going: bool) -> Result<Vec<SolutionState>, SolverError> {
        if steps.is_empty() {
            return Err(SolverError::NoSteps);
        }
        let mut prev = SolutionState::virgin(&self.model);
        let mut out = Vec::with_capacity(steps.len());
        for step in steps {
            let state = self.run_load_step(&prev, step, true)?;
            let stop = !state.converged && !keep_going;
            out.push(state.clone());
            if stop {
                break;
            }
            prev = state;
        }
        Ok(out)
    }

    /// Reference solution of a step by Newton's method with the consistent
    /// tangent and a sparse direct solver. For elastic materials the first
    /// iteration is the direct solve of `KU = F`.
    pub fn newton_reference(&self, prev: &SolutionState, step: &LoadStep, tol: f64, max_iters: usize) -> Result<SolutionState, SolverError> {
        let mesh = self.model.disc.mesh();
        let dofs = build_dof_field(mesh, &step.dirichlet)?;
        let f_ext = self.external_force(step)?;
        let mut u = compose_with(&prev.u, &dofs.free, &dofs.u_bar)?;
        let free_idx: Vec<usize> = (0..u.len()).filter(|&i| dofs.free[i]).collect();
        let mut state = FieldState::evaluate(&self.model, &prev.history, &u);
        let mut r = residual(&state, &f_ext, &dofs.free);
        let scale = norm_inf(&f_ext).max(norm_inf(&state.f_int)).max(1.0);
        let mut iters = 0;
        while norm_inf(&r) > tol * scale {
            if iters == max_iters {
                return Err(SolverError::NewtonNotConverged { iters, residual: norm_inf(&r) });
            }
            iters += 1;
            let k = assemble_tangent_stiffness(&self.model, Some(&state), &dofs.free, false)?;
            let rhs: Vec<f64> = free_idx.iter().map(|&i| -r[i]).collect();
            let du = k.factorize()?.solve(&rhs);
            // backtrack on the residual norm if the full step overshoots
            let r0 = norm_inf(&r);
            let mut t = 1.0;
            loop {
                let mut trial = u.clone();
                for (&i, d) in free_idx.iter().zip(&du) {
                    trial[i] += t * d;
                }
                let s = FieldState::evaluate(&self.model, &prev.history, &trial);
                let rt = residual(&s, &f_ext, &dofs.free);
                if norm_inf(&rt) < r0 || t < 1e-4 {
                    u = trial;
                    state = s;
                    r = rt;
                    break;
                }
                t *= 0.5;
            }
            debug!("newton {iters}: residual {:.3e}", norm_inf(&r));
        }
        let loss = energy_loss(&state, &f_ext);
        Ok(SolutionState {
            label: step.label.clone(),
            history: state.history(),
            u,
            f_ext,
            loss,
            residual_inf: norm_inf(&r),
            traces: Vec::new(),
            converged: true,
        })
    }

    /// L-BFGS iterations until the relative L2 error of the composed field
    /// against `reference` falls to `tol`; `None` if the budget runs out.
    pub fn iterations_to_tolerance(
        &self,
        prev: &SolutionState,
        step: &LoadStep,
        warm: bool,
        reference: &[f64],
        tol: f64,
    ) -> Result<Option<usize>, SolverError> {
        let mut hit = None;
        self.run_load_step_with(prev, step, warm, &mut |iter, u| {
            let m = error_metrics(u, reference);
            if m.l2.is_some_and(|e| e <= tol) {
                hit = Some(iter);
                true
            } else {
                false
            }
        })?;
        Ok(hit)
    }
}

/// Mean absolute error and relative L2 error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: f64,
    /// `None` when the reference has zero norm.
    pub l2: Option<f64>,
}

pub fn error_metrics(u: &[f64], reference: &[f64]) -> Metrics {
    let n = u.len().max(1) as f64;
    let mae = u.iter().zip(reference).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let diff = u.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    Metrics { mae, l2: (norm > 0.0).then(|| diff / norm) }
}

/// Metrics per interleaved component (`stride` = components per node).
pub fn component_metrics(u: &[f64], reference: &[f64], stride: usize) -> Vec<Metrics> {
    (0..stride)
        .map(|c| {
            let a: Vec<f64> = u.iter().skip(c).step_by(stride).copied().collect();
            let b: Vec<f64> = reference.iter().skip(c).step_by(stride).copied().collect();
            error_metrics(&a, &b)
        })
        .collect()
}

/// Worst relative gradient errors found by a central-difference check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub points: usize,
    pub energy: f64,
    pub galerkin: f64,
    /// Points at which at least one Gauss point was on the plastic branch.
    pub plastic_points: usize,
}

/// Central-difference check of both loss gradients at random admissible
/// points `u_var ∈ [−amplitude, amplitude]` around a random prior state.
pub fn gradient_check(model: &Model, step: &LoadStep, points: usize, amplitude: f64, seed: u64) -> Result<GradCheck, SolverError> {
    let mesh = model.disc.mesh();
    let dofs = build_dof_field(mesh, &step.dirichlet)?;
    let f_ext = assemble_external_force(&model.disc, &step.tractions, step.body_force)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck { points, energy: 0.0, galerkin: 0.0, plastic_points: 0 };
    let history = model.virgin_history();
    for _ in 0..points {
        let u_var: Vec<f64> = dofs.free.iter().map(|&m| if m { rng.random_range(-amplitude..amplitude) } else { 0.0 }).collect();
        let mut errs = [0.0; 2];
        for (slot, loss) in [LossKind::Energy, LossKind::Galerkin].into_iter().enumerate() {
            let obj = StepObjective {
                model,
                history: &history,
                free: &dofs.free,
                u_bar: &dofs.u_bar,
                f_ext: &f_ext,
                loss,
                evaluations: 0,
            };
            let state = obj.state(&u_var);
            if slot == 0 && state.returns.iter().any(|r| r.yielded) {
                out.plastic_points += 1;
            }
            let (_, g) = obj.value_and_gradient(&state);
            let mut worst = 0.0_f64;
            let mut scale = 0.0_f64;
            let mut x = u_var.clone();
            for i in (0..x.len()).filter(|&i| dofs.free[i]) {
                let h = 1e-6 * amplitude.max(x[i].abs());
                let orig = x[i];
                x[i] = orig + h;
                let fp = obj.value_and_gradient(&obj.state(&x)).0;
                x[i] = orig - h;
                let fm = obj.value_and_gradient(&obj.state(&x)).0;
                x[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((fd - g[i]).abs());
                scale = scale.max(fd.abs());
            }
            errs[slot] = if scale > 0.0 { worst / scale } else { worst };
        }
        out.energy = out.energy.max(errs[0]);
        out.galerkin = out.galerkin.max(errs[1]);
    }
    Ok(out)
}

/// Coordinate-optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RAdaptConfig {
    /// Node set whose coordinates may move; `None` means every node that is
    /// neither on a Dirichlet set nor on a loaded facet nor on the boundary.
    pub movable: Option<String>,
    /// Coordinate components that stay fixed (e.g. `[2]` keeps z).
    pub fixed_components: Vec<usize>,
    pub blocks: usize,
    pub coord_iters: usize,
    pub disp_iters: usize,
}

impl Default for RAdaptConfig {
    fn default() -> Self {
        RAdaptConfig { movable: None, fixed_components: Vec::new(), blocks: 5, coord_iters: 50, disp_iters: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct RAdaptResult {
    pub model: Model,
    pub state: SolutionState,
    pub energy_before: f64,
    pub energy_after: f64,
    pub coord_traces: Vec<OptimTrace>,
}

/// Nodes on the boundary of the mesh (members of any boundary facet).
pub fn boundary_nodes(mesh: &NodeElementGraph) -> Vec<bool> {
    let mut out = vec![false; mesh.n_nodes()];
    for f in mesh.boundary_facets() {
        for n in mesh.facet_nodes(f) {
            out[n] = true;
        }
    }
    out
}

/// Per-coordinate mask of movable nodal coordinates.
pub fn movable_mask(mesh: &NodeElementGraph, step: &LoadStep, config: &RAdaptConfig) -> Result<Vec<bool>, SolverError> {
    let dim = mesh.dim();
    let mut loaded = vec![false; mesh.n_nodes()];
    for t in &step.tractions {
        let facets = mesh.facet_set(&t.facet_set).ok_or_else(|| FieldError::UnknownFacetSet(t.facet_set.clone()))?;
        for &f in facets {
            for n in mesh.facet_nodes(f) {
                loaded[n] = true;
            }
        }
    }
    let nodes: Vec<bool> = match &config.movable {
        Some(name) => {
            let set = mesh.node_set(name).ok_or_else(|| SolverError::UnknownNodeSet(name.clone()))?;
            let mut m = vec![false; mesh.n_nodes()];
            for &n in set {
                if loaded[n] {
                    return Err(SolverError::MovableLoadedNode(n));
                }
                m[n] = true;
            }
            m
        }
        None => {
            let boundary = boundary_nodes(mesh);
            let dofs = build_dof_field(mesh, &step.dirichlet)?;
            (0..mesh.n_nodes())
                .map(|n| !boundary[n] && !loaded[n] && (0..dim).all(|c| dofs.free[n * dim + c]))
                .collect()
        }
    };
    Ok((0..mesh.n_dofs()).map(|i| nodes[i / dim] && !config.fixed_components.contains(&(i % dim))).collect())
}

/// Alternates blocks of coordinate and displacement minimization of the
/// energy of `step`, starting from its converged solution `state`.
pub fn r_adapt(
    solver: &Solver,
    prev: &SolutionState,
    state: &SolutionState,
    step: &LoadStep,
    config: &RAdaptConfig,
) -> Result<RAdaptResult, SolverError> {
    let mesh = solver.model.disc.mesh();
    let dim = mesh.dim();
    let movable = movable_mask(mesh, step, config)?;
    let energy_of = |model: &Model, u: &[f64]| -> Result<f64, SolverError> {
        let f_ext = assemble_external_force(&model.disc, &step.tractions, step.body_force)?;
        Ok(energy_loss(&FieldState::evaluate(model, &prev.history, u), &f_ext))
    };
    let energy_before = energy_of(&solver.model, &state.u)?;
    let mut current = Solver { loss: LossKind::Energy, ..solver.clone() };
    let mut u = state.u.clone();
    let mut coord_traces = Vec::new();
    let mut last_state = state.clone();
    if movable.iter().any(|&m| m) {
        for block in 0..config.blocks {
            let base: Vec<f64> = current.model.disc.mesh().coords().iter().flat_map(|c| c[..dim].to_vec()).collect();
            let model_ref = &current.model;
            let u_ref = &u;
            let mut coord_obj = |x: &[f64]| -> (f64, Vec<f64>) {
                let coords: Vec<[f64; 3]> = (0..model_ref.disc.mesh().n_nodes())
                    .map(|n| {
                        let mut c = [0.0; 3];
                        for k in 0..dim {
                            let i = n * dim + k;
                            c[k] = if movable[i] { base[i] + x[i] } else { base[i] };
                        }
                        c
                    })
                    .collect();
                let Ok(disc) = model_ref.disc.with_coords(&coords) else {
                    return (f64::INFINITY, vec![f64::NAN; x.len()]);
                };
                let m = model_ref.with_disc(disc);
                let f_ext = match assemble_external_force(&m.disc, &step.tractions, step.body_force) {
                    Ok(f) => f,
                    Err(_) => return (f64::INFINITY, vec![f64::NAN; x.len()]),
                };
                let s = FieldState::evaluate(&m, &prev.history, u_ref);
                let g = coordinate_gradient(&m, &prev.history, &s, step.body_force);
                (energy_loss(&s, &f_ext), g.iter().zip(&movable).map(|(v, &mv)| if mv { *v } else { 0.0 }).collect())
            };
            let cfg = LbfgsConfig { max_iters: config.coord_iters, tol_grad: 1e-12, ..solver.optimizer.clone() };
            let res = lbfgs_minimize_with(&mut coord_obj, &vec![0.0; base.len()], &cfg, &mut |_| false)?;
            let coords: Vec<[f64; 3]> = (0..current.model.disc.mesh().n_nodes())
                .map(|n| {
                    let mut c = [0.0; 3];
                    for k in 0..dim {
                        let i = n * dim + k;
                        c[k] = if movable[i] { base[i] + res.x[i] } else { base[i] };
                    }
                    c
                })
                .collect();
            current.model = current.model.with_disc(current.model.disc.with_coords(&coords)?);
            coord_traces.push(res.trace);
            let mut disp_step = step.clone();
            disp_step.optimizer = Some(LbfgsConfig { max_iters: config.disp_iters, ..solver.optimizer.clone() });
            let warm = SolutionState { u: u.clone(), ..prev.clone() };
            last_state = current.run_load_step(&warm, &disp_step, true)?;
            u = last_state.u.clone();
            debug!("r-adapt block {block}: energy {:.10e}", energy_of(&current.model, &u)?);
        }
    }
    let energy_after = energy_of(&current.model, &u)?;
    info!("r-adapt: energy {energy_before:.10e} -> {energy_after:.10e}");
    Ok(RAdaptResult { model: current.model, state: last_state, energy_before, energy_after, coord_traces })
}

/// Spectral report and iterations-to-tolerance for both losses on one mesh.
#[derive(Clone, Debug, Serialize)]
pub struct RateStudyRow {
    pub report: SpectralReport,
    pub iterations_energy: Option<usize>,
    pub iterations_galerkin: Option<usize>,
}

pub const RATE_STUDY_HEADER: &str =
    "mesh,n_dofs,lambda_min,lambda_max,kappa,kappa_sq_check,rho_star,measured_rate,iters_energy,iters_galerkin";

impl RateStudyRow {
    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<usize>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        format!("{},{},{}", self.report.csv_row(), fmt(self.iterations_energy), fmt(self.iterations_galerkin))
    }
}

/// For each (label, solver, first load step): eigen-analysis of the elastic
/// stiffness over the free DOFs, the measured GD rate (when affordable) and
/// L-BFGS iterations until the relative L2 error against the Newton
/// reference drops to `tol`, for the energy and Galerkin losses.
pub fn rate_study(
    cases: &[(String, Solver, LoadStep)],
    tol: f64,
    eigen: &EigenConfig,
    gd_cap: usize,
) -> Result<Vec<RateStudyRow>, SolverError> {
    let mut rows = Vec::with_capacity(cases.len());
    for (label, solver, step) in cases {
        let dofs = build_dof_field(solver.model.disc.mesh(), &step.dirichlet)?;
        let k = assemble_tangent_stiffness(&solver.model, None, &dofs.free, true)?;
        let factored = FactoredMatrix { matrix: &k, factor: k.cholesky()? };
        let report = spectral_report(label, &factored, eigen, gd_cap)?;
        let prev = SolutionState::virgin(&solver.model);
        let reference = solver.newton_reference(&prev, step, 1e-12, 100)?;
        let mut iters = [None, None];
        for (slot, loss) in [LossKind::Energy, LossKind::Galerkin].into_iter().enumerate() {
            let s = Solver { loss, ..solver.clone() };
            iters[slot] = s.iterations_to_tolerance(&prev, step, false, &reference.u, tol)?;
        }
        info!("{label}: kappa {:.3e}, iterations energy {:?} galerkin {:?}", report.kappa, iters[0], iters[1]);
        rows.push(RateStudyRow { report, iterations_energy: iters[0], iterations_galerkin: iters[1] });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Discretization, QuadratureConfig};
    use crate::material::{HardeningMode, MaterialParams};
    use crate::mesh::{structured_mesh, ElementKind};
    use std::sync::Arc;

    fn fixed(set: &str, dim: usize) -> DirichletBc {
        let mut values = [None; 3];
        for v in values.iter_mut().take(dim) {
            *v = Some(0.0);
        }
        DirichletBc { node_set: set.into(), values }
    }

    fn solver_for(kind: ElementKind, ext: &[f64], div: &[usize], params: MaterialParams, mode: HardeningMode) -> Solver {
        let mesh = structured_mesh(kind, &[0.0; 3], ext, div).unwrap();
        let disc = Discretization::new(Arc::new(mesh), QuadratureConfig::default()).unwrap();
        let model = Model::new(disc, vec![params], mode).unwrap();
        Solver::new(model, LossKind::Energy, LbfgsConfig { tol_grad: 1e-10, ..Default::default() })
    }

    #[test]
    fn compose_examples() {
        let all_free = compose_with(&[1.0, 2.0], &[true, true], &[0.0, 0.0]).unwrap();
        assert_eq!(all_free, vec![1.0, 2.0]);
        let masked = compose_with(&[7.0, 2.0], &[false, true], &[-0.25, 0.0]).unwrap();
        assert_eq!(masked, vec![-0.25, 2.0]);
        let none = compose_with(&[7.0, 2.0], &[false, false], &[1.0, -1.0]).unwrap();
        assert_eq!(none, vec![1.0, -1.0]);
        let again = compose_with(&masked, &[false, true], &[-0.25, 0.0]).unwrap();
        assert_eq!(again, masked);
        assert!(matches!(compose_with(&[1.0], &[true, true], &[0.0, 0.0]), Err(SolverError::LengthMismatch { .. })));
    }

    #[test]
    fn conflicting_bc_is_an_error() {
        let mesh = structured_mesh(ElementKind::Quad4, &[0.0; 2], &[1.0, 1.0], &[1, 1]).unwrap();
        let a = DirichletBc { node_set: "x_min".into(), values: [Some(0.0), None, None] };
        let b = DirichletBc { node_set: "y_min".into(), values: [Some(0.1), None, None] };
        assert!(matches!(build_dof_field(&mesh, &[a.clone(), b]), Err(SolverError::ConflictingBc { node: 0, .. })));
        let same = DirichletBc { node_set: "y_min".into(), values: [Some(0.0), Some(0.0), None] };
        assert!(build_dof_field(&mesh, &[a, same]).is_ok());
        let z = DirichletBc { node_set: "y_min".into(), values: [None, None, Some(0.0)] };
        assert!(matches!(build_dof_field(&mesh, &[z]), Err(SolverError::InvalidComponent { .. })));
    }

    #[test]
    fn zero_load_step_is_trivial() {
        let s = solver_for(ElementKind::Quad4, &[2.0, 1.0], &[2, 1], MaterialParams::elastic(100.0, 0.3).unwrap(), HardeningMode::Perfect);
        let mut step = LoadStep::new("rest");
        step.dirichlet.push(fixed("x_min", 2));
        let out = s.run_load_step(&SolutionState::virgin(&s.model), &step, true).unwrap();
        assert_eq!(out.iterations(), 0);
        assert_eq!(out.loss, 0.0);
        assert!(out.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elastic_step_matches_direct_solve() {
        let s = solver_for(ElementKind::Quad4, &[4.0, 1.0], &[4, 2], MaterialParams::elastic(100.0, 0.3).unwrap(), HardeningMode::Perfect);
        let mut step = LoadStep::new("tip");
        step.dirichlet.push(fixed("x_min", 2));
        step.tractions.push(Traction { facet_set: "x_max".into(), value: [0.5, -1.0, 0.0] });
        let prev = SolutionState::virgin(&s.model);
        let direct = s.newton_reference(&prev, &step, 1e-13, 1).unwrap();
        let out = s.run_load_step(&prev, &step, true).unwrap();
        assert!(out.converged);
        let scale = norm_inf(&direct.u);
        let err = out.u.iter().zip(&direct.u).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-8 * scale, "{err}");
    }

    #[test]
    fn masked_entries_are_inert() {
        let s = solver_for(ElementKind::Quad4, &[2.0, 1.0], &[2, 2], MaterialParams::new(100.0, 0.3, 1.0, 10.0, 0.0).unwrap(), HardeningMode::Isotropic);
        let mut step = LoadStep::new("pull");
        step.dirichlet.push(fixed("x_min", 2));
        step.dirichlet.push(DirichletBc { node_set: "x_max".into(), values: [Some(0.05), None, None] });
        let prev = SolutionState::virgin(&s.model);
        let base = s.run_load_step(&prev, &step, true).unwrap();
        let dofs = build_dof_field(s.model.disc.mesh(), &step.dirichlet).unwrap();
        let mut noisy = prev.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (i, &m) in dofs.free.iter().enumerate() {
            if !m {
                noisy.u[i] = rng.random_range(-1.0..1.0);
            }
        }
        let out = s.run_load_step(&noisy, &step, true).unwrap();
        let diff = out.u.iter().zip(&base.u).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-14, "{diff}");
    }

    #[test]
    fn elastic_cycle_returns_to_zero() {
        let s = solver_for(ElementKind::Quad4, &[2.0, 1.0], &[2, 2], MaterialParams::new(100.0, 0.3, 1e3, 0.0, 0.0).unwrap(), HardeningMode::Perfect);
        let mut load = LoadStep::new("load");
        load.dirichlet.push(fixed("x_min", 2));
        load.dirichlet.push(DirichletBc { node_set: "x_max".into(), values: [Some(0.01), None, None] });
        let mut unload = load.clone();
        unload.label = "unload".into();
        unload.dirichlet[1].values[0] = Some(0.0);
        let states = s.run_history(&[load, unload], false).unwrap();
        assert!(norm_inf(&states[1].u) < 1e-12);
        assert!(states[1].history.iter().all(|h| h.plastic.alpha == 0.0));
    }

    #[test]
    fn plastic_cycle_leaves_residual_and_keeps_alpha() {
        let s = solver_for(ElementKind::Quad4, &[1.0, 1.0], &[1, 1], MaterialParams::new(200.0, 0.3, 1.0, 50.0, 0.0).unwrap(), HardeningMode::Isotropic);
        let mut load = LoadStep::new("load");
        load.dirichlet.push(DirichletBc { node_set: "x_min".into(), values: [Some(0.0), None, None] });
        load.dirichlet.push(DirichletBc { node_set: "y_min".into(), values: [None, Some(0.0), None] });
        load.dirichlet.push(DirichletBc { node_set: "x_max".into(), values: [Some(0.02), None, None] });
        let mut unload = load.clone();
        unload.label = "unload".into();
        unload.dirichlet.pop();
        let states = s.run_history(&[load, unload], false).unwrap();
        assert!(states.iter().all(|st| st.converged));
        assert!(norm_inf(&states[1].u) > 1e-4);
        for (a, b) in states[0].history.iter().zip(&states[1].history) {
            assert!(a.plastic.alpha > 0.0);
            assert_eq!(a.plastic.alpha, b.plastic.alpha);
        }
    }

    #[test]
    fn metrics_examples() {
        let r = [1.0, -2.0, 3.0];
        assert_eq!(error_metrics(&r, &r), Metrics { mae: 0.0, l2: Some(0.0) });
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert!((error_metrics(&twice, &r).l2.unwrap() - 1.0).abs() < 1e-15);
        let shifted: Vec<f64> = r.iter().map(|v| v + 0.3).collect();
        assert!((error_metrics(&shifted, &r).mae - 0.3).abs() < 1e-15);
        assert_eq!(error_metrics(&[1.0], &[0.0]).l2, None);
        let per = component_metrics(&[1.0, 0.0, 2.0, 0.0], &[1.0, 1.0, 2.0, 1.0], 2);
        assert_eq!(per[0].mae, 0.0);
        assert_eq!(per[1].mae, 1.0);
    }

    #[test]
    fn substeps_reach_the_same_elastic_solution() {
        let s = solver_for(ElementKind::Quad4, &[2.0, 1.0], &[2, 2], MaterialParams::elastic(100.0, 0.3).unwrap(), HardeningMode::Perfect);
        let mut step = LoadStep::new("pull");
        step.dirichlet.push(fixed("x_min", 2));
        step.tractions.push(Traction { facet_set: "x_max".into(), value: [1.0, 0.0, 0.0] });
        let prev = SolutionState::virgin(&s.model);
        let one = s.run_load_step(&prev, &step, true).unwrap();
        step.substeps = 4;
        let four = s.run_load_step(&prev, &step, true).unwrap();
        assert_eq!(four.traces.len(), 4);
        let diff = one.u.iter().zip(&four.u).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-9);
    }

    #[test]
    fn boundary_detection() {
        let mesh = structured_mesh(ElementKind::Hex8, &[0.0; 3], &[1.0; 3], &[3, 3, 3]).unwrap();
        let b = boundary_nodes(&mesh);
        assert_eq!(b.iter().filter(|&&x| !x).count(), 8);
    }

    #[test]
    fn r_adapt_with_nothing_movable_is_identity() {
        let s = solver_for(ElementKind::Quad4, &[2.0, 1.0], &[2, 1], MaterialParams::elastic(100.0, 0.3).unwrap(), HardeningMode::Perfect);
        let mut step = LoadStep::new("tip");
        step.dirichlet.push(fixed("x_min", 2));
        step.tractions.push(Traction { facet_set: "x_max".into(), value: [0.0, -1.0, 0.0] });
        let prev = SolutionState::virgin(&s.model);
        let state = s.run_load_step(&prev, &step, true).unwrap();
        let r = r_adapt(&s, &prev, &state, &step, &RAdaptConfig::default()).unwrap();
        assert_eq!(r.energy_before, r.energy_after);
        assert_eq!(r.model.disc.mesh().coords(), s.model.disc.mesh().coords());
    }

    #[test]
    fn loaded_nodes_cannot_move() {
        let s = solver_for(ElementKind::Quad4, &[2.0, 1.0], &[2, 1], MaterialParams::elastic(100.0, 0.3).unwrap(), HardeningMode::Perfect);
        let mut step = LoadStep::new("tip");
        step.tractions.push(Traction { facet_set: "x_max".into(), value: [0.0, -1.0, 0.0] });
        let cfg = RAdaptConfig { movable: Some("x_max".into()), ..Default::default() };
        assert!(matches!(movable_mask(s.model.disc.mesh(), &step, &cfg), Err(SolverError::MovableLoadedNode(_))));
    }
}
