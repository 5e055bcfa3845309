//! Gauss-point strain/stress and internal-force layers, the incremental
//! energy and Galerkin losses, and their gradients with respect to nodal
//! displacements.
//!
//! Element loops run in parallel; every reduction into nodal vectors walks
//! the incidence lists in ascending element order, so results do not depend
//! on the worker count.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::{face_quadrature, isoparametric_update_with, ElementGeometry, Inverted, ReferenceElement};
use crate::material::{
    algorithmic_tangent, energy_density, radial_return, GaussHistory, HardeningMode, MaterialError,
    MaterialParams, ReturnResult,
};
use crate::mesh::{ElementKind, FacetRef, NodeElementGraph};
use crate::sparse::CsrMatrix;
use crate::tensor::{SymTensor, Voigt6};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("facet set {0:?} is empty")]
    EmptyFacetSet(String),
    #[error("unknown facet set {0:?}")]
    UnknownFacetSet(String),
    #[error("element {element} references undefined material {material}")]
    UnknownMaterial { element: usize, material: usize },
    #[error("element {element}: {source}")]
    Inverted { element: usize, source: Inverted },
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Quadrature(#[from] crate::element::ElementError),
    #[error("stiffness matrix is singular or indefinite (unconstrained rigid modes?)")]
    SingularSystem,
    #[error("vector length {got} does not match {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Quadrature order per element kind; kinds not listed use their default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuadratureConfig(pub BTreeMap<ElementKind, usize>);

impl QuadratureConfig {
    pub fn order(&self, kind: ElementKind) -> usize {
        self.0.get(&kind).copied().unwrap_or_else(|| kind.default_order())
    }
}

/// Mesh plus the output of the isoparametric layer for every element.
#[derive(Clone, Debug)]
pub struct Discretization {
    mesh: Arc<NodeElementGraph>,
    quadrature: QuadratureConfig,
    references: BTreeMap<ElementKind, ReferenceElement>,
    geometry: Vec<ElementGeometry>,
    gauss_offsets: Vec<usize>,
}

impl Discretization {
    pub fn new(mesh: Arc<NodeElementGraph>, quadrature: QuadratureConfig) -> Result<Self, FieldError> {
        let mut references = BTreeMap::new();
        for el in mesh.elements() {
            if !references.contains_key(&el.kind) {
                references.insert(el.kind, ReferenceElement::with_order(el.kind, quadrature.order(el.kind))?);
            }
        }
        let geometry = compute_geometry(&mesh, &references, mesh.coords())?;
        let mut gauss_offsets = Vec::with_capacity(geometry.len() + 1);
        let mut total = 0;
        for g in &geometry {
            gauss_offsets.push(total);
            total += g.gauss.len();
        }
        gauss_offsets.push(total);
        Ok(Discretization { mesh, quadrature, references, geometry, gauss_offsets })
    }

    /// Same topology and quadrature at new nodal coordinates.
    pub fn with_coords(&self, coords: &[[f64; 3]]) -> Result<Self, FieldError> {
        let geometry = compute_geometry(&self.mesh, &self.references, coords)?;
        let mesh = self
            .mesh
            .with_coords(coords.to_vec())
            .map_err(|_| FieldError::Inverted { element: 0, source: Inverted { gauss: 0, det: 0.0 } })?;
        Ok(Discretization {
            mesh: Arc::new(mesh),
            quadrature: self.quadrature.clone(),
            references: self.references.clone(),
            geometry,
            gauss_offsets: self.gauss_offsets.clone(),
        })
    }

    pub fn mesh(&self) -> &NodeElementGraph {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<NodeElementGraph> {
        &self.mesh
    }

    pub fn quadrature(&self) -> &QuadratureConfig {
        &self.quadrature
    }

    pub fn geometry(&self) -> &[ElementGeometry] {
        &self.geometry
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn n_dofs(&self) -> usize {
        self.mesh.n_dofs()
    }

    pub fn n_gauss(&self) -> usize {
        *self.gauss_offsets.last().unwrap_or(&0)
    }

    /// Flat index range of element `e`'s Gauss points.
    pub fn gauss_range(&self, e: usize) -> std::ops::Range<usize> {
        self.gauss_offsets[e]..self.gauss_offsets[e + 1]
    }

    /// Element owning each flat Gauss point index.
    pub fn gauss_elements(&self) -> Vec<usize> {
        (0..self.geometry.len())
            .flat_map(|e| std::iter::repeat(e).take(self.geometry[e].gauss.len()))
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.geometry.iter().map(ElementGeometry::volume).sum()
    }

    fn local_vectors(&self, e: usize, u: &[f64]) -> Vec<Vector3<f64>> {
        let dim = self.dim();
        self.mesh
            .element(e)
            .nodes
            .iter()
            .map(|&n| {
                let mut v = Vector3::zeros();
                for c in 0..dim {
                    v[c] = u[n * dim + c];
                }
                v
            })
            .collect()
    }

    /// Gathers per-element nodal contributions into a global DOF vector in
    /// fixed incidence order.
    fn gather(&self, local: &[Vec<Vector3<f64>>]) -> Vec<f64> {
        let dim = self.dim();
        let mut out = vec![0.0; self.n_dofs()];
        out.par_chunks_mut(dim).enumerate().for_each(|(node, slot)| {
            let mut acc = Vector3::zeros();
            for inc in self.mesh.incidence(node) {
                acc += local[inc.element][inc.local];
            }
            slot.copy_from_slice(&acc.as_slice()[..dim]);
        });
        out
    }
}

fn compute_geometry(
    mesh: &NodeElementGraph,
    references: &BTreeMap<ElementKind, ReferenceElement>,
    coords: &[[f64; 3]],
) -> Result<Vec<ElementGeometry>, FieldError> {
    mesh.elements()
        .par_iter()
        .enumerate()
        .map(|(e, el)| {
            let local: Vec<[f64; 3]> = el.nodes.iter().map(|&n| coords[n]).collect();
            isoparametric_update_with(&references[&el.kind], &local)
                .map_err(|source| FieldError::Inverted { element: e, source })
        })
        .collect()
}

/// Displacement gradient `∇u = Σ_j u_j (∇ₓN_j)ᵀ`.
fn displacement_gradient(u_local: &[Vector3<f64>], grads: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut g = Matrix3::zeros();
    for (u, d) in u_local.iter().zip(grads) {
        g += u * d.transpose();
    }
    g
}

/// `σ ∇ₓN_j`.
fn stress_times(sigma: &SymTensor, grad: &Vector3<f64>) -> Vector3<f64> {
    let c = &sigma.0;
    Vector3::new(
        c[0] * grad[0] + c[5] * grad[1] + c[4] * grad[2],
        c[5] * grad[0] + c[1] * grad[1] + c[3] * grad[2],
        c[4] * grad[0] + c[3] * grad[1] + c[2] * grad[2],
    )
}

/// Strain at every Gauss point (flat, element-major).
pub fn gauss_strain(disc: &Discretization, u: &[f64]) -> Vec<SymTensor> {
    (0..disc.geometry.len())
        .into_par_iter()
        .flat_map_iter(|e| {
            let u_local = disc.local_vectors(e, u);
            disc.geometry[e]
                .gauss
                .iter()
                .map(|g| SymTensor::sym(&displacement_gradient(&u_local, &g.grads)))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Return-mapped stress at every Gauss point from the converged history.
pub fn gauss_stress(model: &Model, eps: &[SymTensor], history: &[GaussHistory]) -> Vec<ReturnResult> {
    let owners = model.disc.gauss_elements();
    eps.par_iter()
        .zip(history)
        .zip(owners)
        .map(|((eps, h), e)| radial_return(model.material_of(e), &h.plastic, eps, &h.eps, &h.sigma))
        .collect()
}

/// `f_j = Σ_e Σ_g σ_g ∇ₓN_j |J_g| w_g` with one stress per Gauss point.
pub fn assemble_internal_force(disc: &Discretization, sigma: &[SymTensor]) -> Vec<f64> {
    let local: Vec<Vec<Vector3<f64>>> = (0..disc.geometry.len())
        .into_par_iter()
        .map(|e| element_forces(&disc.geometry[e], &sigma[disc.gauss_range(e)]))
        .collect();
    disc.gather(&local)
}

fn element_forces(geo: &ElementGeometry, sigma: &[SymTensor]) -> Vec<Vector3<f64>> {
    let mut f = vec![Vector3::zeros(); geo.gauss.first().map_or(0, |g| g.grads.len())];
    for (g, s) in geo.gauss.iter().zip(sigma) {
        for (fj, grad) in f.iter_mut().zip(&g.grads) {
            *fj += stress_times(s, grad) * g.dv;
        }
    }
    f
}

/// A uniform traction applied on a named facet set.
#[derive(Clone, Debug, PartialEq)]
pub struct Traction {
    pub facet_set: String,
    pub value: [f64; 3],
}

/// Consistent nodal loads from facet tractions and a uniform body force.
pub fn assemble_external_force(
    disc: &Discretization,
    tractions: &[Traction],
    body_force: Option<[f64; 3]>,
) -> Result<Vec<f64>, FieldError> {
    let mesh = disc.mesh();
    let dim = mesh.dim();
    let mut f = vec![0.0; disc.n_dofs()];
    for t in tractions {
        let facets = mesh
            .facet_set(&t.facet_set)
            .ok_or_else(|| FieldError::UnknownFacetSet(t.facet_set.clone()))?;
        if facets.is_empty() {
            return Err(FieldError::EmptyFacetSet(t.facet_set.clone()));
        }
        for &facet in facets {
            add_facet_load(mesh, facet, &t.value, &mut f);
        }
    }
    if let Some(b) = body_force {
        for (e, geo) in disc.geometry.iter().enumerate() {
            let nodes = &mesh.element(e).nodes;
            for g in &geo.gauss {
                for (&n, &w) in nodes.iter().zip(&g.values) {
                    for c in 0..dim {
                        f[n * dim + c] += w * b[c] * g.dv;
                    }
                }
            }
        }
    }
    Ok(f)
}

fn add_facet_load(mesh: &NodeElementGraph, facet: FacetRef, t: &[f64; 3], f: &mut [f64]) {
    let dim = mesh.dim();
    let nodes = mesh.facet_nodes(facet);
    let coords: Vec<[f64; 3]> = nodes.iter().map(|&n| mesh.coords()[n]).collect();
    let kind = mesh.element(facet.element).kind.face_kind();
    for (values, w) in face_quadrature(kind, &coords) {
        for (&n, &v) in nodes.iter().zip(&values) {
            for c in 0..dim {
                f[n * dim + c] += v * t[c] * w;
            }
        }
    }
}

/// Discretized problem: geometry, per-element materials and the selected
/// incremental functional.
#[derive(Clone, Debug)]
pub struct Model {
    pub disc: Discretization,
    pub materials: Vec<MaterialParams>,
    pub mode: HardeningMode,
}

impl Model {
    pub fn new(disc: Discretization, materials: Vec<MaterialParams>, mode: HardeningMode) -> Result<Self, FieldError> {
        for (e, el) in disc.mesh().elements().iter().enumerate() {
            if el.material >= materials.len() {
                return Err(FieldError::UnknownMaterial { element: e, material: el.material });
            }
        }
        for m in &materials {
            mode.check(m)?;
        }
        Ok(Model { disc, materials, mode })
    }

    pub fn material_of(&self, element: usize) -> &MaterialParams {
        &self.materials[self.disc.mesh().element(element).material]
    }

    pub fn with_disc(&self, disc: Discretization) -> Model {
        Model { disc, materials: self.materials.clone(), mode: self.mode }
    }

    pub fn virgin_history(&self) -> Vec<GaussHistory> {
        vec![GaussHistory::default(); self.disc.n_gauss()]
    }
}

/// Forward pass of the strain–stress and internal-force layers at one
/// displacement field.
#[derive(Clone, Debug)]
pub struct FieldState {
    /// Composed nodal displacements (Dirichlet data included).
    pub u: Vec<f64>,
    pub eps: Vec<SymTensor>,
    pub returns: Vec<ReturnResult>,
    /// `Σ_g ψ_g |J_g| w_g`.
    pub internal_energy: f64,
    pub f_int: Vec<f64>,
}

struct ElementEval {
    eps: Vec<SymTensor>,
    returns: Vec<ReturnResult>,
    energy: f64,
    forces: Vec<Vector3<f64>>,
}

impl FieldState {
    pub fn evaluate(model: &Model, history: &[GaussHistory], u: &[f64]) -> FieldState {
        let disc = &model.disc;
        let evals: Vec<ElementEval> = (0..disc.geometry.len())
            .into_par_iter()
            .map(|e| {
                let params = model.material_of(e);
                let u_local = disc.local_vectors(e, u);
                let geo = &disc.geometry[e];
                let hist = &history[disc.gauss_range(e)];
                let mut out = ElementEval {
                    eps: Vec::with_capacity(geo.gauss.len()),
                    returns: Vec::with_capacity(geo.gauss.len()),
                    energy: 0.0,
                    forces: vec![Vector3::zeros(); u_local.len()],
                };
                for (g, h) in geo.gauss.iter().zip(hist) {
                    let eps = SymTensor::sym(&displacement_gradient(&u_local, &g.grads));
                    let r = radial_return(params, &h.plastic, &eps, &h.eps, &h.sigma);
                    out.energy += energy_density(params, model.mode, &eps, &h.plastic, &r) * g.dv;
                    for (fj, grad) in out.forces.iter_mut().zip(&g.grads) {
                        *fj += stress_times(&r.sigma, grad) * g.dv;
                    }
                    out.eps.push(eps);
                    out.returns.push(r);
                }
                out
            })
            .collect();
        let local: Vec<Vec<Vector3<f64>>> = evals.iter().map(|e| e.forces.clone()).collect();
        let f_int = disc.gather(&local);
        let mut internal_energy = 0.0;
        let mut eps = Vec::with_capacity(disc.n_gauss());
        let mut returns = Vec::with_capacity(disc.n_gauss());
        for ev in evals {
            internal_energy += ev.energy;
            eps.extend(ev.eps);
            returns.extend(ev.returns);
        }
        FieldState { u: u.to_vec(), eps, returns, internal_energy, f_int }
    }

    pub fn sigma(&self) -> Vec<SymTensor> {
        self.returns.iter().map(|r| r.sigma).collect()
    }

    /// Committed history if this state is accepted as converged.
    pub fn history(&self) -> Vec<GaussHistory> {
        self.eps
            .iter()
            .zip(&self.returns)
            .map(|(eps, r)| GaussHistory { eps: *eps, sigma: r.sigma, plastic: r.new_state })
            .collect()
    }
}

/// Incremental energy minus external work.
pub fn energy_loss(state: &FieldState, f_ext: &[f64]) -> f64 {
    state.internal_energy - dot(f_ext, &state.u)
}

/// `f_int − f_ext` at free DOFs, zero at Dirichlet DOFs.
pub fn energy_gradient(state: &FieldState, f_ext: &[f64], free: &[bool]) -> Vec<f64> {
    residual(state, f_ext, free)
}

pub fn residual(state: &FieldState, f_ext: &[f64], free: &[bool]) -> Vec<f64> {
    state
        .f_int
        .iter()
        .zip(f_ext)
        .zip(free)
        .map(|((fi, fe), &m)| if m { fi - fe } else { 0.0 })
        .collect()
}

/// Mean squared residual over the free DOFs.
pub fn galerkin_loss(state: &FieldState, f_ext: &[f64], free: &[bool]) -> f64 {
    let n = free.iter().filter(|&&m| m).count();
    if n == 0 {
        return 0.0;
    }
    let r = residual(state, f_ext, free);
    dot(&r, &r) / n as f64
}

/// `(2/N) K_algᵀ r` restricted to the free DOFs.
pub fn galerkin_gradient(model: &Model, state: &FieldState, f_ext: &[f64], free: &[bool]) -> Vec<f64> {
    let n = free.iter().filter(|&&m| m).count();
    if n == 0 {
        return vec![0.0; free.len()];
    }
    let r = residual(state, f_ext, free);
    let kt_r = tangent_apply(model, state, &r, true);
    let scale = 2.0 / n as f64;
    kt_r.iter().zip(free).map(|(v, &m)| if m { scale * v } else { 0.0 }).collect()
}

/// Matrix-free product with the consistent tangent stiffness `∂f_int/∂u`
/// (or its transpose) at the given state, over all DOFs.
pub fn tangent_apply(model: &Model, state: &FieldState, v: &[f64], transpose: bool) -> Vec<f64> {
    let disc = &model.disc;
    let local: Vec<Vec<Vector3<f64>>> = (0..disc.geometry.len())
        .into_par_iter()
        .map(|e| {
            let params = model.material_of(e);
            let v_local = disc.local_vectors(e, v);
            let geo = &disc.geometry[e];
            let mut f = vec![Vector3::zeros(); v_local.len()];
            for (g, r) in geo.gauss.iter().zip(&state.returns[disc.gauss_range(e)]) {
                let d = algorithmic_tangent(params, r);
                let d = if transpose { d.transpose() } else { d };
                let deps = SymTensor::sym(&displacement_gradient(&v_local, &g.grads));
                let dsig = SymTensor::apply(&d, &deps);
                for (fj, grad) in f.iter_mut().zip(&g.grads) {
                    *fj += stress_times(&dsig, grad) * g.dv;
                }
            }
            f
        })
        .collect();
    disc.gather(&local)
}

/// Strain-displacement rows of node `j`: engineering strain per unit
/// displacement along each axis.
fn b_matrix(grad: &Vector3<f64>) -> [[f64; 6]; 3] {
    let [x, y, z] = [grad[0], grad[1], grad[2]];
    [
        [x, 0.0, 0.0, 0.0, z, y],
        [0.0, y, 0.0, z, 0.0, x],
        [0.0, 0.0, z, y, x, 0.0],
    ]
}

/// Dense element stiffness `Σ_g Bᵀ D B |J| w` over the element's local DOFs.
pub fn element_stiffness(geo: &ElementGeometry, dim: usize, tangents: &[Voigt6]) -> DMatrix<f64> {
    let n = geo.gauss.first().map_or(0, |g| g.grads.len());
    let mut k = DMatrix::zeros(n * dim, n * dim);
    for (g, d) in geo.gauss.iter().zip(tangents) {
        let b: Vec<[[f64; 6]; 3]> = g.grads.iter().map(b_matrix).collect();
        for a in 0..n {
            for i in 0..dim {
                // row of Bᵀ D for (a, i)
                let mut bd = [0.0; 6];
                for (s, slot) in bd.iter_mut().enumerate() {
                    *slot = (0..6).map(|r| b[a][i][r] * d[(r, s)]).sum();
                }
                for c in 0..n {
                    for j in 0..dim {
                        let v: f64 = (0..6).map(|s| bd[s] * b[c][j][s]).sum();
                        k[(a * dim + i, c * dim + j)] += v * g.dv;
                    }
                }
            }
        }
    }
    k
}

/// Assembles the tangent stiffness over the free DOFs (Dirichlet rows and
/// columns eliminated). With `elastic_only` the elastic operator is used at
/// every Gauss point and the matrix is checked for positive definiteness.
pub fn assemble_tangent_stiffness(
    model: &Model,
    state: Option<&FieldState>,
    free: &[bool],
    elastic_only: bool,
) -> Result<CsrMatrix, FieldError> {
    let disc = &model.disc;
    let dim = disc.dim();
    if free.len() != disc.n_dofs() {
        return Err(FieldError::LengthMismatch { expected: disc.n_dofs(), got: free.len() });
    }
    let mut index = vec![usize::MAX; free.len()];
    let mut n_free = 0;
    for (i, &m) in free.iter().enumerate() {
        if m {
            index[i] = n_free;
            n_free += 1;
        }
    }
    let blocks: Vec<Vec<(usize, usize, f64)>> = (0..disc.geometry.len())
        .into_par_iter()
        .map(|e| {
            let params = model.material_of(e);
            let geo = &disc.geometry[e];
            let tangents: Vec<Voigt6> = match state {
                Some(s) if !elastic_only => {
                    s.returns[disc.gauss_range(e)].iter().map(|r| algorithmic_tangent(params, r)).collect()
                }
                _ => vec![params.elastic_operator(); geo.gauss.len()],
            };
            let ke = element_stiffness(geo, dim, &tangents);
            let dofs: Vec<usize> = disc
                .mesh()
                .element(e)
                .nodes
                .iter()
                .flat_map(|&n| (0..dim).map(move |c| n * dim + c))
                .collect();
            let mut out = Vec::with_capacity(dofs.len() * dofs.len());
            for (a, &ra) in dofs.iter().enumerate() {
                if index[ra] == usize::MAX {
                    continue;
                }
                for (b, &cb) in dofs.iter().enumerate() {
                    if index[cb] != usize::MAX {
                        out.push((index[ra], index[cb], ke[(a, b)]));
                    }
                }
            }
            out
        })
        .collect();
    let triplets: Vec<(usize, usize, f64)> = blocks.into_iter().flatten().collect();
    let k = CsrMatrix::from_triplets(n_free, n_free, triplets);
    if elastic_only && n_free > 0 && k.cholesky().is_err() {
        return Err(FieldError::SingularSystem);
    }
    Ok(k)
}

/// Gradient of the total incremental potential with respect to nodal
/// coordinates at fixed displacements and fixed prior history:
/// `G_a = Σ_g (ψ I − ∇uᵀσ) ∇ₓN_a |J| w − Σ_g (b·u_g) ∇ₓN_a |J| w`.
///
/// Traction work is treated as coordinate-independent, which holds as long
/// as loaded facet nodes stay fixed.
pub fn coordinate_gradient(
    model: &Model,
    history: &[GaussHistory],
    state: &FieldState,
    body_force: Option<[f64; 3]>,
) -> Vec<f64> {
    let disc = &model.disc;
    let local: Vec<Vec<Vector3<f64>>> = (0..disc.geometry.len())
        .into_par_iter()
        .map(|e| {
            let params = model.material_of(e);
            let u_local = disc.local_vectors(e, &state.u);
            let geo = &disc.geometry[e];
            let range = disc.gauss_range(e);
            let mut out = vec![Vector3::zeros(); u_local.len()];
            for ((g, r), (eps, h)) in geo
                .gauss
                .iter()
                .zip(&state.returns[range.clone()])
                .zip(state.eps[range.clone()].iter().zip(&history[range]))
            {
                let grad_u = displacement_gradient(&u_local, &g.grads);
                let psi = energy_density(params, model.mode, eps, &h.plastic, r);
                let mut eshelby = Matrix3::identity() * psi - grad_u.transpose() * r.sigma.to_matrix();
                if let Some(b) = body_force {
                    let mut u_g = Vector3::zeros();
                    for (u, w) in u_local.iter().zip(&g.values) {
                        u_g += u * *w;
                    }
                    eshelby -= Matrix3::identity() * Vector3::new(b[0], b[1], b[2]).dot(&u_g);
                }
                for (o, grad) in out.iter_mut().zip(&g.grads) {
                    *o += eshelby * grad * g.dv;
                }
            }
            out
        })
        .collect();
    disc.gather(&local)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_graph, structured_mesh, Element};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn elastic_model(mesh: NodeElementGraph) -> Model {
        let disc = Discretization::new(Arc::new(mesh), QuadratureConfig::default()).unwrap();
        Model::new(disc, vec![MaterialParams::elastic(100.0, 0.25).unwrap()], HardeningMode::Perfect).unwrap()
    }

    fn plastic_model(mesh: NodeElementGraph, k: f64) -> Model {
        let disc = Discretization::new(Arc::new(mesh), QuadratureConfig::default()).unwrap();
        let mode = if k > 0.0 { HardeningMode::Isotropic } else { HardeningMode::Perfect };
        Model::new(disc, vec![MaterialParams::new(200.0, 0.3, 3f64.sqrt(), k, 0.0).unwrap()], mode).unwrap()
    }

    fn distorted_quad_mesh() -> NodeElementGraph {
        let mesh = structured_mesh(ElementKind::Quad4, &[0.0, 0.0], &[2.0, 2.0], &[2, 2]).unwrap();
        let mut coords = mesh.coords().to_vec();
        coords[4] = [1.15, 0.9, 0.0];
        mesh.with_coords(coords).unwrap()
    }

    #[test]
    fn strain_examples() {
        let m = elastic_model(distorted_quad_mesh());
        let n = m.disc.n_dofs();
        assert!(gauss_strain(&m.disc, &vec![0.0; n]).iter().all(|e| *e == SymTensor::ZERO));
        let shift: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.3 } else { -1.1 }).collect();
        assert!(gauss_strain(&m.disc, &shift).iter().all(|e| e.max_abs() < 1e-12));
        let a = [[0.01, 0.02], [-0.005, 0.03]];
        let u: Vec<f64> = m
            .disc
            .mesh()
            .coords()
            .iter()
            .flat_map(|x| (0..2).map(move |r| a[r][0] * x[0] + a[r][1] * x[1]))
            .collect();
        let expect = SymTensor::new(a[0][0], a[1][1], 0.0, 0.0, 0.0, 0.5 * (a[0][1] + a[1][0]));
        for e in gauss_strain(&m.disc, &u) {
            assert!((e - expect).max_abs() < 1e-12);
        }
    }

    #[test]
    fn stress_depends_on_element_material() {
        let mut mesh = structured_mesh(ElementKind::Quad4, &[0.0, 0.0], &[2.0, 1.0], &[2, 1]).unwrap();
        let mut data = mesh.to_data();
        data.elements[1].material = 1;
        mesh = NodeElementGraph::from_data(data).unwrap();
        let disc = Discretization::new(Arc::new(mesh), QuadratureConfig::default()).unwrap();
        let mats = vec![
            MaterialParams::new(200.0, 0.3, 3f64.sqrt(), 0.0, 100.0).unwrap(),
            MaterialParams::new(150.0, 0.3, 3f64.sqrt(), 0.0, 50.0).unwrap(),
        ];
        let model = Model::new(disc, mats, HardeningMode::Kinematic).unwrap();
        let eps = vec![SymTensor::diag(1e-3, 0.0, 0.0); model.disc.n_gauss()];
        let r = gauss_stress(&model, &eps, &model.virgin_history());
        let (a, b) = (r[0].sigma, r[4].sigma);
        assert!((a.0[0] / b.0[0] - 200.0 / 150.0).abs() < 1e-12);
        // yielding strain lands on the surface
        let eps = vec![SymTensor::diag(0.05, 0.0, 0.0); model.disc.n_gauss()];
        for (r, e) in gauss_stress(&model, &eps, &model.virgin_history()).iter().zip(0..) {
            let p = model.material_of(e / 4);
            assert!(crate::material::yield_function(p, &r.sigma, &r.new_state) <= 1e-10 * p.sigma_y);
        }
    }

    #[test]
    fn internal_force_self_equilibrium() {
        let m = elastic_model(distorted_quad_mesh());
        assert!(assemble_internal_force(&m.disc, &vec![SymTensor::ZERO; m.disc.n_gauss()])
            .iter()
            .all(|&f| f == 0.0));
        let single = elastic_model(structured_mesh(ElementKind::Quad4, &[0.0, 0.0], &[1.0, 1.0], &[1, 1]).unwrap());
        let f = assemble_internal_force(&single.disc, &vec![SymTensor::diag(2.0, 0.0, 0.0); 4]);
        // nodes 0,2 on x=0 pulled by −1, nodes 1,3 on x=1 by +1
        let fx: Vec<f64> = (0..4).map(|n| f[2 * n]).collect();
        for (got, want) in fx.iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mesh3 = structured_mesh(ElementKind::Hex8, &[0.0; 3], &[1.0, 2.0, 1.5], &[2, 3, 2]).unwrap();
        let m3 = elastic_model(mesh3);
        let sigma: Vec<SymTensor> =
            (0..m3.disc.n_gauss()).map(|_| SymTensor(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))).collect();
        let f = assemble_internal_force(&m3.disc, &sigma);
        for c in 0..3 {
            let s: f64 = f.iter().skip(c).step_by(3).sum();
            assert!(s.abs() < 1e-10);
        }
    }

    #[test]
    fn edge_traction_lumping() {
        let mesh = structured_mesh(ElementKind::Quad4, &[0.0, 0.0], &[2.0, 1.0], &[1, 1]).unwrap();
        let m = elastic_model(mesh);
        let t = Traction { facet_set: "y_max".into(), value: [0.0, -3.0, 0.0] };
        let f = assemble_external_force(&m.disc, &[t], None).unwrap();
        assert!((f[2 * 2 + 1] + 3.0).abs() < 1e-14 && (f[2 * 3 + 1] + 3.0).abs() < 1e-14);
        assert!(f[1].abs() < 1e-15);
        let zero = Traction { facet_set: "y_max".into(), value: [0.0; 3] };
        assert!(assemble_external_force(&m.disc, &[zero], None).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn footing_pressure_resultant() {
        let mut mesh = structured_mesh(ElementKind::Hex8, &[0.0; 3], &[20.0, 10.0, 1.0], &[8, 4, 1]).unwrap();
        let top = mesh.facet_set("y_max").unwrap().to_vec();
        let loaded = mesh.facets_in_box(&top, &[5.0, 10.0, 0.0], &[15.0, 10.0, 1.0], 1e-9);
        mesh.add_facet_set("load", loaded).unwrap();
        let m = elastic_model(mesh);
        let t = Traction { facet_set: "load".into(), value: [0.0, -3.2, 0.0] };
        let f = assemble_external_force(&m.disc, &[t], None).unwrap();
        let fy: f64 = f.iter().skip(1).step_by(3).sum();
        assert!((fy - (-3.2 * 10.0 * 1.0)).abs() < 1e-10 * 32.0);
        let mut empty = m.disc.mesh().clone();
        empty.add_facet_set("none", vec![]).unwrap();
        let d = Discretization::new(Arc::new(empty), QuadratureConfig::default()).unwrap();
        let t = Traction { facet_set: "none".into(), value: [1.0, 0.0, 0.0] };
        assert!(matches!(assemble_external_force(&d, &[t], None), Err(FieldError::EmptyFacetSet(_))));
    }

    #[test]
    fn body_force_resultant() {
        let m = elastic_model(distorted_quad_mesh());
        let f = assemble_external_force(&m.disc, &[], Some([0.0, -2.0, 0.0])).unwrap();
        let fy: f64 = f.iter().skip(1).step_by(2).sum();
        assert!((fy + 2.0 * m.disc.volume()).abs() < 1e-12);
    }

    #[test]
    fn volume_matches_box() {
        for kind in ElementKind::ALL {
            let (ext, div): (Vec<f64>, Vec<usize>) = if kind.dim() == 2 {
                (vec![3.0, 2.0], vec![3, 4])
            } else {
                (vec![3.0, 2.0, 0.5], vec![3, 2, 2])
            };
            let m = elastic_model(structured_mesh(kind, &[0.0; 3], &ext, &div).unwrap());
            let exact: f64 = ext.iter().product();
            assert!((m.disc.volume() - exact).abs() < 1e-10 * exact);
        }
    }

    #[test]
    fn constant_strain_patch() {
        let m = elastic_model(distorted_quad_mesh());
        let a = Matrix3::new(0.01, -0.02, 0.0, 0.04, 0.005, 0.0, 0.0, 0.0, 0.0);
        let mut u = vec![0.0; m.disc.n_dofs()];
        for (n, x) in m.disc.mesh().coords().iter().enumerate() {
            let v = a * Vector3::new(x[0], x[1], x[2]);
            u[2 * n] = v[0] + 0.1;
            u[2 * n + 1] = v[1] - 0.2;
        }
        for geo in 0..m.disc.geometry().len() {
            let local = m.disc.local_vectors(geo, &u);
            for g in &m.disc.geometry()[geo].gauss {
                let grad = displacement_gradient(&local, &g.grads);
                assert!((grad - a).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn locality_of_strain_updates() {
        let m = elastic_model(structured_mesh(ElementKind::Hex8, &[0.0; 3], &[1.0; 3], &[3, 3, 3]).unwrap());
        let base = vec![0.0; m.disc.n_dofs()];
        let node = 21; // interior-adjacent node
        let mut u = base.clone();
        u[node * 3 + 1] = 1e-3;
        let eps = gauss_strain(&m.disc, &u);
        let incident: Vec<usize> = m.disc.mesh().incidence(node).iter().map(|i| i.element).collect();
        for e in 0..m.disc.mesh().n_elements() {
            let changed = m.disc.gauss_range(e).any(|g| eps[g] != SymTensor::ZERO);
            assert_eq!(changed, incident.contains(&e), "element {e}");
        }
    }

    /// Dense elastic stiffness of the free-free block assembled by brute
    /// force from small unit displacement vectors through the internal-force
    /// layer (small enough to stay below yield).
    fn dense_oracle(m: &Model, free: &[bool]) -> DMatrix<f64> {
        let hist = m.virgin_history();
        let idx: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
        let mut k = DMatrix::zeros(idx.len(), idx.len());
        let h = 1e-6;
        for (c, &j) in idx.iter().enumerate() {
            let mut u = vec![0.0; free.len()];
            u[j] = h;
            let s = FieldState::evaluate(m, &hist, &u);
            assert!(s.returns.iter().all(|r| !r.yielded));
            for (r, &i) in idx.iter().enumerate() {
                k[(r, c)] = s.f_int[i] / h;
            }
        }
        k
    }

    fn free_mask(mesh: &NodeElementGraph, fixed_set: &str) -> Vec<bool> {
        let dim = mesh.dim();
        let mut free = vec![true; mesh.n_dofs()];
        for &n in mesh.node_set(fixed_set).unwrap() {
            for c in 0..dim {
                free[n * dim + c] = false;
            }
        }
        free
    }

    #[test]
    fn single_quad_stiffness_matches_textbook() {
        // plane-strain bilinear square, 2×2 Gauss; classical closed form
        let mesh = build_graph(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]],
            vec![Element { kind: ElementKind::Quad4, nodes: vec![0, 1, 2, 3], material: 0 }],
            Default::default(),
            Default::default(),
        )
        .unwrap();
        let m = elastic_model(mesh);
        let free = vec![true; 8];
        let k = assemble_tangent_stiffness(&m, None, &free, false).unwrap().to_dense();
        let p = m.materials[0];
        let (c11, c12, c33) = (p.lambda + 2.0 * p.mu, p.lambda, p.mu);
        // unit square: K = ∫ Bᵀ D B; entries from the standard bilinear integrals
        let k00 = c11 / 3.0 + c33 / 3.0;
        let k01 = (c12 + c33) / 4.0;
        let k02 = -c11 / 3.0 + c33 / 6.0;
        assert!((k[(0, 0)] - k00).abs() < 1e-12);
        assert!((k[(0, 1)] - k01).abs() < 1e-12);
        assert!((k[(0, 2)] - k02).abs() < 1e-12);
        let dense = dense_oracle(&m, &free);
        assert!((k - dense).abs().max() < 1e-10);
    }

    #[test]
    fn stiffness_symmetry_and_fd() {
        let mesh = structured_mesh(ElementKind::Hex8, &[0.0; 3], &[2.0, 1.0, 1.0], &[2, 2, 2]).unwrap();
        let free = free_mask(&mesh, "x_min");
        let m = plastic_model(mesh, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u: Vec<f64> = free
            .iter()
            .map(|&f| if f { rng.random_range(-0.02..0.02) } else { 0.0 })
            .collect();
        let hist = m.virgin_history();
        let state = FieldState::evaluate(&m, &hist, &u);
        assert!(state.returns.iter().any(|r| r.yielded));
        let elastic = assemble_tangent_stiffness(&m, None, &free, true).unwrap();
        let dense = elastic.to_dense();
        let norm = dense.abs().max();
        assert!((dense.clone() - dense.transpose()).abs().max() <= 1e-10 * norm);
        assert!((dense - dense_oracle(&m, &free)).abs().max() <= 1e-10 * norm);
        // consistent tangent: K·v against central differences of f_int
        let k = assemble_tangent_stiffness(&m, Some(&state), &free, false).unwrap();
        let v: Vec<f64> = free.iter().map(|&f| if f { rng.random_range(-1.0..1.0) } else { 0.0 }).collect();
        let h = 1e-7;
        let plus: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let fp = FieldState::evaluate(&m, &hist, &plus).f_int;
        let fm = FieldState::evaluate(&m, &hist, &minus).f_int;
        let fd: Vec<f64> = (0..free.len()).filter(|&i| free[i]).map(|i| (fp[i] - fm[i]) / (2.0 * h)).collect();
        let vf: Vec<f64> = (0..free.len()).filter(|&i| free[i]).map(|i| v[i]).collect();
        let kv = k.matvec(&vf);
        let scale = fd.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        for (a, b) in kv.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * scale);
        }
        let free_kv = tangent_apply(&m, &state, &v, false);
        for (i, a) in (0..free.len()).filter(|&i| free[i]).zip(&kv) {
            assert!((free_kv[i] - a).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn unconstrained_elastic_stiffness_is_singular() {
        let m = elastic_model(structured_mesh(ElementKind::Quad4, &[0.0; 2], &[1.0, 1.0], &[2, 2]).unwrap());
        let free = vec![true; m.disc.n_dofs()];
        assert!(matches!(assemble_tangent_stiffness(&m, None, &free, true), Err(FieldError::SingularSystem)));
    }

    #[test]
    fn elastic_energy_is_quadratic_form() {
        let mesh = structured_mesh(ElementKind::Quad4, &[0.0; 2], &[2.0, 1.0], &[3, 2]).unwrap();
        let free = free_mask(&mesh, "x_min");
        let m = elastic_model(mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = free.iter().map(|&f| if f { rng.random_range(-0.1..0.1) } else { 0.0 }).collect();
        let f_ext: Vec<f64> = free.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let state = FieldState::evaluate(&m, &m.virgin_history(), &u);
        let k = assemble_tangent_stiffness(&m, None, &free, true).unwrap();
        let uf: Vec<f64> = (0..free.len()).filter(|&i| free[i]).map(|i| u[i]).collect();
        let ff: Vec<f64> = (0..free.len()).filter(|&i| free[i]).map(|i| f_ext[i]).collect();
        let ku = k.matvec(&uf);
        let expect = 0.5 * dot(&uf, &ku) - dot(&uf, &ff);
        assert!((energy_loss(&state, &f_ext) - expect).abs() < 1e-12);
        let g = energy_gradient(&state, &f_ext, &free);
        let gf: Vec<f64> = (0..free.len()).filter(|&i| free[i]).map(|i| g[i]).collect();
        for ((a, b), c) in gf.iter().zip(&ku).zip(&ff) {
            assert!((a - (b - c)).abs() < 1e-12);
        }
        // Galerkin gradient against the dense form (2/N) Kᵀ(KU − F)
        let r: Vec<f64> = ku.iter().zip(&ff).map(|(a, b)| a - b).collect();
        let ktr = k.matvec(&r);
        let n = uf.len() as f64;
        let gg = galerkin_gradient(&m, &state, &f_ext, &free);
        let ggf: Vec<f64> = (0..free.len()).filter(|&i| free[i]).map(|i| gg[i]).collect();
        for (a, b) in ggf.iter().zip(&ktr) {
            assert!((a - 2.0 / n * b).abs() < 1e-12);
        }
        assert!((galerkin_loss(&state, &f_ext, &free) - dot(&r, &r) / n).abs() < 1e-12);
    }

    fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, u: &[f64], free: &[bool]) -> Vec<f64> {
        let mut g = vec![0.0; u.len()];
        for i in (0..u.len()).filter(|&i| free[i]) {
            let h = 1e-6 * (1.0 + u[i].abs());
            let mut p = u.to_vec();
            p[i] += h;
            let fp = f(&p);
            p[i] -= 2.0 * h;
            let fm = f(&p);
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        let den = b.iter().fold(0.0_f64, |m, y| m.max(y.abs()));
        num / den
    }

    #[test]
    fn gradients_match_fd_in_plastic_range() {
        for (k, mode_h) in [(0.0, 0.0), (100.0, 0.0), (0.0, 100.0)] {
            let mesh = structured_mesh(ElementKind::Hex8, &[0.0; 3], &[2.0, 1.0, 1.0], &[2, 1, 1]).unwrap();
            let free = free_mask(&mesh, "x_min");
            let disc = Discretization::new(Arc::new(mesh), QuadratureConfig::default()).unwrap();
            let mode = match (k > 0.0, mode_h > 0.0) {
                (true, _) => HardeningMode::Isotropic,
                (_, true) => HardeningMode::Kinematic,
                _ => HardeningMode::Perfect,
            };
            let model = Model::new(disc, vec![MaterialParams::new(200.0, 0.3, 3f64.sqrt(), k, mode_h).unwrap()], mode)
                .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            // a plastic prior state, then a random perturbation from it
            let u0: Vec<f64> = free.iter().map(|&f| if f { rng.random_range(-0.05..0.05) } else { 0.0 }).collect();
            let hist = FieldState::evaluate(&model, &model.virgin_history(), &u0).history();
            let u: Vec<f64> =
                u0.iter().zip(&free).map(|(a, &f)| if f { a + rng.random_range(-0.03..0.03) } else { *a }).collect();
            let f_ext: Vec<f64> = free.iter().map(|_| rng.random_range(-0.5..0.5)).collect();
            let state = FieldState::evaluate(&model, &hist, &u);
            assert!(state.returns.iter().any(|r| r.yielded));
            let energy = |x: &[f64]| energy_loss(&FieldState::evaluate(&model, &hist, x), &f_ext);
            let ge = energy_gradient(&state, &f_ext, &free);
            assert!(rel_err(&ge, &fd_gradient(&energy, &u, &free)) < 1e-6, "energy mode {mode:?}");
            let galerkin = |x: &[f64]| galerkin_loss(&FieldState::evaluate(&model, &hist, x), &f_ext, &free);
            let gg = galerkin_gradient(&model, &state, &f_ext, &free);
            assert!(rel_err(&gg, &fd_gradient(&galerkin, &u, &free)) < 1e-5, "galerkin mode {mode:?}");
        }
    }

    #[test]
    fn coordinate_gradient_matches_fd() {
        let mesh = structured_mesh(ElementKind::Quad4, &[0.0; 2], &[2.0, 1.0], &[3, 2]).unwrap();
        let free = free_mask(&mesh, "x_min");
        let model = plastic_model(mesh, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u: Vec<f64> = free.iter().map(|&f| if f { rng.random_range(-0.02..0.02) } else { 0.0 }).collect();
        let body = Some([0.3, -1.0, 0.0]);
        let hist = model.virgin_history();
        let state = FieldState::evaluate(&model, &hist, &u);
        assert!(state.returns.iter().any(|r| r.yielded));
        let g = coordinate_gradient(&model, &hist, &state, body);
        let coords = model.disc.mesh().coords().to_vec();
        let total = |c: &[[f64; 3]]| {
            let m = model.with_disc(model.disc.with_coords(c).unwrap());
            let fe = assemble_external_force(&m.disc, &[], body).unwrap();
            energy_loss(&FieldState::evaluate(&m, &hist, &u), &fe)
        };
        let node = 5; // interior node
        for c in 0..2 {
            let h = 1e-6;
            let mut p = coords.clone();
            p[node][c] += h;
            let fp = total(&p);
            p[node][c] -= 2.0 * h;
            let fm = total(&p);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[node * 2 + c]).abs() <= 1e-5 * fd.abs().max(1e-3), "c={c} fd={fd} an={}", g[node * 2 + c]);
        }
    }
}
