//! JSON problem definition: parsing, validation and construction of the
//! solver inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{Discretization, FieldError, Model, QuadratureConfig, Traction};
use crate::material::{HardeningMode, MaterialError, MaterialParams};
use crate::mesh::{structured_mesh, ElementKind, MeshData, MeshError, NodeElementGraph};
use crate::optim::{LbfgsConfig, OptimError};
use crate::solver::{build_dof_field, DirichletBc, LoadStep, LossKind, RAdaptConfig, Solver, SolverError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("conflicting boundary conditions in step {step:?}: {source}")]
    ConflictingBc { step: String, source: SolverError },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Axis-aligned box, inclusive, with a small geometric tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredSpec {
    pub kind: ElementKind,
    #[serde(default)]
    pub origin: Vec<f64>,
    pub extents: Vec<f64>,
    pub divisions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum MeshSpec {
    Structured(StructuredSpec),
    /// Raw node/element lists; element `material` fields hold material ids.
    Inline(MeshData),
    /// Path to a JSON file holding a raw mesh, relative to the problem file.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum NodeSetSpec {
    Nodes(Vec<usize>),
    Box(BoxSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacetSetSpec {
    /// Existing facet set to filter, e.g. `boundary` or `y_max`.
    pub from: String,
    #[serde(rename = "box")]
    pub bbox: BoxSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub id: usize,
    #[serde(rename = "E")]
    pub e: f64,
    pub nu: f64,
    /// Omitted for a purely elastic material.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_y: Option<f64>,
    #[serde(rename = "K", default)]
    pub k_iso: f64,
    #[serde(rename = "H", default)]
    pub h_kin: f64,
}

/// Assigns `material` to every element whose centroid lies in `box`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialRegion {
    pub material: usize,
    #[serde(rename = "box")]
    pub bbox: BoxSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletSpec {
    pub set: String,
    /// One entry per component; `null` leaves the component free.
    pub u: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TractionSpec {
    pub set: String,
    pub t: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub label: String,
    #[serde(default)]
    pub dirichlet: Vec<DirichletSpec>,
    #[serde(default)]
    pub tractions: Vec<TractionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_force: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<LbfgsConfig>,
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub directory: PathBuf,
    pub vtk: bool,
    pub nodal_csv: bool,
    pub gauss_csv: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { directory: PathBuf::from("output"), vtk: true, nodal_csv: true, gauss_csv: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    /// Nodal CSV files, one per step, compared after each step.
    pub nodal: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RAdaptSpec {
    /// Step (0-based) whose converged solution is adapted; defaults to the last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(flatten)]
    pub config: RAdaptConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub mesh: MeshSpec,
    #[serde(default)]
    pub node_sets: BTreeMap<String, NodeSetSpec>,
    #[serde(default)]
    pub facet_sets: BTreeMap<String, FacetSetSpec>,
    pub materials: Vec<MaterialSpec>,
    #[serde(default)]
    pub default_material: usize,
    #[serde(default)]
    pub material_regions: Vec<MaterialRegion>,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "perfect")]
    pub hardening: HardeningMode,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub optimizer: LbfgsConfig,
    pub steps: Vec<StepSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_adapt: Option<RAdaptSpec>,
    /// Directory of the problem file, for resolving relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn perfect() -> HardeningMode {
    HardeningMode::Perfect
}

/// Everything needed to run a problem.
#[derive(Clone, Debug)]
pub struct Problem {
    pub solver: Solver,
    pub steps: Vec<LoadStep>,
    pub output: OutputSpec,
    pub references: Vec<PathBuf>,
    pub r_adapt: Option<(usize, RAdaptConfig)>,
}

const BOX_TOL: f64 = 1e-9;

/// Facet set holding every boundary facet, added to meshes that lack one.
pub const BOUNDARY_SET: &str = "boundary";

pub fn parse_problem(path: &Path) -> Result<ProblemConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut config = parse_problem_str(&text)?;
    config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    config.validate()?;
    Ok(config)
}

/// Parses without cross-reference validation (see [`ProblemConfig::validate`]).
pub fn parse_problem_str(text: &str) -> Result<ProblemConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn box_bounds(b: &BoxSpec, dim: usize, what: &str) -> Result<(Vec<f64>, Vec<f64>), ConfigError> {
    if b.min.len() != dim || b.max.len() != dim {
        return Err(ConfigError::Invalid(format!("{what}: box needs {dim} coordinates per corner")));
    }
    Ok((b.min.clone(), b.max.clone()))
}

fn vec3(v: &[f64], dim: usize, what: &str) -> Result<[f64; 3], ConfigError> {
    if v.len() != dim {
        return Err(ConfigError::Invalid(format!("{what}: expected {dim} components, got {}", v.len())));
    }
    let mut out = [0.0; 3];
    out[..dim].copy_from_slice(v);
    Ok(out)
}

impl ProblemConfig {
    fn material_index(&self) -> Result<BTreeMap<usize, usize>, ConfigError> {
        let mut ids = BTreeMap::new();
        for (i, m) in self.materials.iter().enumerate() {
            if ids.insert(m.id, i).is_some() {
                return Err(ConfigError::Invalid(format!("material id {} declared twice", m.id)));
            }
        }
        if ids.is_empty() {
            return Err(ConfigError::Invalid("at least one material is required".into()));
        }
        Ok(ids)
    }

    /// Builds the mesh with named sets and per-element material indices.
    pub fn build_mesh(&self) -> Result<NodeElementGraph, ConfigError> {
        let ids = self.material_index()?;
        let resolve = |id: usize, whom: &str| {
            ids.get(&id).copied().ok_or_else(|| ConfigError::DanglingReference(format!("{whom} references undeclared material id {id}")))
        };
        let default = resolve(self.default_material, "default_material")?;
        let mut data = match &self.mesh {
            MeshSpec::Structured(s) => {
                let origin = if s.origin.is_empty() { vec![0.0; s.kind.dim()] } else { s.origin.clone() };
                let mut data = structured_mesh(s.kind, &origin, &s.extents, &s.divisions)?.to_data();
                for el in &mut data.elements {
                    el.material = default;
                }
                data
            }
            MeshSpec::Inline(d) => self.remap_materials(d.clone(), &resolve)?,
            MeshSpec::File(p) => {
                let path = self.base_dir.join(p);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                let d: MeshData = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
                    path: format!("{}: {}", path.display(), e.path()),
                    message: e.inner().to_string(),
                })?;
                self.remap_materials(d, &resolve)?
            }
        };
        let mut mesh = NodeElementGraph::from_data(data.clone())?;
        let dim = mesh.dim();
        for region in &self.material_regions {
            let m = resolve(region.material, "material_regions")?;
            let (lo, hi) = box_bounds(&region.bbox, dim, "material region")?;
            for (e, el) in data.elements.iter_mut().enumerate() {
                let c = mesh.element_coords(e);
                let n = c.len() as f64;
                let inside = (0..dim).all(|k| {
                    let x = c.iter().map(|p| p[k]).sum::<f64>() / n;
                    x >= lo[k] - BOX_TOL && x <= hi[k] + BOX_TOL
                });
                if inside {
                    el.material = m;
                }
            }
        }
        if !self.material_regions.is_empty() {
            mesh = NodeElementGraph::from_data(data)?;
        }
        for (name, spec) in &self.node_sets {
            let nodes = match spec {
                NodeSetSpec::Nodes(n) => n.clone(),
                NodeSetSpec::Box(b) => {
                    let (lo, hi) = box_bounds(b, dim, name)?;
                    mesh.nodes_in_box(&lo, &hi, BOX_TOL)
                }
            };
            mesh.add_node_set(name, nodes)?;
        }
        if mesh.facet_set(BOUNDARY_SET).is_none() {
            let boundary = mesh.boundary_facets();
            mesh.add_facet_set(BOUNDARY_SET, boundary)?;
        }
        for (name, spec) in &self.facet_sets {
            let source = mesh
                .facet_set(&spec.from)
                .ok_or_else(|| ConfigError::DanglingReference(format!("facet set {name:?} filters unknown set {:?}", spec.from)))?
                .to_vec();
            let (lo, hi) = box_bounds(&spec.bbox, dim, name)?;
            let facets = mesh.facets_in_box(&source, &lo, &hi, BOX_TOL);
            mesh.add_facet_set(name, facets)?;
        }
        Ok(mesh)
    }

    fn remap_materials(
        &self,
        mut data: MeshData,
        resolve: &dyn Fn(usize, &str) -> Result<usize, ConfigError>,
    ) -> Result<MeshData, ConfigError> {
        for (e, el) in data.elements.iter_mut().enumerate() {
            el.material = resolve(el.material, &format!("element {e}"))?;
        }
        Ok(data)
    }

    pub fn build_materials(&self) -> Result<Vec<MaterialParams>, ConfigError> {
        self.materials
            .iter()
            .map(|m| match m.sigma_y {
                Some(sy) => MaterialParams::new(m.e, m.nu, sy, m.k_iso, m.h_kin),
                None if m.k_iso == 0.0 && m.h_kin == 0.0 => MaterialParams::elastic(m.e, m.nu),
                None => Err(MaterialError::InvalidYield(f64::NAN)),
            })
            .collect::<Result<_, _>>()
            .map_err(ConfigError::from)
    }

    pub fn build_steps(&self, mesh: &NodeElementGraph) -> Result<Vec<LoadStep>, ConfigError> {
        let dim = mesh.dim();
        let mut steps = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let mut step = LoadStep::new(&s.label);
            for d in &s.dirichlet {
                if mesh.node_set(&d.set).is_none() {
                    return Err(ConfigError::DanglingReference(format!("step {:?}: unknown node set {:?}", s.label, d.set)));
                }
                if d.u.len() != dim {
                    return Err(ConfigError::Invalid(format!("step {:?}: set {:?} needs {dim} components", s.label, d.set)));
                }
                let mut values = [None; 3];
                values[..dim].copy_from_slice(&d.u);
                step.dirichlet.push(DirichletBc { node_set: d.set.clone(), values });
            }
            for t in &s.tractions {
                if mesh.facet_set(&t.set).is_none() {
                    return Err(ConfigError::DanglingReference(format!("step {:?}: unknown facet set {:?}", s.label, t.set)));
                }
                step.tractions.push(Traction { facet_set: t.set.clone(), value: vec3(&t.t, dim, &s.label)? });
            }
            step.body_force = s.body_force.as_deref().map(|b| vec3(b, dim, &s.label)).transpose()?;
            if let Some(o) = &s.optimizer {
                o.validate()?;
            }
            step.optimizer = s.optimizer.clone();
            if s.substeps == 0 {
                return Err(ConfigError::Invalid(format!("step {:?}: substeps must be at least 1", s.label)));
            }
            step.substeps = s.substeps;
            build_dof_field(mesh, &step.dirichlet).map_err(|source| ConfigError::ConflictingBc { step: s.label.clone(), source })?;
            steps.push(step);
        }
        Ok(steps)
    }

    /// Cross-reference and consistency checks that need no numeric work
    /// beyond building the mesh.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.optimizer.validate()?;
        if self.steps.is_empty() {
            return Err(ConfigError::Invalid("at least one load step is required".into()));
        }
        let labels: BTreeSet<&str> = self.steps.iter().map(|s| s.label.as_str()).collect();
        if labels.len() != self.steps.len() {
            return Err(ConfigError::Invalid("step labels must be unique".into()));
        }
        let mesh = self.build_mesh()?;
        let materials = self.build_materials()?;
        for m in &materials {
            self.hardening.check(m)?;
        }
        for (kind, order) in &self.quadrature.0 {
            crate::element::quadrature_rule(*kind, *order).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.build_steps(&mesh)?;
        if let Some(r) = &self.r_adapt {
            if let Some(i) = r.step {
                if i >= self.steps.len() {
                    return Err(ConfigError::DanglingReference(format!("r_adapt.step {i} out of range")));
                }
            }
            if let Some(set) = &r.config.movable {
                if mesh.node_set(set).is_none() {
                    return Err(ConfigError::DanglingReference(format!("r_adapt.movable: unknown node set {set:?}")));
                }
            }
            if r.config.fixed_components.iter().any(|&c| c >= mesh.dim()) {
                return Err(ConfigError::Invalid("r_adapt.fixed_components out of range".into()));
            }
        }
        if let Some(r) = &self.reference {
            if r.nodal.len() > self.steps.len() {
                return Err(ConfigError::Invalid("more reference files than steps".into()));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Problem, ConfigError> {
        let mesh = self.build_mesh()?;
        let materials = self.build_materials()?;
        let steps = self.build_steps(&mesh)?;
        let disc = Discretization::new(Arc::new(mesh), self.quadrature.clone())?;
        let model = Model::new(disc, materials, self.hardening)?;
        let r_adapt = self.r_adapt.as_ref().map(|r| (r.step.unwrap_or(steps.len() - 1), r.config.clone()));
        let mut output = self.output.clone();
        if output.directory.is_relative() {
            output.directory = self.base_dir.join(&output.directory);
        }
        Ok(Problem {
            solver: Solver::new(model, self.loss, self.optimizer.clone()),
            steps,
            output,
            references: self
                .reference
                .as_ref()
                .map(|r| r.nodal.iter().map(|p| self.base_dir.join(p)).collect())
                .unwrap_or_default(),
            r_adapt,
        })
    }

    /// Resolved configuration (defaults filled) as pretty JSON.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "mesh": {"structured": {"kind": "quad4", "extents": [1, 1], "divisions": [1, 1]}},
        "materials": [{"id": 0, "E": 100, "nu": 0.3}],
        "steps": [{"label": "pull", "dirichlet": [{"set": "x_min", "u": [0, 0]}],
                   "tractions": [{"set": "x_max", "t": [1, 0]}]}]
    }"#;

    #[test]
    fn minimal_problem_parses_with_defaults() {
        let c = parse_problem_str(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.loss, LossKind::Energy);
        assert_eq!(c.optimizer, LbfgsConfig::default());
        assert_eq!(c.steps[0].substeps, 1);
        let echo = c.echo();
        assert!(echo.contains("\"memory\": 20"));
        let p = c.build().unwrap();
        assert_eq!(p.solver.model.disc.n_dofs(), 8);
        assert!(p.solver.model.materials[0].sigma_y.is_infinite());
    }

    #[test]
    fn unknown_key_is_a_schema_error_with_path() {
        let text = MINIMAL.replace("\"nu\": 0.3", "\"nu\": 0.3, \"poisson\": 0.3");
        match parse_problem_str(&text) {
            Err(ConfigError::Schema { path, .. }) => assert_eq!(path, "materials[0].poisson"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn undeclared_material_is_dangling() {
        let text = MINIMAL.replace("\"materials\"", "\"default_material\": 7, \"materials\"");
        let c = parse_problem_str(&text).unwrap();
        match c.validate() {
            Err(ConfigError::DanglingReference(msg)) => assert!(msg.contains('7')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_set_is_dangling() {
        let text = MINIMAL.replace("\"set\": \"x_max\"", "\"set\": \"top\"");
        assert!(matches!(parse_problem_str(&text).unwrap().validate(), Err(ConfigError::DanglingReference(_))));
    }

    #[test]
    fn conflicting_dirichlet_detected() {
        let text = MINIMAL.replace(
            "[{\"set\": \"x_min\", \"u\": [0, 0]}]",
            "[{\"set\": \"x_min\", \"u\": [0, 0]}, {\"set\": \"y_min\", \"u\": [0.1, null]}]",
        );
        assert!(matches!(parse_problem_str(&text).unwrap().validate(), Err(ConfigError::ConflictingBc { .. })));
    }

    #[test]
    fn regions_and_sets() {
        let text = r#"{
            "mesh": {"structured": {"kind": "quad4", "extents": [4, 1], "divisions": [4, 1]}},
            "node_sets": {"corner": {"nodes": [0]}, "right": {"box": {"min": [4, 0], "max": [4, 1]}}},
            "facet_sets": {"load": {"from": "y_max", "box": {"min": [1, 1], "max": [3, 1]}}},
            "materials": [{"id": 3, "E": 100, "nu": 0.3}, {"id": 9, "E": 50, "nu": 0.3}],
            "default_material": 3,
            "material_regions": [{"material": 9, "box": {"min": [2, 0], "max": [4, 1]}}],
            "steps": [{"label": "s", "dirichlet": [{"set": "corner", "u": [0, 0]}]}]
        }"#;
        let c = parse_problem_str(text).unwrap();
        c.validate().unwrap();
        let mesh = c.build_mesh().unwrap();
        assert_eq!(mesh.node_set("right").unwrap(), &[4, 9]);
        assert_eq!(mesh.facet_set("load").unwrap().len(), 2);
        let mats: Vec<usize> = mesh.elements().iter().map(|e| e.material).collect();
        assert_eq!(mats, vec![0, 0, 1, 1]);
    }

    #[test]
    fn hardening_mode_checked_against_materials() {
        let text = MINIMAL.replace("\"nu\": 0.3}", "\"nu\": 0.3, \"sigma_y\": 1, \"K\": 10}");
        let c = parse_problem_str(&text).unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Material(_))));
        let text = text.replace("\"steps\"", "\"hardening\": \"isotropic\", \"steps\"");
        parse_problem_str(&text).unwrap().validate().unwrap();
    }
}
