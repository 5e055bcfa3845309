//! Node–element hypergraph: nodal coordinates, element connectivity with
//! material ids, the node→element incidence relation, and named node and
//! facet sets.
//!
//! Local node orderings follow the usual isoparametric convention:
//!
//! * `tri3`: `(0,0) (1,0) (0,1)`
//! * `quad4`: counter-clockwise from `(-1,-1)`
//! * `tet4`: `(0,0,0) (1,0,0) (0,1,0) (0,0,1)`
//! * `hex8`: bottom face `ζ=-1` counter-clockwise from `(-1,-1,-1)`, then
//!   the top face in the same order.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::element::{isoparametric_update, quadrature_rule, ElementGeometry};

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("element {element}: node index {node} out of range (node count {count})")]
    IndexOutOfRange { element: usize, node: usize, count: usize },
    #[error("element {element}: {kind} expects {expected} nodes, got {got}")]
    ArityMismatch { element: usize, kind: ElementKind, expected: usize, got: usize },
    #[error("element {element}: non-positive Jacobian determinant {det:e} at Gauss point {gauss}")]
    InvertedElement { element: usize, gauss: usize, det: f64 },
    #[error("invalid divisions {0:?}: every axis needs at least one division")]
    InvalidDivisions(Vec<usize>),
    #[error("invalid extents {0:?}: must be positive and finite")]
    InvalidExtents(Vec<f64>),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("set {name:?}: {reason}")]
    BadSet { name: String, reason: String },
}

/// Linear element families supported by the solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Tri3,
    Quad4,
    Tet4,
    Hex8,
}

/// Shape of an element facet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaceKind {
    Line2,
    Tri3,
    Quad4,
}

const TRI3_NODES: [[f64; 3]; 3] = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
const QUAD4_NODES: [[f64; 3]; 4] =
    [[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]];
const TET4_NODES: [[f64; 3]; 4] =
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
const HEX8_NODES: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

const TRI3_FACES: [&[usize]; 3] = [&[0, 1], &[1, 2], &[2, 0]];
const QUAD4_FACES: [&[usize]; 4] = [&[0, 1], &[1, 2], &[2, 3], &[3, 0]];
const TET4_FACES: [&[usize]; 4] = [&[0, 2, 1], &[0, 1, 3], &[1, 2, 3], &[0, 3, 2]];
const HEX8_FACES: [&[usize]; 6] = [
    &[0, 3, 2, 1],
    &[4, 5, 6, 7],
    &[0, 1, 5, 4],
    &[1, 2, 6, 5],
    &[2, 3, 7, 6],
    &[3, 0, 4, 7],
];

impl ElementKind {
    pub const ALL: [ElementKind; 4] =
        [ElementKind::Tri3, ElementKind::Quad4, ElementKind::Tet4, ElementKind::Hex8];

    pub fn dim(self) -> usize {
        match self {
            ElementKind::Tri3 | ElementKind::Quad4 => 2,
            ElementKind::Tet4 | ElementKind::Hex8 => 3,
        }
    }

    pub fn n_nodes(self) -> usize {
        match self {
            ElementKind::Tri3 => 3,
            ElementKind::Quad4 | ElementKind::Tet4 => 4,
            ElementKind::Hex8 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementKind::Tri3 => "tri3",
            ElementKind::Quad4 => "quad4",
            ElementKind::Tet4 => "tet4",
            ElementKind::Hex8 => "hex8",
        }
    }

    /// Natural coordinates of the local nodes (unused trailing axes are 0).
    pub fn reference_nodes(self) -> &'static [[f64; 3]] {
        match self {
            ElementKind::Tri3 => &TRI3_NODES,
            ElementKind::Quad4 => &QUAD4_NODES,
            ElementKind::Tet4 => &TET4_NODES,
            ElementKind::Hex8 => &HEX8_NODES,
        }
    }

    /// Local node lists of each facet.
    pub fn faces(self) -> &'static [&'static [usize]] {
        match self {
            ElementKind::Tri3 => &TRI3_FACES,
            ElementKind::Quad4 => &QUAD4_FACES,
            ElementKind::Tet4 => &TET4_FACES,
            ElementKind::Hex8 => &HEX8_FACES,
        }
    }

    pub fn face_kind(self) -> FaceKind {
        match self {
            ElementKind::Tri3 | ElementKind::Quad4 => FaceKind::Line2,
            ElementKind::Tet4 => FaceKind::Tri3,
            ElementKind::Hex8 => FaceKind::Quad4,
        }
    }

    /// Quadrature order used when none is configured: full integration for
    /// the tensor-product kinds, one point for simplices.
    pub fn default_order(self) -> usize {
        match self {
            ElementKind::Quad4 | ElementKind::Hex8 => 2,
            ElementKind::Tri3 | ElementKind::Tet4 => 1,
        }
    }

    /// Legacy VTK cell type code.
    pub fn vtk_cell_type(self) -> u8 {
        match self {
            ElementKind::Tri3 => 5,
            ElementKind::Quad4 => 9,
            ElementKind::Tet4 => 10,
            ElementKind::Hex8 => 12,
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ElementKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tri3" => Ok(ElementKind::Tri3),
            "quad4" => Ok(ElementKind::Quad4),
            "tet4" => Ok(ElementKind::Tet4),
            "hex8" => Ok(ElementKind::Hex8),
            other => Err(format!("unknown element kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Element {
    pub kind: ElementKind,
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub material: usize,
}

/// A traction surface piece: local face `face` of element `element`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FacetRef {
    pub element: usize,
    pub face: usize,
}

/// One node→element edge of the hypergraph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Incidence {
    pub element: usize,
    /// Position of the node inside the element's connectivity.
    pub local: usize,
}

/// Plain serializable form of a mesh (the raw nodes/elements JSON block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshData {
    pub nodes: Vec<Vec<f64>>,
    pub elements: Vec<Element>,
    #[serde(default)]
    pub node_sets: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub facet_sets: BTreeMap<String, Vec<FacetRef>>,
}

/// The node–element hypergraph `G = (V, C, E)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeElementGraph {
    dim: usize,
    coords: Vec<[f64; 3]>,
    elements: Vec<Element>,
    node_elements: Vec<Vec<Incidence>>,
    node_sets: BTreeMap<String, Vec<usize>>,
    facet_sets: BTreeMap<String, Vec<FacetRef>>,
}

impl NodeElementGraph {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.dim * self.coords.len()
    }

    /// Nodal coordinates padded to three components.
    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn element(&self, e: usize) -> &Element {
        &self.elements[e]
    }

    /// Elements incident to `node`, ascending by element id.
    pub fn incidence(&self, node: usize) -> &[Incidence] {
        &self.node_elements[node]
    }

    pub fn node_sets(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.node_sets
    }

    pub fn facet_sets(&self) -> &BTreeMap<String, Vec<FacetRef>> {
        &self.facet_sets
    }

    pub fn node_set(&self, name: &str) -> Option<&[usize]> {
        self.node_sets.get(name).map(Vec::as_slice)
    }

    pub fn facet_set(&self, name: &str) -> Option<&[FacetRef]> {
        self.facet_sets.get(name).map(Vec::as_slice)
    }

    /// Coordinates of an element's nodes in local order.
    pub fn element_coords(&self, e: usize) -> Vec<[f64; 3]> {
        self.elements[e].nodes.iter().map(|&n| self.coords[n]).collect()
    }

    /// Global node ids of a facet in face-local order.
    pub fn facet_nodes(&self, facet: FacetRef) -> Vec<usize> {
        let el = &self.elements[facet.element];
        el.kind.faces()[facet.face].iter().map(|&l| el.nodes[l]).collect()
    }

    /// Facets belonging to exactly one element, in element order.
    pub fn boundary_facets(&self) -> Vec<FacetRef> {
        let mut count: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let mut all = Vec::new();
        for (e, el) in self.elements.iter().enumerate() {
            for face in 0..el.kind.faces().len() {
                let f = FacetRef { element: e, face };
                let mut key = self.facet_nodes(f);
                key.sort_unstable();
                *count.entry(key.clone()).or_default() += 1;
                all.push((f, key));
            }
        }
        all.into_iter().filter(|(_, key)| count[key] == 1).map(|(f, _)| f).collect()
    }

    pub fn add_node_set(&mut self, name: &str, mut nodes: Vec<usize>) -> Result<(), MeshError> {
        nodes.sort_unstable();
        nodes.dedup();
        if let Some(&bad) = nodes.iter().find(|&&n| n >= self.n_nodes()) {
            return Err(MeshError::BadSet {
                name: name.to_string(),
                reason: format!("node {bad} out of range"),
            });
        }
        self.node_sets.insert(name.to_string(), nodes);
        Ok(())
    }

    pub fn add_facet_set(&mut self, name: &str, mut facets: Vec<FacetRef>) -> Result<(), MeshError> {
        facets.sort_unstable();
        facets.dedup();
        for f in &facets {
            validate_facet(self, name, *f)?;
        }
        self.facet_sets.insert(name.to_string(), facets);
        Ok(())
    }

    /// Nodes whose coordinates fall inside the closed box `[lo, hi]`
    /// (components beyond the mesh dimension are ignored).
    pub fn nodes_in_box(&self, lo: &[f64], hi: &[f64], tol: f64) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&n| in_box(&self.coords[n][..self.dim], lo, hi, tol))
            .collect()
    }

    /// Facets of `facets` whose nodes all lie inside the closed box.
    pub fn facets_in_box(&self, facets: &[FacetRef], lo: &[f64], hi: &[f64], tol: f64) -> Vec<FacetRef> {
        facets
            .iter()
            .copied()
            .filter(|&f| {
                self.facet_nodes(f)
                    .iter()
                    .all(|&n| in_box(&self.coords[n][..self.dim], lo, hi, tol))
            })
            .collect()
    }

    /// Same topology with new coordinates; validation is re-run.
    pub fn with_coords(&self, coords: Vec<[f64; 3]>) -> Result<NodeElementGraph, MeshError> {
        if coords.len() != self.coords.len() {
            return Err(MeshError::DimensionMismatch(format!(
                "expected {} coordinates, got {}",
                self.coords.len(),
                coords.len()
            )));
        }
        let mut out = self.clone();
        out.coords = coords;
        check_orientation(&out)?;
        Ok(out)
    }

    pub fn to_data(&self) -> MeshData {
        MeshData {
            nodes: self.coords.iter().map(|c| c[..self.dim].to_vec()).collect(),
            elements: self.elements.clone(),
            node_sets: self.node_sets.clone(),
            facet_sets: self.facet_sets.clone(),
        }
    }

    pub fn from_data(data: MeshData) -> Result<NodeElementGraph, MeshError> {
        build_graph(data.nodes, data.elements, data.node_sets, data.facet_sets)
    }

    /// Rebuilds the element list from the incidence relation alone.
    pub fn elements_from_incidence(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> =
            self.elements.iter().map(|e| vec![usize::MAX; e.nodes.len()]).collect();
        for (node, list) in self.node_elements.iter().enumerate() {
            for inc in list {
                out[inc.element][inc.local] = node;
            }
        }
        out
    }
}

fn in_box(x: &[f64], lo: &[f64], hi: &[f64], tol: f64) -> bool {
    x.iter()
        .enumerate()
        .all(|(i, &v)| v >= lo.get(i).copied().unwrap_or(f64::NEG_INFINITY) - tol
            && v <= hi.get(i).copied().unwrap_or(f64::INFINITY) + tol)
}

fn validate_facet(mesh: &NodeElementGraph, name: &str, f: FacetRef) -> Result<(), MeshError> {
    let Some(el) = mesh.elements.get(f.element) else {
        return Err(MeshError::BadSet {
            name: name.to_string(),
            reason: format!("element {} out of range", f.element),
        });
    };
    if f.face >= el.kind.faces().len() {
        return Err(MeshError::BadSet {
            name: name.to_string(),
            reason: format!("element {} ({}) has no face {}", f.element, el.kind, f.face),
        });
    }
    Ok(())
}

/// Builds and validates the hypergraph.
///
/// Every node row must have the same length (2 or 3), which fixes the
/// spatial dimension; every element kind must match it.
pub fn build_graph(
    coords: Vec<Vec<f64>>,
    elements: Vec<Element>,
    node_sets: BTreeMap<String, Vec<usize>>,
    facet_sets: BTreeMap<String, Vec<FacetRef>>,
) -> Result<NodeElementGraph, MeshError> {
    let dim = coords.first().map_or_else(
        || elements.first().map_or(3, |e| e.kind.dim()),
        Vec::len,
    );
    if dim != 2 && dim != 3 {
        return Err(MeshError::DimensionMismatch(format!("nodes must have 2 or 3 coordinates, got {dim}")));
    }
    let mut padded = Vec::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        if c.len() != dim {
            return Err(MeshError::DimensionMismatch(format!(
                "node {i} has {} coordinates, expected {dim}",
                c.len()
            )));
        }
        let mut p = [0.0; 3];
        p[..dim].copy_from_slice(c);
        padded.push(p);
    }
    let n_nodes = padded.len();
    for (e, el) in elements.iter().enumerate() {
        if el.kind.dim() != dim {
            return Err(MeshError::DimensionMismatch(format!(
                "element {e} is {} but the mesh is {dim}D",
                el.kind
            )));
        }
        if el.nodes.len() != el.kind.n_nodes() {
            return Err(MeshError::ArityMismatch {
                element: e,
                kind: el.kind,
                expected: el.kind.n_nodes(),
                got: el.nodes.len(),
            });
        }
        if let Some(&node) = el.nodes.iter().find(|&&n| n >= n_nodes) {
            return Err(MeshError::IndexOutOfRange { element: e, node, count: n_nodes });
        }
    }
    let mut node_elements = vec![Vec::new(); n_nodes];
    for (e, el) in elements.iter().enumerate() {
        for (local, &n) in el.nodes.iter().enumerate() {
            node_elements[n].push(Incidence { element: e, local });
        }
    }
    // element loop is ascending, so each list is already sorted
    let mut mesh = NodeElementGraph {
        dim,
        coords: padded,
        elements,
        node_elements,
        node_sets: BTreeMap::new(),
        facet_sets: BTreeMap::new(),
    };
    for (name, nodes) in node_sets {
        mesh.add_node_set(&name, nodes)?;
    }
    for (name, facets) in facet_sets {
        mesh.add_facet_set(&name, facets)?;
    }
    check_orientation(&mesh)?;
    Ok(mesh)
}

fn check_orientation(mesh: &NodeElementGraph) -> Result<(), MeshError> {
    for (e, el) in mesh.elements.iter().enumerate() {
        let rule = quadrature_rule(el.kind, el.kind.default_order())
            .expect("default order is always supported");
        let geom: Result<ElementGeometry, _> =
            isoparametric_update(el.kind, &mesh.element_coords(e), &rule);
        if let Err(err) = geom {
            return Err(MeshError::InvertedElement { element: e, gauss: err.gauss, det: err.det });
        }
    }
    Ok(())
}

/// Axis-aligned structured box mesh with lexicographic node numbering
/// (x fastest). Simplex kinds split each cell: two triangles per square,
/// six tetrahedra per cube around the main diagonal.
///
/// Node sets and facet sets named `x_min`, `x_max`, `y_min`, `y_max`
/// (and `z_min`, `z_max` in 3D) are populated for every boundary side.
pub fn structured_mesh(
    kind: ElementKind,
    origin: &[f64],
    extents: &[f64],
    divisions: &[usize],
) -> Result<NodeElementGraph, MeshError> {
    let dim = kind.dim();
    if divisions.len() != dim || divisions.iter().any(|&d| d == 0) {
        return Err(MeshError::InvalidDivisions(divisions.to_vec()));
    }
    if extents.len() != dim || extents.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(MeshError::InvalidExtents(extents.to_vec()));
    }
    let mut org = [0.0; 3];
    for (i, o) in origin.iter().take(dim).enumerate() {
        org[i] = *o;
    }
    let (nx, ny) = (divisions[0], divisions[1]);
    let nz = if dim == 3 { divisions[2] } else { 0 };
    let node_id = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut coords = Vec::new();
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                let mut c = vec![
                    org[0] + extents[0] * i as f64 / nx as f64,
                    org[1] + extents[1] * j as f64 / ny as f64,
                ];
                if dim == 3 {
                    c.push(org[2] + extents[2] * k as f64 / nz as f64);
                }
                coords.push(c);
            }
        }
    }
    let mut elements = Vec::new();
    let mut push = |kind: ElementKind, nodes: Vec<usize>| {
        elements.push(Element { kind, nodes, material: 0 });
    };
    if dim == 2 {
        for j in 0..ny {
            for i in 0..nx {
                let q = [node_id(i, j, 0), node_id(i + 1, j, 0), node_id(i + 1, j + 1, 0), node_id(i, j + 1, 0)];
                match kind {
                    ElementKind::Quad4 => push(kind, q.to_vec()),
                    _ => {
                        push(ElementKind::Tri3, vec![q[0], q[1], q[2]]);
                        push(ElementKind::Tri3, vec![q[0], q[2], q[3]]);
                    }
                }
            }
        }
    } else {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let h = [
                        node_id(i, j, k),
                        node_id(i + 1, j, k),
                        node_id(i + 1, j + 1, k),
                        node_id(i, j + 1, k),
                        node_id(i, j, k + 1),
                        node_id(i + 1, j, k + 1),
                        node_id(i + 1, j + 1, k + 1),
                        node_id(i, j + 1, k + 1),
                    ];
                    match kind {
                        ElementKind::Hex8 => push(kind, h.to_vec()),
                        _ => {
                            for t in KUHN_TETS {
                                push(ElementKind::Tet4, t.iter().map(|&l| h[l]).collect());
                            }
                        }
                    }
                }
            }
        }
    }
    let mut mesh = build_graph(coords, elements, BTreeMap::new(), BTreeMap::new())?;
    let axes = ["x", "y", "z"];
    for (a, axis) in axes.iter().enumerate().take(dim) {
        for (side, value) in [("min", org[a]), ("max", org[a] + extents[a])] {
            let tol = 1e-9 * extents[a];
            let nodes: Vec<usize> = (0..mesh.n_nodes())
                .filter(|&n| (mesh.coords[n][a] - value).abs() <= tol)
                .collect();
            let name = format!("{axis}_{side}");
            let on_side = {
                let mut flags = vec![false; mesh.n_nodes()];
                for &n in &nodes {
                    flags[n] = true;
                }
                flags
            };
            let mut facets = Vec::new();
            for (e, el) in mesh.elements.iter().enumerate() {
                for (f, face) in el.kind.faces().iter().enumerate() {
                    if face.iter().all(|&l| on_side[el.nodes[l]]) {
                        facets.push(FacetRef { element: e, face: f });
                    }
                }
            }
            mesh.add_node_set(&name, nodes)?;
            mesh.add_facet_set(&name, facets)?;
        }
    }
    Ok(mesh)
}

/// Six tetrahedra sharing the diagonal 0–6 of a hex8 cell, each positively
/// oriented in the hex8 local numbering.
const KUHN_TETS: [[usize; 4]; 6] = [
    [0, 1, 2, 6],
    [0, 5, 1, 6],
    [0, 2, 3, 6],
    [0, 3, 7, 6],
    [0, 4, 5, 6],
    [0, 7, 4, 6],
];
