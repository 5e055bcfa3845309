//! Isoparametric element kernels: shape functions, natural gradients,
//! quadrature rules and the Jacobian / physical-gradient update.
//!
//! 2D kinds carry padded 3×3 Jacobians (`J = diag(J₂, 1)`), so downstream
//! code treats both dimensions alike and physical gradients have a zero
//! third component.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::mesh::{ElementKind, FaceKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElementError {
    #[error("quadrature order {order} unsupported for {kind}")]
    UnsupportedOrder { kind: ElementKind, order: usize },
}

/// Non-positive Jacobian determinant found at a Gauss point.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("non-positive Jacobian determinant {det:e} at Gauss point {gauss}")]
pub struct Inverted {
    pub gauss: usize,
    pub det: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

const GAUSS2: f64 = 0.577_350_269_189_625_8; // 1/√3

/// Gauss rule on the reference domain of `kind`.
///
/// Orders 1 and 2 (tensor Gauss–Legendre) for quad4/hex8; order 1 for the
/// simplices. Points are ordered with ξ varying fastest.
pub fn quadrature_rule(kind: ElementKind, order: usize) -> Result<QuadratureRule, ElementError> {
    let line: &[(f64, f64)] = match order {
        1 => &[(0.0, 2.0)],
        2 => &[(-GAUSS2, 1.0), (GAUSS2, 1.0)],
        _ => &[],
    };
    match (kind, order) {
        (ElementKind::Quad4, 1 | 2) => {
            let mut rule = QuadratureRule { points: vec![], weights: vec![] };
            for &(y, wy) in line {
                for &(x, wx) in line {
                    rule.points.push([x, y, 0.0]);
                    rule.weights.push(wx * wy);
                }
            }
            Ok(rule)
        }
        (ElementKind::Hex8, 1 | 2) => {
            let mut rule = QuadratureRule { points: vec![], weights: vec![] };
            for &(z, wz) in line {
                for &(y, wy) in line {
                    for &(x, wx) in line {
                        rule.points.push([x, y, z]);
                        rule.weights.push(wx * wy * wz);
                    }
                }
            }
            Ok(rule)
        }
        (ElementKind::Tri3, 1) => Ok(QuadratureRule {
            points: vec![[1.0 / 3.0, 1.0 / 3.0, 0.0]],
            weights: vec![0.5],
        }),
        (ElementKind::Tet4, 1) => Ok(QuadratureRule {
            points: vec![[0.25, 0.25, 0.25]],
            weights: vec![1.0 / 6.0],
        }),
        _ => Err(ElementError::UnsupportedOrder { kind, order }),
    }
}

/// Shape function values `N_j(ξ)` in local node order.
pub fn shape_values(kind: ElementKind, xi: &[f64; 3]) -> Vec<f64> {
    let [x, y, z] = *xi;
    match kind {
        ElementKind::Tri3 => vec![1.0 - x - y, x, y],
        ElementKind::Tet4 => vec![1.0 - x - y - z, x, y, z],
        ElementKind::Quad4 => kind
            .reference_nodes()
            .iter()
            .map(|n| 0.25 * (1.0 + n[0] * x) * (1.0 + n[1] * y))
            .collect(),
        ElementKind::Hex8 => kind
            .reference_nodes()
            .iter()
            .map(|n| 0.125 * (1.0 + n[0] * x) * (1.0 + n[1] * y) * (1.0 + n[2] * z))
            .collect(),
    }
}

/// Natural gradients `∇_ξ N_j(ξ)` (third component zero in 2D).
pub fn shape_gradients_natural(kind: ElementKind, xi: &[f64; 3]) -> Vec<[f64; 3]> {
    let [x, y, z] = *xi;
    match kind {
        ElementKind::Tri3 => vec![[-1.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        ElementKind::Tet4 => vec![
            [-1.0, -1.0, -1.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ],
        ElementKind::Quad4 => kind
            .reference_nodes()
            .iter()
            .map(|n| {
                [
                    0.25 * n[0] * (1.0 + n[1] * y),
                    0.25 * n[1] * (1.0 + n[0] * x),
                    0.0,
                ]
            })
            .collect(),
        ElementKind::Hex8 => kind
            .reference_nodes()
            .iter()
            .map(|n| {
                let (a, b, c) = (1.0 + n[0] * x, 1.0 + n[1] * y, 1.0 + n[2] * z);
                [0.125 * n[0] * b * c, 0.125 * n[1] * a * c, 0.125 * n[2] * a * b]
            })
            .collect(),
    }
}

/// Shape data of one element kind at the points of one rule, computed once
/// and shared by every element of that kind.
#[derive(Clone, Debug)]
pub struct ReferenceElement {
    pub kind: ElementKind,
    pub rule: QuadratureRule,
    pub values: Vec<Vec<f64>>,
    pub natural_grads: Vec<Vec<[f64; 3]>>,
}

impl ReferenceElement {
    pub fn new(kind: ElementKind, rule: QuadratureRule) -> Self {
        let values = rule.points.iter().map(|p| shape_values(kind, p)).collect();
        let natural_grads = rule.points.iter().map(|p| shape_gradients_natural(kind, p)).collect();
        ReferenceElement { kind, rule, values, natural_grads }
    }

    pub fn with_order(kind: ElementKind, order: usize) -> Result<Self, ElementError> {
        Ok(Self::new(kind, quadrature_rule(kind, order)?))
    }
}

/// Geometric quantities at one Gauss point.
#[derive(Clone, Debug)]
pub struct GaussGeometry {
    pub jacobian: Matrix3<f64>,
    pub det: f64,
    pub inverse: Matrix3<f64>,
    /// Physical gradients `∇ₓN_j` in local node order.
    pub grads: Vec<Vector3<f64>>,
    /// Shape function values at the point.
    pub values: Vec<f64>,
    /// Quadrature weight `w_g`.
    pub weight: f64,
    /// Scaled weight `|J|·w_g`.
    pub dv: f64,
}

/// Output of the isoparametric layer for one element.
#[derive(Clone, Debug)]
pub struct ElementGeometry {
    pub kind: ElementKind,
    pub gauss: Vec<GaussGeometry>,
}

impl ElementGeometry {
    pub fn volume(&self) -> f64 {
        self.gauss.iter().map(|g| g.dv).sum()
    }
}

/// Jacobian `J = Σ_j x_j (∇_ξ N_j)ᵀ`, padded to 3×3 for 2D kinds.
pub fn jacobian(kind: ElementKind, coords: &[[f64; 3]], natural: &[[f64; 3]]) -> Matrix3<f64> {
    let mut j = Matrix3::zeros();
    for (x, g) in coords.iter().zip(natural) {
        for r in 0..3 {
            for c in 0..3 {
                j[(r, c)] += x[r] * g[c];
            }
        }
    }
    if kind.dim() == 2 {
        j[(2, 2)] = 1.0;
    }
    j
}

/// Isoparametric update using cached reference data: Jacobian, its
/// determinant and inverse, and `∇ₓN_j = J⁻ᵀ ∇_ξ N_j` at every Gauss point.
pub fn isoparametric_update_with(
    reference: &ReferenceElement,
    coords: &[[f64; 3]],
) -> Result<ElementGeometry, Inverted> {
    let kind = reference.kind;
    let mut gauss = Vec::with_capacity(reference.rule.len());
    for (g, natural) in reference.natural_grads.iter().enumerate() {
        let jac = jacobian(kind, coords, natural);
        let det = jac.determinant();
        if !(det > 0.0) {
            return Err(Inverted { gauss: g, det });
        }
        let inverse = jac.try_inverse().ok_or(Inverted { gauss: g, det })?;
        let inv_t = inverse.transpose();
        let grads = natural
            .iter()
            .map(|d| inv_t * Vector3::new(d[0], d[1], d[2]))
            .collect();
        let weight = reference.rule.weights[g];
        gauss.push(GaussGeometry {
            jacobian: jac,
            det,
            inverse,
            grads,
            values: reference.values[g].clone(),
            weight,
            dv: det * weight,
        });
    }
    Ok(ElementGeometry { kind, gauss })
}

pub fn isoparametric_update(
    kind: ElementKind,
    coords: &[[f64; 3]],
    rule: &QuadratureRule,
) -> Result<ElementGeometry, Inverted> {
    isoparametric_update_with(&ReferenceElement::new(kind, rule.clone()), coords)
}

/// Facet quadrature: shape values of the facet nodes and the surface
/// measure element at each point, already multiplied by the weight.
pub fn face_quadrature(kind: FaceKind, coords: &[[f64; 3]]) -> Vec<(Vec<f64>, f64)> {
    let sub = |a: &[f64; 3], b: &[f64; 3]| Vector3::new(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    let add_scaled = |acc: &mut Vector3<f64>, x: &[f64; 3], s: f64| {
        *acc += Vector3::new(x[0], x[1], x[2]) * s;
    };
    match kind {
        FaceKind::Line2 => {
            let half_len = 0.5 * sub(&coords[1], &coords[0]).norm();
            [-GAUSS2, GAUSS2]
                .iter()
                .map(|&s| (vec![0.5 * (1.0 - s), 0.5 * (1.0 + s)], half_len))
                .collect()
        }
        FaceKind::Tri3 => {
            let area = 0.5 * sub(&coords[1], &coords[0]).cross(&sub(&coords[2], &coords[0])).norm();
            vec![(vec![1.0 / 3.0; 3], area)]
        }
        FaceKind::Quad4 => {
            let nodes = ElementKind::Quad4.reference_nodes();
            let mut out = Vec::with_capacity(4);
            for &t in &[-GAUSS2, GAUSS2] {
                for &s in &[-GAUSS2, GAUSS2] {
                    let mut ds = Vector3::zeros();
                    let mut dt = Vector3::zeros();
                    let mut values = Vec::with_capacity(4);
                    for (x, n) in coords.iter().zip(nodes) {
                        values.push(0.25 * (1.0 + n[0] * s) * (1.0 + n[1] * t));
                        add_scaled(&mut ds, x, 0.25 * n[0] * (1.0 + n[1] * t));
                        add_scaled(&mut dt, x, 0.25 * n[1] * (1.0 + n[0] * s));
                    }
                    out.push((values, ds.cross(&dt).norm()));
                }
            }
            out
        }
    }
}
