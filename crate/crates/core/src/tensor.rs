//! Symmetric second-order tensors and 6×6 Voigt operators.
//!
//! Components are stored in Voigt order `[xx, yy, zz, yz, xz, xy]` as
//! *tensor* components, so `SymTensor::norm` is the Frobenius norm and
//! `ddot` counts each off-diagonal entry twice.
//!
//! Operators ([`Voigt6`]) follow the engineering-shear convention: they map
//! the strain vector `[ε_xx, ε_yy, ε_zz, 2ε_yz, 2ε_xz, 2ε_xy]` to the stress
//! vector of tensor components. Use [`SymTensor::engineering`] to build the
//! right-hand side.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::{Matrix3, SMatrix, Vector6};

/// 6×6 operator acting on engineering strain vectors.
pub type Voigt6 = SMatrix<f64, 6, 6>;

/// Symmetric 3×3 tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SymTensor(pub [f64; 6]);

/// Weight of each Voigt slot in a double contraction.
const DDOT_WEIGHT: [f64; 6] = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0];

impl SymTensor {
    pub const ZERO: SymTensor = SymTensor([0.0; 6]);
    pub const IDENTITY: SymTensor = SymTensor([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

    pub fn new(xx: f64, yy: f64, zz: f64, yz: f64, xz: f64, xy: f64) -> Self {
        SymTensor([xx, yy, zz, yz, xz, xy])
    }

    pub fn diag(xx: f64, yy: f64, zz: f64) -> Self {
        SymTensor([xx, yy, zz, 0.0, 0.0, 0.0])
    }

    /// Symmetric part of a general 3×3 matrix.
    pub fn sym(m: &Matrix3<f64>) -> Self {
        SymTensor([
            m[(0, 0)],
            m[(1, 1)],
            m[(2, 2)],
            0.5 * (m[(1, 2)] + m[(2, 1)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            0.5 * (m[(0, 1)] + m[(1, 0)]),
        ])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let c = &self.0;
        Matrix3::new(c[0], c[5], c[4], c[5], c[1], c[3], c[4], c[3], c[2])
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    /// Deviatoric part.
    pub fn dev(&self) -> Self {
        let p = self.trace() / 3.0;
        let mut out = *self;
        out.0[0] -= p;
        out.0[1] -= p;
        out.0[2] -= p;
        out
    }

    pub fn ddot(&self, other: &SymTensor) -> f64 {
        (0..6).map(|i| DDOT_WEIGHT[i] * self.0[i] * other.0[i]).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.ddot(self).sqrt()
    }

    /// Engineering-shear strain vector (shear slots doubled).
    pub fn engineering(&self) -> Vector6<f64> {
        let c = &self.0;
        Vector6::new(c[0], c[1], c[2], 2.0 * c[3], 2.0 * c[4], 2.0 * c[5])
    }

    pub fn from_engineering(v: &Vector6<f64>) -> Self {
        SymTensor([v[0], v[1], v[2], 0.5 * v[3], 0.5 * v[4], 0.5 * v[5]])
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::from_row_slice(&self.0)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        SymTensor([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    /// Applies a Voigt operator: `op : self`.
    pub fn apply(op: &Voigt6, eps: &SymTensor) -> SymTensor {
        SymTensor::from_vector(&(op * eps.engineering()))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Add for SymTensor {
    type Output = SymTensor;
    fn add(mut self, rhs: SymTensor) -> SymTensor {
        self += rhs;
        self
    }
}

impl AddAssign for SymTensor {
    fn add_assign(&mut self, rhs: SymTensor) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl Sub for SymTensor {
    type Output = SymTensor;
    fn sub(mut self, rhs: SymTensor) -> SymTensor {
        self -= rhs;
        self
    }
}

impl SubAssign for SymTensor {
    fn sub_assign(&mut self, rhs: SymTensor) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a -= b;
        }
    }
}

impl Mul<SymTensor> for f64 {
    type Output = SymTensor;
    fn mul(self, rhs: SymTensor) -> SymTensor {
        SymTensor(rhs.0.map(|v| self * v))
    }
}

impl Neg for SymTensor {
    type Output = SymTensor;
    fn neg(self) -> SymTensor {
        SymTensor(self.0.map(|v| -v))
    }
}

/// Isotropic elasticity operator `λ 1⊗1 + 2μ I`.
pub fn isotropic_operator(lambda: f64, mu: f64) -> Voigt6 {
    let mut d = Voigt6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            d[(i, j)] = lambda;
        }
        d[(i, i)] += 2.0 * mu;
        d[(i + 3, i + 3)] = mu;
    }
    d
}

/// Deviatoric projector in engineering form: `P : ε = ε'`.
pub fn deviatoric_projector() -> Voigt6 {
    let mut p = Voigt6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            p[(i, j)] = if i == j { 2.0 / 3.0 } else { -1.0 / 3.0 };
        }
        p[(i + 3, i + 3)] = 0.5;
    }
    p
}

/// `a ⊗ b` in engineering form: `(a ⊗ b) : ε = a (b : ε)`.
pub fn outer(a: &SymTensor, b: &SymTensor) -> Voigt6 {
    a.as_vector() * b.as_vector().transpose()
}
