//! Extreme eigenvalues, condition numbers and measured gradient-descent
//! contraction rates of symmetric positive definite operators.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::optim::{dot, gradient_descent, OptimError};
use crate::sparse::{CsrMatrix, Factorization};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("{what} did not converge within {iters} iterations")]
    NotConverged { what: &'static str, iters: usize },
    #[error("operator is not positive definite (Rayleigh quotient {0:.6e})")]
    IndefiniteOperator(f64),
    #[error("operator has dimension zero")]
    Empty,
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Square operator given through its action on vectors.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    /// `A⁻¹ b` when a direct solver is available; `None` falls back to CG.
    fn solve(&self, _b: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matvec(x)
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec()
    }
}

/// Sparse matrix with a precomputed factorization for inverse iteration.
pub struct FactoredMatrix<'a> {
    pub matrix: &'a CsrMatrix,
    pub factor: Factorization,
}

impl LinearOperator for FactoredMatrix<'_> {
    fn dim(&self) -> usize {
        self.matrix.nrows
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.matvec(x)
    }
    fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        Some(self.factor.solve(b))
    }
}

/// `Aᵀ A` for a symmetric `A`, i.e. `x ↦ A(Ax)`.
pub struct Composite<'a>(pub &'a dyn LinearOperator);

impl LinearOperator for Composite<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.apply(&self.0.apply(x))
    }
    fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        let y = self.0.solve(b)?;
        self.0.solve(&y)
    }
}

#[derive(Clone, Debug)]
pub struct EigenConfig {
    /// Relative convergence tolerance of the iterative estimates.
    pub tol: f64,
    pub max_iters: usize,
    /// Systems up to this size use a dense eigendecomposition.
    pub dense_limit: usize,
    pub seed: u64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig { tol: 1e-10, max_iters: 20_000, dense_limit: 500, seed: 0 }
    }
}

pub fn dense_matrix(op: &dyn LinearOperator) -> DMatrix<f64> {
    let n = op.dim();
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op.apply(&e);
        e[j] = 0.0;
        m.set_column(j, &nalgebra::DVector::from_vec(col));
    }
    // the exact operator is symmetric; remove rounding asymmetry
    (&m + m.transpose()) * 0.5
}

/// `(λ_min, λ_max)` of a symmetric positive definite operator.
pub fn extreme_eigenvalues(op: &dyn LinearOperator, config: &EigenConfig) -> Result<(f64, f64), SpectralError> {
    let n = op.dim();
    if n == 0 {
        return Err(SpectralError::Empty);
    }
    if n <= config.dense_limit {
        let eig = SymmetricEigen::new(dense_matrix(op));
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        if !(lo > 0.0) {
            return Err(SpectralError::IndefiniteOperator(lo));
        }
        return Ok((lo, hi));
    }
    let hi = power_iteration(op, config)?;
    let lo = inverse_iteration(op, hi, config)?;
    Ok((lo, hi))
}

fn random_unit(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
    n
}

pub fn power_iteration(op: &dyn LinearOperator, config: &EigenConfig) -> Result<f64, SpectralError> {
    let mut v = random_unit(op.dim(), config.seed);
    let mut lambda = 0.0;
    for _ in 0..config.max_iters {
        let mut w = op.apply(&v);
        let rq = dot(&v, &w);
        if rq < 0.0 {
            return Err(SpectralError::IndefiniteOperator(rq));
        }
        normalize(&mut w);
        if (rq - lambda).abs() <= config.tol * rq {
            return Ok(rq);
        }
        lambda = rq;
        v = w;
    }
    Err(SpectralError::NotConverged { what: "power iteration", iters: config.max_iters })
}

/// Smallest eigenvalue by inverse iteration; each solve uses the operator's
/// direct solver or conjugate gradients.
pub fn inverse_iteration(op: &dyn LinearOperator, lambda_max: f64, config: &EigenConfig) -> Result<f64, SpectralError> {
    let mut v = random_unit(op.dim(), config.seed.wrapping_add(1));
    let mut lambda = f64::INFINITY;
    for _ in 0..config.max_iters {
        let mut w = match op.solve(&v) {
            Some(w) => w,
            None => conjugate_gradient(op, &v, 1e-14, 50 * op.dim().max(100))?,
        };
        normalize(&mut w);
        let rq = dot(&w, &op.apply(&w));
        if !(rq > 0.0) {
            return Err(SpectralError::IndefiniteOperator(rq));
        }
        if (rq - lambda).abs() <= config.tol * rq.max(1e-300) || rq <= 1e-15 * lambda_max {
            return Ok(rq);
        }
        lambda = rq;
        v = w;
    }
    Err(SpectralError::NotConverged { what: "inverse iteration", iters: config.max_iters })
}

pub fn conjugate_gradient(op: &dyn LinearOperator, b: &[f64], rtol: f64, max_iters: usize) -> Result<Vec<f64>, SpectralError> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = rtol * rtol * rr;
    for _ in 0..max_iters {
        if rr <= target {
            return Ok(x);
        }
        let ap = op.apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(SpectralError::IndefiniteOperator(pap / dot(&p, &p)));
        }
        let a = rr / pap;
        for i in 0..x.len() {
            x[i] += a * p[i];
            r[i] -= a * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr <= target * 1e4 {
        return Ok(x);
    }
    Err(SpectralError::NotConverged { what: "conjugate gradient", iters: max_iters })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SquareLaw {
    pub kappa: f64,
    pub kappa_composite: f64,
    /// `κ(AᵀA) / κ(A)²`.
    pub ratio: f64,
}

/// Computes `κ(AᵀA)` from the eigenvalues of the composite operator and
/// compares it to `κ(A)²`.
pub fn verify_square_law(op: &dyn LinearOperator, config: &EigenConfig) -> Result<SquareLaw, SpectralError> {
    let (lo, hi) = extreme_eigenvalues(op, config)?;
    let (clo, chi) = extreme_eigenvalues(&Composite(op), config)?;
    let kappa = hi / lo;
    let kappa_composite = chi / clo;
    Ok(SquareLaw { kappa, kappa_composite, ratio: kappa_composite / (kappa * kappa) })
}

/// Asymptotic contraction factor from a log-linear least-squares fit over
/// the trailing half of an error history.
pub fn fit_rate(errors: &[f64]) -> f64 {
    let usable: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > 0.0 && e.is_finite())
        .map(|(k, e)| (k as f64, e.ln()))
        .collect();
    let tail = &usable[usable.len() / 2..];
    let n = tail.len() as f64;
    if tail.len() < 2 {
        return f64::NAN;
    }
    let mx = tail.iter().map(|p| p.0).sum::<f64>() / n;
    let my = tail.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = tail.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = tail.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxy / sxx).exp()
}

/// Iteration count that brings a `ρ`-contracting error down by ~10 orders of
/// magnitude, capped.
pub fn gd_iterations(rho: f64, cap: usize) -> usize {
    if rho <= 0.0 {
        return 2;
    }
    ((1e-10_f64.ln() / rho.ln()).ceil() as usize).clamp(4, cap)
}

/// Runs fixed-step gradient descent on `½xᵀAx − bᵀx` from a seeded random
/// start with `α = 2/(λ_max+λ_min)` and returns the fitted contraction.
pub fn measure_gd_rate(
    op: &dyn LinearOperator,
    lambda_min: f64,
    lambda_max: f64,
    iters: usize,
    seed: u64,
) -> Result<f64, SpectralError> {
    let n = op.dim();
    let x_star = random_unit(n, seed.wrapping_add(7));
    let b = op.apply(&x_star);
    let x0 = random_unit(n, seed.wrapping_add(13));
    let mut objective = |x: &[f64]| {
        let ax = op.apply(x);
        let g: Vec<f64> = ax.iter().zip(&b).map(|(a, c)| a - c).collect();
        (0.5 * dot(x, &ax) - dot(&b, x), g)
    };
    let alpha = 2.0 / (lambda_max + lambda_min);
    let run = gradient_descent(&mut objective, &x0, alpha, iters, Some(&x_star))?;
    let floor = 1e-11 * run.errors[0];
    let trimmed: Vec<f64> = run.errors.iter().copied().take_while(|e| *e > floor).collect();
    Ok(fit_rate(&trimmed))
}

/// Spectral summary of one SPD operator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralReport {
    pub mesh: String,
    pub n_dofs: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa: f64,
    pub kappa_sq_check: f64,
    pub rho_star: f64,
    pub measured_rate: f64,
}

pub const REPORT_HEADER: &str = "mesh,n_dofs,lambda_min,lambda_max,kappa,kappa_sq_check,rho_star,measured_rate";

impl SpectralReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.mesh,
            self.n_dofs,
            self.lambda_min,
            self.lambda_max,
            self.kappa,
            self.kappa_sq_check,
            self.rho_star,
            self.measured_rate
        )
    }
}

/// Eigenvalues, square-law check and measured gradient-descent rate.
/// The measured rate is NaN when the required iteration count exceeds
/// `gd_cap`.
pub fn spectral_report(
    label: &str,
    op: &dyn LinearOperator,
    config: &EigenConfig,
    gd_cap: usize,
) -> Result<SpectralReport, SpectralError> {
    let law = verify_square_law(op, config)?;
    let (lo, hi) = extreme_eigenvalues(op, config)?;
    let kappa = hi / lo;
    let rho_star = (kappa - 1.0) / (kappa + 1.0);
    let needed = gd_iterations(rho_star, usize::MAX);
    let measured_rate =
        if needed <= gd_cap { measure_gd_rate(op, lo, hi, needed, config.seed)? } else { f64::NAN };
    Ok(SpectralReport {
        mesh: label.to_string(),
        n_dofs: op.dim(),
        lambda_min: lo,
        lambda_max: hi,
        kappa,
        kappa_sq_check: law.ratio,
        rho_star,
        measured_rate,
    })
}
