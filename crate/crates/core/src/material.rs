//! Small-strain J2 plasticity with linear isotropic and kinematic hardening,
//! integrated by radial return.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{deviatoric_projector, isotropic_operator, outer, SymTensor, Voigt6};

const SQRT_2_3: f64 = 0.816_496_580_927_726;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaterialError {
    #[error("Poisson ratio {0} outside [0, 0.5)")]
    InvalidPoisson(f64),
    #[error("elastic modulus {0} must be positive")]
    InvalidModulus(f64),
    #[error("yield stress {0} must be positive")]
    InvalidYield(f64),
    #[error("hardening modulus {name} = {value} must be non-negative")]
    NegativeHardening { name: &'static str, value: f64 },
    #[error("{mode:?} functional is incompatible with K = {k}, H = {h}")]
    ModeParameterMismatch { mode: HardeningMode, k: f64, h: f64 },
}

/// Which incremental energy functional is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardeningMode {
    Perfect,
    Isotropic,
    Kinematic,
}

impl HardeningMode {
    /// Rejects parameter sets the functional cannot represent. A kinematic
    /// functional with `H = 0` degenerates to perfect plasticity and is
    /// accepted with a warning.
    pub fn check(self, params: &MaterialParams) -> Result<(), MaterialError> {
        let (k, h) = (params.k_iso, params.h_kin);
        let ok = match self {
            HardeningMode::Perfect => k == 0.0 && h == 0.0,
            HardeningMode::Isotropic => h == 0.0,
            HardeningMode::Kinematic => k == 0.0,
        };
        if !ok {
            return Err(MaterialError::ModeParameterMismatch { mode: self, k, h });
        }
        if self == HardeningMode::Kinematic && h == 0.0 && params.sigma_y.is_finite() {
            log::warn!("kinematic functional with H = 0 reduces to perfect plasticity");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaterialParams {
    pub e: f64,
    pub nu: f64,
    pub lambda: f64,
    pub mu: f64,
    pub sigma_y: f64,
    pub k_iso: f64,
    pub h_kin: f64,
}

impl MaterialParams {
    pub fn new(e: f64, nu: f64, sigma_y: f64, k_iso: f64, h_kin: f64) -> Result<Self, MaterialError> {
        let (lambda, mu) = lame_constants(e, nu)?;
        if !(sigma_y > 0.0) {
            return Err(MaterialError::InvalidYield(sigma_y));
        }
        if !(k_iso >= 0.0) {
            return Err(MaterialError::NegativeHardening { name: "K", value: k_iso });
        }
        if !(h_kin >= 0.0) {
            return Err(MaterialError::NegativeHardening { name: "H", value: h_kin });
        }
        Ok(MaterialParams { e, nu, lambda, mu, sigma_y, k_iso, h_kin })
    }

    /// Purely elastic material (yield stress at infinity).
    pub fn elastic(e: f64, nu: f64) -> Result<Self, MaterialError> {
        Self::new(e, nu, f64::INFINITY, 0.0, 0.0)
    }

    pub fn bulk_modulus(&self) -> f64 {
        self.lambda + 2.0 * self.mu / 3.0
    }

    pub fn elastic_operator(&self) -> Voigt6 {
        isotropic_operator(self.lambda, self.mu)
    }
}

/// Lamé constants from Young's modulus and Poisson's ratio.
pub fn lame_constants(e: f64, nu: f64) -> Result<(f64, f64), MaterialError> {
    if !(e > 0.0 && e.is_finite()) {
        return Err(MaterialError::InvalidModulus(e));
    }
    if !(0.0..0.5).contains(&nu) {
        return Err(MaterialError::InvalidPoisson(nu));
    }
    let lambda = nu * e / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    Ok((lambda, mu))
}

/// `σ = λ tr(ε) I + 2μ ε`.
pub fn elastic_stress(params: &MaterialParams, eps: &SymTensor) -> SymTensor {
    params.lambda * eps.trace() * SymTensor::IDENTITY + (2.0 * params.mu) * *eps
}

/// Plastic internal variables at a Gauss point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlasticState {
    pub eps_p: SymTensor,
    /// Equivalent plastic strain.
    pub alpha: f64,
    /// Back stress.
    pub q: SymTensor,
}

/// Converged state carried between load steps at one Gauss point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussHistory {
    pub eps: SymTensor,
    pub sigma: SymTensor,
    pub plastic: PlasticState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialState {
    pub sigma_dev: SymTensor,
    pub eta: SymTensor,
    pub f: f64,
}

/// Elastic predictor: `σ'_tr = σ'_t + 2μΔε'`, `η_tr = σ'_tr − q_t`,
/// `f_tr = ‖η_tr‖ − √(2/3)(σ_Y + Kα_t)`.
pub fn trial_state(
    params: &MaterialParams,
    state_t: &PlasticState,
    eps_next: &SymTensor,
    eps_t: &SymTensor,
    sigma_t: &SymTensor,
) -> TrialState {
    let d_eps = *eps_next - *eps_t;
    let sigma_dev = sigma_t.dev() + (2.0 * params.mu) * d_eps.dev();
    let eta = sigma_dev - state_t.q;
    let f = eta.norm() - SQRT_2_3 * (params.sigma_y + params.k_iso * state_t.alpha);
    TrialState { sigma_dev, eta, f }
}

/// Yield function at a stress state.
pub fn yield_function(params: &MaterialParams, sigma: &SymTensor, state: &PlasticState) -> f64 {
    (sigma.dev() - state.q).norm() - SQRT_2_3 * (params.sigma_y + params.k_iso * state.alpha)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnResult {
    pub sigma: SymTensor,
    pub new_state: PlasticState,
    pub delta_gamma: f64,
    /// Unit flow direction (zero on the elastic branch).
    pub n: SymTensor,
    pub yielded: bool,
    /// `‖η_tr‖`, needed by the algorithmic tangent.
    pub eta_trial_norm: f64,
}

/// Radial return map. `f_tr ≤ 0` takes the elastic branch and leaves the
/// internal variables untouched.
pub fn radial_return(
    params: &MaterialParams,
    state_t: &PlasticState,
    eps_next: &SymTensor,
    eps_t: &SymTensor,
    sigma_t: &SymTensor,
) -> ReturnResult {
    let trial = trial_state(params, state_t, eps_next, eps_t, sigma_t);
    let d_eps = *eps_next - *eps_t;
    let eta_norm = trial.eta.norm();
    if trial.f <= 0.0 {
        let sigma = *sigma_t + elastic_stress(params, &d_eps);
        return ReturnResult {
            sigma,
            new_state: *state_t,
            delta_gamma: 0.0,
            n: SymTensor::ZERO,
            yielded: false,
            eta_trial_norm: eta_norm,
        };
    }
    let mu = params.mu;
    let delta_gamma = trial.f / (2.0 * (mu + (params.h_kin + params.k_iso) / 3.0));
    let n = (1.0 / eta_norm) * trial.eta;
    let new_state = PlasticState {
        eps_p: state_t.eps_p + delta_gamma * n,
        alpha: state_t.alpha + SQRT_2_3 * delta_gamma,
        q: state_t.q + (2.0 / 3.0 * delta_gamma * params.h_kin) * n,
    };
    let dev = trial.sigma_dev - (2.0 * mu * delta_gamma) * n;
    let p = sigma_t.trace() / 3.0 + params.bulk_modulus() * d_eps.trace();
    ReturnResult {
        sigma: dev + p * SymTensor::IDENTITY,
        new_state,
        delta_gamma,
        n,
        yielded: true,
        eta_trial_norm: eta_norm,
    }
}

/// Consistent tangent `∂σ_{t+1}/∂ε_{t+1}` of [`radial_return`], in
/// engineering Voigt form.
pub fn algorithmic_tangent(params: &MaterialParams, result: &ReturnResult) -> Voigt6 {
    if !result.yielded {
        return params.elastic_operator();
    }
    let mu = params.mu;
    let theta = 1.0 - 2.0 * mu * result.delta_gamma / result.eta_trial_norm;
    let theta_bar = 1.0 / (1.0 + (params.k_iso + params.h_kin) / (3.0 * mu)) - (1.0 - theta);
    let vol = outer(&SymTensor::IDENTITY, &SymTensor::IDENTITY);
    vol * params.bulk_modulus() + deviatoric_projector() * (2.0 * mu * theta)
        - outer(&result.n, &result.n) * (2.0 * mu * theta_bar)
}

/// Equivalent von Mises stress `√(3/2 σ':σ')`.
pub fn von_mises(sigma: &SymTensor) -> f64 {
    let s = sigma.dev();
    (1.5 * s.ddot(&s)).sqrt()
}

/// Equivalent plastic strain `√(2/3 εᵖ:εᵖ)`.
pub fn equiv_plastic_strain(eps_p: &SymTensor) -> f64 {
    (2.0 / 3.0 * eps_p.ddot(eps_p)).sqrt()
}

/// Incremental potential density at one Gauss point: elastic free energy,
/// hardening storage and incremental dissipation of the selected functional,
/// evaluated at the return-mapped state.
pub fn energy_density(
    params: &MaterialParams,
    mode: HardeningMode,
    eps: &SymTensor,
    prev: &PlasticState,
    result: &ReturnResult,
) -> f64 {
    let new = &result.new_state;
    let elastic = *eps - new.eps_p;
    let mut psi = 0.5 * elastic.ddot(&elastic_stress(params, &elastic));
    psi += (new.eps_p - prev.eps_p).ddot(&result.sigma);
    match mode {
        HardeningMode::Perfect => {}
        HardeningMode::Isotropic => {
            let k = params.k_iso;
            psi += 0.5 * k * new.alpha * new.alpha - k * new.alpha * (new.alpha - prev.alpha);
        }
        HardeningMode::Kinematic => {
            let h = params.h_kin;
            if h > 0.0 {
                psi += 0.75 / h * new.q.ddot(&new.q) - 1.5 / h * new.q.ddot(&(new.q - prev.q));
            }
        }
    }
    psi
}
