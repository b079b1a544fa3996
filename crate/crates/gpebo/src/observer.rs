//! The generalized parameter-estimation-based observer.
//!
//! For a plant that can be mapped by `phi` onto a state-affine form
//! `d phi/dt = Lambda(u,y) phi + B(u,y)`, the observer runs a copy system
//! `xi` and the fundamental matrix `Phi` of `Lambda` along the measured
//! trajectory. The mismatch `phi(x) - xi` then equals `Phi * theta` for a
//! constant vector `theta` fixed by the initial conditions, so observing the
//! state reduces to estimating `theta`.
//!
//! When a measurable pair `(L, C)` with `L(u,y) phi(x) = C(u,y)` is
//! available, the filtered regression
//!
//! ```text
//! dY/dt     = -lambda Y     + lambda Psi^T (C - L xi)        Psi = L Phi
//! dOmega/dt = -lambda Omega + lambda Psi^T Psi
//! ```
//!
//! keeps `Y = Omega theta` exact for zero filter initial conditions, and the
//! adjugate mixing `mixed = adj(Omega) Y`, `delta = det(Omega)` decouples it
//! into scalar regressions `mixed_i = delta * theta_i` driving a gradient
//! estimator. A weight `w` with `dw/dt = -gamma delta^2 w` tracks the
//! accumulated excitation and allows exact finite-time recovery of `theta`
//! once `w` drops below `1 - mu`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numerics::{adjugate, determinant, rk4_step, NumericsError};

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("plant map `{map}` produced a non-finite value at t = {t}")]
    MapEvaluation { map: &'static str, t: f64 },
    #[error("state estimate is non-finite (left inverse failed on the supplied output)")]
    EstimateDomain,
    #[error("invalid observer config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// The per-plant mappings that put a system into observer-compatible form.
///
/// `x` below is the full simulated plant state of the concrete system; `phi`
/// projects it onto the affine subsystem the observer reconstructs, and
/// `phi_left_inverse` rebuilds that subsystem state from the observer output
/// and the current measurement.
pub trait PlantMaps {
    /// Dimension of the affine subsystem (and of `theta`).
    fn dim(&self) -> usize;
    /// System matrix of the affine form.
    fn lambda(&self, u: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;
    /// Forcing term of the affine form.
    fn forcing(&self, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    /// Constraint matrix `L` with `L phi(x) = C` along trajectories.
    fn constraint_matrix(&self, u: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;
    /// Constraint value `C`.
    fn constraint_vector(&self, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    /// Foliation chart evaluated on the plant state.
    fn phi(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Left inverse: `phi_left_inverse(phi(x), y) = ` the reconstructed
    /// subsystem state.
    fn phi_left_inverse(&self, w: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Gradient estimation, asymptotic convergence.
    Asymptotic,
    /// Finite-convergence-time reconstruction through the excitation weight.
    Fct,
    /// Open-loop observer: gamma = 0, the parameter estimate stays frozen.
    Olo,
}

/// Which signal the `Omega` filter integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OmegaRegressor {
    /// Filter `Psi^T Psi`. This pairs with the `Y` filter so that
    /// `Y = Omega theta` holds identically; required whenever `L != I`.
    #[default]
    RegressorGram,
    /// Filter `Phi Phi^T` instead. Coincides with `RegressorGram` only in
    /// special cases (e.g. symmetric `Phi` with `L = I`); kept selectable
    /// for side-by-side comparison.
    FundamentalOuter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObserverConfig {
    /// Regression filter bandwidth (1/time).
    pub filter_gain: f64,
    /// Adaptation gain of the gradient estimator.
    pub adaptation_gain: f64,
    /// Finite-time margin in (0,1): reconstruction activates once the
    /// excitation weight drops below `1 - margin`.
    pub fct_margin: f64,
    pub mode: Mode,
    pub omega_regressor: OmegaRegressor,
}

impl ObserverConfig {
    pub fn new(filter_gain: f64, adaptation_gain: f64, fct_margin: f64, mode: Mode) -> Result<Self, ObserverError> {
        let cfg = Self {
            filter_gain,
            adaptation_gain: if mode == Mode::Olo { 0.0 } else { adaptation_gain },
            fct_margin,
            mode,
            omega_regressor: OmegaRegressor::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ObserverError> {
        if !(self.filter_gain > 0.0) || !self.filter_gain.is_finite() {
            return Err(ObserverError::Config(format!(
                "filter gain must be positive, got {}",
                self.filter_gain
            )));
        }
        if !(self.fct_margin > 0.0 && self.fct_margin < 1.0) {
            return Err(ObserverError::Config(format!(
                "fct margin must lie in (0,1), got {}",
                self.fct_margin
            )));
        }
        match self.mode {
            Mode::Olo => {
                if self.adaptation_gain != 0.0 {
                    return Err(ObserverError::Config(
                        "open-loop mode requires adaptation gain 0".into(),
                    ));
                }
            }
            _ => {
                if !(self.adaptation_gain > 0.0) || !self.adaptation_gain.is_finite() {
                    return Err(ObserverError::Config(format!(
                        "adaptation gain must be positive, got {}",
                        self.adaptation_gain
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `(1 - exp(-z)) / z`, the stiffness-safe weight of the exponential
/// gradient update; continuous at 0 with value 1.
fn phi1(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        -(-z).exp_m1() / z
    }
}

/// Gradient estimator on the mixed scalar regression `mixed = delta * theta`,
/// together with the excitation weight and integral.
///
/// Each step applies the exact solution of the frozen-coefficient update,
/// with `delta^2` and `delta * mixed` averaged trapezoidally over the step.
/// This keeps three identities exact to rounding regardless of how stiff
/// `gamma * delta^2` is: the estimation error contracts by exactly
/// `exp(-gamma * excitation_increment)` per step once `mixed = delta theta`
/// holds, the weight satisfies `w = exp(-gamma * excitation)`, and the
/// estimate freezes bit-exactly while `delta = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DremEstimator {
    theta_hat: DVector<f64>,
    theta_hat_initial: DVector<f64>,
    weight: f64,
    excitation: f64,
    first_crossing: Option<f64>,
}

impl DremEstimator {
    pub fn new(theta0: DVector<f64>) -> Self {
        Self {
            theta_hat: theta0.clone(),
            theta_hat_initial: theta0,
            weight: 1.0,
            excitation: 0.0,
            first_crossing: None,
        }
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        &self.theta_hat
    }

    pub fn theta_hat_initial(&self) -> &DVector<f64> {
        &self.theta_hat_initial
    }

    /// Excitation weight `w` in (0,1] (may underflow to 0 after heavy
    /// excitation; the clipped reconstruction stays well-posed there).
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Running value of `int_0^t delta^2`, trapezoidal on the step grid.
    pub fn excitation(&self) -> f64 {
        self.excitation
    }

    /// Advance one step given the mixed regression pair at both step
    /// endpoints. `t_end` is only used to time-stamp the excitation
    /// threshold crossing.
    pub fn advance(
        &mut self,
        cfg: &ObserverConfig,
        start: (f64, &DVector<f64>),
        end: (f64, &DVector<f64>),
        h: f64,
        t_end: f64,
    ) {
        let (d0, m0) = start;
        let (d1, m1) = end;
        let gamma = cfg.adaptation_gain;
        let dsq = 0.5 * (d0 * d0 + d1 * d1);
        let drive = (m0 * d0 + m1 * d1) * 0.5;
        let z = gamma * h * dsq;
        let gain = gamma * h * phi1(z);
        self.theta_hat = &self.theta_hat + (drive - &self.theta_hat * dsq) * gain;
        self.weight *= (-z).exp();
        self.excitation += h * dsq;
        if self.first_crossing.is_none() && gamma > 0.0 {
            let threshold = -(1.0 - cfg.fct_margin).ln() / gamma;
            if self.excitation >= threshold {
                self.first_crossing = Some(t_end);
            }
        }
    }

    /// Whether the accumulated excitation satisfies the finite-time
    /// threshold, and the first grid time at which it did.
    pub fn excitation_satisfied(&self, _cfg: &ObserverConfig) -> (bool, Option<f64>) {
        (self.first_crossing.is_some(), self.first_crossing)
    }

    /// Finite-time parameter reconstruction
    /// `(theta_hat - w_c theta_hat(0)) / (1 - w_c)` with the weight clipped
    /// at `1 - margin`, so the denominator is at least `margin`.
    pub fn reconstructed(&self, fct_margin: f64) -> DVector<f64> {
        let w_c = self.weight.min(1.0 - fct_margin);
        (&self.theta_hat - &self.theta_hat_initial * w_c) / (1.0 - w_c)
    }
}

/// Snapshot of the mixed regression quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct DremSnapshot {
    /// Extended regressor `L(u,y) * Phi`.
    pub psi: DMatrix<f64>,
    /// Mixed output `adj(Omega) * Y`.
    pub mixed: DVector<f64>,
    /// Mixing determinant `det(Omega)`.
    pub delta: f64,
}

/// Full observer state: copy system, fundamental matrix, regression filters
/// and the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub(crate) time: f64,
    pub(crate) xi: DVector<f64>,
    pub(crate) phi_fund: DMatrix<f64>,
    pub(crate) y_filter: DVector<f64>,
    pub(crate) omega: DMatrix<f64>,
    pub(crate) estimator: DremEstimator,
}

impl ObserverState {
    /// Initial observer state: `Phi = I`, zero filters, unit weight.
    pub fn init(
        maps: &dyn PlantMaps,
        xi0: DVector<f64>,
        theta0: DVector<f64>,
    ) -> Result<Self, ObserverError> {
        let n = maps.dim();
        if xi0.len() != n || theta0.len() != n {
            return Err(ObserverError::Dimension(format!(
                "expected xi0 and theta0 of length {n}, got {} and {}",
                xi0.len(),
                theta0.len()
            )));
        }
        Ok(Self {
            time: 0.0,
            xi: xi0,
            phi_fund: DMatrix::identity(n, n),
            y_filter: DVector::zeros(n),
            omega: DMatrix::zeros(n, n),
            estimator: DremEstimator::new(theta0),
        })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn fundamental(&self) -> &DMatrix<f64> {
        &self.phi_fund
    }

    pub fn y_filter(&self) -> &DVector<f64> {
        &self.y_filter
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn estimator(&self) -> &DremEstimator {
        &self.estimator
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        self.estimator.theta_hat()
    }

    /// Mixed regression quantities computed from the current state.
    pub fn drem_snapshot(
        &self,
        maps: &dyn PlantMaps,
        u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<DremSnapshot, ObserverError> {
        let psi = maps.constraint_matrix(u, y) * &self.phi_fund;
        let (delta, mixed) = mixing(&self.omega, &self.y_filter)?;
        Ok(DremSnapshot { psi, mixed, delta })
    }

    /// One observer step with the measurements held constant across the
    /// step (sampled-data operation). The continuous states advance by RK4;
    /// the estimator applies its exponential update with the mixing pair
    /// evaluated at both step endpoints.
    pub fn step(
        &self,
        maps: &dyn PlantMaps,
        cfg: &ObserverConfig,
        u: &DVector<f64>,
        y: &DVector<f64>,
        h: f64,
    ) -> Result<Self, ObserverError> {
        let n = maps.dim();
        let lam = maps.lambda(u, y);
        let b = maps.forcing(u, y);
        let l = maps.constraint_matrix(u, y);
        let c = maps.constraint_vector(u, y);
        for (name, finite) in [
            ("Lambda", lam.iter().all(|v| v.is_finite())),
            ("B", b.iter().all(|v| v.is_finite())),
            ("L", l.iter().all(|v| v.is_finite())),
            ("C", c.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(ObserverError::MapEvaluation { map: name, t: self.time });
            }
        }
        if lam.shape() != (n, n) || b.len() != n || l.shape() != (n, n) || c.len() != n {
            return Err(ObserverError::Dimension(
                "plant maps returned shapes inconsistent with dim()".into(),
            ));
        }

        let packed = pack(&self.xi, &self.phi_fund, &self.y_filter, &self.omega);
        let field = |_t: f64, z: &DVector<f64>| {
            let (xi, phi, yf, om) = unpack(z, n);
            let (dxi, dphi) = copy_system_rates(&lam, &b, &xi, &phi);
            let psi = &l * &phi;
            let mismatch = &c - &l * &xi;
            let (dyf, dom) = regressor_filter_rates(
                cfg.filter_gain,
                &psi,
                &mismatch,
                &phi,
                &yf,
                &om,
                cfg.omega_regressor,
            );
            pack(&dxi, &dphi, &dyf, &dom)
        };
        let next = rk4_step(field, self.time, &packed, h)?;
        let (xi, phi_fund, y_filter, omega) = unpack(&next, n);

        let (d0, m0) = mixing(&self.omega, &self.y_filter)?;
        let (d1, m1) = mixing(&omega, &y_filter)?;
        let mut estimator = self.estimator.clone();
        estimator.advance(cfg, (d0, &m0), (d1, &m1), h, self.time + h);

        Ok(Self {
            time: self.time + h,
            xi,
            phi_fund,
            y_filter,
            omega,
            estimator,
        })
    }

    /// Asymptotic state estimate `phi_left_inverse(xi + Phi theta_hat, y)`.
    pub fn estimate(
        &self,
        maps: &dyn PlantMaps,
        y: &DVector<f64>,
    ) -> Result<DVector<f64>, ObserverError> {
        let arg = &self.xi + &self.phi_fund * self.estimator.theta_hat();
        let est = maps.phi_left_inverse(&arg, y);
        if est.iter().any(|v| !v.is_finite()) {
            return Err(ObserverError::EstimateDomain);
        }
        Ok(est)
    }

    /// Finite-time state estimate using the clipped-weight reconstruction of
    /// `theta`; exact once the excitation threshold has been crossed.
    pub fn estimate_fct(
        &self,
        maps: &dyn PlantMaps,
        cfg: &ObserverConfig,
        y: &DVector<f64>,
    ) -> Result<DVector<f64>, ObserverError> {
        let theta = self.estimator.reconstructed(cfg.fct_margin);
        let arg = &self.xi + &self.phi_fund * theta;
        let est = maps.phi_left_inverse(&arg, y);
        if est.iter().any(|v| !v.is_finite()) {
            return Err(ObserverError::EstimateDomain);
        }
        Ok(est)
    }

    /// Mode-dispatched estimate.
    pub fn estimate_for_mode(
        &self,
        maps: &dyn PlantMaps,
        cfg: &ObserverConfig,
        y: &DVector<f64>,
    ) -> Result<DVector<f64>, ObserverError> {
        match cfg.mode {
            Mode::Fct => self.estimate_fct(maps, cfg, y),
            Mode::Asymptotic | Mode::Olo => self.estimate(maps, y),
        }
    }

    pub fn excitation_satisfied(&self, cfg: &ObserverConfig) -> (bool, Option<f64>) {
        self.estimator.excitation_satisfied(cfg)
    }
}

/// Rates of the copy system and the fundamental matrix.
pub fn copy_system_rates(
    lambda: &DMatrix<f64>,
    forcing: &DVector<f64>,
    xi: &DVector<f64>,
    phi_fund: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    (lambda * xi + forcing, lambda * phi_fund)
}

/// Rates of the regression filters.
pub fn regressor_filter_rates(
    filter_gain: f64,
    psi: &DMatrix<f64>,
    mismatch: &DVector<f64>,
    phi_fund: &DMatrix<f64>,
    y_filter: &DVector<f64>,
    omega: &DMatrix<f64>,
    variant: OmegaRegressor,
) -> (DVector<f64>, DMatrix<f64>) {
    let dy = (psi.transpose() * mismatch - y_filter) * filter_gain;
    let source = match variant {
        OmegaRegressor::RegressorGram => psi.transpose() * psi,
        OmegaRegressor::FundamentalOuter => phi_fund * phi_fund.transpose(),
    };
    let dom = (source - omega) * filter_gain;
    (dy, dom)
}

/// Adjugate mixing of the filtered regression: `(det(Omega), adj(Omega) Y)`.
pub fn mixing(
    omega: &DMatrix<f64>,
    y_filter: &DVector<f64>,
) -> Result<(f64, DVector<f64>), ObserverError> {
    let delta = determinant(omega)?;
    let mixed = adjugate(omega)? * y_filter;
    Ok((delta, mixed))
}

fn pack(
    xi: &DVector<f64>,
    phi: &DMatrix<f64>,
    yf: &DVector<f64>,
    omega: &DMatrix<f64>,
) -> DVector<f64> {
    let n = xi.len();
    let mut z = DVector::zeros(2 * n + 2 * n * n);
    z.rows_mut(0, n).copy_from(xi);
    z.rows_mut(n, n * n).copy_from(&DVector::from_column_slice(phi.as_slice()));
    z.rows_mut(n + n * n, n).copy_from(yf);
    z.rows_mut(2 * n + n * n, n * n)
        .copy_from(&DVector::from_column_slice(omega.as_slice()));
    z
}

fn unpack(z: &DVector<f64>, n: usize) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let xi = z.rows(0, n).into_owned();
    let phi = DMatrix::from_column_slice(n, n, z.rows(n, n * n).as_slice());
    let yf = z.rows(n + n * n, n).into_owned();
    let omega = DMatrix::from_column_slice(n, n, z.rows(2 * n + n * n, n * n).as_slice());
    (xi, phi, yf, omega)
}
