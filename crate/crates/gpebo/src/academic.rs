//! Second-order academic benchmark: `dx1 = x2^3`, `dx2 = -x1`, `y = x1`.
//!
//! Only `x2` is unmeasured. The copy system here is the plain integral
//! `d xi = -y`, so `x2 = xi + theta` with constant `theta = x2(0) - xi(0)`.
//! Cubing `x2 = xi + theta` inside the `x1` dynamics and low-pass filtering
//! yields a regression that is linear in `Theta = (theta, theta^2, theta^3)`;
//! adjugate mixing decouples it and the first component drives the scalar
//! gradient estimator.

use nalgebra::{DMatrix, DVector};

use crate::numerics::{adjugate, determinant};
use crate::observer::{DremEstimator, Mode, ObserverConfig};
use crate::sim::{CoSim, SimError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcademicState {
    pub x1: f64,
    pub x2: f64,
}

/// Plant vector field `(x2^3, -x1)`.
pub fn plant_rates(x: AcademicState) -> AcademicState {
    AcademicState {
        x1: x.x2 * x.x2 * x.x2,
        x2: -x.x1,
    }
}

// Packed layout of the observer's continuous state.
const XI: usize = 0;
const PHI: usize = 1; // 3 entries: filtered (3 xi^2, 3 xi, unit step)
const Z_Y: usize = 4; // low-pass of y, for the band-limited derivative
const Z_XI3: usize = 5; // low-pass of xi^3
const OMEGA: usize = 6; // 3x3, column-major
const V: usize = 15; // 3 entries: low-pass of phi * Y
/// Dimension of the observer's continuous state.
pub const OBSERVER_DIM: usize = 18;

/// Observer state: the 18 filter/copy states plus the scalar estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct AcademicObserver {
    pub(crate) cont: DVector<f64>,
    pub(crate) estimator: DremEstimator,
}

/// Rates of the observer's continuous state for measurement `y`.
///
/// The unit-step channel is realized as the filter state `phi3` with
/// constant input 1 and zero initial condition.
pub fn observer_rates(z: &DVector<f64>, y: f64, lambda: f64) -> DVector<f64> {
    let xi = z[XI];
    let mut dz = DVector::zeros(OBSERVER_DIM);
    dz[XI] = -y;
    dz[PHI] = lambda * (3.0 * xi * xi - z[PHI]);
    dz[PHI + 1] = lambda * (3.0 * xi - z[PHI + 1]);
    dz[PHI + 2] = lambda * (1.0 - z[PHI + 2]);
    dz[Z_Y] = lambda * (y - z[Z_Y]);
    dz[Z_XI3] = lambda * (xi * xi * xi - z[Z_XI3]);
    let phi = [z[PHI], z[PHI + 1], z[PHI + 2]];
    let ymix = mismatch_output(z, y, lambda);
    for c in 0..3 {
        for r in 0..3 {
            dz[OMEGA + 3 * c + r] = lambda * (phi[r] * phi[c] - z[OMEGA + 3 * c + r]);
        }
    }
    for r in 0..3 {
        dz[V + r] = lambda * (phi[r] * ymix - z[V + r]);
    }
    dz
}

/// The regression output `Y = lambda p/(p+lambda)[y] - lambda/(p+lambda)[xi^3]`,
/// algebraic in the filter states.
pub fn mismatch_output(z: &DVector<f64>, y: f64, lambda: f64) -> f64 {
    lambda * (y - z[Z_Y]) - z[Z_XI3]
}

/// `(delta, mixed)` from the packed observer state: `delta = det(Omega)`,
/// `mixed = adj(Omega) * V`.
pub fn mixing_packed(z: &DVector<f64>) -> (f64, DVector<f64>) {
    let omega = DMatrix::from_column_slice(3, 3, z.rows(OMEGA, 9).as_slice());
    let v = z.rows(V, 3).into_owned();
    let delta = determinant(&omega).expect("3x3");
    let mixed = adjugate(&omega).expect("3x3") * v;
    (delta, mixed)
}

impl AcademicObserver {
    /// Zero filter initial conditions, estimator seeded at `theta0`.
    pub fn new(theta0: f64) -> Self {
        Self {
            cont: DVector::zeros(OBSERVER_DIM),
            estimator: DremEstimator::new(DVector::from_vec(vec![theta0])),
        }
    }

    pub fn xi(&self) -> f64 {
        self.cont[XI]
    }

    pub fn phi_regressor(&self) -> DVector<f64> {
        self.cont.rows(PHI, 3).into_owned()
    }

    pub fn omega(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(3, 3, self.cont.rows(OMEGA, 9).as_slice())
    }

    pub fn v_filter(&self) -> DVector<f64> {
        self.cont.rows(V, 3).into_owned()
    }

    pub fn theta_hat(&self) -> f64 {
        self.estimator.theta_hat()[0]
    }

    pub fn estimator(&self) -> &DremEstimator {
        &self.estimator
    }

    pub fn mixing(&self) -> (f64, DVector<f64>) {
        mixing_packed(&self.cont)
    }

    /// One observer step with the measurement held at `y` (sampled-data
    /// operation); RK4 on the filters, exponential update on the estimator.
    pub fn step(&self, y: f64, h: f64, cfg: &ObserverConfig) -> Result<Self, SimError> {
        let lambda = cfg.filter_gain;
        let next = crate::numerics::rk4_step(
            |_t, z| observer_rates(z, y, lambda),
            0.0,
            &self.cont,
            h,
        )?;
        let (d0, m0) = mixing_packed(&self.cont);
        let (d1, m1) = mixing_packed(&next);
        let mut estimator = self.estimator.clone();
        estimator.advance(
            cfg,
            (d0, &m0.rows(0, 1).into_owned()),
            (d1, &m1.rows(0, 1).into_owned()),
            h,
            h,
        );
        Ok(Self {
            cont: next,
            estimator,
        })
    }

    /// State estimate `x2_hat = xi + theta_hat` (or its finite-time variant).
    pub fn estimate(&self, cfg: &ObserverConfig) -> f64 {
        match cfg.mode {
            Mode::Fct => self.xi() + self.estimator.reconstructed(cfg.fct_margin)[0],
            Mode::Asymptotic | Mode::Olo => self.xi() + self.theta_hat(),
        }
    }
}

/// Joint plant + observer simulation. Packed state: `[x1, x2, observer(18)]`.
pub struct AcademicSim {
    pub cfg: ObserverConfig,
    pub initial: AcademicState,
    pub observer: AcademicObserver,
}

impl AcademicSim {
    pub fn new(cfg: ObserverConfig, initial: AcademicState, xi0: f64, theta0: f64) -> Self {
        let mut observer = AcademicObserver::new(theta0);
        observer.cont[XI] = xi0;
        Self {
            cfg,
            initial,
            observer,
        }
    }

    pub fn plant_of(z: &DVector<f64>) -> AcademicState {
        AcademicState { x1: z[0], x2: z[1] }
    }

    /// Observer continuous state as seen inside a packed sim vector.
    fn obs_of(z: &DVector<f64>) -> DVector<f64> {
        z.rows(2, OBSERVER_DIM).into_owned()
    }

    pub fn xi_of(z: &DVector<f64>) -> f64 {
        z[2 + XI]
    }

    pub fn estimate_of(&self, z: &DVector<f64>) -> f64 {
        let theta = match self.cfg.mode {
            Mode::Fct => self.observer.estimator.reconstructed(self.cfg.fct_margin)[0],
            _ => self.observer.theta_hat(),
        };
        Self::xi_of(z) + theta
    }

    pub fn mixing_of(z: &DVector<f64>) -> (f64, DVector<f64>) {
        mixing_packed(&Self::obs_of(z))
    }
}

impl CoSim for AcademicSim {
    fn state_dim(&self) -> usize {
        2 + OBSERVER_DIM
    }

    fn initial_state(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.state_dim());
        z[0] = self.initial.x1;
        z[1] = self.initial.x2;
        z.rows_mut(2, OBSERVER_DIM).copy_from(&self.observer.cont);
        z
    }

    fn rates(&self, _t: f64, z: &DVector<f64>) -> DVector<f64> {
        let x = Self::plant_of(z);
        let dx = plant_rates(x);
        let y = x.x1;
        let dobs = observer_rates(&Self::obs_of(z), y, self.cfg.filter_gain);
        let mut dz = DVector::zeros(self.state_dim());
        dz[0] = dx.x1;
        dz[1] = dx.x2;
        dz.rows_mut(2, OBSERVER_DIM).copy_from(&dobs);
        dz
    }

    fn after_step(&mut self, t0: f64, z0: &DVector<f64>, t1: f64, z1: &DVector<f64>) {
        let (d0, m0) = Self::mixing_of(z0);
        let (d1, m1) = Self::mixing_of(z1);
        self.observer.estimator.advance(
            &self.cfg,
            (d0, &m0.rows(0, 1).into_owned()),
            (d1, &m1.rows(0, 1).into_owned()),
            t1 - t0,
            t1,
        );
        self.observer.cont.copy_from(&Self::obs_of(z1));
    }

    fn apply_event(&mut self, _set_name: &str, _z: &mut DVector<f64>) -> Result<(), SimError> {
        Err(SimError::EventsUnsupported("academic"))
    }
}
