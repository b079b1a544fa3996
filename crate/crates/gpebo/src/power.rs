//! Multimachine flux-decay power system.
//!
//! Per generator the model carries rotor angle `delta`, speed deviation
//! `omega` and quadrature internal voltage `E`:
//!
//! ```text
//! d delta_i = omega_i
//! d omega_i = -D_i omega_i + P_i - P_e,i
//! d E_i     = -a_i E_i + b_i sum_j E_j Y_ij cos(delta_ij + alpha_ij) + u_i
//! ```
//!
//! with electrical power `P_e = E . I_q`, reactive power `Q_e = E . I_d` and
//! the line currents `I_q = S(delta) E`, `I_d = T(delta) E`. Rotor angles,
//! active and reactive powers are treated as measured.
//!
//! The voltage subsystem is already affine in `E`, so the observer maps are
//! immediate: `Lambda(delta)` collects the `-a_i` diagonal and the cosine
//! couplings, the forcing is `u = E_f + nu`, and the rows
//! `P_e,i T_i(delta) - Q_e,i S_i(delta)` annihilate `E` identically, giving a
//! measurable constraint with zero right-hand side. Speed deviations get a
//! separate scalar observer with exactly exponential error decay at rate
//! `D + k_speed`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::observer::{DremEstimator, Mode, ObserverConfig, ObserverState, PlantMaps};
use crate::sim::{CoSim, SimError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    /// Voltage self-decay rate (1/s).
    pub a: f64,
    /// Voltage coupling gain (1/s).
    pub b: f64,
    /// Speed damping `D` (1/s).
    pub damping: f64,
    /// Mechanical drive power `P` (pu/s).
    pub power: f64,
    /// Shunt conductance `G_m` (pu).
    pub g_shunt: f64,
    /// Shunt susceptance `B_m` (pu).
    pub b_shunt: f64,
    /// Field voltage `E_f` (pu).
    pub e_field: f64,
    /// Control voltage `nu` (pu).
    pub nu: f64,
    /// Speed-observer gain (1/s).
    pub k_speed: f64,
}

impl GeneratorParams {
    /// Constant voltage input `u = E_f + nu`.
    pub fn input(&self) -> f64 {
        self.e_field + self.nu
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    /// Line admittance magnitudes, symmetric with zero diagonal (pu).
    pub y_mag: DMatrix<f64>,
    /// Line admittance angles, symmetric with zero diagonal (rad).
    pub alpha: DMatrix<f64>,
}

impl NetworkParams {
    pub fn new(y_mag: DMatrix<f64>, alpha: DMatrix<f64>) -> Result<Self, String> {
        let n = y_mag.nrows();
        if y_mag.shape() != (n, n) || alpha.shape() != (n, n) {
            return Err("network matrices must be square and equally sized".into());
        }
        for i in 0..n {
            if y_mag[(i, i)] != 0.0 || alpha[(i, i)] != 0.0 {
                return Err("self-coupling terms belong to the shunt parameters".into());
            }
            for j in 0..n {
                if y_mag[(i, j)] != y_mag[(j, i)] || alpha[(i, j)] != alpha[(j, i)] {
                    return Err("admittance magnitudes and angles must be symmetric".into());
                }
            }
        }
        Ok(Self { y_mag, alpha })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerParams {
    pub gens: Vec<GeneratorParams>,
    pub net: NetworkParams,
}

impl PowerParams {
    pub fn n(&self) -> usize {
        self.gens.len()
    }

    pub fn input_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.gens.iter().map(|g| g.input()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub delta: DVector<f64>,
    pub omega: DVector<f64>,
    pub e: DVector<f64>,
}

/// Currents and powers at one grid state.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectricalOutputs {
    pub i_q: DVector<f64>,
    pub i_d: DVector<f64>,
    pub p_e: DVector<f64>,
    pub q_e: DVector<f64>,
}

/// The measured signals: rotor angles, powers, and the known input.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub delta: DVector<f64>,
    pub p_e: DVector<f64>,
    pub q_e: DVector<f64>,
    pub u: DVector<f64>,
}

impl Measurements {
    /// Stacked output vector `[delta; p_e; q_e]` fed to the observer maps.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.delta.len();
        let mut y = DVector::zeros(3 * n);
        y.rows_mut(0, n).copy_from(&self.delta);
        y.rows_mut(n, n).copy_from(&self.p_e);
        y.rows_mut(2 * n, n).copy_from(&self.q_e);
        y
    }
}

/// `S(delta)`: `S_ii = G_m,ii`, `S_ij = Y_ij sin(delta_ij + alpha_ij)`.
pub fn s_matrix(delta: &DVector<f64>, params: &PowerParams) -> DMatrix<f64> {
    let n = params.n();
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = params.gens[i].g_shunt;
        for j in 0..n {
            if j != i {
                let dij = delta[i] - delta[j] + params.net.alpha[(i, j)];
                s[(i, j)] = params.net.y_mag[(i, j)] * dij.sin();
            }
        }
    }
    s
}

/// `T(delta)`: `T_ii = -B_m,ii`, `T_ij = -Y_ij cos(delta_ij + alpha_ij)`.
pub fn t_matrix(delta: &DVector<f64>, params: &PowerParams) -> DMatrix<f64> {
    let n = params.n();
    let mut t = DMatrix::zeros(n, n);
    for i in 0..n {
        t[(i, i)] = -params.gens[i].b_shunt;
        for j in 0..n {
            if j != i {
                let dij = delta[i] - delta[j] + params.net.alpha[(i, j)];
                t[(i, j)] = -params.net.y_mag[(i, j)] * dij.cos();
            }
        }
    }
    t
}

/// Line currents and generator powers from the current state.
pub fn electrical_outputs(state: &GridState, params: &PowerParams) -> ElectricalOutputs {
    let i_q = s_matrix(&state.delta, params) * &state.e;
    let i_d = t_matrix(&state.delta, params) * &state.e;
    let p_e = state.e.component_mul(&i_q);
    let q_e = state.e.component_mul(&i_d);
    ElectricalOutputs { i_q, i_d, p_e, q_e }
}

pub fn measurements(state: &GridState, params: &PowerParams) -> Measurements {
    let out = electrical_outputs(state, params);
    Measurements {
        delta: state.delta.clone(),
        p_e: out.p_e,
        q_e: out.q_e,
        u: params.input_vector(),
    }
}

/// Voltage system matrix: `-a_i` on the diagonal,
/// `b_i Y_ij cos(delta_ij + alpha_ij)` off the diagonal.
pub fn lambda_matrix(delta: &DVector<f64>, params: &PowerParams) -> DMatrix<f64> {
    let n = params.n();
    let mut lam = DMatrix::zeros(n, n);
    for i in 0..n {
        lam[(i, i)] = -params.gens[i].a;
        for j in 0..n {
            if j != i {
                let dij = delta[i] - delta[j] + params.net.alpha[(i, j)];
                lam[(i, j)] = params.gens[i].b * params.net.y_mag[(i, j)] * dij.cos();
            }
        }
    }
    lam
}

/// Constraint rows `P_e,i T_i(delta) - Q_e,i S_i(delta)`; satisfies
/// `L E = 0` identically because `P_e I_d - Q_e I_q = 0` componentwise.
pub fn constraint_matrix(
    delta: &DVector<f64>,
    p_e: &DVector<f64>,
    q_e: &DVector<f64>,
    params: &PowerParams,
) -> DMatrix<f64> {
    let n = params.n();
    let s = s_matrix(delta, params);
    let t = t_matrix(delta, params);
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] = p_e[i] * t[(i, j)] - q_e[i] * s[(i, j)];
        }
    }
    l
}

/// Plant vector field.
pub fn grid_rates(state: &GridState, params: &PowerParams) -> GridState {
    let out = electrical_outputs(state, params);
    let n = params.n();
    let mut domega = DVector::zeros(n);
    for i in 0..n {
        let g = &params.gens[i];
        domega[i] = -g.damping * state.omega[i] + g.power - out.p_e[i];
    }
    // dE = Lambda(delta) E + u: shared with the observer by construction
    let de = lambda_matrix(&state.delta, params) * &state.e + params.input_vector();
    GridState {
        delta: state.omega.clone(),
        omega: domega,
        e: de,
    }
}

/// One sampled-data step of the speed observer for generator `i`:
/// `d xi_w = -(D + k) omega_hat + P - P_e`, `omega_hat = xi_w + k delta`.
/// Returns the advanced state and the estimate at the end of the step.
pub fn speed_observer_step(
    xi_w: f64,
    delta: f64,
    p_e: f64,
    gen: &GeneratorParams,
    h: f64,
) -> (f64, f64) {
    let rate = |x: f64| {
        let omega_hat = x + gen.k_speed * delta;
        -(gen.damping + gen.k_speed) * omega_hat + gen.power - p_e
    };
    let k1 = rate(xi_w);
    let k2 = rate(xi_w + 0.5 * h * k1);
    let k3 = rate(xi_w + 0.5 * h * k2);
    let k4 = rate(xi_w + h * k3);
    let next = xi_w + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    (next, next + gen.k_speed * delta)
}

/// Observer maps of the voltage subsystem (`phi` = voltage components of the
/// packed plant state, identity left inverse, zero constraint value).
#[derive(Debug, Clone)]
pub struct VoltageMaps {
    params: PowerParams,
}

pub fn voltage_plant_maps(params: &PowerParams) -> VoltageMaps {
    VoltageMaps {
        params: params.clone(),
    }
}

impl VoltageMaps {
    fn split_y(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.params.n();
        (
            y.rows(0, n).into_owned(),
            y.rows(n, n).into_owned(),
            y.rows(2 * n, n).into_owned(),
        )
    }
}

impl PlantMaps for VoltageMaps {
    fn dim(&self) -> usize {
        self.params.n()
    }

    fn lambda(&self, _u: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let (delta, _, _) = self.split_y(y);
        lambda_matrix(&delta, &self.params)
    }

    fn forcing(&self, u: &DVector<f64>, _y: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }

    fn constraint_matrix(&self, _u: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        let (delta, p_e, q_e) = self.split_y(y);
        constraint_matrix(&delta, &p_e, &q_e, &self.params)
    }

    fn constraint_vector(&self, _u: &DVector<f64>, _y: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.params.n())
    }

    fn phi(&self, x: &DVector<f64>) -> DVector<f64> {
        // packed plant state [delta; omega; e]
        let n = self.params.n();
        x.rows(2 * n, n).into_owned()
    }

    fn phi_left_inverse(&self, w: &DVector<f64>, _y: &DVector<f64>) -> DVector<f64> {
        w.clone()
    }
}

/// The shipped two-machine benchmark: named parameter sets before and after
/// a 30% load change (shunt terms and voltage decay rates move; line
/// admittances, damping, drive and field voltages stay).
pub fn two_machine_sets() -> BTreeMap<String, PowerParams> {
    let net = |y12: f64| {
        NetworkParams::new(
            DMatrix::from_row_slice(2, 2, &[0.0, y12, y12, 0.0]),
            DMatrix::zeros(2, 2),
        )
        .expect("valid benchmark network")
    };
    let gen = |a, b, damping, power, g_shunt, b_shunt, e_field| GeneratorParams {
        a,
        b,
        damping,
        power,
        g_shunt,
        b_shunt,
        e_field,
        nu: 1.0,
        k_speed: 1.0,
    };
    let initial = PowerParams {
        gens: vec![
            gen(0.2614, 0.0223, 1.0, 28.22, 0.0966, -0.4373, 0.2405),
            gen(0.2532, 0.0265, 0.2, 28.22, 0.0926, -0.4294, 0.2405),
        ],
        net: net(0.1032),
    };
    let after = PowerParams {
        gens: vec![
            gen(0.2898, 0.02236, 1.0, 28.22, 0.1256, -0.5685, 0.2405),
            gen(0.2864, 0.0265, 0.2, 28.22, 0.1204, -0.5582, 0.2405),
        ],
        net: net(0.1032),
    };
    BTreeMap::from([
        ("initial".to_string(), initial),
        ("after_load_change".to_string(), after),
    ])
}

// Packed layout offsets for n generators:
// [delta(n); omega(n); e(n); xi(n); phi(n*n); y(n); omega_f(n*n); xi_w(n)]
fn off_xi(n: usize) -> usize {
    3 * n
}
fn off_phi(n: usize) -> usize {
    4 * n
}
fn off_yf(n: usize) -> usize {
    4 * n + n * n
}
fn off_omf(n: usize) -> usize {
    5 * n + n * n
}
fn off_xiw(n: usize) -> usize {
    5 * n + 2 * n * n
}

/// Joint plant + voltage-observer + speed-observer simulation.
pub struct PowerSim {
    pub cfg: ObserverConfig,
    params: PowerParams,
    sets: BTreeMap<String, PowerParams>,
    maps: VoltageMaps,
    /// Re-initialize the regression (fresh fundamental matrix and filters)
    /// when a parameter-swap event fires; off by default since the
    /// foliation identity survives known-parameter swaps untouched.
    pub rearm_on_event: bool,
    initial: GridState,
    xi_speed0: DVector<f64>,
    pub observer: ObserverState,
}

impl PowerSim {
    pub fn new(
        cfg: ObserverConfig,
        sets: BTreeMap<String, PowerParams>,
        start_set: &str,
        initial: GridState,
        xi0: DVector<f64>,
        theta0: DVector<f64>,
    ) -> Result<Self, SimError> {
        let params = sets
            .get(start_set)
            .ok_or_else(|| SimError::UnknownParameterSet(start_set.to_string()))?
            .clone();
        let maps = voltage_plant_maps(&params);
        let observer = ObserverState::init(&maps, xi0, theta0)
            .map_err(|e| SimError::Setup(e.to_string()))?;
        let n = params.n();
        Ok(Self {
            cfg,
            params,
            sets,
            maps,
            rearm_on_event: false,
            initial,
            xi_speed0: DVector::zeros(n),
            observer,
        })
    }

    pub fn n(&self) -> usize {
        self.params.n()
    }

    pub fn params(&self) -> &PowerParams {
        &self.params
    }

    pub fn maps(&self) -> &VoltageMaps {
        &self.maps
    }

    pub fn grid_of(z: &DVector<f64>, n: usize) -> GridState {
        GridState {
            delta: z.rows(0, n).into_owned(),
            omega: z.rows(n, n).into_owned(),
            e: z.rows(2 * n, n).into_owned(),
        }
    }

    fn observer_parts(
        z: &DVector<f64>,
        n: usize,
    ) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
        let xi = z.rows(off_xi(n), n).into_owned();
        let phi = DMatrix::from_column_slice(n, n, z.rows(off_phi(n), n * n).as_slice());
        let yf = z.rows(off_yf(n), n).into_owned();
        let omf = DMatrix::from_column_slice(n, n, z.rows(off_omf(n), n * n).as_slice());
        (xi, phi, yf, omf)
    }

    pub fn speed_states_of(z: &DVector<f64>, n: usize) -> DVector<f64> {
        z.rows(off_xiw(n), n).into_owned()
    }

    /// Speed estimates `omega_hat = xi_w + k delta` at a packed state.
    pub fn speed_estimates(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let xiw = Self::speed_states_of(z, n);
        DVector::from_iterator(
            n,
            (0..n).map(|i| xiw[i] + self.params.gens[i].k_speed * z[i]),
        )
    }

    /// Voltage estimate at a packed state, honoring the configured mode.
    pub fn voltage_estimate(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let (xi, phi, _, _) = Self::observer_parts(z, n);
        let theta = match self.cfg.mode {
            Mode::Fct => self.observer.estimator().reconstructed(self.cfg.fct_margin),
            _ => self.observer.estimator().theta_hat().clone(),
        };
        xi + phi * theta
    }

    pub fn mixing_of(z: &DVector<f64>, n: usize) -> (f64, DVector<f64>) {
        let (_, _, yf, omf) = Self::observer_parts(z, n);
        crate::observer::mixing(&omf, &yf).expect("square filter state")
    }
}

impl CoSim for PowerSim {
    fn state_dim(&self) -> usize {
        let n = self.n();
        6 * n + 2 * n * n
    }

    fn initial_state(&self) -> DVector<f64> {
        let n = self.n();
        let mut z = DVector::zeros(self.state_dim());
        z.rows_mut(0, n).copy_from(&self.initial.delta);
        z.rows_mut(n, n).copy_from(&self.initial.omega);
        z.rows_mut(2 * n, n).copy_from(&self.initial.e);
        z.rows_mut(off_xi(n), n).copy_from(self.observer.xi());
        z.rows_mut(off_phi(n), n * n)
            .copy_from(&DVector::from_column_slice(self.observer.fundamental().as_slice()));
        // regression filters start at zero
        z.rows_mut(off_xiw(n), n).copy_from(&self.xi_speed0);
        z
    }

    fn rates(&self, _t: f64, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let grid = Self::grid_of(z, n);
        let dgrid = grid_rates(&grid, &self.params);
        let meas = measurements(&grid, &self.params);
        let y = meas.stacked();
        let u = meas.u;

        let (xi, phi, yf, omf) = Self::observer_parts(z, n);
        let lam = self.maps.lambda(&u, &y);
        let b = self.maps.forcing(&u, &y);
        let l = self.maps.constraint_matrix(&u, &y);
        let c = self.maps.constraint_vector(&u, &y);
        let (dxi, dphi) = crate::observer::copy_system_rates(&lam, &b, &xi, &phi);
        let psi = &l * &phi;
        let mismatch = c - &l * &xi;
        let (dyf, domf) = crate::observer::regressor_filter_rates(
            self.cfg.filter_gain,
            &psi,
            &mismatch,
            &phi,
            &yf,
            &omf,
            self.cfg.omega_regressor,
        );

        let mut dz = DVector::zeros(self.state_dim());
        dz.rows_mut(0, n).copy_from(&dgrid.delta);
        dz.rows_mut(n, n).copy_from(&dgrid.omega);
        dz.rows_mut(2 * n, n).copy_from(&dgrid.e);
        dz.rows_mut(off_xi(n), n).copy_from(&dxi);
        dz.rows_mut(off_phi(n), n * n)
            .copy_from(&DVector::from_column_slice(dphi.as_slice()));
        dz.rows_mut(off_yf(n), n).copy_from(&dyf);
        dz.rows_mut(off_omf(n), n * n)
            .copy_from(&DVector::from_column_slice(domf.as_slice()));
        for i in 0..n {
            let g = &self.params.gens[i];
            let omega_hat = z[off_xiw(n) + i] + g.k_speed * grid.delta[i];
            dz[off_xiw(n) + i] =
                -(g.damping + g.k_speed) * omega_hat + g.power - meas.p_e[i];
        }
        dz
    }

    fn after_step(&mut self, t0: f64, z0: &DVector<f64>, t1: f64, z1: &DVector<f64>) {
        let n = self.n();
        let (d0, m0) = Self::mixing_of(z0, n);
        let (d1, m1) = Self::mixing_of(z1, n);
        let (xi, phi, yf, omf) = Self::observer_parts(z1, n);
        let mut estimator = self.observer.estimator().clone();
        estimator.advance(&self.cfg, (d0, &m0), (d1, &m1), t1 - t0, t1);
        self.observer = ObserverState {
            time: t1,
            xi,
            phi_fund: phi,
            y_filter: yf,
            omega: omf,
            estimator,
        };
    }

    fn apply_event(&mut self, set_name: &str, z: &mut DVector<f64>) -> Result<(), SimError> {
        let new = self
            .sets
            .get(set_name)
            .ok_or_else(|| SimError::UnknownParameterSet(set_name.to_string()))?
            .clone();
        self.params = new;
        self.maps = voltage_plant_maps(&self.params);
        if self.rearm_on_event {
            // fresh estimation problem from the event time on: identity
            // fundamental matrix, zeroed filters, estimator restarted from
            // its current value
            let n = self.n();
            let theta_now = self.observer.estimator().theta_hat().clone();
            self.observer = ObserverState {
                time: self.observer.time(),
                xi: self.observer.xi().clone(),
                phi_fund: DMatrix::identity(n, n),
                y_filter: DVector::zeros(n),
                omega: DMatrix::zeros(n, n),
                estimator: DremEstimator::new(theta_now),
            };
            z.rows_mut(off_phi(n), n * n).copy_from(&DVector::from_column_slice(
                self.observer.fundamental().as_slice(),
            ));
            z.rows_mut(off_yf(n), n).copy_from(self.observer.y_filter());
            z.rows_mut(off_omf(n), n * n)
                .copy_from(&DVector::from_column_slice(self.observer.omega().as_slice()));
        }
        Ok(())
    }
}
