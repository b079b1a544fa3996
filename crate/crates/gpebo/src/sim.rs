//! Co-simulation loop shared by the three systems.
//!
//! Plant and observer are integrated as one coupled vector field on a common
//! fixed-step grid, so the observer sees stage-exact measurements inside each
//! RK4 step. This keeps the foliation and regression identities exact to
//! rounding; holding measurements over a step would instead leak an O(h)
//! defect into them.

use nalgebra::DVector;
use thiserror::Error;

use crate::numerics::{rk4_step, NumericsError, TimeGrid};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("unknown parameter set `{0}`")]
    UnknownParameterSet(String),
    #[error("the {0} system does not support parameter-swap events")]
    EventsUnsupported(&'static str),
    #[error("simulation setup: {0}")]
    Setup(String),
}

/// A coupled plant + observer system driven by the shared runner.
///
/// The continuous state lives in one packed vector advanced by RK4;
/// discrete bookkeeping (the exponential estimator update) happens in
/// `after_step` from the step-endpoint states.
pub trait CoSim {
    fn state_dim(&self) -> usize;
    fn initial_state(&self) -> DVector<f64>;
    fn rates(&self, t: f64, z: &DVector<f64>) -> DVector<f64>;
    fn after_step(&mut self, t0: f64, z0: &DVector<f64>, t1: f64, z1: &DVector<f64>);
    /// Swap to a named parameter set; may also rewrite observer portions of
    /// the packed state (e.g. re-arming filters).
    fn apply_event(&mut self, set_name: &str, z: &mut DVector<f64>) -> Result<(), SimError>;
}

/// Run `sys` over `grid`, applying `events` (sorted step index, parameter-set
/// name) just before the step that starts at that index, and calling
/// `observe` at every grid node (including node 0).
pub fn run<S: CoSim>(
    sys: &mut S,
    grid: &TimeGrid,
    events: &[(usize, String)],
    mut observe: impl FnMut(usize, f64, &DVector<f64>, &S),
) -> Result<(), SimError> {
    let mut z = sys.initial_state();
    debug_assert_eq!(z.len(), sys.state_dim());
    observe(0, grid.time(0), &z, sys);
    let h = grid.step();
    let mut pending = events.iter().peekable();
    for k in 0..grid.steps() {
        while let Some((ke, name)) = pending.peek() {
            if *ke == k {
                sys.apply_event(name, &mut z)?;
                pending.next();
            } else {
                break;
            }
        }
        let t0 = grid.time(k);
        let t1 = grid.time(k + 1);
        let z1 = rk4_step(|t, s| sys.rates(t, s), t0, &z, h)?;
        sys.after_step(t0, &z, t1, &z1);
        z = z1;
        observe(k + 1, t1, &z, sys);
    }
    Ok(())
}
