//! Generalized parameter-estimation-based observers (GPEBO).
//!
//! The crate reconstructs the unmeasured state of a plant that admits a
//! state-affine reformulation: a copy system and its fundamental matrix turn
//! state observation into estimation of a constant vector (the initial
//! foliation leaf), and a DREM-style mixed scalar regression estimates that
//! vector either asymptotically or in finite convergence time.
//!
//! Three worked systems are included: a second-order academic benchmark, a
//! two-machine flux-decay power system, and an anaerobic digestion reactor.
//! The `scenario` module co-simulates plant and observer on a shared
//! fixed-step grid and writes deterministic CSV traces.

pub mod academic;
pub mod numerics;
pub mod observer;
pub mod power;
pub mod sim;

pub use numerics::{NumericsError, TimeGrid};
pub use observer::{
    DremEstimator, DremSnapshot, Mode, ObserverConfig, ObserverError, ObserverState,
    OmegaRegressor, PlantMaps,
};
