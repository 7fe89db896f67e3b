//! Simulation and sample-based state estimation for the pituitary-thyroid
//! feedback loop.
//!
//! The crate covers the continuous-time patient models, their closed-form
//! medication inputs, a stiff integrator that turns them into 8-hour
//! discrete-time maps, irregular sampling schedules, an empirical check of
//! sample-based incremental detectability, a moving horizon estimator and
//! the virtual-patient scenarios that tie everything together.

pub mod ad;
pub mod detectability;
pub mod dosing;
pub mod error;
pub mod integrator;
pub mod mhe;
pub mod model;
pub mod params;
pub mod sampling;
pub mod scenario;
pub mod sets;

pub use error::{Error, Result};
pub use params::{ModelParameters, Variant};
