//! Simulation and verification toolkit for a Gaussian-thermostatted ensemble
//! of velocities undergoing virtual Maxwellian collisions.
//!
//! Two dynamics are implemented side by side on a shared collision schedule:
//!
//! * the interacting **A-process**: `N` particles driven by a constant field
//!   and a Gaussian thermostat that holds the mean kinetic energy `u(V)`
//!   exactly constant, with velocity reflections at Poisson collision times;
//! * the mean-field **B-process**: `N` independent particles driven by the
//!   deterministic current `j~(t)` solved from its autonomous ODE, with
//!   collisions matched event-by-event to the A-process so both consume the
//!   same randomness.
//!
//! The crate measures how fast the two stay close as `N` grows (pathwise
//! `N^{-1/2}` decay), checks per-collision isometry of the coupling, solves
//! the d = 1 velocity-space PDE for cross-validation, and ships an
//! acceptance suite (`accept`) that pins all quantitative tolerances.

pub mod accept;
pub mod config;
pub mod current;
pub mod driver;
pub mod error;
pub mod flows;
pub mod kernel;
pub mod metrics;
pub mod processes;
pub mod rng;
pub mod util;
pub mod vbe1d;

pub use error::Error;
