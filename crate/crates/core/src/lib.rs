//! Simulation and equilibrium analysis for a model of buyer preferences in
//! over-the-counter markets:
//!
//! ```text
//! dJ_i/dt = -γ J_i + a_i exp(J_i) / Σ_k exp(J_k)
//! ```
//!
//! - [`model`]: the vector field, its Jacobian, difference coordinates, the
//!   homogeneous potential and the trapping sets.
//! - [`integrator`]: RK4 / Dormand-Prince integration with ordering events.
//! - [`equilibria`]: exact stationary points in the homogeneous, two-seller
//!   and two-cluster regimes, multistart Newton elsewhere, and stability.
//! - [`bifurcation`]: fold thresholds in the friction γ and γ sweeps.
//! - [`verify`]: the executable property suite.

pub mod bifurcation;
pub mod equilibria;
pub mod error;
pub mod integrator;
pub mod model;
pub mod sampling;
pub mod verify;

pub use error::{Error, Result};
pub use model::{MarketParams, PreferenceState};
