//! Risk-bounded receding-horizon motion planning for serial manipulators.
//!
//! The pipeline learns a stochastic Koopman model of the arm from noisy
//! rollouts ([`desko`]), optimizes controls with sampling-based MPC
//! ([`mppi`]), and gates every executed step with a sum-of-squares
//! certificate ([`soscert`]) that the arm's link ellipsoids stay inside the
//! moment-based risk contours of uncertain polynomial obstacles
//! ([`polyrisk`]). [`planner`] ties these together over the kinematic
//! simulator in [`simenv`].

pub mod arm;
pub mod desko;
pub mod error;
pub mod lowdisc;
pub mod mppi;
pub mod planner;
pub mod polyrisk;
pub mod simenv;
pub mod soscert;

pub use error::{Error, Result};
