//! Equilibrium asset returns with convex trading costs.
//!
//! The crate covers the long-run decoupling ODE and its closed forms,
//! Monte Carlo simulation of the state and returns, calibration to market
//! summary statistics, and a deep-learning solver for the finite-horizon
//! forward-backward system.

pub mod calibration;
pub mod cost_model;
pub mod deep_fbsde;
pub mod equilibrium_ode;
pub mod error;
pub mod simulator;

pub use cost_model::{CostSpec, PowerTerm, SmoothCost};
pub use equilibrium_ode::{ModelParams, OdeKind, OdeSolution};
pub use error::{Error, Result};
