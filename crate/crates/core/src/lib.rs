//! Equilibria of credit-based congestion pricing on a two-edge highway.

pub mod best_response;
pub mod calibration;
pub mod design;
pub mod equilibrium;
pub mod io;
pub mod model;
pub mod statics;
