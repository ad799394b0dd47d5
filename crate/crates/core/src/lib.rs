//! Distribution-free bounds on the lateral tracking deviation of a vehicle
//! with degraded steering and drive actuators.
//!
//! A seeded road generator and a single-track simulator produce labelled
//! runs; a two-headed quantile network is trained on them, and split
//! conformal calibration (marginal or per group) turns its outputs into
//! intervals with a coverage guarantee. The [`gate`] uses the upper bound to
//! accept or reject candidate lane changes. [`pipeline`] strings the stages
//! together over an output directory.

pub mod conformal;
pub mod dataset;
pub mod error;
pub mod featdiag;
pub mod gate;
pub mod pipeline;
pub mod plot;
pub mod quantnet;
pub mod roadgeom;
pub mod special;
pub mod util;
pub mod vehiclesim;

pub use error::{Error, Result};
