//! Soil-column simulation and consensus-based distributed estimation.
//!
//! This crate models a one-dimensional vadose-zone soil column governed by
//! the Richards equation with van Genuchten–Mualem hydraulics, and estimates
//! the unknown soil parameters and the full capillary-pressure-head profile
//! from a handful of in-situ sensors:
//!
//! * [`soil`] — constitutive relations (retention curve, conductivity,
//!   capacity) and their derivatives.
//! * [`richards`] — finite-difference discretization of the column, boundary
//!   conditions and the state-transition map.
//! * [`sim`] — ground-truth simulator with disturbance/noise injection.
//! * [`dekf`] — consensus-based distributed extended Kalman filter for the
//!   four retention parameters, plus a centralized baseline.
//! * [`nlsq`] — bound-constrained Gauss-Newton least-squares solver.
//! * [`dmhe`] — consensus-based distributed moving horizon estimation of the
//!   head profile and saturated conductivity.
//! * [`experiment`] — end-to-end orchestration, moisture recovery, metrics
//!   and file export.
//! * [`config`] — declarative scenario files and the bundled `paper-loam`
//!   preset.

pub mod config;
pub mod dekf;
pub mod dmhe;
mod error;
pub mod experiment;
pub mod export;
pub mod nlsq;
pub mod richards;
pub mod sim;
pub mod soil;

pub use error::{Error, Result};
pub use richards::{BottomBc, ColumnGrid, ForcingSchedule, PressureState};
pub use sim::{MeasurementPair, NoiseConfig};
pub use soil::{RetentionJacobian, SoilParams};
