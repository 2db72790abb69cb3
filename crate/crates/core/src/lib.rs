//! Continuous measurement and feedback control of a damped harmonic oscillator.
//!
//! Moment equations, Itô conditional-mean simulation, phase-space grid
//! evolution, the classical limit, and delay-feedback stability analysis.

pub mod classical;
pub mod config;
pub mod error;
pub mod grid;
pub mod io;
pub mod moments;
pub mod params;
pub mod rng;
pub mod scenarios;
pub mod sde;
pub mod stability;

pub use error::{Error, Result};
