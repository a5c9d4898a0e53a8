//! Simulation and inversion of raster-scanned zero-delay photon correlation maps.
//!
//! The crate is organised bottom-up:
//!
//! - [`photon_engine`] synthesizes renewal-process photon timestamp streams.
//! - [`hbt_correlator`] splits a record through a virtual 50:50 beamsplitter and
//!   evaluates the binned second-order correlation estimator.
//! - [`field_model`] holds occupancy grids, focal-spot weighting and raster scans.
//! - [`reconstructor`] inverts a g2(0) map into per-pixel emitter occupancy.
//! - [`workbench`] strings the pieces together into end-to-end experiments.

pub mod error;
pub mod field_model;
pub mod hbt_correlator;
pub mod photon_engine;
pub mod reconstructor;
pub mod rng;
pub mod workbench;

pub use error::{Error, Result};
pub use field_model::{
    G2Map, GridShape, IntensityMap, OccupancyGrid, ScanGeometry, ScanMode, ScanPosition,
};
pub use hbt_correlator::{CorrelationConfig, CorrelationCurve};
pub use photon_engine::{EmitterPhysics, TimestampStream};
pub use reconstructor::{InitStrategy, ReconstructionConfig, ReconstructionResult};
pub use rng::RngSeed;
