//! Monte Carlo photon transport in layered turbid media, plus a
//! design-space-exploration harness for near-infrared probing studies:
//! absorber-plane penetration-depth probing, per-detector power-transmission
//! ratios, and minimum-input-power back-calculation over wavelength x
//! detector-spacing x depth grids.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`medium`]: scene geometry, wavelength-indexed optical properties, and
//!   the config text format;
//! - [`transport`]: the weighted-photon random-walk kernel and the batch
//!   runner;
//! - [`tally`]: detected-weight accumulation, depth binning, and the energy
//!   ledger;
//! - [`analysis`]: transmission ratios, penetration fractions, sensitivity,
//!   minimum input power, and the metric table;
//! - [`sweep`]: grid expansion, deterministic seeding, the run manifest, and
//!   resume;
//! - [`plot`]: series files and SVG charts;
//! - [`validate`]: analytic-oracle physics checks;
//! - [`rng`]: counter-based splittable random streams.
//!
//! Everything is deterministic for a fixed seed: results are bit-identical
//! across worker counts and batch decompositions.

pub mod analysis;
pub mod medium;
pub mod plot;
pub mod rng;
pub mod sweep;
pub mod tally;
pub mod transport;
pub mod validate;
