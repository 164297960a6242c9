//! Long temporal-arc coherent change detection (LT-CCD).
//!
//! Pipeline stages, in order: [`catalog`] plans baseline-matched stacks,
//! [`ingest`] or [`synth`] produces coherence rasters ([`raster`]),
//! [`reduce`] collapses each stack to pixel statistics, [`detect`] classifies
//! damage and validity, [`aggregate`] rolls pixels up to buildings and regions,
//! and [`evaluate`] scores the result against reference surveys.

pub mod aggregate;
pub mod catalog;
pub mod detect;
pub mod error;
pub mod pipeline;
pub mod evaluate;
pub mod ingest;
pub mod raster;
pub mod reduce;
pub mod synth;

pub use error::{Error, Result};
