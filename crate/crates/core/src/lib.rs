//! Layered 4D Gaussian volumetric video: significance layering, motion-aware
//! groups, entropy/rate models, plane packing, a progressive container and a
//! CPU reference renderer.

pub mod gaussian;
pub mod math;
pub mod motion;
pub mod splat_io;
pub mod synth;
pub mod render;
pub mod metrics;
pub mod rate;
pub mod quant;
pub mod codec;
pub mod container;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod conformance;

pub use error::{Error, Result};
