//! Panel nowcasting benchmarks.
//!
//! Unit-level annual panels are standardized with training-window statistics
//! and forecast by linear baselines, spatial lag / spatial Durbin models with
//! fixed effects, and small recurrent networks trained from scratch. Forecasts
//! are compared with a cross-sectional Diebold–Mariano test.

pub mod baselines;
pub mod disagg;
pub mod eval;
pub mod error;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod neural;
pub mod panel;
pub mod pipeline;
pub mod spatial;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
