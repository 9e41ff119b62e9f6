//! A desk-scale laboratory for unified multi-dataset object detection:
//! synthetic nested-category scenes, a small two-stage cascade detector with
//! exact gradients, masked multi-dataset losses, dual-threshold pseudo-labels
//! from EMA or periodically replaced teachers, and the evaluation metrics used
//! to compare training schemes.

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod labelspace;
pub mod losses;
pub mod model;
pub mod pseudolabel;
pub mod rng;
pub mod schedule;
pub mod synthdata;
pub mod targets;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
