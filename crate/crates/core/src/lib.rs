//! Temporal feature filtering for semantic segmentation on synthetic camera sequences.
//!
//! The filter keeps an abstract feature map per frame, predicts it into the
//! next view by warping with estimated depth and camera motion, and blends
//! the prediction with the new encoding through a learned per-pixel gate.

pub mod commands;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod filter;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod networks;
pub mod perturb;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
