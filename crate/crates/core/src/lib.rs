//! Attention-assisted, multi-region visual grounding.
//!
//! A phrase and an image are encoded jointly by bidirectional GRUs; a spatial
//! attention conditioned on a global phrase embedding produces a context map
//! with the shape of the visual features. That context map feeds both a region
//! proposal network and a region classifier that marks every proposal as
//! related or unrelated to the phrase, so several regions can be returned for
//! one query.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod langmodel;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod rpn;
pub mod textproc;
pub mod trainer;

pub use error::{Error, Result};
