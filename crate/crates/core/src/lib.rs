//! Collaborative dual-branch domain adaptation for 3D volume classification.
//!
//! A transformer branch and a convolutional branch are trained in three
//! stages: supervised source training, target adaptation by classifier
//! discrepancy (boundary exploration, then feature consolidation), and
//! collaborative training in which each branch pseudo-labels weakly
//! augmented target volumes for the other branch's strongly augmented view.

pub mod augment;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod trainer;

pub use error::{CdaError, Result};
