//! Minimal dense layer library with explicit forward caches and hand-written
//! backward passes. All layers process one sample at a time.

pub mod conv;
pub mod layers;
pub mod param;
pub mod real;

pub use param::{Module, Param};
pub use real::Real;
