//! Open-world detection on a synthetic world.

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod inference;
pub mod labelspace;
pub mod persist;
pub mod report;
pub mod rng;
pub mod runner;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
