//! Navigation and tracking in learned, differentiably rendered voxel maps.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod map_learning;
pub mod planning;
pub mod renderer;
pub mod simulator;
pub mod tracking;
pub mod voxel_map;

pub use error::{Error, Result};
