//! Stereo matching with semi-global and local guided cost aggregation.

pub mod classical;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod head;
pub mod io;
pub mod lga;
pub mod matching;
pub mod par;
pub mod pipeline;
pub mod sga;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{CostVolume, Direction, DisparityMap, Image, Shape};
