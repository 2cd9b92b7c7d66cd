pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod labeling;
pub mod losses;
pub mod manifolds;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod routing;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
