//! Design-based estimation of treatment contrasts under arbitrary randomization
//! designs, with variance bounds, model-assisted estimators and network exposures.

pub mod bounds;
pub mod design;
pub mod error;
pub mod io;
pub mod linalg;
pub mod linear;
pub mod model;
pub mod moments;
pub mod network;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
