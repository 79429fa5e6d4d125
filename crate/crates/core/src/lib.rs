//! Superpoint-text matching for 3D referring expression segmentation.

pub mod ddi;
pub mod error;
pub mod harness;
pub mod language;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod scene;
pub mod stm;

pub use error::{Error, Result};
