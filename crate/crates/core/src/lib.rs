//! Joint congealing of small image sets into a learned feature atlas.

pub mod apps;
pub mod atlas;
pub mod cli;
pub mod error;
pub mod features;
pub mod io_config;
pub mod losses;
pub mod mapping;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
