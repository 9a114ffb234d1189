pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod embedding;
pub mod episode;
pub mod eval;
pub mod metrics;
pub mod error;
pub mod nn;
pub mod raster;
pub mod retrieval;
pub mod seq;
pub mod service;
pub mod toy;

pub use error::{Error, Result};
