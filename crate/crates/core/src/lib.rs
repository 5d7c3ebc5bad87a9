pub mod augment;
pub mod baseline;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod autoencoder;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod metalearn;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod taskgen;

pub use error::{Result, TmagError};
