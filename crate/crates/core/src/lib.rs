//! Coevolution of GAN generator and discriminator architectures.
//!
//! Two populations of layer-sequence genomes (generators and discriminators)
//! evolve side by side. Each generation the phenotypes are trained against
//! adversaries from the other population, generators are scored by Fréchet
//! distance and discriminators by their adversarial loss, and NEAT-style
//! speciation with in-species tournaments picks the parents of the next
//! generation. Trained parameters flow from parents to children wherever the
//! layer shapes still agree.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod evolution;
pub mod fitness;
pub mod genome;
pub mod harness;
pub mod nn;
pub mod report;
pub mod rng;
pub mod speciation;
pub mod variation;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
