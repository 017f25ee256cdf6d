//! Physics-inspired multi-phase consensus for node classification on graphs.

pub mod cg;
pub mod config;
pub mod consensus;
pub mod data;
pub mod graph;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phases;
pub mod runner;
pub mod sparse;
pub mod spectral;
pub mod tensor;
pub mod training;
pub mod verify;

pub use matrix::Matrix;
