//! Weakly-supervised 3D shape completion: a denoising VAE shape prior
//! learned from complete shapes, and an encoder trained against its frozen
//! decoder from partial observations alone.

pub mod aml;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod grid;
pub mod icp;
pub mod kdtree;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod prior;
pub mod seed;
pub mod synth;
pub mod voxg;

pub use error::{Error, Result};
