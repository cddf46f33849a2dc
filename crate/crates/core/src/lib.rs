//! Progressive context compression: a token stream is cut into windows, each window is
//! summarized by a few compression tokens, and only those tokens' per-layer key/value states
//! are kept as context for everything that follows.

pub mod cli;
pub mod compressor;
pub mod error;
pub mod evalharness;
pub mod flopsmeter;
pub mod maskgen;
pub mod model;
pub mod numkernel;
pub mod rng;
pub mod segmenter;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
