//! Metastability of random piecewise-expanding interval maps.

pub mod diffusion;
pub mod environment;
pub mod harness;
pub mod jumps;
pub mod map;
pub mod markov;
pub mod ulam;
