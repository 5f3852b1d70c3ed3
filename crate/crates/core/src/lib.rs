pub mod cli;
pub mod descriptors;
pub mod metrics;
pub mod nn;
pub mod phdist;
pub mod pipeline;
pub mod rng;
pub mod simulator;
