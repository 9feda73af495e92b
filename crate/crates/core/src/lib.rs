//! Discretize whole-slide viewer sessions into behavioral commands, build
//! chain-of-thought dataset rounds from them, run a region-guided diagnostic
//! agent, and evaluate the results.

pub mod agent;
pub mod clock;
pub mod dataset;
pub mod gateway;
pub mod geometry;
pub mod images;
pub mod log;
pub mod metrics;
pub mod review;
pub mod segmenter;
