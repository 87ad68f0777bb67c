//! Offline multi-object tracking with depth-segmentation association cues.

pub mod assignment;
pub mod association;
pub mod encoder;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod sim;
