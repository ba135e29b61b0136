pub mod align;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod graph;
pub mod layers;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod text;
pub mod train;
pub mod vision;
