pub mod coarse;
pub mod config;
pub mod ekf;
pub mod eval;
pub mod features;
pub mod frames;
pub mod gradcheck;
pub mod ingest;
pub mod models;
pub mod net;
pub mod pipeline;
pub mod sim;
pub mod train;
pub mod workflow;
