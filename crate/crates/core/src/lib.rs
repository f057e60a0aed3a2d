pub mod angles;
pub mod config;
pub mod coordinator;
pub mod evalbench;
pub mod nets;
pub mod perception;
pub mod policy;
pub mod raster;
pub mod reward;
pub mod sim;
pub mod trainer;
