pub mod metrics;
pub mod plots;
pub mod report;
pub mod sweeps;
pub mod visualize;
