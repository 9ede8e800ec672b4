//! Day-ahead dynamic power bounds for coordinating distributed energy
//! resources on radial distribution feeders.

pub mod config;
pub mod convex;
pub mod forecast;
pub mod gc;
pub mod grid;
pub mod harness;
pub mod lc;
pub mod powerflow;
pub mod scenario;
