//! Dead-end aware navigation on occupancy grids.
//!
//! Grid worlds with labeled dead-end regions, a probabilistic dead-end
//! costmap, a simulated sensor, an exposure-aware short-horizon planner,
//! local controllers and a simulation harness.

pub mod config;
pub mod controllers;
pub mod costmap;
pub mod fusion;
pub mod planner;
pub mod render;
pub mod sensor;
pub mod sim;
pub mod world;
