//! The discretized local map, scenario documents and ground-truth labels.

mod labels;
mod map;
mod scenario;

pub use labels::{ground_truth_deadend, DeadEndSet};
pub use map::{normalize_angle, CellIndex, GridError, GridMap, OccupancyClass, Point2, Pose};
pub use scenario::{
    load_named_scenario, load_scenario, Scenario, ScenarioError, DEFAULT_GOAL_TOLERANCE,
    DEFAULT_RESOLUTION,
};
