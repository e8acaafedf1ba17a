//! Scenario definitions, region carving, replanning, running and metrics.

pub mod config;
pub mod frenet;
pub mod geometry;
pub mod metrics;
pub mod plot;
pub mod run;
pub mod setup;
pub mod world;

pub use config::{builtin, ConfigError, Scenario, ScenarioKind};
pub use frenet::{frenet_replan, FrenetConfig};
pub use geometry::{carve_along, carve_convex_region, CarveError, Motion, ObstacleBox};
pub use metrics::Metrics;
pub use run::{run_scenario, Arm, Prepared, ScenarioError};
pub use setup::{build_plan_a, state_box, tube_extent};
pub use world::{reference_along_path, ScenarioWorld};
