//! Hierarchical closed-loop traffic simulation.
//!
//! An ordered (leader-follower) command policy picks a maneuver and waypoint
//! guidance for every agent; a command-conditioned realizer turns the
//! commands and an encoded scene history into finite-horizon control
//! rollouts, of which only the first step is executed before re-planning.

pub mod autodiff;
pub mod closed_loop;
pub mod command;
pub mod context;
pub mod error;
pub mod expert;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod network;
pub mod policy;
pub mod realizer;
pub mod scenario;
pub mod scene;
pub mod train;

pub use closed_loop::{run_episode, EpisodeConfig, Event, Executor, Models, StepRecord};
pub use command::{Command, Maneuver, WaypointSpec};
pub use error::{Error, Result};
pub use expert::{expert_control, expert_rollout, ExpertConfig, RecoveryTarget};
pub use io::config::RunConfig;
pub use metrics::{MetricCounts, MetricsReport};
pub use network::{Point, RoadNetwork};
pub use policy::{HighPolicyDims, HighPolicyParams};
pub use realizer::{RealizerDims, RealizerParams};
pub use scenario::{parse_scenario, Scenario, ScenarioFile};
pub use scene::{detect_collisions, integrate_bicycle, AgentState, Control, ControlBounds, SceneHistory, SceneState};
pub use train::{cotrain, TrainConfig, TrainCurves};
