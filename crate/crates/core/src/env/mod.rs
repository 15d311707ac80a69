//! Simulated tabletop environment: tasks, scenes, rendering and a kinematic simulator.

pub mod expert;
pub mod render;
pub mod rollout;
pub mod scene;
pub mod sim;
pub mod tasks;

pub use scene::{build_scene, Scene, SceneConfig};
pub use tasks::{task, Category, Side, TaskSpec, Template};
