//! Object-focus dexterous manipulation: SE(3) algebra, robot kinematics, stereo
//! hand-focus cropping, simulated perception, motion planning, demonstration
//! datasets, a CVAE action-chunking policy and a kinematic simulator.

pub mod camera;
pub mod dataset;
pub mod env;
pub mod error;
pub mod geom;
pub mod kinematics;
pub mod perception;
pub mod planner;
pub mod policy;
pub mod shape;

pub use error::{Error, Result};
