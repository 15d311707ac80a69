//! Scene construction: table, task object, robot mounts and the head camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::Background;
use super::tasks::{task, Side, TaskSpec};
use crate::camera::{CameraIntrinsics, StereoRig};
use crate::error::{Error, Result};
use crate::geom::{Pose, Rotation, Vec3};
use crate::kinematics::{ArmJoints, RobotModel};
use crate::perception::ObjectInstance;
use crate::planner::CollisionWorld;
use crate::shape::{Primitive, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementRect {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl PlacementRect {
    pub fn is_valid(&self) -> bool {
        self.x[0] < self.x[1] && self.y[0] < self.y[1] && self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x[0] && x <= self.x[1] && y >= self.y[0] && y <= self.y[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub task: String,
    /// Object-center rectangle; the task default when absent.
    #[serde(default)]
    pub placement: Option<PlacementRect>,
    /// Extra translation (x, y) added to every placement.
    #[serde(default)]
    pub offset: [f64; 2],
    #[serde(default)]
    pub background: Background,
    /// Object yaw is drawn uniformly from [-yaw_range, yaw_range].
    #[serde(default = "default_yaw_range")]
    pub yaw_range: f64,
    pub seed: u64,
}

fn default_yaw_range() -> f64 {
    0.1
}

impl SceneConfig {
    pub fn new(task: &str, seed: u64) -> Self {
        SceneConfig {
            task: task.to_string(),
            placement: None,
            offset: [0.0, 0.0],
            background: Background::default(),
            yaw_range: default_yaw_range(),
            seed,
        }
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("scene config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// One robot arm: where it is mounted and its kinematic model.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmMount {
    pub side: Side,
    /// Arm base in the world frame.
    pub base: Pose,
    pub model: RobotModel,
    pub home: ArmJoints,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub task: TaskSpec,
    pub object: ObjectInstance,
    pub stand: Option<Primitive>,
    pub table: Primitive,
    pub arms: Vec<ArmMount>,
}

/// Left arm base position for two-arm tasks.
pub const LEFT_BASE: [f64; 3] = [0.0, 0.5, 0.0];

pub fn table() -> Primitive {
    Primitive::new(Shape::Box { size: [0.75, 1.2, 0.05] }, Pose::from_translation(Vec3::new(0.5, 0.25, -0.025)))
}

/// Arm configuration the robot starts from: hand raised above the near table edge.
pub fn home_joints() -> ArmJoints {
    ArmJoints([0.0, -0.3, 2.0, 0.0, 0.9, 0.0])
}

/// Head-mounted stereo pair looking down at the workspace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigConfig {
    pub width: u32,
    pub height: u32,
    /// Horizontal and vertical field of view (degrees).
    pub fov: [f64; 2],
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub baseline: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig { width: 640, height: 480, fov: [110.0, 70.0], eye: [0.1, 0.25, 0.7], target: [0.42, 0.2, 0.0], baseline: 0.12 }
    }
}

impl RigConfig {
    /// The rig in the world frame (which is also the right arm's base frame).
    pub fn build(&self) -> Result<StereoRig> {
        let k = CameraIntrinsics::from_fov(self.width, self.height, self.fov[0], self.fov[1]);
        k.validate()?;
        let (eye, target) = (Vec3::from(self.eye), Vec3::from(self.target));
        if self.baseline.is_nan() || self.baseline <= 0.0 || (target - eye).norm() < 1e-6 {
            return Err(Error::Config(format!("degenerate rig {self:?}")));
        }
        Ok(StereoRig::looking_at(k, eye, target, Vec3::z(), self.baseline))
    }
}

pub fn default_rig() -> StereoRig {
    RigConfig::default().build().expect("default rig is valid")
}

pub fn arm_mounts(sides: &[Side]) -> Vec<ArmMount> {
    let right = RobotModel::reference();
    sides
        .iter()
        .map(|&side| match side {
            Side::Right => ArmMount { side, base: Pose::identity(), model: right.clone(), home: home_joints() },
            Side::Left => ArmMount {
                side,
                base: Pose::from_translation(Vec3::from(LEFT_BASE)),
                model: right.mirrored_y(),
                home: home_joints(),
            },
        })
        .collect()
}

/// Places the task object uniformly in the placement rectangle (plus offset)
/// with a small random yaw; deterministic in the seed.
pub fn build_scene(config: &SceneConfig) -> Result<Scene> {
    let spec = task(&config.task)?;
    let (dx, dy) = spec.placement_rect();
    let rect = config.placement.unwrap_or(PlacementRect { x: dx, y: dy });
    if !rect.is_valid() {
        return Err(Error::Config(format!("empty placement rectangle {rect:?}")));
    }
    if !(config.yaw_range >= 0.0 && config.yaw_range.is_finite()) {
        return Err(Error::Config(format!("invalid yaw range {}", config.yaw_range)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x = rng.random_range(rect.x[0]..rect.x[1]) + config.offset[0];
    let y = rng.random_range(rect.y[0]..rect.y[1]) + config.offset[1];
    let yaw = if config.yaw_range > 0.0 { rng.random_range(-config.yaw_range..config.yaw_range) } else { 0.0 };
    let rotation = Rotation::rz(yaw);
    let object_pose = Pose::new(rotation, Vec3::new(x, y, spec.rest_height()));
    let stand = spec.stand.map(|s| Primitive::new(s, Pose::new(rotation, Vec3::new(x, y, s.half_height()))));
    Ok(Scene {
        config: config.clone(),
        task: spec,
        object: ObjectInstance::new(spec.object_name, spec.category, spec.shape, object_pose)?,
        stand,
        table: table(),
        arms: arm_mounts(spec.sides()),
    })
}

impl Scene {
    pub fn background(&self) -> &Background {
        &self.config.background
    }

    /// Static obstacles (table and stand) in the world frame.
    pub fn fixtures(&self) -> Vec<Primitive> {
        std::iter::once(self.table).chain(self.stand).collect()
    }

    /// Obstacles for planning one arm, in that arm's base frame.
    pub fn collision_world(&self, arm: usize, object_pose: &Pose, margin: f64) -> CollisionWorld {
        let to_base = self.arms[arm].base.inverse();
        let obstacles = self
            .fixtures()
            .into_iter()
            .chain(std::iter::once(Primitive::new(self.object.shape, *object_pose)))
            .map(|p| Primitive::new(p.shape, to_base.compose(&p.pose)))
            .collect();
        CollisionWorld::new(obstacles, margin)
    }

    /// The head camera expressed in an arm's base frame.
    pub fn rig_for_arm(&self, rig: &StereoRig, arm: usize) -> StereoRig {
        rig.rebased(&self.arms[arm].base)
    }

    /// A copy with the object, stand and placement shifted by a world translation.
    pub fn translated(&self, shift: &Vec3) -> Scene {
        let g = Pose::from_translation(*shift);
        let mut out = self.clone();
        out.object.true_pose = g.compose(&self.object.true_pose);
        out.stand = self.stand.map(|s| Primitive::new(s.shape, g.compose(&s.pose)));
        out
    }
}
