//! Closed-loop execution of trained policies in the simulator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::expert::{pre_manipulation_poses, track_ik};
use super::render::SceneView;
use super::scene::{RigConfig, Scene};
use super::sim::{step, success_check, wrist_world, ArmState, WorldState};
use super::tasks::open_hand;
use crate::camera::CropConfig;
use crate::dataset::{decode_action, encode_pose_action, observe_images, reference_pose, Method, Observation, Step};
use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::kinematics::{HandJoints, RobotModel};
use crate::perception::{locate_object, NoiseModel, OffsetFrame};
use crate::planner::{dls_descend, plan, PlannerConfig};
use crate::policy::{infer, temporal_aggregate, PendingChunk, PolicyParams, AGGREGATION_DECAY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    None,
    Timeout,
    /// Object released mid-transport or knocked over.
    Dropped,
    PlannerFailure,
    PerceptionFailure,
}

impl FailureReason {
    pub fn name(self) -> &'static str {
        match self {
            FailureReason::None => "none",
            FailureReason::Timeout => "timeout",
            FailureReason::Dropped => "dropped",
            FailureReason::PlannerFailure => "planner-failure",
            FailureReason::PerceptionFailure => "perception-failure",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub success: bool,
    /// World frame.
    pub object_pose: Pose,
    /// First arm's wrist, world frame.
    pub wrist_pose: Pose,
    /// Policy control steps executed.
    pub steps: usize,
    pub failure: FailureReason,
}

/// Result plus what was executed, per arm.
#[derive(Clone, Debug)]
pub struct RolloutRecord {
    pub result: RolloutResult,
    /// Pre-manipulation pose per arm (base frame); identity for methods that start from home.
    pub pre_manip: Vec<Pose>,
    pub approach: Vec<Vec<Step>>,
    pub steps: Vec<Vec<Step>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub max_steps: usize,
    pub noise: NoiseModel,
    pub offset_frame: OffsetFrame,
    pub planner: PlannerConfig,
    /// Crop geometry; the output size always follows the policy's input size.
    pub crop: CropConfig,
    pub aggregation_decay: f64,
    pub seed: u64,
    /// Control period (s), used for step timestamps.
    pub dt: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_steps: 150,
            noise: NoiseModel::default(),
            offset_frame: OffsetFrame::Object,
            planner: PlannerConfig::default(),
            crop: CropConfig::default(),
            aggregation_decay: AGGREGATION_DECAY,
            seed: 0,
            dt: 0.1,
        }
    }
}

fn finish(scene: &Scene, state: &WorldState, steps: usize, failure: FailureReason) -> RolloutResult {
    RolloutResult {
        success: failure == FailureReason::None,
        object_pose: state.object,
        wrist_pose: wrist_world(scene, 0, &state.arms[0].q),
        steps,
        failure,
    }
}

/// Runs `policies` (one per arm) on `scene`. Environment outcomes are
/// reported through [`FailureReason`]; only misconfiguration (wrong policy
/// count, untrained or mis-shaped parameters) is returned as an error.
pub fn execute_rollout(scene: &Scene, policies: &[PolicyParams], method: Method, rig: &RigConfig, cfg: &RolloutConfig) -> Result<RolloutResult> {
    execute_rollout_recorded(scene, policies, method, rig, cfg).map(|r| r.result)
}

pub fn execute_rollout_recorded(
    scene: &Scene,
    policies: &[PolicyParams],
    method: Method,
    rig: &RigConfig,
    cfg: &RolloutConfig,
) -> Result<RolloutRecord> {
    let arms = scene.arms.len();
    if policies.len() != arms {
        return Err(Error::Config(format!("{} has {arms} arm(s) but {} policies were given", scene.task.name, policies.len())));
    }
    if policies.iter().any(|p| !p.trained) {
        return Err(Error::Untrained);
    }
    let world_rig = rig.build()?;
    let mut state = WorldState::initial(scene);
    let mut record = RolloutRecord {
        result: finish(scene, &state, 0, FailureReason::Timeout),
        pre_manip: vec![Pose::identity(); arms],
        approach: vec![Vec::new(); arms],
        steps: vec![Vec::new(); arms],
    };
    let mut t_clock = 0usize;

    if method.arrival() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let estimate = match locate_object(scene, &state, &world_rig.left, &scene.object.name, &cfg.noise, &mut rng) {
            Ok(e) => e,
            Err(Error::NotFound(_) | Error::Occluded(_)) => {
                record.result = finish(scene, &state, 0, FailureReason::PerceptionFailure);
                return Ok(record);
            }
            Err(e) => return Err(e),
        };
        let targets = pre_manipulation_poses(scene, &estimate.pose, cfg.offset_frame)?;
        let mut paths = Vec::new();
        for (i, mount) in scene.arms.iter().enumerate() {
            let world = scene.collision_world(i, &estimate.pose, cfg.planner.margin);
            let pcfg = PlannerConfig { seed: cfg.planner.seed ^ cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64), ..cfg.planner };
            match plan(&mount.model, &mount.home, &open_hand(), &targets[i], &world, &pcfg) {
                Ok(traj) => paths.push(traj.configs().copied().collect::<Vec<_>>()),
                Err(Error::Unreachable { .. } | Error::GoalInCollision | Error::StartInCollision | Error::PlanningFailed { .. }) => {
                    record.result = finish(scene, &state, 0, FailureReason::PlannerFailure);
                    return Ok(record);
                }
                Err(e) => return Err(e),
            }
        }
        let n = paths.iter().map(Vec::len).max().expect("at least one arm");
        for k in 1..n {
            let mut commands = Vec::new();
            for (i, mount) in scene.arms.iter().enumerate() {
                let q = paths[i][k.min(paths[i].len() - 1)];
                let a = state.arms[i];
                let target = mount.model.wrist_pose_unchecked(&q);
                record.approach[i].push(step_record(&mount.model, &a, &target, &open_hand(), t_clock as f64 * cfg.dt));
                commands.push(ArmState { q, j: open_hand() });
            }
            state = step(scene, &state, &commands);
            t_clock += 1;
        }
        record.pre_manip = targets;
    }

    let references: Vec<Pose> = record.pre_manip.iter().map(|p| reference_pose(method, p)).collect();
    let rigs_in_base: Vec<_> = (0..arms).map(|i| scene.rig_for_arm(&world_rig, i)).collect();
    let mut pending: Vec<Vec<PendingChunk>> = vec![Vec::new(); arms];
    for t in 0..cfg.max_steps {
        let left = SceneView::new(scene, &state, &world_rig.left);
        let right = SceneView::new(scene, &state, &world_rig.right);
        let mut commands = Vec::with_capacity(arms);
        for (i, mount) in scene.arms.iter().enumerate() {
            let params = &policies[i];
            let crop = CropConfig { size: params.config.image_size, ..cfg.crop };
            let a = state.arms[i];
            let wrist = mount.model.wrist_pose_unchecked(&a.q);
            match observe_images(&rigs_in_base[i], &mount.model, &a.q, &a.j, &left, &right, method, &crop) {
                Ok((l, r)) => {
                    let obs = Observation { left: l, right: r, proprio: encode_pose_action(&wrist, &references[i], &a.j) };
                    pending[i].push(PendingChunk { start: t, actions: infer(params, &obs)? });
                }
                Err(Error::NoHandVisible) => {}
                Err(e) => return Err(e),
            }
            pending[i].retain(|c| c.start + c.actions.len() > t);
            let action = match temporal_aggregate(&pending[i], t, cfg.aggregation_decay) {
                Ok(a) => a,
                Err(Error::NoCoveringChunk(_)) => {
                    record.result = finish(scene, &state, t, FailureReason::PerceptionFailure);
                    return Ok(record);
                }
                Err(e) => return Err(e),
            };
            let (target, fingers) = decode_action(&action, &references[i]);
            let fingers = mount.model.clamp_hand(&fingers);
            record.steps[i].push(step_record(&mount.model, &a, &target, &fingers, t_clock as f64 * cfg.dt));
            let q = track_ik(&mount.model, &target, &a.q, &cfg.planner.ik).unwrap_or_else(|_| dls_descend(&mount.model, &target, &a.q, &cfg.planner.ik).0);
            commands.push(ArmState { q, j: fingers });
        }
        let was_held = state.attached.is_some();
        state = step(scene, &state, &commands);
        t_clock += 1;
        if success_check(scene, &state) {
            record.result = finish(scene, &state, t + 1, FailureReason::None);
            return Ok(record);
        }
        if state.knocked || (was_held && state.attached.is_none()) {
            record.result = finish(scene, &state, t + 1, FailureReason::Dropped);
            return Ok(record);
        }
    }
    record.result = finish(scene, &state, cfg.max_steps, FailureReason::Timeout);
    Ok(record)
}

fn step_record(model: &RobotModel, a: &ArmState, action: &Pose, fingers: &HandJoints, t: f64) -> Step {
    Step {
        wrist_pose: model.wrist_pose_unchecked(&a.q),
        arm_joints: a.q,
        hand_joints: a.j,
        action_wrist_pose: *action,
        action_hand_joints: *fingers,
        timestamp: t,
    }
}
