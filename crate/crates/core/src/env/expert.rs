//! Scripted demonstrator: locate the object, plan to the pre-manipulation
//! pose, then run the task's fixed end trajectory (approach, close, lift, hold).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{RigConfig, Scene};
use super::sim::{close_at_wrist, step, success_check, wrist_world, ArmState, WorldState};
use super::tasks::{grasp_geometry, open_hand};
use crate::dataset::{Episode, FrameStore, Step};
use crate::error::{Error, Result};
use crate::geom::{apply_relative, relative_pose, AxisAngle, Pose, Vec3};
use crate::kinematics::{ArmJoints, HandJoints, RobotModel, HAND_DOF, THUMB_ROT};
use crate::perception::{locate_object, pre_manipulation_pose, CategoryOffsetTable, NoiseModel, OffsetFrame};
use crate::planner::{dls_descend, plan, solve_ik, IkConfig, PlannerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub approach_steps: usize,
    pub close_steps: usize,
    pub lift_steps: usize,
    pub hold_steps: usize,
    /// Wrist rise (m) at the end of the lift.
    pub lift_height: f64,
    /// Wrist rise (m) per closing step.
    pub close_rise: f64,
    /// How far (rad) finger commands go past the contact angle.
    pub finger_press: f64,
    /// Per-waypoint jitter bounds (m, rad).
    pub jitter_translation: f64,
    pub jitter_rotation: f64,
    pub noise: NoiseModel,
    pub offset_frame: OffsetFrame,
    pub planner: PlannerConfig,
    /// Control period (s).
    pub dt: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            approach_steps: 12,
            close_steps: 8,
            lift_steps: 12,
            hold_steps: 6,
            lift_height: 0.10,
            close_rise: 0.001,
            finger_press: 0.15,
            jitter_translation: 0.002,
            jitter_rotation: 0.01,
            noise: NoiseModel::default(),
            offset_frame: OffsetFrame::Object,
            planner: PlannerConfig::default(),
            dt: 0.1,
        }
    }
}

impl ExpertConfig {
    pub fn without_jitter(mut self) -> Self {
        self.jitter_translation = 0.0;
        self.jitter_rotation = 0.0;
        self
    }

    pub fn end_steps(&self) -> usize {
        self.approach_steps + self.close_steps + self.lift_steps + self.hold_steps
    }
}

/// Fully closed finger command; the thumb keeps its opposition angle.
pub fn closed_hand() -> HandJoints {
    let mut j = HandJoints([1.7, 1.7, 1.7, 1.7, 0.0, 1.2]);
    j.0[THUMB_ROT] = open_hand().0[THUMB_ROT];
    j
}

/// One recorded demonstration: an episode per arm sharing the world states.
#[derive(Clone, Debug)]
pub struct Demonstration {
    pub scene: Arc<Scene>,
    pub episodes: Vec<Episode>,
    /// World state before every full-trajectory step, plus the final state.
    pub states: Arc<Vec<WorldState>>,
}

impl Demonstration {
    pub fn final_state(&self) -> &WorldState {
        self.states.last().expect("at least one state")
    }
}

fn smoothstep(s: f64) -> f64 {
    s * s * (3.0 - 2.0 * s)
}

fn ball_sample(rng: &mut impl Rng, radius: f64) -> Vec3 {
    if radius == 0.0 {
        return Vec3::zeros();
    }
    loop {
        let v = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

fn jittered(pose: &Pose, cfg: &ExpertConfig, rng: &mut impl Rng) -> Pose {
    let dp = ball_sample(rng, cfg.jitter_translation);
    let dw = ball_sample(rng, cfg.jitter_rotation);
    apply_relative(pose, &dp, &AxisAngle::new(dw))
}

fn lerp_pose(a: &Pose, b: &Pose, s: f64) -> Pose {
    let (dp, dw) = relative_pose(a, b);
    apply_relative(a, &(dp * s), &AxisAngle::new(dw.vector() * s))
}

fn lerp_hand(a: &HandJoints, b: &HandJoints, s: f64) -> HandJoints {
    let mut out = *a;
    for i in 0..HAND_DOF {
        out.0[i] = a.0[i] + (b.0[i] - a.0[i]) * s;
    }
    out
}

/// Warm-started IK used for every control step: one descent, then restarts if needed.
pub fn track_ik(model: &RobotModel, target: &Pose, q_prev: &ArmJoints, cfg: &IkConfig) -> Result<ArmJoints> {
    let (q, ep, er) = dls_descend(model, target, q_prev, cfg);
    if ep <= cfg.position_tolerance && er <= cfg.rotation_tolerance {
        Ok(q)
    } else {
        solve_ik(model, target, q_prev, cfg)
    }
}

/// Waypoints (wrist pose in the arm base frame, finger command) of the end trajectory.
fn end_waypoints(
    scene: &Scene,
    arm: usize,
    pre_manip: &Pose,
    cfg: &ExpertConfig,
    rng: &mut impl Rng,
) -> Result<Vec<(Pose, HandJoints)>> {
    let mount = &scene.arms[arm];
    let g = grasp_geometry(scene.task.template(), &scene.object.shape, mount.side);
    let object_in_base = mount.base.inverse().compose(&scene.object.true_pose);
    let grasp = object_in_base.compose(&g.grasp_in_object());
    // finger targets: just past where each finger meets the object at the nominal grasp
    let contact = close_at_wrist(scene, arm, &mount.base.compose(&grasp), &open_hand(), &closed_hand(), &scene.object.true_pose);
    let mut grip = contact;
    for v in grip.0.iter_mut() {
        *v += cfg.finger_press;
    }
    let grip = mount.model.clamp_hand(&grip);

    let mut out = Vec::with_capacity(cfg.end_steps());
    for s in 1..=cfg.approach_steps {
        let pose = lerp_pose(pre_manip, &grasp, smoothstep(s as f64 / cfg.approach_steps as f64));
        out.push((jittered(&pose, cfg, rng), open_hand()));
    }
    let mut top = grasp;
    for c in 1..=cfg.close_steps {
        top = Pose::new(grasp.rotation, grasp.translation + Vec3::z() * (c as f64 * cfg.close_rise));
        out.push((jittered(&top, cfg, rng), lerp_hand(&open_hand(), &grip, c as f64 / cfg.close_steps as f64)));
    }
    let mut lifted = top;
    for l in 1..=cfg.lift_steps {
        let h = cfg.lift_height * smoothstep(l as f64 / cfg.lift_steps as f64);
        lifted = Pose::new(top.rotation, top.translation + Vec3::z() * h);
        out.push((jittered(&lifted, cfg, rng), grip));
    }
    for _ in 0..cfg.hold_steps {
        out.push((jittered(&lifted, cfg, rng), grip));
    }
    Ok(out)
}

fn record(model: &RobotModel, a: &ArmState, action: &Pose, fingers: &HandJoints, t: f64) -> Step {
    Step {
        wrist_pose: model.wrist_pose_unchecked(&a.q),
        arm_joints: a.q,
        hand_joints: a.j,
        action_wrist_pose: *action,
        action_hand_joints: *fingers,
        timestamp: t,
    }
}

/// Pre-manipulation poses (arm base frames) from a perceived object pose.
pub fn pre_manipulation_poses(scene: &Scene, estimate: &Pose, frame: OffsetFrame) -> Result<Vec<Pose>> {
    scene
        .arms
        .iter()
        .map(|mount| {
            let table = CategoryOffsetTable::for_side(mount.side);
            let in_base = mount.base.inverse().compose(estimate);
            pre_manipulation_pose(&in_base, &table, scene.object.category, frame)
        })
        .collect()
}

/// Runs the scripted demonstrator on `scene`; the result is validated with
/// the task's success check before it is returned.
pub fn scripted_expert(scene: &Scene, rig: &RigConfig, cfg: &ExpertConfig, seed: u64) -> Result<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world_rig = rig.build()?;
    let initial = WorldState::initial(scene);
    let estimate = locate_object(scene, &initial, &world_rig.left, &scene.object.name, &cfg.noise, &mut rng)?;
    let targets = pre_manipulation_poses(scene, &estimate.pose, cfg.offset_frame)?;

    // plan each arm from home to its pre-manipulation pose
    let mut paths = Vec::new();
    for (i, mount) in scene.arms.iter().enumerate() {
        let world = scene.collision_world(i, &estimate.pose, cfg.planner.margin);
        let pcfg = PlannerConfig { seed: cfg.planner.seed ^ seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64), ..cfg.planner };
        let traj = plan(&mount.model, &mount.home, &open_hand(), &targets[i], &world, &pcfg)?;
        paths.push(traj.configs().copied().collect::<Vec<_>>());
    }
    let n = paths.iter().map(Vec::len).max().expect("at least one arm");
    for p in &mut paths {
        let last = *p.last().expect("nonempty path");
        p.resize(n, last);
    }

    let waypoints: Vec<Vec<(Pose, HandJoints)>> =
        (0..scene.arms.len()).map(|i| end_waypoints(scene, i, &targets[i], cfg, &mut rng)).collect::<Result<_>>()?;

    let mut state = initial;
    let mut states = vec![state.clone()];
    let mut approach: Vec<Vec<Step>> = vec![Vec::new(); scene.arms.len()];
    let mut end: Vec<Vec<Step>> = vec![Vec::new(); scene.arms.len()];
    let mut t = 0usize;
    for k in 0..n - 1 {
        let mut commands = Vec::new();
        for (i, mount) in scene.arms.iter().enumerate() {
            let next = paths[i][k + 1];
            let action = mount.model.wrist_pose_unchecked(&next);
            approach[i].push(record(&mount.model, &state.arms[i], &action, &open_hand(), t as f64 * cfg.dt));
            commands.push(ArmState { q: next, j: open_hand() });
        }
        state = step(scene, &state, &commands);
        states.push(state.clone());
        t += 1;
    }
    #[allow(clippy::needless_range_loop)]
    for w in 0..cfg.end_steps() {
        let mut commands = Vec::new();
        for (i, mount) in scene.arms.iter().enumerate() {
            let (target, fingers) = waypoints[i][w];
            end[i].push(record(&mount.model, &state.arms[i], &target, &fingers, t as f64 * cfg.dt));
            let q = track_ik(&mount.model, &target, &state.arms[i].q, &cfg.planner.ik)?;
            commands.push(ArmState { q, j: fingers });
        }
        state = step(scene, &state, &commands);
        states.push(state.clone());
        t += 1;
    }
    if !success_check(scene, &state) {
        let lift = super::sim::object_lift(scene, &state);
        return Err(Error::DemoRejected(format!(
            "{}: final state fails the success check (lift {lift:.3} m, knocked {}, held {})",
            scene.task.name,
            state.knocked,
            state.attached.is_some()
        )));
    }

    let scene = Arc::new(scene.clone());
    let full_states = Arc::new(states[..states.len() - 1].to_vec());
    let episodes = (0..scene.arms.len())
        .map(|i| Episode {
            task: scene.task.name.to_string(),
            arm: i,
            scene: scene.clone(),
            rig: *rig,
            pre_manip_pose: targets[i],
            approach: std::mem::take(&mut approach[i]),
            steps: std::mem::take(&mut end[i]),
            frames: FrameStore::Replay(full_states.clone()),
        })
        .collect::<Vec<_>>();
    for ep in &episodes {
        ep.validate()?;
    }
    Ok(Demonstration { scene, episodes, states: Arc::new(states) })
}

/// Wrist pose of arm `arm` in the world frame after the demonstration.
pub fn final_wrist_world(demo: &Demonstration, arm: usize) -> Pose {
    wrist_world(&demo.scene, arm, &demo.final_state().arms[arm].q)
}
