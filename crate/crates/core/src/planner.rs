//! Sphere-versus-primitive collision checking, damped-least-squares inverse
//! kinematics and RRT-Connect joint-space planning with shortcut smoothing.

use std::time::{Duration, Instant};

use nalgebra::{Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, Vec3};
use crate::kinematics::{ArmJoints, HandJoints, RobotModel, Sphere, ARM_DOF};
use crate::shape::{Primitive, Shape};

/// Obstacles expressed in the arm base frame plus the clearance margin.
#[derive(Clone, Debug, Default)]
pub struct CollisionWorld {
    pub obstacles: Vec<Primitive>,
    pub margin: f64,
}

impl CollisionWorld {
    pub fn new(obstacles: Vec<Primitive>, margin: f64) -> Self {
        CollisionWorld { obstacles, margin }
    }

    /// One sphere obstacle per point, for point-cloud environments.
    pub fn from_points(points: &[Vec3], radius: f64, margin: f64) -> Self {
        let obstacles =
            points.iter().map(|p| Primitive::new(Shape::Sphere { radius }, Pose::from_translation(*p))).collect();
        CollisionWorld { obstacles, margin }
    }

    pub fn sphere_collides(&self, s: &Sphere) -> bool {
        self.obstacles.iter().any(|o| o.distance(&s.center) < s.radius + self.margin)
    }
}

/// True when any arm or hand sphere comes within the margin of an obstacle.
pub fn collision_check(model: &RobotModel, q: &ArmJoints, j: &HandJoints, world: &CollisionWorld) -> bool {
    if world.obstacles.is_empty() {
        return false;
    }
    if model.arm_sphere_centers_unchecked(q).iter().any(|s| world.sphere_collides(s)) {
        return true;
    }
    let wrist = model.wrist_pose_unchecked(q);
    model.hand_sphere_centers_unchecked(&wrist, j).iter().any(|s| world.sphere_collides(s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IkConfig {
    pub max_iterations: usize,
    pub restarts: usize,
    pub position_tolerance: f64,
    pub rotation_tolerance: f64,
    pub damping: f64,
    pub seed: u64,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            max_iterations: 200,
            restarts: 8,
            position_tolerance: 1e-3,
            rotation_tolerance: 0.01,
            damping: 0.02,
            seed: 0x1c,
        }
    }
}

/// Position (m) and rotation (rad) residuals of a wrist pose against a target.
pub fn pose_residual(wrist: &Pose, target: &Pose) -> (f64, f64) {
    let dr = target.rotation.mul(&wrist.rotation.transpose()).angle();
    ((target.translation - wrist.translation).norm(), dr)
}

/// One damped-least-squares descent from `q0`; returns the final joints and residuals.
pub fn dls_descend(model: &RobotModel, target: &Pose, q0: &ArmJoints, cfg: &IkConfig) -> (ArmJoints, f64, f64) {
    let mut q = model.clamp_arm(q0);
    let lambda2 = cfg.damping * cfg.damping;
    let mut best = (q, f64::INFINITY, f64::INFINITY);
    for _ in 0..cfg.max_iterations {
        let (jac, wrist) = model.jacobian(&q);
        let (ep, er) = pose_residual(&wrist, target);
        if ep + er < best.1 + best.2 {
            best = (q, ep, er);
        }
        // Iterate well past the acceptance tolerance so converged poses are tight.
        if ep < cfg.position_tolerance * 1e-3 && er < cfg.rotation_tolerance * 1e-3 {
            break;
        }
        let dp = target.translation - wrist.translation;
        let dw = *target.rotation.mul(&wrist.rotation.transpose()).to_axis_angle().vector();
        let e = Vector6::new(dp.x, dp.y, dp.z, dw.x, dw.y, dw.z);
        let jjt = jac * jac.transpose() + Matrix6::identity() * lambda2;
        let Some(sol) = jjt.lu().solve(&e) else { break };
        let mut dq = jac.transpose() * sol;
        let m = dq.amax();
        if m > 0.4 {
            dq *= 0.4 / m;
        }
        for i in 0..ARM_DOF {
            q.0[i] += dq[i];
        }
        q = model.clamp_arm(&q);
    }
    let (ep, er) = pose_residual(&model.wrist_pose_unchecked(&q), target);
    if ep + er < best.1 + best.2 {
        best = (q, ep, er);
    }
    best
}

fn random_config(model: &RobotModel, rng: &mut impl Rng) -> ArmJoints {
    let mut q = ArmJoints::default();
    for (v, j) in q.0.iter_mut().zip(&model.arm) {
        *v = rng.random_range(j.lower..=j.upper);
    }
    q
}

/// IK solutions: the descent from `q_init` first, then seeded random restarts.
///
/// Yields every converged configuration; callers filter (e.g. for collisions).
pub fn ik_candidates<'a>(
    model: &'a RobotModel,
    target: &'a Pose,
    q_init: &ArmJoints,
    cfg: &'a IkConfig,
    attempts: usize,
) -> impl Iterator<Item = std::result::Result<ArmJoints, (f64, f64)>> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let first = *q_init;
    (0..attempts).map(move |i| {
        let start = if i == 0 { first } else { random_config(model, &mut rng) };
        let (q, ep, er) = dls_descend(model, target, &start, cfg);
        if ep <= cfg.position_tolerance && er <= cfg.rotation_tolerance {
            Ok(q)
        } else {
            Err((ep, er))
        }
    })
}

/// Damped-least-squares IK with seeded restarts.
pub fn solve_ik(model: &RobotModel, target: &Pose, q_init: &ArmJoints, cfg: &IkConfig) -> Result<ArmJoints> {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for r in ik_candidates(model, target, q_init, cfg, cfg.restarts + 1) {
        match r {
            Ok(q) => return Ok(q),
            Err((ep, er)) => {
                if ep + er < best.0 + best.1 {
                    best = (ep, er);
                }
            }
        }
    }
    Err(Error::Unreachable { position: best.0, rotation: best.1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub margin: f64,
    /// Largest per-joint change between consecutive output waypoints (rad).
    pub max_step: f64,
    /// Edge validation resolution (rad, per joint).
    pub check_resolution: f64,
    /// Tree extension step (rad, Euclidean in joint space).
    pub extend_step: f64,
    pub shortcut_iterations: usize,
    pub max_samples: usize,
    pub timeout_s: f64,
    /// Output timestep (s).
    pub dt: f64,
    /// Number of IK attempts when looking for a collision-free goal.
    pub goal_attempts: usize,
    pub seed: u64,
    pub ik: IkConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            margin: 0.005,
            max_step: 0.05,
            check_resolution: 0.01,
            extend_step: 0.25,
            shortcut_iterations: 200,
            max_samples: 50_000,
            timeout_s: 5.0,
            dt: 0.1,
            goal_attempts: 24,
            seed: 0x9e37,
            ik: IkConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointTrajectory {
    pub points: Vec<(ArmJoints, f64)>,
}

impl JointTrajectory {
    pub fn configs(&self) -> impl Iterator<Item = &ArmJoints> {
        self.points.iter().map(|(q, _)| q)
    }

    pub fn last(&self) -> ArmJoints {
        self.points.last().expect("trajectory is never empty").0
    }

    /// Sum of Euclidean joint-space step lengths.
    pub fn length(&self) -> f64 {
        path_length(&self.configs().copied().collect::<Vec<_>>())
    }
}

fn dist(a: &ArmJoints, b: &ArmJoints) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn max_diff(a: &ArmJoints, b: &ArmJoints) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn lerp(a: &ArmJoints, b: &ArmJoints, s: f64) -> ArmJoints {
    let mut out = *a;
    for i in 0..ARM_DOF {
        out.0[i] = a.0[i] + (b.0[i] - a.0[i]) * s;
    }
    out
}

pub fn path_length(path: &[ArmJoints]) -> f64 {
    path.windows(2).map(|w| dist(&w[0], &w[1])).sum()
}

struct Checker<'a> {
    model: &'a RobotModel,
    hand: HandJoints,
    world: &'a CollisionWorld,
}

impl Checker<'_> {
    fn free(&self, q: &ArmJoints) -> bool {
        !collision_check(self.model, q, &self.hand, self.world)
    }

    /// Checks the open segment (a, b] at the given per-joint resolution.
    fn segment_free(&self, a: &ArmJoints, b: &ArmJoints, resolution: f64) -> bool {
        let n = (max_diff(a, b) / resolution).ceil().max(1.0) as usize;
        (1..=n).all(|i| self.free(&lerp(a, b, i as f64 / n as f64)))
    }
}

struct Tree {
    nodes: Vec<ArmJoints>,
    parent: Vec<usize>,
}

impl Tree {
    fn new(root: ArmJoints) -> Self {
        Tree { nodes: vec![root], parent: vec![usize::MAX] }
    }

    fn nearest(&self, q: &ArmJoints) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = dist(n, q);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn add(&mut self, q: ArmJoints, parent: usize) -> usize {
        self.nodes.push(q);
        self.parent.push(parent);
        self.nodes.len() - 1
    }

    fn path_to_root(&self, mut i: usize) -> Vec<ArmJoints> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.nodes[i]);
            i = self.parent[i];
        }
        out
    }
}

enum Extend {
    Reached(usize),
    Advanced(usize),
    Trapped,
}

fn extend(tree: &mut Tree, target: &ArmJoints, checker: &Checker, cfg: &PlannerConfig) -> Extend {
    let near = tree.nearest(target);
    let from = tree.nodes[near];
    let d = dist(&from, target);
    let (to, reached) = if d <= cfg.extend_step { (*target, true) } else { (lerp(&from, target, cfg.extend_step / d), false) };
    if !checker.segment_free(&from, &to, cfg.check_resolution) {
        return Extend::Trapped;
    }
    let id = tree.add(to, near);
    if reached {
        Extend::Reached(id)
    } else {
        Extend::Advanced(id)
    }
}

fn connect(tree: &mut Tree, target: &ArmJoints, checker: &Checker, cfg: &PlannerConfig) -> Extend {
    loop {
        match extend(tree, target, checker, cfg) {
            Extend::Advanced(_) => continue,
            other => return other,
        }
    }
}

fn rrt_connect(
    start: &ArmJoints,
    goal: &ArmJoints,
    checker: &Checker,
    cfg: &PlannerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ArmJoints>> {
    let deadline = Instant::now() + Duration::from_secs_f64(cfg.timeout_s);
    let mut a = Tree::new(*start);
    let mut b = Tree::new(*goal);
    let mut a_is_start = true;
    for sample in 0..cfg.max_samples {
        // The sample budget is the deterministic bound; the clock is only a guard.
        if sample % 256 == 255 && Instant::now() > deadline {
            return Err(Error::PlanningFailed { samples: sample });
        }
        let q = random_config(checker.model, rng);
        if let Extend::Advanced(new) | Extend::Reached(new) = extend(&mut a, &q, checker, cfg) {
            let target = a.nodes[new];
            if let Extend::Reached(other) = connect(&mut b, &target, checker, cfg) {
                let mut from_a = a.path_to_root(new);
                from_a.reverse();
                let from_b = b.path_to_root(other);
                from_a.extend(from_b.into_iter().skip(1));
                if !a_is_start {
                    from_a.reverse();
                }
                return Ok(from_a);
            }
        }
        std::mem::swap(&mut a, &mut b);
        a_is_start = !a_is_start;
    }
    Err(Error::PlanningFailed { samples: cfg.max_samples })
}

fn shortcut(path: &mut Vec<ArmJoints>, checker: &Checker, cfg: &PlannerConfig, rng: &mut ChaCha8Rng) {
    for _ in 0..cfg.shortcut_iterations {
        if path.len() < 3 {
            return;
        }
        let i = rng.random_range(0..path.len() - 2);
        let j = rng.random_range(i + 2..path.len());
        if checker.segment_free(&path[i], &path[j], cfg.check_resolution) {
            path.drain(i + 1..j);
        }
    }
}

/// Inserts waypoints so consecutive configurations differ by less than `max_step` per joint.
pub fn resample(path: &[ArmJoints], max_step: f64) -> Vec<ArmJoints> {
    let mut out = vec![path[0]];
    for w in path.windows(2) {
        let n = (max_diff(&w[0], &w[1]) / max_step).floor() as usize + 1;
        for k in 1..=n {
            out.push(lerp(&w[0], &w[1], k as f64 / n as f64));
        }
    }
    out
}

/// Dense re-validation of every segment at the given resolution.
pub fn validate_path(
    model: &RobotModel,
    hand: &HandJoints,
    world: &CollisionWorld,
    path: &[ArmJoints],
    resolution: f64,
) -> bool {
    let checker = Checker { model, hand: *hand, world };
    checker.free(&path[0]) && path.windows(2).all(|w| checker.segment_free(&w[0], &w[1], resolution))
}

/// Collision-free goal configuration for a wrist target, preferring the descent from `q_start`.
pub fn find_goal(
    model: &RobotModel,
    q_start: &ArmJoints,
    hand: &HandJoints,
    target: &Pose,
    world: &CollisionWorld,
    cfg: &PlannerConfig,
) -> Result<ArmJoints> {
    let mut any_converged = false;
    let mut best = (f64::INFINITY, f64::INFINITY);
    for r in ik_candidates(model, target, q_start, &cfg.ik, cfg.goal_attempts.max(cfg.ik.restarts + 1)) {
        match r {
            Ok(q) => {
                any_converged = true;
                if !collision_check(model, &q, hand, world) {
                    return Ok(q);
                }
            }
            Err((ep, er)) => {
                if ep + er < best.0 + best.1 {
                    best = (ep, er);
                }
            }
        }
    }
    if any_converged {
        Err(Error::GoalInCollision)
    } else {
        Err(Error::Unreachable { position: best.0, rotation: best.1 })
    }
}

/// Plans a collision-free joint trajectory from `q_start` to a wrist pose.
///
/// The hand is held at `hand` throughout.
pub fn plan(
    model: &RobotModel,
    q_start: &ArmJoints,
    hand: &HandJoints,
    target: &Pose,
    world: &CollisionWorld,
    cfg: &PlannerConfig,
) -> Result<JointTrajectory> {
    let world = CollisionWorld { obstacles: world.obstacles.clone(), margin: cfg.margin };
    let checker = Checker { model, hand: *hand, world: &world };
    if !checker.free(q_start) {
        return Err(Error::StartInCollision);
    }
    let goal = find_goal(model, q_start, hand, target, &world, cfg)?;
    plan_to_config(model, q_start, hand, &goal, &world, cfg)
}

/// Joint-space planning between two known configurations.
pub fn plan_to_config(
    model: &RobotModel,
    q_start: &ArmJoints,
    hand: &HandJoints,
    goal: &ArmJoints,
    world: &CollisionWorld,
    cfg: &PlannerConfig,
) -> Result<JointTrajectory> {
    let checker = Checker { model, hand: *hand, world };
    if !checker.free(q_start) {
        return Err(Error::StartInCollision);
    }
    if !checker.free(goal) {
        return Err(Error::GoalInCollision);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut path = if checker.segment_free(q_start, goal, cfg.check_resolution) {
        vec![*q_start, *goal]
    } else {
        rrt_connect(q_start, goal, &checker, cfg, &mut rng)?
    };
    shortcut(&mut path, &checker, cfg, &mut rng);
    let dense = resample(&path, cfg.max_step);
    if !validate_path(model, hand, world, &dense, cfg.check_resolution / 4.0) {
        return Err(Error::PlanningFailed { samples: 0 });
    }
    Ok(JointTrajectory { points: dense.into_iter().enumerate().map(|(i, q)| (q, i as f64 * cfg.dt)).collect() })
}


/// Seeded cluttered planning problems that are solvable by construction.
pub mod scenarios {
    use super::*;
    use crate::geom::Rotation;

    pub struct Scenario {
        pub start: ArmJoints,
        pub goal: ArmJoints,
        pub target: Pose,
        pub hand: HandJoints,
        pub world: CollisionWorld,
    }

    fn table() -> Primitive {
        Primitive::new(Shape::Box { size: [2.0, 2.0, 0.1] }, Pose::from_translation(Vec3::new(0.0, 0.0, -0.05)))
    }

    fn swept_spheres(model: &RobotModel, hand: &HandJoints, path: &[ArmJoints]) -> Vec<Sphere> {
        let mut out = Vec::new();
        for w in resample(path, 0.02).iter() {
            out.extend(model.arm_sphere_centers_unchecked(w));
            out.extend(model.hand_sphere_centers_unchecked(&model.wrist_pose_unchecked(w), hand));
        }
        out
    }

    fn clear_of(p: &Primitive, spheres: &[Sphere], clearance: f64) -> bool {
        spheres.iter().all(|s| p.distance(&s.center) > s.radius + clearance)
    }

    fn reasonable(model: &RobotModel, rng: &mut ChaCha8Rng, hand: &HandJoints, world: &CollisionWorld) -> ArmJoints {
        loop {
            let mut q = random_config(model, rng);
            q.0[1] *= 0.6;
            q.0[2] *= 0.8;
            if !collision_check(model, &q, hand, world) && model.wrist_pose_unchecked(&q).translation.z > 0.15 {
                return q;
            }
        }
    }

    /// A start, a via point and a goal joined by a free corridor, with obstacles
    /// scattered elsewhere and preferentially across the direct start-goal line.
    pub fn corridor(model: &RobotModel, seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hand = HandJoints([0.2, 0.2, 0.2, 0.2, 0.3, 0.1]);
        let base = CollisionWorld::new(vec![table()], 0.005);
        loop {
            let start = reasonable(model, &mut rng, &hand, &base);
            let via = reasonable(model, &mut rng, &hand, &base);
            let goal = reasonable(model, &mut rng, &hand, &base);
            let corridor = [start, via, goal];
            if !validate_path(model, &hand, &base, &resample(&corridor, 0.05), 0.01) {
                continue;
            }
            let swept = swept_spheres(model, &hand, &corridor);
            let direct = swept_spheres(model, &hand, &[start, goal]);
            let mut obstacles = vec![table()];
            let mut tries = 0;
            while obstacles.len() < 8 && tries < 400 {
                tries += 1;
                let center = if tries % 2 == 0 {
                    direct[rng.random_range(0..direct.len())].center
                } else {
                    Vec3::new(rng.random_range(-0.3..0.8), rng.random_range(-0.7..0.7), rng.random_range(0.05..0.9))
                };
                let shape = match rng.random_range(0..3) {
                    0 => Shape::Sphere { radius: rng.random_range(0.03..0.08) },
                    1 => Shape::Box {
                        size: [rng.random_range(0.04..0.15), rng.random_range(0.04..0.15), rng.random_range(0.04..0.15)],
                    },
                    _ => Shape::Cylinder { radius: rng.random_range(0.02..0.06), height: rng.random_range(0.05..0.2) },
                };
                let pose = Pose::new(Rotation::rz(rng.random_range(0.0..3.0)), center);
                let prim = Primitive::new(shape, pose);
                if clear_of(&prim, &swept, 0.02) {
                    obstacles.push(prim);
                }
            }
            let target = model.wrist_pose_unchecked(&goal);
            return Scenario { start, goal, target, hand, world: CollisionWorld::new(obstacles, 0.005) };
        }
    }
}
