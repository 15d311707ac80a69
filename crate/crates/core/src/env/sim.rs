//! Kinematic simulation: joint tracking, contact-stopped fingers, a rigid
//! attachment rule for grasped objects, and the task success predicates.

use super::scene::Scene;
use super::tasks::{open_hand, Template};
use crate::geom::{Pose, Vec3};
use crate::kinematics::{ArmJoints, HandJoints, HandPart, Sphere, HAND_DOF, INDEX, THUMB_ROT};
use crate::shape::Primitive;

/// Surface gap (m) within which a hand sphere touches the object.
pub const CONTACT_DISTANCE: f64 = 0.005;
/// Looser gap used while the object is held (hysteresis).
pub const HOLD_DISTANCE: f64 = 0.010;
/// Penetration (m) of any robot sphere into a free object that knocks it over.
pub const KNOCK_DEPTH: f64 = 0.015;
/// Normals of opposing contacts must satisfy n1 · n2 below this.
pub const OPPOSING_DOT: f64 = -0.3;
/// Largest tray tilt (rad) for a stable lift.
pub const MAX_TILT: f64 = 10.0 * std::f64::consts::PI / 180.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmState {
    pub q: ArmJoints,
    pub j: HandJoints,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub arms: Vec<ArmState>,
    /// Object pose in the world frame.
    pub object: Pose,
    /// Object pose in the first arm's wrist frame while it is held.
    pub attached: Option<Pose>,
    /// Set once the object has been knocked over; the episode cannot succeed.
    pub knocked: bool,
}

impl WorldState {
    /// Arms at home with open hands, object where the scene placed it.
    pub fn initial(scene: &Scene) -> Self {
        WorldState {
            arms: scene.arms.iter().map(|a| ArmState { q: a.home, j: open_hand() }).collect(),
            object: scene.object.true_pose,
            attached: None,
            knocked: false,
        }
    }
}

/// Per-part contact summary of one hand against the object.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Contacts {
    pub palm: bool,
    pub fingers: [bool; 4],
    pub thumb: bool,
    /// Some finger sphere and some thumb sphere touch with opposing normals.
    pub opposing: bool,
    /// Index finger and thumb touch with opposing normals.
    pub pinch: bool,
    /// Deepest penetration of any hand sphere (m, positive inside).
    pub penetration: f64,
}

impl Contacts {
    pub fn any(&self) -> bool {
        self.palm || self.thumb || self.fingers.iter().any(|&f| f)
    }
}

pub fn wrist_world(scene: &Scene, arm: usize, q: &ArmJoints) -> Pose {
    let m = &scene.arms[arm];
    m.base.compose(&m.model.wrist_pose_unchecked(q))
}

pub fn hand_spheres_world(scene: &Scene, arm: usize, q: &ArmJoints, j: &HandJoints) -> Vec<Sphere> {
    scene.arms[arm].model.hand_sphere_centers_unchecked(&wrist_world(scene, arm, q), j)
}

pub fn arm_spheres_world(scene: &Scene, arm: usize, q: &ArmJoints) -> Vec<Sphere> {
    let m = &scene.arms[arm];
    m.model
        .arm_sphere_centers_unchecked(q)
        .into_iter()
        .map(|s| Sphere { center: m.base.transform_point(&s.center), radius: s.radius })
        .collect()
}

fn gap(object: &Primitive, s: &Sphere) -> f64 {
    object.distance(&s.center) - s.radius
}

pub fn hand_contacts(scene: &Scene, arm: usize, a: &ArmState, object: &Pose, threshold: f64) -> Contacts {
    let prim = Primitive::new(scene.object.shape, *object);
    let parts = scene.arms[arm].model.hand_sphere_parts();
    let mut c = Contacts::default();
    let mut finger_normals: Vec<(usize, Vec3)> = Vec::new();
    let mut thumb_normals: Vec<Vec3> = Vec::new();
    for (s, part) in hand_spheres_world(scene, arm, &a.q, &a.j).iter().zip(parts) {
        let g = gap(&prim, s);
        c.penetration = c.penetration.max(-g);
        if g > threshold {
            continue;
        }
        let n = prim.normal_toward(&s.center);
        match part {
            HandPart::Palm => c.palm = true,
            HandPart::Finger(i) => {
                c.fingers[i] = true;
                finger_normals.push((i, n));
            }
            HandPart::Thumb => {
                c.thumb = true;
                thumb_normals.push(n);
            }
        }
    }
    for (i, nf) in &finger_normals {
        for nt in &thumb_normals {
            if nf.dot(nt) < OPPOSING_DOT {
                c.opposing = true;
                c.pinch |= *i == INDEX;
            }
        }
    }
    c
}

/// Deepest penetration of any robot sphere into the object at `object`.
pub fn robot_penetration(scene: &Scene, arms: &[ArmState], object: &Pose) -> f64 {
    let prim = Primitive::new(scene.object.shape, *object);
    let mut worst = f64::NEG_INFINITY;
    for (i, a) in arms.iter().enumerate() {
        for s in arm_spheres_world(scene, i, &a.q).iter().chain(&hand_spheres_world(scene, i, &a.q, &a.j)) {
            worst = worst.max(-gap(&prim, s));
        }
    }
    worst
}

fn joint_part(joint: usize) -> HandPart {
    if joint >= THUMB_ROT {
        HandPart::Thumb
    } else {
        HandPart::Finger(joint)
    }
}

/// Smallest gap between the spheres a hand joint moves and the object.
fn part_gap(scene: &Scene, arm: usize, wrist: &Pose, j: &HandJoints, joint: usize, object: &Primitive) -> f64 {
    let model = &scene.arms[arm].model;
    let part = joint_part(joint);
    model
        .hand_sphere_centers_unchecked(wrist, j)
        .iter()
        .zip(model.hand_sphere_parts())
        .filter(|(_, p)| *p == part)
        .map(|(s, _)| gap(object, s))
        .fold(f64::INFINITY, f64::min)
}

/// Joint increment (rad) used when sweeping a closing finger.
const CLOSE_SWEEP_STEP: f64 = 0.02;

/// Moves the hand toward `target`; closing joints stop where their spheres
/// first touch the object. Opening is never blocked.
pub fn close_with_contact(scene: &Scene, arm: usize, q: &ArmJoints, current: &HandJoints, target: &HandJoints, object: &Pose) -> HandJoints {
    close_at_wrist(scene, arm, &wrist_world(scene, arm, q), current, target, object)
}

/// [`close_with_contact`] for a hand whose wrist is at `wrist` (world frame).
pub fn close_at_wrist(scene: &Scene, arm: usize, wrist: &Pose, current: &HandJoints, target: &HandJoints, object: &Pose) -> HandJoints {
    let model = &scene.arms[arm].model;
    let target = model.clamp_hand(target);
    let wrist = *wrist;
    let prim = Primitive::new(scene.object.shape, *object);
    let mut j = *current;
    for i in 0..HAND_DOF {
        let from = j.0[i];
        let to = target.0[i];
        if to <= from {
            j.0[i] = to;
            continue;
        }
        if part_gap(scene, arm, &wrist, &j, i, &prim) < 0.0 {
            // already touching deeper than zero gap: hold position
            continue;
        }
        // sweep in small increments so thin parts cannot pass through the object
        let n = ((to - from) / CLOSE_SWEEP_STEP).ceil().max(1.0) as usize;
        let mut lo = from;
        let mut hit = None;
        for k in 1..=n {
            let v = from + (to - from) * k as f64 / n as f64;
            j.0[i] = v;
            if part_gap(scene, arm, &wrist, &j, i, &prim) < 0.0 {
                hit = Some(v);
                break;
            }
            lo = v;
        }
        if let Some(mut hi) = hit {
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                j.0[i] = mid;
                if part_gap(scene, arm, &wrist, &j, i, &prim) >= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        j.0[i] = lo;
    }
    j
}

/// Whether the hands currently hold the object according to the task template.
pub fn holding(scene: &Scene, arms: &[ArmState], object: &Pose, threshold: f64) -> bool {
    let contacts = |i: usize| hand_contacts(scene, i, &arms[i], object, threshold);
    match scene.task.template() {
        Template::SideGrasp | Template::HandleGrasp => contacts(0).opposing,
        Template::TopPinch => contacts(0).pinch,
        Template::BimanualLift => arms.len() == 2 && contacts(0).any() && contacts(1).any(),
    }
}

fn dropped_pose(scene: &Scene, object: &Pose) -> Pose {
    let t = object.translation;
    Pose::new(scene.object.true_pose.rotation, Vec3::new(t.x, t.y, scene.task.rest_height()))
}

/// Advances the world by one control step.
///
/// Arm joints are set directly (after clamping); a held object follows the
/// first arm's wrist rigidly; fingers close until contact; the object is
/// released (and drops) when the hold predicate fails, knocked over when a
/// free object is penetrated deeper than [`KNOCK_DEPTH`], and attached when
/// the hold predicate first holds.
pub fn step(scene: &Scene, state: &WorldState, commands: &[ArmState]) -> WorldState {
    let mut next = state.clone();
    for (i, (a, cmd)) in next.arms.iter_mut().zip(commands).enumerate() {
        a.q = scene.arms[i].model.clamp_arm(&cmd.q);
    }
    if let Some(rel) = state.attached {
        next.object = wrist_world(scene, 0, &next.arms[0].q).compose(&rel);
    }
    for (i, cmd) in commands.iter().enumerate() {
        let a = next.arms[i];
        next.arms[i].j = close_with_contact(scene, i, &a.q, &a.j, &cmd.j, &next.object);
    }
    if next.attached.is_some() {
        if !holding(scene, &next.arms, &next.object, HOLD_DISTANCE) {
            next.attached = None;
            next.object = dropped_pose(scene, &next.object);
        }
    } else if !next.knocked {
        if robot_penetration(scene, &next.arms, &next.object) > KNOCK_DEPTH {
            next.knocked = true;
        } else if holding(scene, &next.arms, &next.object, CONTACT_DISTANCE) {
            let wrist = wrist_world(scene, 0, &next.arms[0].q);
            next.attached = Some(wrist.inverse().compose(&next.object));
        }
    }
    next
}

/// Height of the object above its resting height.
pub fn object_lift(scene: &Scene, state: &WorldState) -> f64 {
    state.object.translation.z - scene.task.rest_height()
}

/// Angle between the object's z axis and the world vertical.
pub fn object_tilt(state: &WorldState) -> f64 {
    let z = state.object.rotation.apply(&Vec3::z());
    z.z.clamp(-1.0, 1.0).acos()
}

/// Task success: held by the template's contact predicate and lifted high
/// enough (the tray also level within [`MAX_TILT`]).
pub fn success_check(scene: &Scene, state: &WorldState) -> bool {
    if state.knocked || state.arms.len() != scene.arms.len() {
        return false;
    }
    let template = scene.task.template();
    holding(scene, &state.arms, &state.object, HOLD_DISTANCE)
        && object_lift(scene, state) >= template.lift_threshold()
        && (template != Template::BimanualLift || object_tilt(state) < MAX_TILT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::scene::{build_scene, SceneConfig};
    use crate::env::tasks::grasp_geometry;
    use crate::planner::{solve_ik, IkConfig};

    /// Arm placed so the wrist sits at the task's grasp pose, hand open.
    fn at_grasp(scene: &Scene, arm: usize) -> ArmState {
        let side = scene.arms[arm].side;
        let g = grasp_geometry(scene.task.template(), &scene.object.shape, side);
        let target = scene.arms[arm].base.inverse().compose(&scene.object.true_pose.compose(&g.grasp_in_object()));
        let q = solve_ik(&scene.arms[arm].model, &target, &scene.arms[arm].home, &IkConfig::default()).unwrap();
        ArmState { q, j: open_hand() }
    }

    #[test]
    fn resting_object_with_hand_at_home_is_not_a_success() {
        let s = build_scene(&SceneConfig::new("grasp_cup", 1)).unwrap();
        assert!(!success_check(&s, &WorldState::initial(&s)));
    }

    #[test]
    fn constructed_grasp_and_lift_succeeds() {
        for task in ["grasp_cup", "take_mug", "hold_scanner", "catch_loopy", "pinch_toy", "grasp_sanitizer", "lift_tray"] {
            let s = build_scene(&SceneConfig::new(task, 3)).unwrap();
            let mut state = WorldState::initial(&s);
            let grasp: Vec<ArmState> = (0..s.arms.len()).map(|i| at_grasp(&s, i)).collect();
            state = step(&s, &state, &grasp);
            assert!(!state.knocked, "{task}: knocked while placing the hand");
            let closed: Vec<ArmState> =
                grasp.iter().map(|a| ArmState { q: a.q, j: HandJoints([1.7, 1.7, 1.7, 1.7, 1.3, 1.2]) }).collect();
            state = step(&s, &state, &closed);
            assert!(state.attached.is_some(), "{task}: not attached, contacts {:?}", hand_contacts(&s, 0, &state.arms[0], &state.object, CONTACT_DISTANCE));
            // lift every wrist 8 cm
            let mut lifted = Vec::new();
            for (i, a) in state.arms.iter().enumerate() {
                let m = &s.arms[i].model;
                let mut w = m.wrist_pose_unchecked(&a.q);
                w.translation.z += 0.08;
                let q = solve_ik(m, &w, &a.q, &IkConfig::default()).unwrap();
                lifted.push(ArmState { q, j: a.j });
            }
            let before = state.attached.unwrap();
            state = step(&s, &state, &lifted);
            assert!(success_check(&s, &state), "{task}: lift {}", object_lift(&s, &state));
            // attachment preserves the object-to-wrist transform exactly
            let rel = wrist_world(&s, 0, &state.arms[0].q).inverse().compose(&state.object);
            assert!(rel.max_abs_diff(&before) < 1e-12);
        }
    }

    #[test]
    fn fingers_stop_at_contact() {
        let s = build_scene(&SceneConfig::new("grasp_cup", 5)).unwrap();
        let a = at_grasp(&s, 0);
        let j = close_with_contact(&s, 0, &a.q, &a.j, &HandJoints([1.7, 1.7, 1.7, 1.7, 1.3, 1.2]), &s.object.true_pose);
        let c = hand_contacts(&s, 0, &ArmState { q: a.q, j }, &s.object.true_pose, CONTACT_DISTANCE);
        assert!(c.penetration < 1e-6, "penetration {}", c.penetration);
        assert!(c.opposing);
    }

    #[test]
    fn opening_releases_and_drops() {
        let s = build_scene(&SceneConfig::new("grasp_sanitizer", 2)).unwrap();
        let mut state = WorldState::initial(&s);
        let a = at_grasp(&s, 0);
        state = step(&s, &state, &[a]);
        state = step(&s, &state, &[ArmState { q: a.q, j: HandJoints([1.7, 1.7, 1.7, 1.7, 1.3, 1.2]) }]);
        assert!(state.attached.is_some());
        state = step(&s, &state, &[ArmState { q: a.q, j: open_hand() }]);
        assert!(state.attached.is_none());
        assert!((object_lift(&s, &state)).abs() < 1e-12);
    }

    #[test]
    fn ramming_the_object_knocks_it_over() {
        let s = build_scene(&SceneConfig::new("grasp_cup", 2)).unwrap();
        let m = &s.arms[0].model;
        let g = grasp_geometry(Template::SideGrasp, &s.object.shape, s.arms[0].side);
        // push the grasp pose 4 cm further along the palm normal, into the cup
        let mut target = s.object.true_pose.compose(&g.grasp_in_object());
        target.translation += target.rotation.apply(&Vec3::x()) * 0.04;
        let q = solve_ik(m, &target, &s.arms[0].home, &IkConfig::default()).unwrap();
        let state = step(&s, &WorldState::initial(&s), &[ArmState { q, j: open_hand() }]);
        assert!(state.knocked);
        assert!(!success_check(&s, &state));
    }
}
