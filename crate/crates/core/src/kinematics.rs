//! Forward kinematics for the serial arm and the dexterous hand, and their
//! collision-sphere bodies.
//!
//! The robot description is a TOML document (see `assets/reference_robot.toml`
//! for the schema by example). Parse errors carry 1-based line numbers.

use serde::Deserialize;
use toml::Spanned;

use crate::error::{line_of, Error, Result};
use crate::geom::{Pose, Rotation, Vec3};

pub const ARM_DOF: usize = 6;
pub const HAND_DOF: usize = 6;

/// Hand joint indices.
pub const INDEX: usize = 0;
pub const THUMB_ROT: usize = 4;
pub const THUMB_BEND: usize = 5;

const REFERENCE_ROBOT: &str = include_str!("../assets/reference_robot.toml");

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ArmJoints(pub [f64; ARM_DOF]);

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct HandJoints(pub [f64; HAND_DOF]);

/// Which part of the hand a collision sphere belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HandPart {
    Palm,
    Finger(usize),
    Thumb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    /// Unit rotation axis in the joint frame.
    pub axis: Vec3,
    /// Parent-to-joint transform applied before the joint rotation.
    pub origin: Pose,
    pub lower: f64,
    pub upper: f64,
    pub spheres: Vec<Sphere>,
    /// Hand joints only: index of the parent joint, `None` for the palm.
    pub parent: Option<usize>,
}

impl Joint {
    fn check(&self, value: f64) -> Result<()> {
        if value.is_finite() && value >= self.lower && value <= self.upper {
            Ok(())
        } else {
            Err(Error::LimitViolation { joint: self.name.clone(), value, lower: self.lower, upper: self.upper })
        }
    }

    fn frame(&self, parent: &Pose, value: f64) -> Pose {
        parent.compose(&self.origin).compose(&Pose::from_rotation(Rotation::about_axis(&self.axis, value)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub arm: Vec<Joint>,
    /// Last arm frame to wrist transform.
    pub wrist: Pose,
    /// Spheres fixed to the arm base.
    pub base_spheres: Vec<Sphere>,
    pub hand: Vec<Joint>,
    pub palm_spheres: Vec<Sphere>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    arm: RawArm,
    hand: RawHand,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArm {
    wrist: Spanned<Vec<f64>>,
    base_spheres: Spanned<Vec<Vec<f64>>>,
    joints: Vec<Spanned<RawJoint>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHand {
    palm_spheres: Spanned<Vec<Vec<f64>>>,
    joints: Vec<Spanned<RawJoint>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    name: String,
    #[serde(default)]
    parent: Option<String>,
    axis: Spanned<Vec<f64>>,
    origin: Spanned<Vec<f64>>,
    limits: Spanned<Vec<f64>>,
    spheres: Spanned<Vec<Vec<f64>>>,
}

struct Ctx<'a> {
    src: &'a str,
}

impl Ctx<'_> {
    fn err<T>(&self, span: std::ops::Range<usize>, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { line: line_of(self.src, span.start), message: message.into() })
    }

    fn pose(&self, v: &Spanned<Vec<f64>>) -> Result<Pose> {
        let a: [f64; 12] = match v.get_ref().as_slice().try_into() {
            Ok(a) => a,
            Err(_) => return self.err(v.span(), format!("pose needs 12 numbers, got {}", v.get_ref().len())),
        };
        let m = nalgebra::Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        match Rotation::from_matrix(m, 1e-9) {
            Some(r) => Ok(Pose::new(r, Vec3::new(a[9], a[10], a[11]))),
            None => self.err(v.span(), "pose rotation block is not a proper rotation"),
        }
    }

    fn spheres(&self, v: &Spanned<Vec<Vec<f64>>>) -> Result<Vec<Sphere>> {
        v.get_ref()
            .iter()
            .map(|s| match s.as_slice() {
                [x, y, z, r] if *r > 0.0 => Ok(Sphere { center: Vec3::new(*x, *y, *z), radius: *r }),
                [_, _, _, _] => self.err(v.span(), "sphere radius must be positive"),
                _ => self.err(v.span(), "sphere needs [x, y, z, radius]"),
            })
            .collect()
    }

    fn joint(&self, raw: &Spanned<RawJoint>, parent: Option<usize>) -> Result<Joint> {
        let j = raw.get_ref();
        let axis = match j.axis.get_ref().as_slice() {
            [x, y, z] => Vec3::new(*x, *y, *z),
            _ => return self.err(j.axis.span(), "axis needs 3 numbers"),
        };
        if axis.norm() < 1e-9 {
            return self.err(j.axis.span(), "axis must be nonzero");
        }
        let (lower, upper) = match j.limits.get_ref().as_slice() {
            [lo, hi] if lo < hi => (*lo, *hi),
            [_, _] => return self.err(j.limits.span(), format!("joint `{}`: lower limit must be below upper", j.name)),
            _ => return self.err(j.limits.span(), "limits need [lower, upper]"),
        };
        Ok(Joint {
            name: j.name.clone(),
            axis: axis.normalize(),
            origin: self.pose(&j.origin)?,
            lower,
            upper,
            spheres: self.spheres(&j.spheres)?,
            parent,
        })
    }
}

impl RobotModel {
    /// The in-repo reference model.
    pub fn reference() -> Self {
        Self::from_toml_str(REFERENCE_ROBOT).expect("reference robot description is valid")
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        let raw: RawModel = toml::from_str(src).map_err(|e| Error::from_toml(src, &e))?;
        let cx = Ctx { src };
        if raw.arm.joints.len() != ARM_DOF {
            return cx.err(0..0, format!("expected {ARM_DOF} arm joints, found {}", raw.arm.joints.len()));
        }
        if raw.hand.joints.len() != HAND_DOF {
            return cx.err(0..0, format!("expected {HAND_DOF} hand joints, found {}", raw.hand.joints.len()));
        }
        let arm = raw.arm.joints.iter().map(|j| cx.joint(j, None)).collect::<Result<Vec<_>>>()?;
        let mut hand: Vec<Joint> = Vec::with_capacity(HAND_DOF);
        for rj in &raw.hand.joints {
            let parent = match rj.get_ref().parent.as_deref() {
                None | Some("palm") => None,
                Some(p) => match hand.iter().position(|h| h.name == p) {
                    Some(i) => Some(i),
                    None => return cx.err(rj.span(), format!("parent `{p}` must be declared before its child")),
                },
            };
            hand.push(cx.joint(rj, parent)?);
        }
        Ok(RobotModel {
            name: raw.name,
            arm,
            wrist: cx.pose(&raw.arm.wrist)?,
            base_spheres: cx.spheres(&raw.arm.base_spheres)?,
            hand,
            palm_spheres: cx.spheres(&raw.hand.palm_spheres)?,
        })
    }

    /// Mirror image of the model through the base xz-plane (a left-handed copy).
    ///
    /// Joint angles keep their meaning: the mirrored model at `q` is the
    /// reflection of the original at `q`.
    pub fn mirrored_y(&self) -> Self {
        let m = nalgebra::Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
        let pose = |p: &Pose| {
            Pose::new(Rotation::from_matrix_projected(m * p.rotation.matrix() * m), m * p.translation)
        };
        let spheres = |s: &[Sphere]| s.iter().map(|s| Sphere { center: m * s.center, radius: s.radius }).collect();
        let joint = |j: &Joint| Joint {
            axis: -(m * j.axis),
            origin: pose(&j.origin),
            spheres: spheres(&j.spheres),
            ..j.clone()
        };
        RobotModel {
            name: format!("{}-mirrored", self.name),
            arm: self.arm.iter().map(joint).collect(),
            wrist: pose(&self.wrist),
            base_spheres: spheres(&self.base_spheres),
            hand: self.hand.iter().map(joint).collect(),
            palm_spheres: spheres(&self.palm_spheres),
        }
    }

    pub fn check_arm(&self, q: &ArmJoints) -> Result<()> {
        self.arm.iter().zip(q.0).try_for_each(|(j, v)| j.check(v))
    }

    pub fn check_hand(&self, j: &HandJoints) -> Result<()> {
        self.hand.iter().zip(j.0).try_for_each(|(h, v)| h.check(v))
    }

    pub fn clamp_arm(&self, q: &ArmJoints) -> ArmJoints {
        let mut out = *q;
        for (v, j) in out.0.iter_mut().zip(&self.arm) {
            *v = v.clamp(j.lower, j.upper);
        }
        out
    }

    pub fn clamp_hand(&self, h: &HandJoints) -> HandJoints {
        let mut out = *h;
        for (v, j) in out.0.iter_mut().zip(&self.hand) {
            *v = v.clamp(j.lower, j.upper);
        }
        out
    }

    /// Link frames after each joint rotation, without limit checks.
    pub fn arm_frames(&self, q: &ArmJoints) -> [Pose; ARM_DOF] {
        let mut frames = [Pose::identity(); ARM_DOF];
        let mut parent = Pose::identity();
        for (i, j) in self.arm.iter().enumerate() {
            parent = j.frame(&parent, q.0[i]);
            frames[i] = parent;
        }
        frames
    }

    /// Wrist pose in the arm base frame.
    pub fn wrist_pose(&self, q: &ArmJoints) -> Result<Pose> {
        self.check_arm(q)?;
        Ok(self.wrist_pose_unchecked(q))
    }

    pub fn wrist_pose_unchecked(&self, q: &ArmJoints) -> Pose {
        self.arm_frames(q)[ARM_DOF - 1].compose(&self.wrist)
    }

    /// Geometric Jacobian (rows: linear then angular velocity) and the wrist pose.
    pub fn jacobian(&self, q: &ArmJoints) -> (nalgebra::Matrix6<f64>, Pose) {
        let mut jac = nalgebra::Matrix6::zeros();
        let mut parent = Pose::identity();
        let mut axes = [(Vec3::zeros(), Vec3::zeros()); ARM_DOF];
        for (i, j) in self.arm.iter().enumerate() {
            let at = parent.compose(&j.origin);
            axes[i] = (at.translation, at.rotation.apply(&j.axis));
            parent = j.frame(&parent, q.0[i]);
        }
        let wrist = parent.compose(&self.wrist);
        for (i, (o, z)) in axes.iter().enumerate() {
            let lin = z.cross(&(wrist.translation - o));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(z);
        }
        (jac, wrist)
    }

    /// Arm collision spheres in the base frame: base spheres first, then links in order.
    pub fn arm_sphere_centers(&self, q: &ArmJoints) -> Result<Vec<Sphere>> {
        self.check_arm(q)?;
        Ok(self.arm_sphere_centers_unchecked(q))
    }

    pub fn arm_sphere_centers_unchecked(&self, q: &ArmJoints) -> Vec<Sphere> {
        let frames = self.arm_frames(q);
        let mut out = self.base_spheres.clone();
        for (j, f) in self.arm.iter().zip(&frames) {
            out.extend(j.spheres.iter().map(|s| Sphere { center: f.transform_point(&s.center), radius: s.radius }));
        }
        out
    }

    pub fn arm_sphere_count(&self) -> usize {
        self.base_spheres.len() + self.arm.iter().map(|j| j.spheres.len()).sum::<usize>()
    }

    /// Hand collision spheres for a given wrist pose: palm first, then joints in order.
    pub fn hand_sphere_centers(&self, wrist: &Pose, j: &HandJoints) -> Result<Vec<Sphere>> {
        self.check_hand(j)?;
        Ok(self.hand_sphere_centers_unchecked(wrist, j))
    }

    pub fn hand_sphere_centers_unchecked(&self, wrist: &Pose, j: &HandJoints) -> Vec<Sphere> {
        let mut frames = [Pose::identity(); HAND_DOF];
        let mut out: Vec<Sphere> = self
            .palm_spheres
            .iter()
            .map(|s| Sphere { center: wrist.transform_point(&s.center), radius: s.radius })
            .collect();
        for (i, joint) in self.hand.iter().enumerate() {
            let parent = joint.parent.map_or(*wrist, |p| frames[p]);
            frames[i] = joint.frame(&parent, j.0[i]);
            out.extend(
                joint.spheres.iter().map(|s| Sphere { center: frames[i].transform_point(&s.center), radius: s.radius }),
            );
        }
        out
    }

    /// Part labels parallel to [`RobotModel::hand_sphere_centers`].
    pub fn hand_sphere_parts(&self) -> Vec<HandPart> {
        let mut out = vec![HandPart::Palm; self.palm_spheres.len()];
        for (i, joint) in self.hand.iter().enumerate() {
            let part = if i >= THUMB_ROT { HandPart::Thumb } else { HandPart::Finger(i) };
            out.extend(std::iter::repeat_n(part, joint.spheres.len()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Unit, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_arm(model: &RobotModel, rng: &mut impl Rng) -> ArmJoints {
        let mut q = ArmJoints::default();
        for (v, j) in q.0.iter_mut().zip(&model.arm) {
            *v = rng.random_range(j.lower..j.upper);
        }
        q
    }

    fn random_hand(model: &RobotModel, rng: &mut impl Rng) -> HandJoints {
        let mut h = HandJoints::default();
        for (v, j) in h.0.iter_mut().zip(&model.hand) {
            *v = rng.random_range(j.lower..j.upper);
        }
        h
    }

    /// Independent homogeneous-matrix chain using nalgebra's own axis-angle.
    fn hom(p: &Pose) -> Matrix4<f64> {
        p.to_homogeneous()
    }

    fn hom_rot(axis: &Vec3, angle: f64) -> Matrix4<f64> {
        nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).to_homogeneous()
    }

    fn oracle_arm_chain(model: &RobotModel, q: &ArmJoints) -> Vec<Matrix4<f64>> {
        let mut m = Matrix4::identity();
        model
            .arm
            .iter()
            .zip(q.0)
            .map(|(j, v)| {
                m = m * hom(&j.origin) * hom_rot(&j.axis, v);
                m
            })
            .collect()
    }

    fn apply(m: &Matrix4<f64>, p: &Vec3) -> Vec3 {
        let v = m * Vector4::new(p.x, p.y, p.z, 1.0);
        Vec3::new(v.x, v.y, v.z)
    }

    #[test]
    fn zero_pose_is_canonical() {
        let model = RobotModel::reference();
        let w = model.wrist_pose(&ArmJoints::default()).unwrap();
        assert!(w.max_abs_diff(&Pose::from_translation(Vec3::new(0.0, 0.0, 0.86))) < 1e-12);
    }

    #[test]
    fn first_joint_rotates_wrist_about_base() {
        let model = RobotModel::reference();
        let mut q = ArmJoints([0.0, 0.7, -0.4, 0.2, 0.5, 0.1]);
        let base = model.wrist_pose(&q).unwrap();
        q.0[0] = 0.9;
        let turned = model.wrist_pose(&q).unwrap();
        let expected = Rotation::rz(0.9).apply(&base.translation);
        assert!((turned.translation - expected).norm() < 1e-12);
    }

    #[test]
    fn wrist_matches_matrix_chain_oracle() {
        let model = RobotModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let q = random_arm(&model, &mut rng);
            let oracle = oracle_arm_chain(&model, &q)[5] * hom(&model.wrist);
            let w = model.wrist_pose(&q).unwrap();
            assert!((w.to_homogeneous() - oracle).abs().max() < 1e-9);
        }
    }

    #[test]
    fn limit_violation_names_joint() {
        let model = RobotModel::reference();
        let err = model.wrist_pose(&ArmJoints([0.0, 0.0, 3.0, 0.0, 0.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("elbow"), "{err}");
        let err = model.hand_sphere_centers(&Pose::identity(), &HandJoints([0.0, 0.0, 0.0, 0.0, 0.0, -0.1]));
        assert!(err.unwrap_err().to_string().contains("thumb_bend"));
    }

    #[test]
    fn hand_rest_pose_and_transport() {
        let model = RobotModel::reference();
        let rest = model.hand_sphere_centers(&Pose::identity(), &HandJoints::default()).unwrap();
        assert_eq!(rest.len(), 20);
        assert_eq!(rest[0].center, model.palm_spheres[0].center);
        // index fingertip sits 0.065 m above the finger base at rest
        assert!((rest[4 + 2].center - Vec3::new(0.0, 0.03, 0.17)).norm() < 1e-12);
        let t = Vec3::new(0.3, -0.2, 0.5);
        let moved = model.hand_sphere_centers(&Pose::from_translation(t), &HandJoints::default()).unwrap();
        for (a, b) in rest.iter().zip(&moved) {
            assert_eq!(b.center, a.center + t);
        }
    }

    #[test]
    fn hand_matches_per_chain_oracle() {
        let model = RobotModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let wrist = Pose::new(Rotation::about_axis(&Vec3::new(0.2, -1.0, 0.4), rng.random_range(0.0..3.0)), Vec3::new(0.1, 0.2, 0.3));
            let h = random_hand(&model, &mut rng);
            let got = model.hand_sphere_centers(&wrist, &h).unwrap();
            let w = hom(&wrist);
            let mut expected: Vec<Vec3> = model.palm_spheres.iter().map(|s| apply(&w, &s.center)).collect();
            let mut chains: Vec<Matrix4<f64>> = Vec::new();
            for (i, joint) in model.hand.iter().enumerate() {
                let parent = joint.parent.map_or(w, |p| chains[p]);
                chains.push(parent * hom(&joint.origin) * hom_rot(&joint.axis, h.0[i]));
                expected.extend(joint.spheres.iter().map(|s| apply(&chains[i], &s.center)));
            }
            for (g, e) in got.iter().zip(&expected) {
                assert!((g.center - e).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn arm_spheres_rest_symmetry_and_oracle() {
        let model = RobotModel::reference();
        let rest = model.arm_sphere_centers(&ArmJoints::default()).unwrap();
        assert_eq!(rest.len(), model.arm_sphere_count());
        assert!(rest.iter().all(|s| s.center.x.abs() < 1e-15 && s.center.y.abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q = random_arm(&model, &mut rng);
        let mut turned = q;
        turned.0[0] = (q.0[0] + 0.5).min(2.7);
        let d = turned.0[0] - q.0[0];
        let a = model.arm_sphere_centers(&q).unwrap();
        let b = model.arm_sphere_centers(&turned).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((Rotation::rz(d).apply(&x.center) - y.center).norm() < 1e-12);
        }
        for _ in 0..100 {
            let q = random_arm(&model, &mut rng);
            let chain = oracle_arm_chain(&model, &q);
            let mut expected: Vec<Vec3> = model.base_spheres.iter().map(|s| s.center).collect();
            for (j, m) in model.arm.iter().zip(&chain) {
                expected.extend(j.spheres.iter().map(|s| apply(m, &s.center)));
            }
            let got = model.arm_sphere_centers(&q).unwrap();
            for (g, e) in got.iter().zip(&expected) {
                assert!((g.center - e).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = RobotModel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let q = ArmJoints(random_arm(&model, &mut rng).0.map(|v| v * 0.5));
        let (jac, w0) = model.jacobian(&q);
        let h = 1e-6;
        for i in 0..ARM_DOF {
            let mut qp = q;
            qp.0[i] += h;
            let w1 = model.wrist_pose_unchecked(&qp);
            let lin = (w1.translation - w0.translation) / h;
            let ang = *w1.rotation.mul(&w0.rotation.transpose()).to_axis_angle().vector() / h;
            assert!((lin - jac.fixed_view::<3, 1>(0, i)).norm() < 1e-5);
            assert!((ang - jac.fixed_view::<3, 1>(3, i)).norm() < 1e-5);
        }
    }

    #[test]
    fn mirrored_model_reflects_fk() {
        let model = RobotModel::reference();
        let left = model.mirrored_y();
        let m = nalgebra::Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let q = random_arm(&model, &mut rng);
        let h = random_hand(&model, &mut rng);
        let w = model.wrist_pose(&q).unwrap();
        let wl = left.wrist_pose(&q).unwrap();
        assert!((m * w.rotation.matrix() * m - wl.rotation.matrix()).abs().max() < 1e-12);
        assert!((m * w.translation - wl.translation).norm() < 1e-12);
        let a = model.hand_sphere_centers(&w, &h).unwrap();
        let b = left.hand_sphere_centers(&wl, &h).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((m * x.center - y.center).norm() < 1e-12);
        }
    }

    #[test]
    fn parts_parallel_spheres() {
        let model = RobotModel::reference();
        let parts = model.hand_sphere_parts();
        assert_eq!(parts.len(), 20);
        assert_eq!(parts[4], HandPart::Finger(INDEX));
        assert_eq!(parts[19], HandPart::Thumb);
    }

    #[test]
    fn parse_errors_report_lines() {
        let bad = REFERENCE_ROBOT.replacen("limits = [-1.9, 1.9]", "limits = [1.9, -1.9]", 1);
        let line = bad.lines().position(|l| l.contains("[1.9, -1.9]")).unwrap() + 1;
        match RobotModel::from_toml_str(&bad) {
            Err(Error::Parse { line: l, message }) => {
                assert_eq!(l, line, "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let unknown = REFERENCE_ROBOT.replacen("name = \"reference\"", "name = \"reference\"\ncolour = 1", 1);
        match RobotModel::from_toml_str(&unknown) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, unknown.lines().position(|l| l.starts_with("colour")).unwrap() + 1),
            other => panic!("unexpected {other:?}"),
        }
        let radius = REFERENCE_ROBOT.replacen("[0, 0, 0, 0.012]", "[0, 0, 0, -0.012]", 1);
        assert!(matches!(RobotModel::from_toml_str(&radius), Err(Error::Parse { .. })));
    }
}
