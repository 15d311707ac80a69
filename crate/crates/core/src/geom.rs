//! Rigid-body algebra: rotations, poses and axis-angle vectors.
//!
//! Everything here is plain `f64` value types. Poses follow the homogeneous
//! convention `p_parent = R * p_child + t`, so `a.compose(&b)` is the matrix
//! product `A * B`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3};

pub type Vec3 = Vector3<f64>;

/// Below this angle the axis-angle maps switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-6;

/// A rotation matrix in SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix that is already orthonormal with determinant +1.
    ///
    /// Returns `None` when `RᵀR = I` or `det R = 1` fails by more than `tol`.
    pub fn from_matrix(m: Matrix3<f64>, tol: f64) -> Option<Self> {
        let r = Rotation(m);
        (r.orthonormality_error() <= tol && (m.determinant() - 1.0).abs() <= tol).then_some(r)
    }

    /// Projects an arbitrary (nearly orthonormal) matrix onto SO(3).
    ///
    /// Used when poses come back from 32-bit storage.
    pub fn from_matrix_projected(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    pub fn from_axis_angle(v: AxisAngle) -> Self {
        exp_so3(&v.0)
    }

    /// Rotation of `angle` radians about a (not necessarily unit) axis.
    pub fn about_axis(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        exp_so3(&(axis * (angle / n)))
    }

    pub fn rx(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn ry(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rz(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Builds the rotation whose columns are the given frame axes.
    pub fn from_columns(x: &Vec3, y: &Vec3, z: &Vec3) -> Self {
        Rotation(Matrix3::from_columns(&[*x, *y, *z]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn mul(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn to_axis_angle(&self) -> AxisAngle {
        AxisAngle::new(log_so3(&self.0))
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        log_so3(&self.0).norm()
    }

    /// Largest elementwise deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }
}

/// Applies a body-frame offset to a base orientation: `base · delta`.
pub fn rot_update(base: &Rotation, delta: &Rotation) -> Rotation {
    base.mul(delta)
}

/// Left-multiplied variant of [`rot_update`]: `delta · base` (offset in the parent frame).
pub fn rot_update_world(base: &Rotation, delta: &Rotation) -> Rotation {
    delta.mul(base)
}

/// Rotation vector: unit axis scaled by the angle, with the angle in `[0, π]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(Vec3);

impl AxisAngle {
    /// Canonicalizes so the magnitude lies in `[0, π]`; at exactly `π` the axis
    /// is flipped so its first nonzero component is positive.
    pub fn new(v: Vec3) -> Self {
        let theta = v.norm();
        if theta == 0.0 || !theta.is_finite() {
            return AxisAngle(v);
        }
        let axis = v / theta;
        let mut wrapped = theta % (2.0 * PI);
        let mut axis = axis;
        if wrapped > PI {
            wrapped = 2.0 * PI - wrapped;
            axis = -axis;
        }
        if (wrapped - PI).abs() < 1e-12 {
            wrapped = PI;
            axis = canonical_axis_sign(axis);
        }
        AxisAngle(axis * wrapped)
    }

    pub fn zero() -> Self {
        AxisAngle(Vec3::zeros())
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(Vec3::new(v[0], v[1], v[2]))
    }

    pub fn vector(&self) -> &Vec3 {
        &self.0
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }
}

fn canonical_axis_sign(axis: Vec3) -> Vec3 {
    for i in 0..3 {
        if axis[i].abs() > 1e-12 {
            return if axis[i] < 0.0 { -axis } else { axis };
        }
    }
    axis
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn exp_so3(w: &Vec3) -> Rotation {
    let theta = w.norm();
    let k = skew(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

fn log_so3(r: &Matrix3<f64>) -> Vec3 {
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin_theta = 0.5 * vee.norm();
    let cos_theta = 0.5 * (r.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);
    if theta < SMALL_ANGLE {
        return vee * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if PI - theta > 1e-3 {
        return vee * (theta / (2.0 * sin_theta));
    }
    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part cosθ·I + (1 − cosθ)·aaᵀ.
    let b = ((r + r.transpose()) * 0.5 - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let mut i = 0;
    for j in 1..3 {
        if b[(j, j)] > b[(i, i)] {
            i = j;
        }
    }
    let ai = b[(i, i)].max(0.0).sqrt();
    let mut axis = Vec3::zeros();
    axis[i] = ai;
    for j in 0..3 {
        if j != i {
            axis[j] = b[(i, j)] / ai;
        }
    }
    axis.normalize_mut();
    if vee.dot(&axis) < 0.0 {
        axis = -axis;
    }
    if sin_theta < 1e-12 {
        axis = canonical_axis_sign(axis);
    }
    axis * theta
}

/// A rigid transform: rotation followed by translation (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Pose::new(r, Vec3::zeros())
    }

    /// `self * other` as homogeneous matrices.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.mul(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -rt.apply(&self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major rotation followed by the translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = self.rotation.matrix();
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    /// Inverse of [`Pose::to_array`]. The rotation block is projected onto SO(3).
    pub fn from_array(a: &[f64; 12]) -> Pose {
        let m = Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        let rotation = match Rotation::from_matrix(m, 1e-12) {
            Some(r) => r,
            None => Rotation::from_matrix_projected(m),
        };
        Pose::new(rotation, Vec3::new(a[9], a[10], a[11]))
    }

    /// Serializes as 12 little-endian `f64`s.
    pub fn to_le_bytes(&self) -> [u8; 96] {
        let mut out = [0u8; 96];
        for (i, v) in self.to_array().iter().enumerate() {
            out[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8; 96]) -> Pose {
        let mut a = [0.0; 12];
        for (i, v) in a.iter_mut().enumerate() {
            *v = f64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
        }
        Pose::from_array(&a)
    }

    /// Largest elementwise difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).abs().max()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rotation.to_axis_angle();
        let t = &self.translation;
        write!(
            f,
            "t=({:.4}, {:.4}, {:.4}) w=({:.4}, {:.4}, {:.4})",
            t.x, t.y, t.z, w.0.x, w.0.y, w.0.z
        )
    }
}

/// Pose of `target` relative to `reference`, with base-frame deltas:
/// `Δp = t_target − t_ref` and `Δω = log(R_target · R_refᵀ)`.
pub fn relative_pose(reference: &Pose, target: &Pose) -> (Vec3, AxisAngle) {
    let dp = target.translation - reference.translation;
    let dr = target.rotation.mul(&reference.rotation.transpose());
    (dp, dr.to_axis_angle())
}

/// Inverse of [`relative_pose`].
pub fn apply_relative(reference: &Pose, delta_p: &Vec3, delta_omega: &AxisAngle) -> Pose {
    Pose {
        rotation: Rotation::from_axis_angle(*delta_omega).mul(&reference.rotation),
        translation: reference.translation + delta_p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Rotation {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Rotation::about_axis(&axis, rng.random_range(0.0..max_angle))
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        Pose::new(random_rotation(rng, PI), t)
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        assert!(Pose::identity().compose(&p).max_abs_diff(&p) == 0.0);
        assert!(p.compose(&p.inverse()).max_abs_diff(&Pose::identity()) < 1e-9);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = Pose::new(Rotation::rz(PI / 2.0), Vec3::new(1.0, 0.0, 0.0));
        let b = Pose::new(Rotation::rx(PI / 2.0), Vec3::new(0.0, 1.0, 0.0));
        let expected = a.to_homogeneous() * b.to_homogeneous();
        assert!((a.compose(&b).to_homogeneous() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn inverse_of_translation_negates() {
        let t = Pose::from_translation(Vec3::new(0.3, -1.0, 2.0));
        assert_eq!(t.inverse().translation, Vec3::new(-0.3, 1.0, -2.0));
        assert_eq!(Pose::identity().inverse(), Pose::identity());
    }

    #[test]
    fn inverse_matches_matrix_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_pose(&mut rng);
        let oracle = p.to_homogeneous().try_inverse().unwrap();
        assert!((p.inverse().to_homogeneous() - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn rot_update_cases() {
        let r = Rotation::rx(0.4);
        assert_eq!(rot_update(&r, &Rotation::identity()), r);
        assert_eq!(rot_update(&Rotation::identity(), &r), r);
        let sum = rot_update(&Rotation::rz(30f64.to_radians()), &Rotation::rz(40f64.to_radians()));
        assert!((sum.matrix() - Rotation::rz(70f64.to_radians()).matrix()).abs().max() < 1e-9);
    }

    #[test]
    fn rot_update_is_body_frame() {
        let base = Rotation::rz(PI / 2.0);
        let delta = Rotation::rx(0.3);
        let body = rot_update(&base, &delta);
        let world = rot_update_world(&base, &delta);
        assert!((body.matrix() - base.matrix() * delta.matrix()).abs().max() < 1e-15);
        assert!((world.matrix() - delta.matrix() * base.matrix()).abs().max() < 1e-15);
        assert!((body.matrix() - world.matrix()).abs().max() > 1e-3);
    }

    #[test]
    fn axis_angle_basics() {
        assert_eq!(Rotation::identity().to_axis_angle().to_array(), [0.0, 0.0, 0.0]);
        let r = Rotation::from_axis_angle(AxisAngle::from_array([0.0, 0.0, PI / 2.0]));
        assert!((r.matrix() - Rotation::rz(PI / 2.0).matrix()).abs().max() < 1e-15);
    }

    #[test]
    fn axis_angle_canonicalization() {
        let a = AxisAngle::new(Vec3::new(0.0, 0.0, 1.5 * PI));
        assert!((a.vector() - Vec3::new(0.0, 0.0, -0.5 * PI)).norm() < 1e-12);
        let at_pi = AxisAngle::new(Vec3::new(0.0, -PI, 0.0));
        assert!((at_pi.vector() - Vec3::new(0.0, PI, 0.0)).norm() < 1e-12);
        // log at exactly π also lands on the canonical sign
        let w = Rotation::rx(PI).to_axis_angle();
        assert!((w.vector() - Vec3::new(PI, 0.0, 0.0)).norm() < 1e-9);
        let w = Rotation::about_axis(&Vec3::new(-1.0, 1.0, 0.0), PI).to_axis_angle();
        assert!(w.vector().x > 0.0 && (w.angle() - PI).abs() < 1e-9);
    }

    #[test]
    fn axis_angle_round_trip_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let r = random_rotation(&mut rng, 3.0);
            let back = Rotation::from_axis_angle(r.to_axis_angle());
            worst = worst.max((back.matrix() - r.matrix()).abs().max());
        }
        assert!(worst < 1e-7, "worst {worst}");
    }

    #[test]
    fn axis_angle_near_pi_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let r = Rotation::about_axis(&axis, PI - rng.random_range(0.0..2e-3));
            let back = Rotation::from_axis_angle(r.to_axis_angle());
            assert!((back.matrix() - r.matrix()).abs().max() < 1e-7);
        }
    }

    #[test]
    fn relative_pose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pose(&mut rng);
        let (dp, dw) = relative_pose(&p, &p);
        assert!(dp.norm() == 0.0 && dw.angle() < 1e-12);
        let (dp, dw) = relative_pose(&Pose::identity(), &Pose::from_translation(Vec3::new(1.0, 2.0, 3.0)));
        assert_eq!(dp, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(dw.angle(), 0.0);
    }

    #[test]
    fn apply_relative_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pose(&mut rng);
        assert_eq!(apply_relative(&p, &Vec3::zeros(), &AxisAngle::zero()), p);
        let q = apply_relative(&Pose::identity(), &Vec3::new(1.0, 0.0, 0.0), &AxisAngle::from_array([0.0, 0.0, PI]));
        assert_eq!(q.translation, Vec3::new(1.0, 0.0, 0.0));
        assert!((q.rotation.matrix() - Rotation::rz(PI).matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng);
        assert_eq!(Pose::from_le_bytes(&p.to_le_bytes()), p);
    }

    #[test]
    fn projection_restores_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = random_rotation(&mut rng, PI);
        let noisy = r.matrix().map(|v| v as f32 as f64);
        let fixed = Rotation::from_matrix_projected(noisy);
        assert!(fixed.orthonormality_error() < 1e-12);
        assert!((fixed.matrix().determinant() - 1.0).abs() < 1e-12);
        assert!((fixed.matrix() - r.matrix()).abs().max() < 1e-6);
    }
}
