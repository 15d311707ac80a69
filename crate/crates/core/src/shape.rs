//! Solid primitives (box, z-axis cylinder, sphere): signed distance, closest
//! point and ray intersection.

use serde::{Deserialize, Serialize};

use crate::geom::{Pose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Full extents along the local x, y, z axes.
    Box { size: [f64; 3] },
    /// Axis along local z, centered at the origin.
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    pub fn is_valid(&self) -> bool {
        match *self {
            Shape::Box { size } => size.iter().all(|&s| s > 0.0),
            Shape::Cylinder { radius, height } => radius > 0.0 && height > 0.0,
            Shape::Sphere { radius } => radius > 0.0,
        }
    }

    /// Distance from the local origin down to the lowest point (for resting on a plane).
    pub fn half_height(&self) -> f64 {
        match *self {
            Shape::Box { size } => size[2] / 2.0,
            Shape::Cylinder { height, .. } => height / 2.0,
            Shape::Sphere { radius } => radius,
        }
    }

    /// Signed distance from a point in the shape's local frame (negative inside).
    pub fn local_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Box { size } => {
                let q = Vec3::new(p.x.abs() - size[0] / 2.0, p.y.abs() - size[1] / 2.0, p.z.abs() - size[2] / 2.0);
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Cylinder { radius, height } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - height / 2.0;
                (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt() + dr.max(dz).min(0.0)
            }
            Shape::Sphere { radius } => p.norm() - radius,
        }
    }

    /// Closest point on the solid (the point itself when inside).
    pub fn local_closest(&self, p: &Vec3) -> Vec3 {
        match *self {
            Shape::Box { size } => Vec3::new(
                p.x.clamp(-size[0] / 2.0, size[0] / 2.0),
                p.y.clamp(-size[1] / 2.0, size[1] / 2.0),
                p.z.clamp(-size[2] / 2.0, size[2] / 2.0),
            ),
            Shape::Cylinder { radius, height } => {
                let r = (p.x * p.x + p.y * p.y).sqrt();
                let s = if r > radius { radius / r } else { 1.0 };
                Vec3::new(p.x * s, p.y * s, p.z.clamp(-height / 2.0, height / 2.0))
            }
            Shape::Sphere { radius } => {
                let n = p.norm();
                if n > radius {
                    p * (radius / n)
                } else {
                    *p
                }
            }
        }
    }

    /// Nearest intersection with `t > 0` of a local-frame ray, with the outward normal.
    pub fn local_ray(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Shape::Box { size } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut n0 = Vec3::zeros();
                for i in 0..3 {
                    let h = size[i] / 2.0;
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((-h - o[i]) / d[i], (h - o[i]) / d[i]);
                    let mut sign = -1.0;
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                        sign = 1.0;
                    }
                    if a > t0 {
                        t0 = a;
                        n0 = Vec3::zeros();
                        n0[i] = sign;
                    }
                    t1 = t1.min(b);
                }
                (t0 <= t1 && t0 > 0.0).then_some((t0, n0))
            }
            Shape::Cylinder { radius, height } => {
                let hh = height / 2.0;
                let mut best: Option<(f64, Vec3)> = None;
                let mut consider = |t: f64, n: Vec3| {
                    if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, n));
                    }
                };
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-15 {
                    let b = o.x * d.x + o.y * d.y;
                    let c = o.x * o.x + o.y * o.y - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let z = o.z + t * d.z;
                        if z.abs() <= hh {
                            let p = o + d * t;
                            consider(t, Vec3::new(p.x, p.y, 0.0) / radius);
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for (cap, nz) in [(hh, 1.0), (-hh, -1.0)] {
                        let t = (cap - o.z) / d.z;
                        let p = o + d * t;
                        if p.x * p.x + p.y * p.y <= radius * radius && d.z * nz < 0.0 {
                            consider(t, Vec3::new(0.0, 0.0, nz));
                        }
                    }
                }
                best
            }
            Shape::Sphere { radius } => ray_sphere(o, d, &Vec3::zeros(), radius),
        }
    }
}

/// Ray against a sphere at `c`; `d` must be unit length.
pub fn ray_sphere(o: &Vec3, d: &Vec3, c: &Vec3, radius: f64) -> Option<(f64, Vec3)> {
    let oc = o - c;
    let b = oc.dot(d);
    let cc = oc.norm_squared() - radius * radius;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then(|| (t, (oc + d * t) / radius))
}

/// A shape placed in the world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub pose: Pose,
}

impl Primitive {
    pub fn new(shape: Shape, pose: Pose) -> Self {
        Primitive { shape, pose }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.shape.local_distance(&self.pose.inverse().transform_point(p))
    }

    pub fn closest_point(&self, p: &Vec3) -> Vec3 {
        let inv = self.pose.inverse();
        self.pose.transform_point(&self.shape.local_closest(&inv.transform_point(p)))
    }

    /// Outward direction from the surface toward `p` (for contact normals).
    pub fn normal_toward(&self, p: &Vec3) -> Vec3 {
        let h = 1e-6;
        let grad = Vec3::new(
            self.distance(&(p + Vec3::x() * h)) - self.distance(&(p - Vec3::x() * h)),
            self.distance(&(p + Vec3::y() * h)) - self.distance(&(p - Vec3::y() * h)),
            self.distance(&(p + Vec3::z() * h)) - self.distance(&(p - Vec3::z() * h)),
        );
        let n = grad.norm();
        if n > 0.0 {
            grad / n
        } else {
            Vec3::z()
        }
    }

    /// World-frame ray intersection; `d` must be unit length.
    pub fn ray(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        let inv = self.pose.inverse();
        let lo = inv.transform_point(o);
        let ld = inv.rotation.apply(d);
        self.shape.local_ray(&lo, &ld).map(|(t, n)| (t, self.pose.rotation.apply(&n)))
    }

    /// Corners of a local axis-aligned bounding box, in world coordinates.
    pub fn bounding_corners(&self) -> [Vec3; 8] {
        let e = match self.shape {
            Shape::Box { size } => Vec3::new(size[0], size[1], size[2]) / 2.0,
            Shape::Cylinder { radius, height } => Vec3::new(radius, radius, height / 2.0),
            Shape::Sphere { radius } => Vec3::new(radius, radius, radius),
        };
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let s = Vec3::new(
                if i & 1 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 4 == 0 { -1.0 } else { 1.0 },
            );
            *c = self.pose.transform_point(&e.component_mul(&s));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shapes() -> Vec<Primitive> {
        vec![
            Primitive::new(Shape::Box { size: [0.2, 0.1, 0.3] }, Pose::new(Rotation::rz(0.4), Vec3::new(0.1, 0.0, 0.2))),
            Primitive::new(
                Shape::Cylinder { radius: 0.05, height: 0.2 },
                Pose::new(Rotation::rx(0.3), Vec3::new(0.0, 0.1, 0.0)),
            ),
            Primitive::new(Shape::Sphere { radius: 0.07 }, Pose::from_translation(Vec3::new(-0.1, 0.0, 0.05))),
        ]
    }

    #[test]
    fn distance_agrees_with_closest_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for prim in shapes() {
            for _ in 0..2000 {
                let p = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
                let d = prim.distance(&p);
                let c = prim.closest_point(&p);
                if d > 0.0 {
                    assert!(((p - c).norm() - d).abs() < 1e-9, "{prim:?} {p:?}");
                } else {
                    assert!((p - c).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ray_hits_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for prim in shapes() {
            let mut hits = 0;
            for _ in 0..2000 {
                let o = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
                let target = prim.pose.translation
                    + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                let d = (target - o).normalize();
                if let Some((t, n)) = prim.ray(&o, &d) {
                    hits += 1;
                    let p = o + d * t;
                    assert!(prim.distance(&p).abs() < 1e-9);
                    assert!(n.dot(&d) <= 1e-9);
                    // nothing closer along the ray is inside
                    assert!(prim.distance(&(o + d * (t * 0.999))) > -1e-9);
                } else {
                    // a miss never passes through the interior
                    for k in 0..200 {
                        assert!(prim.distance(&(o + d * (k as f64 * 0.02))) > -1e-9);
                    }
                }
            }
            assert!(hits > 100);
        }
    }

    #[test]
    fn validity() {
        assert!(Shape::Box { size: [1.0, 1.0, 1.0] }.is_valid());
        assert!(!Shape::Cylinder { radius: 0.0, height: 1.0 }.is_valid());
        assert!(!Shape::Sphere { radius: -1.0 }.is_valid());
    }
}
