//! Simulated perception: object masks from the renderer's id buffer, pose
//! estimates with injected noise, and category-based pre-manipulation poses.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::env::render::{SceneView, ENTITY_OBJECT};
use crate::env::scene::Scene;
use crate::env::sim::WorldState;
use crate::env::tasks::{nominal_geometry, Category, Side};
use crate::error::{Error, Result};
use crate::geom::{rot_update, AxisAngle, Pose, Rotation, Vec3};
use crate::shape::Shape;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub name: String,
    pub category: Category,
    pub shape: Shape,
    pub true_pose: Pose,
}

impl ObjectInstance {
    pub fn new(name: &str, category: Category, shape: Shape, true_pose: Pose) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::Config(format!("object `{name}` has non-positive dimensions")));
        }
        if !category.accepts(&shape) {
            return Err(Error::Config(format!("object `{name}`: shape {shape:?} does not fit {}", category.name())));
        }
        Ok(ObjectInstance { name: name.to_string(), category, shape, true_pose })
    }
}

/// Per-pixel boolean segmentation, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    /// Writes the mask as a 1-bit grayscale PNG.
    pub fn write_png(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width, self.height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let row_bytes = self.width.div_ceil(8) as usize;
        let mut data = vec![0u8; row_bytes * self.height as usize];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    data[y as usize * row_bytes + (x / 8) as usize] |= 0x80 >> (x % 8);
                }
            }
        }
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut w = enc.write_header().map_err(to_io)?;
        w.write_image_data(&data).map_err(to_io)?;
        w.finish().map_err(to_io)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub translation_sigma: f64,
    pub rotation_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { translation_sigma: 0.005, rotation_sigma: 0.02, seed: 0 }
    }
}

impl NoiseModel {
    pub fn exact() -> Self {
        NoiseModel { translation_sigma: 0.0, rotation_sigma: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.translation_sigma >= 0.0 && self.rotation_sigma >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("noise sigmas must be non-negative: {self:?}")))
        }
    }

    /// Gaussian translation per axis; rotation by a Gaussian angle about a
    /// uniformly random axis, applied in the world frame.
    pub fn perturb(&self, pose: &Pose, rng: &mut impl Rng) -> Pose {
        if self.translation_sigma == 0.0 && self.rotation_sigma == 0.0 {
            return *pose;
        }
        let dt = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * self.translation_sigma;
        let axis = loop {
            let v = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            if v.norm() > 1e-9 {
                break v.normalize();
            }
        };
        let angle = Normal::new(0.0, self.rotation_sigma).expect("sigma is non-negative").sample(rng);
        let dr = Rotation::about_axis(&axis, angle);
        Pose::new(dr.mul(&pose.rotation), pose.translation + dt)
    }
}

/// Finds the named object: exact mask from the id buffer of `camera`
/// (world frame), pose from ground truth plus noise.
pub fn locate_object(
    scene: &Scene,
    state: &WorldState,
    camera: &Camera,
    name: &str,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<PoseEstimate> {
    if scene.object.name != name {
        return Err(Error::NotFound(name.to_string()));
    }
    noise.validate()?;
    let view = SceneView::new(scene, state, camera);
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut bits = vec![false; (w * h) as usize];
    // Pixels outside the object's projected bounds can never show it.
    let (x0, y0, x1, y1) = object_bounds(scene, state, camera);
    for y in y0..=y1 {
        for x in x0..=x1 {
            bits[(y * w + x) as usize] = view.trace(x, y).entity == ENTITY_OBJECT;
        }
    }
    let mask = Mask { width: w, height: h, bits };
    if mask.count() == 0 {
        return Err(Error::Occluded(name.to_string()));
    }
    Ok(PoseEstimate { pose: noise.perturb(&state.object, rng), mask })
}

fn object_bounds(scene: &Scene, state: &WorldState, camera: &Camera) -> (u32, u32, u32, u32) {
    let k = &camera.intrinsics;
    let prim = crate::shape::Primitive::new(scene.object.shape, state.object);
    let px: Vec<_> = prim.bounding_corners().iter().map(|c| camera.project(c)).collect();
    if !px.iter().all(|p| p.in_front) {
        return (0, 0, k.width - 1, k.height - 1);
    }
    let clamp_x = |v: f64| v.clamp(0.0, (k.width - 1) as f64) as u32;
    let clamp_y = |v: f64| v.clamp(0.0, (k.height - 1) as f64) as u32;
    let x0 = px.iter().map(|p| p.u).fold(f64::MAX, f64::min).floor() - 1.0;
    let x1 = px.iter().map(|p| p.u).fold(f64::MIN, f64::max).ceil() + 1.0;
    let y0 = px.iter().map(|p| p.v).fold(f64::MAX, f64::min).floor() - 1.0;
    let y1 = px.iter().map(|p| p.v).fold(f64::MIN, f64::max).ceil() + 1.0;
    (clamp_x(x0), clamp_y(y0), clamp_x(x1), clamp_y(y1))
}

/// Whether the translation offset rotates with the object or is added in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffsetFrame {
    #[default]
    Object,
    World,
}

/// Category offsets (rotation, translation) from object pose to pre-manipulation pose.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryOffsetTable {
    pub entries: BTreeMap<Category, (Rotation, Vec3)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOffset {
    category: Category,
    /// Axis-angle (rad).
    rotation: [f64; 3],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    offsets: Vec<RawOffset>,
}

impl CategoryOffsetTable {
    /// Offsets for one hand derived from the nominal grasp geometry of each category.
    pub fn for_side(side: Side) -> Self {
        let entries = Category::ALL
            .iter()
            .map(|&c| {
                let g = nominal_geometry(c.template(), side);
                (c, (g.rotation, g.pre_offset()))
            })
            .collect();
        CategoryOffsetTable { entries }
    }

    pub fn get(&self, category: Category) -> Result<&(Rotation, Vec3)> {
        self.entries.get(&category).ok_or_else(|| Error::Config(format!("no offset for category {}", category.name())))
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        let raw: RawTable = toml::from_str(src).map_err(|e| Error::from_toml(src, &e))?;
        let mut entries = BTreeMap::new();
        for o in raw.offsets {
            let r = Rotation::from_axis_angle(AxisAngle::from_array(o.rotation));
            if entries.insert(o.category, (r, Vec3::from(o.translation))).is_some() {
                return Err(Error::Config(format!("duplicate offset for {}", o.category.name())));
            }
        }
        if let Some(c) = Category::ALL.iter().find(|c| !entries.contains_key(c)) {
            return Err(Error::Config(format!("missing offset for {}", c.name())));
        }
        Ok(CategoryOffsetTable { entries })
    }

    pub fn to_toml_string(&self) -> String {
        let offsets = self
            .entries
            .iter()
            .map(|(c, (r, t))| RawOffset { category: *c, rotation: r.to_axis_angle().to_array(), translation: (*t).into() })
            .collect();
        toml::to_string(&RawTable { offsets }).expect("offset table serializes")
    }
}

/// Pre-manipulation pose from an object pose estimate:
/// rotation `R_o · ΔR`; translation `t_o + R_o Δt` (object frame) or `t_o + Δt` (world frame).
pub fn pre_manipulation_pose(
    estimate: &Pose,
    table: &CategoryOffsetTable,
    category: Category,
    frame: OffsetFrame,
) -> Result<Pose> {
    let (dr, dt) = table.get(category)?;
    let offset = match frame {
        OffsetFrame::Object => estimate.rotation.apply(dt),
        OffsetFrame::World => *dt,
    };
    Ok(Pose::new(rot_update(&estimate.rotation, dr), estimate.translation + offset))
}
