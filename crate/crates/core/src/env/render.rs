//! Ray-cast renderer for the primitive world: Lambertian shading from a fixed
//! light, a z-buffer, an entity-id buffer and procedural backgrounds.
//!
//! Pixels are evaluated independently, so a [`SceneView`] can serve as a lazy
//! [`PixelSource`]: cropping touches only the pixels it samples, and those are
//! identical to the ones a full render produces.

use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::sim::WorldState;
use crate::camera::{Camera, Image, PixelSource, StereoRig};
use crate::geom::Vec3;
use crate::shape::{ray_sphere, Primitive};

pub const ENTITY_BACKGROUND: u8 = 0;
pub const ENTITY_TABLE: u8 = 1;
pub const ENTITY_OBJECT: u8 = 2;
pub const ENTITY_FIXTURE: u8 = 3;
/// Arm of robot `i` is `ENTITY_ARM + 2 i`; its hand is one above.
pub const ENTITY_ARM: u8 = 4;

pub fn arm_entity(arm: usize) -> u8 {
    ENTITY_ARM + 2 * arm as u8
}

pub fn hand_entity(arm: usize) -> u8 {
    arm_entity(arm) + 1
}

const TABLE_COLOR: [u8; 3] = [150, 118, 86];
const STAND_COLOR: [u8; 3] = [110, 110, 100];
const ARM_COLOR: [u8; 3] = [125, 128, 140];
const HAND_COLOR: [u8; 3] = [228, 228, 232];
const AMBIENT: f64 = 0.35;

fn light_dir() -> Vec3 {
    Vec3::new(0.3, -0.2, 1.0).normalize()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackgroundVariant {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "checker")]
    Checker,
    #[serde(rename = "textured-1")]
    Textured1,
    #[serde(rename = "textured-2")]
    Textured2,
}

impl BackgroundVariant {
    pub fn name(self) -> &'static str {
        match self {
            BackgroundVariant::Plain => "plain",
            BackgroundVariant::Checker => "checker",
            BackgroundVariant::Textured1 => "textured-1",
            BackgroundVariant::Textured2 => "textured-2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Plain, Self::Checker, Self::Textured1, Self::Textured2].into_iter().find(|v| v.name() == s)
    }
}

/// What fills pixels whose rays hit nothing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    pub variant: BackgroundVariant,
    pub base: [u8; 3],
}

impl Default for Background {
    fn default() -> Self {
        Background { variant: BackgroundVariant::Plain, base: [196, 202, 208] }
    }
}

fn hash2(x: u32, y: u32, salt: u32) -> u32 {
    let mut h = x.wrapping_mul(0x9e37_79b1) ^ y.wrapping_mul(0x85eb_ca77) ^ salt.wrapping_mul(0xc2b2_ae3d);
    h ^= h >> 15;
    h = h.wrapping_mul(0x2c1b_3c6d);
    h ^= h >> 12;
    h
}

fn scale(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * f).round().clamp(0.0, 255.0) as u8)
}

impl Background {
    pub fn new(variant: BackgroundVariant) -> Self {
        Background { variant, ..Background::default() }
    }

    pub fn color(&self, x: u32, y: u32) -> [u8; 3] {
        match self.variant {
            BackgroundVariant::Plain => self.base,
            BackgroundVariant::Checker => {
                if ((x / 40) + (y / 40)).is_multiple_of(2) {
                    scale(self.base, 0.35)
                } else {
                    self.base
                }
            }
            BackgroundVariant::Textured1 => {
                // diagonal stripes with per-block noise
                let stripe = ((x + 2 * y) / 24) % 3;
                let noise = (hash2(x / 6, y / 6, 1) % 64) as f64 / 255.0;
                let tint = [[0.9, 0.4, 0.3], [0.3, 0.7, 0.4], [0.4, 0.4, 0.9]][stripe as usize];
                let mut c = [0u8; 3];
                for i in 0..3 {
                    c[i] = ((self.base[i] as f64 * tint[i]) + noise * 255.0 * 0.5).round().clamp(0.0, 255.0) as u8;
                }
                c
            }
            BackgroundVariant::Textured2 => {
                // blotchy value noise over a dark base
                let cell = |cx: u32, cy: u32| (hash2(cx, cy, 2) % 256) as f64 / 255.0;
                let (fx, fy) = ((x % 32) as f64 / 32.0, (y % 32) as f64 / 32.0);
                let (cx, cy) = (x / 32, y / 32);
                let v = cell(cx, cy) * (1.0 - fx) * (1.0 - fy)
                    + cell(cx + 1, cy) * fx * (1.0 - fy)
                    + cell(cx, cy + 1) * (1.0 - fx) * fy
                    + cell(cx + 1, cy + 1) * fx * fy;
                [(40.0 + 180.0 * v) as u8, (90.0 + 60.0 * (1.0 - v)) as u8, (30.0 + 120.0 * v * v) as u8]
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Geometry {
    Solid(Primitive),
    Ball { center: Vec3, radius: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Item {
    geometry: Geometry,
    entity: u8,
    color: [u8; 3],
    /// Inclusive screen bounds; every pixel the item can cover lies inside.
    bounds: [i64; 4],
}

/// Result of tracing one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub rgb: [u8; 3],
    pub entity: u8,
    /// Camera-frame depth of the visible surface; infinite for background.
    pub depth: f64,
}

/// Everything one camera sees in one world state, ready for per-pixel queries.
pub struct SceneView<'a> {
    camera: Camera,
    background: &'a super::render::Background,
    items: Vec<Item>,
}

/// World-frame primitives of a state, tagged with entity id and color.
fn scene_geometry(scene: &Scene, state: &WorldState) -> Vec<(Geometry, u8, [u8; 3])> {
    let mut out = vec![
        (Geometry::Solid(scene.table), ENTITY_TABLE, TABLE_COLOR),
        (Geometry::Solid(Primitive::new(scene.object.shape, state.object)), ENTITY_OBJECT, scene.task.color),
    ];
    if let Some(stand) = scene.stand {
        out.push((Geometry::Solid(stand), ENTITY_FIXTURE, STAND_COLOR));
    }
    for (i, (mount, arm)) in scene.arms.iter().zip(&state.arms).enumerate() {
        for s in mount.model.arm_sphere_centers_unchecked(&arm.q) {
            let c = mount.base.transform_point(&s.center);
            out.push((Geometry::Ball { center: c, radius: s.radius }, arm_entity(i), ARM_COLOR));
        }
        let wrist = mount.base.compose(&mount.model.wrist_pose_unchecked(&arm.q));
        for s in mount.model.hand_sphere_centers_unchecked(&wrist, &arm.j) {
            out.push((Geometry::Ball { center: s.center, radius: s.radius }, hand_entity(i), HAND_COLOR));
        }
    }
    out
}

impl<'a> SceneView<'a> {
    /// `camera` is expressed in the world frame (the right arm's base frame).
    pub fn new(scene: &'a Scene, state: &WorldState, camera: &Camera) -> Self {
        let k = &camera.intrinsics;
        let full = [0, 0, k.width as i64 - 1, k.height as i64 - 1];
        let items = scene_geometry(scene, state)
            .into_iter()
            .filter_map(|(geometry, entity, color)| {
                let corners: Vec<Vec3> = match geometry {
                    Geometry::Solid(p) => p.bounding_corners().to_vec(),
                    Geometry::Ball { center, radius } => (0..8)
                        .map(|i| {
                            let s = |b: usize| if i & b == 0 { -radius } else { radius };
                            center + Vec3::new(s(1), s(2), s(4))
                        })
                        .collect(),
                };
                let px: Vec<_> = corners.iter().map(|c| camera.project(c)).collect();
                let bounds = if px.iter().all(|p| p.in_front) {
                    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                    for p in &px {
                        x0 = x0.min(p.u);
                        y0 = y0.min(p.v);
                        x1 = x1.max(p.u);
                        y1 = y1.max(p.v);
                    }
                    let b = [x0.floor() as i64 - 1, y0.floor() as i64 - 1, x1.ceil() as i64 + 1, y1.ceil() as i64 + 1];
                    if b[2] < 0 || b[3] < 0 || b[0] > full[2] || b[1] > full[3] {
                        return None;
                    }
                    b
                } else {
                    full
                };
                Some(Item { geometry, entity, color, bounds })
            })
            .collect();
        SceneView { camera: *camera, background: scene.background(), items }
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn trace(&self, x: u32, y: u32) -> Hit {
        let (o, d) = self.camera.ray(x as f64, y as f64);
        let (xi, yi) = (x as i64, y as i64);
        let mut best: Option<(f64, Vec3, &Item)> = None;
        for item in &self.items {
            let b = item.bounds;
            if xi < b[0] || xi > b[2] || yi < b[1] || yi > b[3] {
                continue;
            }
            let hit = match item.geometry {
                Geometry::Solid(p) => p.ray(&o, &d),
                Geometry::Ball { center, radius } => ray_sphere(&o, &d, &center, radius),
            };
            if let Some((t, n)) = hit {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, n, item));
                }
            }
        }
        match best {
            None => Hit { rgb: self.background.color(x, y), entity: ENTITY_BACKGROUND, depth: f64::INFINITY },
            Some((t, n, item)) => {
                let shade = AMBIENT + (1.0 - AMBIENT) * n.dot(&light_dir()).max(0.0);
                let depth = self.camera.extrinsic.transform_point(&(o + d * t)).z;
                Hit { rgb: scale(item.color, shade), entity: item.entity, depth }
            }
        }
    }
}

impl PixelSource for SceneView<'_> {
    fn size(&self) -> (u32, u32) {
        (self.camera.intrinsics.width, self.camera.intrinsics.height)
    }

    fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.trace(x, y).rgb
    }
}

/// A fully rendered camera image with its per-pixel entity ids and depths.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    pub ids: Vec<u8>,
    pub depth: Vec<f32>,
}

impl Frame {
    pub fn id(&self, x: u32, y: u32) -> u8 {
        self.ids[(y * self.image.width + x) as usize]
    }

    pub fn count(&self, entity: u8) -> usize {
        self.ids.iter().filter(|&&e| e == entity).count()
    }
}

pub fn render_view(view: &SceneView<'_>) -> Frame {
    let (w, h) = view.size();
    let mut image = Image::new(w, h);
    let mut ids = Vec::with_capacity((w * h) as usize);
    let mut depth = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let hit = view.trace(x, y);
            image.set(x, y, hit.rgb);
            ids.push(hit.entity);
            depth.push(hit.depth as f32);
        }
    }
    Frame { image, ids, depth }
}

/// Renders both cameras of the rig (world frame).
pub fn render(scene: &Scene, rig: &StereoRig, state: &WorldState) -> (Frame, Frame) {
    (render_view(&SceneView::new(scene, state, &rig.left)), render_view(&SceneView::new(scene, state, &rig.right)))
}
