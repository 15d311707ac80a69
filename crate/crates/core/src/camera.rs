//! Pinhole stereo cameras and hand-focus crop extraction.
//!
//! Camera frames use the usual vision convention: +z forward, +x right, +y down.
//! An extrinsic maps arm-base coordinates into the camera frame.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, Rotation, Vec3};
use crate::kinematics::{ArmJoints, HandJoints, RobotModel};

/// Points at or behind this depth (m) are treated as behind the camera.
const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    /// Intrinsics for a sensor with the given full horizontal and vertical fields of view.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64, vfov_deg: f64) -> Self {
        CameraIntrinsics {
            fx: (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan(),
            fy: (height as f64 / 2.0) / (vfov_deg.to_radians() / 2.0).tan(),
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    /// Arm-base to camera transform.
    pub extrinsic: Pose,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` fixes the roll (image -y points toward it).
    pub fn looking_at(intrinsics: CameraIntrinsics, eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let cam_to_base = Pose::new(Rotation::from_columns(&x, &y, &z), eye);
        Camera { intrinsics, extrinsic: cam_to_base.inverse() }
    }

    /// Camera position in the base frame.
    pub fn center(&self) -> Vec3 {
        self.extrinsic.inverse().translation
    }

    pub fn project(&self, p: &Vec3) -> Projected {
        project_point(&self.intrinsics, &self.extrinsic, p)
    }

    /// The same physical camera described relative to another base frame.
    ///
    /// `base` is the pose of the new base in the current base frame.
    pub fn rebased(&self, base: &Pose) -> Camera {
        Camera { intrinsics: self.intrinsics, extrinsic: self.extrinsic.compose(base) }
    }

    /// Unit ray direction in the base frame through a pixel position.
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let d_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let inv = self.extrinsic.inverse();
        (inv.translation, inv.rotation.apply(&d_cam).normalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoRig {
    pub left: Camera,
    pub right: Camera,
}

impl StereoRig {
    /// Parallel stereo pair centered at `eye`, baseline along the camera x axis.
    pub fn looking_at(intrinsics: CameraIntrinsics, eye: Vec3, target: Vec3, up: Vec3, baseline: f64) -> Self {
        let center = Camera::looking_at(intrinsics, eye, target, up);
        let right_axis = center.extrinsic.inverse().rotation.apply(&Vec3::x());
        let shift = |s: f64| {
            let cam_to_base = center.extrinsic.inverse();
            let moved = Pose::new(cam_to_base.rotation, cam_to_base.translation + right_axis * s);
            Camera { intrinsics, extrinsic: moved.inverse() }
        };
        StereoRig { left: shift(-baseline / 2.0), right: shift(baseline / 2.0) }
    }

    pub fn rebased(&self, base: &Pose) -> StereoRig {
        StereoRig { left: self.left.rebased(base), right: self.right.rebased(base) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub in_front: bool,
}

pub fn project_point(k: &CameraIntrinsics, extrinsic: &Pose, p: &Vec3) -> Projected {
    let c = extrinsic.transform_point(p);
    if c.z <= MIN_DEPTH {
        return Projected { u: f64::NAN, v: f64::NAN, in_front: false };
    }
    Projected { u: k.fx * c.x / c.z + k.cx, v: k.fy * c.y / c.z + k.cy, in_front: true }
}

pub fn project_points(k: &CameraIntrinsics, extrinsic: &Pose, points: &[Vec3]) -> Vec<Projected> {
    points.iter().map(|p| project_point(k, extrinsic, p)).collect()
}

/// Inclusive integer pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

impl PixelRect {
    pub fn full(width: u32, height: u32) -> Self {
        PixelRect { x_min: 0, y_min: 0, x_max: width as i32 - 1, y_max: height as i32 - 1 }
    }

    pub fn width(&self) -> i32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> i32 {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, x: i32, y: i32) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn contains_rect(&self, other: &PixelRect) -> bool {
        self.contains(other.x_min, other.y_min) && self.contains(other.x_max, other.y_max)
    }

    pub fn intersect(&self, other: &PixelRect) -> Option<PixelRect> {
        let r = PixelRect {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        };
        (r.x_min <= r.x_max && r.y_min <= r.y_max).then_some(r)
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> Option<PixelRect> {
        self.intersect(&PixelRect::full(width, height))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    /// Per-axis enlargement factor about the rectangle center.
    pub scale: f64,
    /// Side (pixels) a zero-extent axis of the tight rectangle is expanded to before scaling.
    pub min_size: u32,
    /// Side of the square output crop.
    pub size: u32,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { scale: 2.0, min_size: 16, size: 128 }
    }
}

/// Tight enclosing rectangle of the visible points, unclamped.
pub fn tight_rect(points: &[Projected]) -> Result<PixelRect> {
    let mut it = points.iter().filter(|p| p.in_front);
    let first = it.next().ok_or(Error::NoHandVisible)?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.u, first.v, first.u, first.v);
    for p in it {
        x0 = x0.min(p.u);
        y0 = y0.min(p.v);
        x1 = x1.max(p.u);
        y1 = y1.max(p.v);
    }
    Ok(PixelRect { x_min: x0.floor() as i32, y_min: y0.floor() as i32, x_max: x1.ceil() as i32, y_max: y1.ceil() as i32 })
}

/// Tight rectangle, with zero-extent axes expanded to the minimum size, scaled
/// about its center, then clamped.
pub fn hand_focus_rect(points: &[Projected], k: &CameraIntrinsics, cfg: &CropConfig) -> Result<PixelRect> {
    let tight = tight_rect(points)?;
    let enlarge = |lo: i32, hi: i32| {
        let c = (lo + hi) as f64 / 2.0;
        let extent = if hi == lo { cfg.min_size as f64 } else { (hi - lo) as f64 };
        let half = extent / 2.0 * cfg.scale;
        ((c - half).floor() as i32, (c + half).ceil() as i32)
    };
    let (x_min, x_max) = enlarge(tight.x_min, tight.x_max);
    let (y_min, y_max) = enlarge(tight.y_min, tight.y_max);
    PixelRect { x_min, y_min, x_max, y_max }.clamp_to(k.width, k.height).ok_or(Error::NoHandVisible)
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image { width, height, data: vec![0; (width * height * 3) as usize] }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width, self.height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut w = enc.write_header().map_err(to_io)?;
        w.write_image_data(&self.data).map_err(to_io)?;
        w.finish().map_err(to_io)
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let dec = png::Decoder::new(BufReader::new(file));
        let mut reader = dec.read_info().map_err(|e| Error::format(path, 0, e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, 0, e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(path, 0, "expected 8-bit RGB"));
        }
        buf.truncate(info.buffer_size());
        Ok(Image { width: info.width, height: info.height, data: buf })
    }
}

/// Anything that can be sampled per pixel: a stored image or a lazily evaluated render.
pub trait PixelSource {
    fn size(&self) -> (u32, u32);
    fn pixel(&self, x: u32, y: u32) -> [u8; 3];
}

impl PixelSource for Image {
    fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.get(x, y)
    }
}

/// Bilinear resample of `rect` to `out_w × out_h` with pixel-center alignment.
///
/// Sample coordinates are clamped inside the rectangle, so the output depends
/// only on pixels within it.
pub fn crop_resize<S: PixelSource + ?Sized>(src: &S, rect: &PixelRect, out_w: u32, out_h: u32) -> Result<Image> {
    let (w, h) = src.size();
    if rect.x_min > rect.x_max || rect.y_min > rect.y_max || out_w == 0 || out_h == 0 {
        return Err(Error::EmptyRect);
    }
    if rect.x_min < 0 || rect.y_min < 0 || rect.x_max >= w as i32 || rect.y_max >= h as i32 {
        return Err(Error::Shape(format!("rect {rect:?} outside {w}x{h} image")));
    }
    let axis = |lo: i32, hi: i32, n: u32| -> Vec<(u32, u32, f32)> {
        let step = (hi - lo + 1) as f64 / n as f64;
        (0..n)
            .map(|o| {
                let s = (lo as f64 + (o as f64 + 0.5) * step - 0.5).clamp(lo as f64, hi as f64);
                let i0 = s.floor() as i32;
                let i1 = (i0 + 1).min(hi);
                (i0 as u32, i1 as u32, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(rect.x_min, rect.x_max, out_w);
    let ys = axis(rect.y_min, rect.y_max, out_h);
    let mut out = Image::new(out_w, out_h);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = src.pixel(x0, y0);
            let p10 = if fx > 0.0 { src.pixel(x1, y0) } else { p00 };
            let (p01, p11) = if fy > 0.0 {
                let a = src.pixel(x0, y1);
                (a, if fx > 0.0 { src.pixel(x1, y1) } else { a })
            } else {
                (p00, p10)
            };
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - fx) + p10[c] as f32 * fx;
                let bottom = p01[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
                rgb[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set(ox as u32, oy as u32, rgb);
        }
    }
    Ok(out)
}

/// Hand-focus rectangles for both cameras, computed from the hand collision spheres.
pub fn hand_focus_rects(
    rig: &StereoRig,
    model: &RobotModel,
    q: &ArmJoints,
    j: &HandJoints,
    cfg: &CropConfig,
) -> Result<(PixelRect, PixelRect)> {
    let wrist = model.wrist_pose(q)?;
    let centers: Vec<Vec3> = model.hand_sphere_centers(&wrist, j)?.iter().map(|s| s.center).collect();
    let rect = |cam: &Camera| {
        let px = project_points(&cam.intrinsics, &cam.extrinsic, &centers);
        hand_focus_rect(&px, &cam.intrinsics, cfg)
    };
    Ok((rect(&rig.left)?, rect(&rig.right)?))
}

/// Full hand-focus pipeline for one stereo frame: project, enclose, enlarge, clamp, crop.
pub fn extract_hand_focus<S: PixelSource + ?Sized>(
    rig: &StereoRig,
    model: &RobotModel,
    q: &ArmJoints,
    j: &HandJoints,
    left: &S,
    right: &S,
    cfg: &CropConfig,
) -> Result<(Image, Image, PixelRect, PixelRect)> {
    let (rl, rr) = hand_focus_rects(rig, model, q, j, cfg)?;
    let cl = crop_resize(left, &rl, cfg.size, cfg.size)?;
    let cr = crop_resize(right, &rr, cfg.size, cfg.size)?;
    Ok((cl, cr, rl, rr))
}
