//! Demonstration episodes, relative encodings of proprioception and action
//! chunks, training-sample construction and the on-disk dataset format.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{crop_resize, extract_hand_focus, CropConfig, Image, PixelRect, PixelSource, StereoRig};
use crate::env::render::SceneView;
use crate::env::scene::{build_scene, RigConfig, Scene, SceneConfig};
use crate::env::sim::{step, ArmState, WorldState};
use crate::error::{Error, Result};
use crate::geom::{apply_relative, relative_pose, AxisAngle, Pose, Vec3};
use crate::kinematics::{ArmJoints, HandJoints, RobotModel, ARM_DOF, HAND_DOF};
use crate::perception::ObjectInstance;

/// Number of `f32` values in one `steps.bin` record.
pub const RECORD_LEN: usize = 12 + ARM_DOF + HAND_DOF + 12 + HAND_DOF + 1;
/// Width of one proprioception vector and one action: 3 translation, 3 axis-angle, 6 fingers.
pub const ACTION_DIM: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    /// Wrist pose in the arm's base frame.
    pub wrist_pose: Pose,
    pub arm_joints: ArmJoints,
    pub hand_joints: HandJoints,
    /// Commanded wrist pose for the next control step.
    pub action_wrist_pose: Pose,
    /// Commanded (absolute) finger angles.
    pub action_hand_joints: HandJoints,
    pub timestamp: f64,
}

impl Step {
    pub fn to_record(&self) -> [f32; RECORD_LEN] {
        let mut r = [0f32; RECORD_LEN];
        let values = self
            .wrist_pose
            .to_array()
            .into_iter()
            .chain(self.arm_joints.0)
            .chain(self.hand_joints.0)
            .chain(self.action_wrist_pose.to_array())
            .chain(self.action_hand_joints.0)
            .chain([self.timestamp]);
        for (slot, v) in r.iter_mut().zip(values) {
            *slot = v as f32;
        }
        r
    }

    pub fn from_record(r: &[f32; RECORD_LEN]) -> Step {
        let f = |range: std::ops::Range<usize>| r[range].iter().map(|&v| v as f64).collect::<Vec<_>>();
        let pose = |a: Vec<f64>| Pose::from_array(&a.try_into().expect("12 values"));
        Step {
            wrist_pose: pose(f(0..12)),
            arm_joints: ArmJoints(f(12..18).try_into().expect("6 values")),
            hand_joints: HandJoints(f(18..24).try_into().expect("6 values")),
            action_wrist_pose: pose(f(24..36)),
            action_hand_joints: HandJoints(f(36..42).try_into().expect("6 values")),
            timestamp: r[42] as f64,
        }
    }
}

/// Where an episode's camera frames come from.
#[derive(Clone, Debug)]
pub enum FrameStore {
    /// Decoded (left, right) full frames, one per full-trajectory step.
    Stored(Vec<(Image, Image)>),
    /// World states replayed through the renderer on demand, one per full-trajectory step.
    Replay(Arc<Vec<WorldState>>),
    Absent,
}

/// One camera frame: either stored pixels or a lazily traced view.
pub enum FrameSource<'a> {
    Stored(&'a Image),
    View(Box<SceneView<'a>>),
}

impl PixelSource for FrameSource<'_> {
    fn size(&self) -> (u32, u32) {
        match self {
            FrameSource::Stored(i) => i.size(),
            FrameSource::View(v) => v.size(),
        }
    }

    fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        match self {
            FrameSource::Stored(i) => i.pixel(x, y),
            FrameSource::View(v) => v.pixel(x, y),
        }
    }
}

/// One arm's demonstration. `steps` is the segment from the pre-manipulation
/// pose to task completion; `approach` (possibly empty) is the preceding
/// home-to-pre-manipulation motion, kept for baselines that learn the whole
/// trajectory.
#[derive(Clone, Debug)]
pub struct Episode {
    pub task: String,
    /// Index of the arm in the scene.
    pub arm: usize,
    pub scene: Arc<Scene>,
    pub rig: RigConfig,
    /// Pre-manipulation wrist pose in the arm's base frame.
    pub pre_manip_pose: Pose,
    pub approach: Vec<Step>,
    pub steps: Vec<Step>,
    pub frames: FrameStore,
}

/// Distance (m, rad) within which the first step must sit at the pre-manipulation pose.
pub const ARRIVAL_TOLERANCE: (f64, f64) = (2e-3, 1e-2);

impl Episode {
    pub fn object(&self) -> &ObjectInstance {
        &self.scene.object
    }

    pub fn model(&self) -> &RobotModel {
        &self.scene.arms[self.arm].model
    }

    /// The head rig expressed in this arm's base frame.
    pub fn rig_in_base(&self) -> Result<StereoRig> {
        Ok(self.scene.rig_for_arm(&self.rig.build()?, self.arm))
    }

    pub fn full_len(&self) -> usize {
        self.approach.len() + self.steps.len()
    }

    /// Step `i` of the full trajectory (approach first).
    pub fn full_step(&self, i: usize) -> &Step {
        if i < self.approach.len() {
            &self.approach[i]
        } else {
            &self.steps[i - self.approach.len()]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.len() < 2 {
            return Err(Error::Shape(format!("episode has {} steps, need at least 2", self.steps.len())));
        }
        let (dp, dw) = relative_pose(&self.pre_manip_pose, &self.steps[0].wrist_pose);
        if dp.norm() > ARRIVAL_TOLERANCE.0 || dw.angle() > ARRIVAL_TOLERANCE.1 {
            return Err(Error::Shape(format!(
                "first step is {:.4} m / {:.4} rad from the pre-manipulation pose",
                dp.norm(),
                dw.angle()
            )));
        }
        let model = self.model();
        for s in self.approach.iter().chain(&self.steps) {
            model.check_arm(&s.arm_joints)?;
            model.check_hand(&s.hand_joints)?;
        }
        match &self.frames {
            FrameStore::Stored(f) if f.len() != self.full_len() => {
                Err(Error::Shape(format!("{} frames for {} steps", f.len(), self.full_len())))
            }
            FrameStore::Replay(s) if s.len() != self.full_len() => {
                Err(Error::Shape(format!("{} states for {} steps", s.len(), self.full_len())))
            }
            _ => Ok(()),
        }
    }

    /// Left and right frames of full-trajectory step `i`.
    pub fn frame(&self, i: usize, rig: &StereoRig) -> Result<(FrameSource<'_>, FrameSource<'_>)> {
        match &self.frames {
            FrameStore::Stored(f) => Ok((FrameSource::Stored(&f[i].0), FrameSource::Stored(&f[i].1))),
            FrameStore::Replay(states) => Ok((
                FrameSource::View(Box::new(SceneView::new(&self.scene, &states[i], &rig.left))),
                FrameSource::View(Box::new(SceneView::new(&self.scene, &states[i], &rig.right))),
            )),
            FrameStore::Absent => Err(Error::Shape(format!("episode of {} has no frames", self.task))),
        }
    }
}

/// Policy variants: which encodings and which trajectory segment they use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ofa,
    WoRel,
    WoOf,
    WoRelOf,
    Act,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ofa, Method::WoRel, Method::WoOf, Method::WoRelOf, Method::Act];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ofa => "ofa",
            Method::WoRel => "wo-rel",
            Method::WoOf => "wo-of",
            Method::WoRelOf => "wo-rel-of",
            Method::Act => "act",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    /// Poses relative to the pre-manipulation pose (otherwise absolute in the arm base frame).
    pub fn relative(self) -> bool {
        matches!(self, Method::Ofa | Method::WoOf)
    }

    /// Hand-focus crops (otherwise full frames resized).
    pub fn hand_focus(self) -> bool {
        matches!(self, Method::Ofa | Method::WoRel)
    }

    /// Whether the robot is first brought to the pre-manipulation pose.
    pub fn arrival(self) -> bool {
        self != Method::Act
    }
}

/// Stereo images plus the proprioception vector (Δp, Δω, J_h).
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub left: Image,
    pub right: Image,
    pub proprio: [f64; ACTION_DIM],
}

/// `k` actions of (Δp, Δω, fingers).
pub type ActionChunk = Vec<[f64; ACTION_DIM]>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub observation: Observation,
    pub target: ActionChunk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleOptions {
    pub k: usize,
    pub method: Method,
    pub crop: CropConfig,
}

fn pack(pose: &Pose, reference: &Pose, fingers: &HandJoints) -> [f64; ACTION_DIM] {
    let (dp, dw) = relative_pose(reference, pose);
    let w = dw.to_array();
    let mut out = [0.0; ACTION_DIM];
    out[..3].copy_from_slice(dp.as_slice());
    out[3..6].copy_from_slice(&w);
    out[6..].copy_from_slice(&fingers.0);
    out
}

/// A wrist pose relative to `reference` plus finger angles, in action layout.
pub fn encode_pose_action(pose: &Pose, reference: &Pose, fingers: &HandJoints) -> [f64; ACTION_DIM] {
    pack(pose, reference, fingers)
}

/// Inverse of [`encode_pose_action`]: wrist target and finger command.
pub fn decode_action(action: &[f64; ACTION_DIM], reference: &Pose) -> (Pose, HandJoints) {
    let dp = Vec3::new(action[0], action[1], action[2]);
    let dw = AxisAngle::new(Vec3::new(action[3], action[4], action[5]));
    let mut fingers = HandJoints([0.0; HAND_DOF]);
    fingers.0.copy_from_slice(&action[6..]);
    (apply_relative(reference, &dp, &dw), fingers)
}

/// Wrist pose relative to `pre_manip` plus the finger angles.
pub fn encode_relative_proprio(step: &Step, pre_manip: &Pose) -> [f64; ACTION_DIM] {
    pack(&step.wrist_pose, pre_manip, &step.hand_joints)
}

/// Actions `t .. t + k` relative to `pre_manip`, repeating the last action past the end.
pub fn encode_relative_chunk(steps: &[Step], t: usize, k: usize, pre_manip: &Pose) -> ActionChunk {
    let last = steps.len() - 1;
    (0..k)
        .map(|i| {
            let s = &steps[(t + i).min(last)];
            pack(&s.action_wrist_pose, pre_manip, &s.action_hand_joints)
        })
        .collect()
}

/// The pose all encodings of `episode` are taken relative to under `method`.
pub fn reference_pose(method: Method, pre_manip: &Pose) -> Pose {
    if method.relative() {
        *pre_manip
    } else {
        Pose::identity()
    }
}

/// Observation images for one arm configuration: hand-focus crops or resized full frames.
#[allow(clippy::too_many_arguments)]
pub fn observe_images<S: PixelSource + ?Sized>(
    rig_in_base: &StereoRig,
    model: &RobotModel,
    q: &ArmJoints,
    j: &HandJoints,
    left: &S,
    right: &S,
    method: Method,
    crop: &CropConfig,
) -> Result<(Image, Image)> {
    if method.hand_focus() {
        let (l, r, _, _) = extract_hand_focus(rig_in_base, model, q, j, left, right, crop)?;
        Ok((l, r))
    } else {
        let (w, h) = left.size();
        let full = PixelRect::full(w, h);
        Ok((crop_resize(left, &full, crop.size, crop.size)?, crop_resize(right, &full, crop.size, crop.size)?))
    }
}

/// One sample per step of each episode (the whole trajectory for methods
/// that skip the pre-manipulation arrival). Steps where the hand is not
/// visible are skipped; the skipped count is returned alongside.
pub fn build_samples(episodes: &[Episode], opts: &SampleOptions) -> Result<(Vec<TrainingSample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for ep in episodes {
        let reference = reference_pose(opts.method, &ep.pre_manip_pose);
        let rig = ep.rig.build()?;
        let rig_base = ep.rig_in_base()?;
        let (first, seq): (usize, Vec<Step>) = if opts.method.arrival() {
            (ep.approach.len(), ep.steps.clone())
        } else {
            (0, ep.approach.iter().chain(&ep.steps).copied().collect())
        };
        for (t, step) in seq.iter().enumerate() {
            let (left, right) = ep.frame(first + t, &rig)?;
            let images = observe_images(
                &rig_base,
                ep.model(),
                &step.arm_joints,
                &step.hand_joints,
                &left,
                &right,
                opts.method,
                &opts.crop,
            );
            let (l, r) = match images {
                Ok(x) => x,
                Err(Error::NoHandVisible) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            out.push(TrainingSample {
                observation: Observation { left: l, right: r, proprio: pack(&step.wrist_pose, &reference, &step.hand_joints) },
                target: encode_relative_chunk(&seq, t, opts.k, &reference),
            });
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} steps with the hand out of view");
    }
    Ok((out, skipped))
}

/// Uniform draw with replacement.
pub fn sample_batch<'a, T>(samples: &'a [T], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<&'a T>> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    Ok((0..batch_size).map(|_| &samples[rng.random_range(0..samples.len())]).collect())
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeManifest {
    pub task: String,
    pub object: String,
    pub arm: usize,
    /// Row-major rotation then translation, arm base frame.
    pub pre_manip_pose: [f64; 12],
    pub step_count: usize,
    pub approach_step_count: usize,
    pub frames: bool,
    pub steps_sha256: String,
    pub approach_sha256: String,
    pub scene_digest: String,
    /// Digest of the run configuration that produced the episode, when known.
    #[serde(default)]
    pub config_digest: String,
    pub scene: SceneConfig,
    pub rig: RigConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub dir: String,
    pub task: String,
    pub arm: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    /// Sum of end-segment steps over all episodes.
    pub total_steps: usize,
    #[serde(default)]
    pub config_digest: String,
    pub episodes: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";

fn records_bytes(steps: &[Step]) -> Vec<u8> {
    steps.iter().flat_map(|s| s.to_record()).flat_map(f32::to_le_bytes).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_records(path: &Path, bytes: &[u8]) -> Result<Vec<Step>> {
    let rec = RECORD_LEN * 4;
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::format(path, (bytes.len() / rec * rec) as u64, format!("truncated record (file is {} bytes)", bytes.len())));
    }
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, chunk)| {
            let mut r = [0f32; RECORD_LEN];
            for (k, (slot, b)) in r.iter_mut().zip(chunk.chunks_exact(4)).enumerate() {
                *slot = f32::from_le_bytes(b.try_into().expect("4 bytes"));
                if !slot.is_finite() {
                    return Err(Error::format(path, (i * rec + k * 4) as u64, "non-finite value"));
                }
            }
            Ok(Step::from_record(&r))
        })
        .collect()
}

/// Writes one episode directory; frames are rendered (or copied) when `with_frames`.
pub fn write_episode(dir: &Path, ep: &Episode, with_frames: bool, config_digest: &str) -> Result<EpisodeManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let steps = records_bytes(&ep.steps);
    let approach = records_bytes(&ep.approach);
    write_file(&dir.join("steps.bin"), &steps)?;
    write_file(&dir.join("approach.bin"), &approach)?;
    if with_frames {
        let frames = dir.join("frames");
        fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
        let rig = ep.rig.build()?;
        for i in 0..ep.full_len() {
            let (l, r) = ep.frame(i, &rig)?;
            let (w, h) = l.size();
            for (src, name) in [(l, "left"), (r, "right")] {
                let img = match src {
                    FrameSource::Stored(img) => img.clone(),
                    FrameSource::View(view) => crate::env::render::render_view(&view).image,
                };
                debug_assert_eq!(img.size(), (w, h));
                img.write_png(&frames.join(format!("{i:04}_{name}.png")))?;
            }
        }
    }
    let manifest = EpisodeManifest {
        task: ep.task.clone(),
        object: ep.object().name.clone(),
        arm: ep.arm,
        pre_manip_pose: ep.pre_manip_pose.to_array(),
        step_count: ep.steps.len(),
        approach_step_count: ep.approach.len(),
        frames: with_frames,
        steps_sha256: sha256_hex(&steps),
        approach_sha256: sha256_hex(&approach),
        scene_digest: ep.scene.config.digest(),
        config_digest: config_digest.to_string(),
        scene: ep.scene.config.clone(),
        rig: ep.rig,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.utf8_error().valid_up_to() as u64, "not UTF-8"))?;
    toml::from_str(&text).map_err(|e| {
        let offset = e.span().map(|s| s.start).unwrap_or(0) as u64;
        Error::format(path, offset, e.message().to_string())
    })
}

fn check_digest(path: &Path, bytes: &[u8], expected: &str) -> Result<()> {
    if sha256_hex(bytes) == expected {
        Ok(())
    } else {
        Err(Error::format(path, 0, "digest does not match the manifest"))
    }
}

/// Joint values stored as `f32` can land a rounding step outside a limit they sat on.
fn snap_to_limits(model: &RobotModel, s: &mut Step) {
    const SLACK: f64 = 1e-5;
    let q = model.clamp_arm(&s.arm_joints);
    if q.0.iter().zip(&s.arm_joints.0).all(|(a, b)| (a - b).abs() < SLACK) {
        s.arm_joints = q;
    }
    for j in [&mut s.hand_joints, &mut s.action_hand_joints] {
        let c = model.clamp_hand(j);
        if c.0.iter().zip(&j.0).all(|(a, b)| (a - b).abs() < SLACK) {
            *j = c;
        }
    }
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let m: EpisodeManifest = parse_toml(&manifest_path)?;
    let steps_path = dir.join("steps.bin");
    let approach_path = dir.join("approach.bin");
    let steps_bytes = read_file(&steps_path)?;
    let approach_bytes = read_file(&approach_path)?;
    check_digest(&steps_path, &steps_bytes, &m.steps_sha256)?;
    check_digest(&approach_path, &approach_bytes, &m.approach_sha256)?;
    let mut steps = parse_records(&steps_path, &steps_bytes)?;
    let mut approach = parse_records(&approach_path, &approach_bytes)?;
    if steps.len() != m.step_count || approach.len() != m.approach_step_count {
        return Err(Error::format(&manifest_path, 0, "step counts disagree with the data files"));
    }
    let scene = build_scene(&m.scene)?;
    if m.arm >= scene.arms.len() || scene.task.name != m.task {
        return Err(Error::format(&manifest_path, 0, format!("arm {} / task {} do not match the scene", m.arm, m.task)));
    }
    let model = &scene.arms[m.arm].model;
    for s in approach.iter_mut().chain(steps.iter_mut()) {
        snap_to_limits(model, s);
    }
    let frames = if m.frames {
        let mut frames = Vec::with_capacity(steps.len() + approach.len());
        for i in 0..steps.len() + approach.len() {
            let load = |name: &str| Image::read_png(&dir.join("frames").join(format!("{i:04}_{name}.png")));
            frames.push((load("left")?, load("right")?));
        }
        FrameStore::Stored(frames)
    } else {
        FrameStore::Absent
    };
    let ep = Episode {
        task: m.task,
        arm: m.arm,
        scene: Arc::new(scene),
        rig: m.rig,
        pre_manip_pose: Pose::from_array(&m.pre_manip_pose),
        approach,
        steps,
        frames,
    };
    ep.validate().map_err(|e| Error::format(&manifest_path, 0, e.to_string()))?;
    Ok(ep)
}

/// Writes episodes as `root/episode_NNNN` plus the index file.
pub fn write_dataset(root: &Path, episodes: &[Episode], with_frames: bool, config_digest: &str) -> Result<DatasetIndex> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut index = DatasetIndex { config_digest: config_digest.to_string(), ..Default::default() };
    for (i, ep) in episodes.iter().enumerate() {
        let name = format!("episode_{i:04}");
        write_episode(&root.join(&name), ep, with_frames, config_digest)?;
        index.total_steps += ep.steps.len();
        index.episodes.push(IndexEntry { dir: name, task: ep.task.clone(), arm: ep.arm, steps: ep.steps.len() });
    }
    write_index(root, &index)?;
    Ok(index)
}

pub fn write_index(root: &Path, index: &DatasetIndex) -> Result<()> {
    let text = toml::to_string(index).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&root.join(INDEX_FILE), text.as_bytes())
}

pub fn read_index(root: &Path) -> Result<DatasetIndex> {
    parse_toml(&root.join(INDEX_FILE))
}

/// Loads every indexed episode, optionally only those of one arm.
pub fn read_dataset(root: &Path, arm: Option<usize>) -> Result<Vec<Episode>> {
    let index = read_index(root)?;
    let mut episodes: Vec<Episode> = index.episodes.iter().map(|e| read_episode(&root.join(&e.dir))).collect::<Result<_>>()?;
    // frameless episodes get replayed world states, grouped per demonstration scene
    let mut groups: Vec<(SceneConfig, Vec<usize>)> = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        if !matches!(ep.frames, FrameStore::Absent) {
            continue;
        }
        match groups.iter_mut().find(|(c, _)| *c == ep.scene.config) {
            Some((_, members)) => members.push(i),
            None => groups.push((ep.scene.config.clone(), vec![i])),
        }
    }
    for (_, members) in groups {
        let group: Vec<&Episode> = members.iter().map(|&i| &episodes[i]).collect();
        let states = Arc::new(replay_states(&group)?);
        for i in members {
            episodes[i].frames = FrameStore::Replay(states.clone());
        }
    }
    Ok(episodes.into_iter().filter(|e| arm.is_none_or(|a| a == e.arm)).collect())
}

/// Re-simulates the world state before every full-trajectory step from the
/// recorded joints of all arms of one demonstration.
pub fn replay_states(episodes: &[&Episode]) -> Result<Vec<WorldState>> {
    let first = episodes.first().ok_or(Error::EmptySamples)?;
    let scene = &first.scene;
    let n = first.full_len();
    let mut by_arm: Vec<Option<&Episode>> = vec![None; scene.arms.len()];
    for ep in episodes {
        if ep.scene.config != scene.config || ep.full_len() != n || ep.arm >= by_arm.len() {
            return Err(Error::Shape(format!("episode of arm {} does not belong to the same demonstration", ep.arm)));
        }
        by_arm[ep.arm] = Some(ep);
    }
    let arms: Vec<&Episode> = by_arm
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.ok_or_else(|| Error::Shape(format!("{}: missing the episode of arm {i}", scene.task.name))))
        .collect::<Result<_>>()?;
    let mut state = WorldState::initial(scene);
    for (a, ep) in state.arms.iter_mut().zip(&arms) {
        a.q = ep.full_step(0).arm_joints;
        a.j = ep.full_step(0).hand_joints;
    }
    let mut states = Vec::with_capacity(n);
    for i in 0..n {
        states.push(state.clone());
        if i + 1 < n {
            let commands: Vec<ArmState> =
                arms.iter().map(|ep| ArmState { q: ep.full_step(i + 1).arm_joints, j: ep.full_step(i).action_hand_joints }).collect();
            state = step(scene, &state, &commands);
        }
    }
    Ok(states)
}

pub fn episode_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_index(root)?.episodes.iter().map(|e| root.join(&e.dir)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{apply_relative, AxisAngle, Rotation, Vec3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step_at(p: Pose, a: Pose, t: f64) -> Step {
        Step {
            wrist_pose: p,
            arm_joints: ArmJoints::default(),
            hand_joints: HandJoints([0.1; 6]),
            action_wrist_pose: a,
            action_hand_joints: HandJoints([0.2; 6]),
            timestamp: t,
        }
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let w = AxisAngle::new(Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        Pose::new(Rotation::from_axis_angle(w), Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5)))
    }

    #[test]
    fn proprio_at_and_above_pre_manip() {
        let tm = Pose::new(Rotation::rz(0.4), Vec3::new(0.3, 0.1, 0.2));
        let p = encode_relative_proprio(&step_at(tm, tm, 0.0), &tm);
        assert!(p[..6].iter().all(|v| v.abs() < 1e-15));
        let above = Pose::new(tm.rotation, tm.translation + Vec3::new(0.0, 0.0, 0.05));
        let p = encode_relative_proprio(&step_at(above, above, 0.0), &tm);
        assert!((p[2] - 0.05).abs() < 1e-15 && p[0].abs() < 1e-15 && p[1].abs() < 1e-15);
        assert!(p[3..6].iter().all(|v| v.abs() < 1e-15));
        assert_eq!(&p[6..], &[0.1; 6]);
    }

    #[test]
    fn chunk_pads_with_the_final_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tm = random_pose(&mut rng);
        let steps: Vec<Step> = (0..5).map(|i| step_at(random_pose(&mut rng), random_pose(&mut rng), i as f64)).collect();
        let c = encode_relative_chunk(&steps, 4, 4, &tm);
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|a| a == &c[0]));
    }

    #[test]
    fn chunk_entries_match_per_step_relative_pose_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tm = random_pose(&mut rng);
        let steps: Vec<Step> = (0..30).map(|i| step_at(random_pose(&mut rng), random_pose(&mut rng), i as f64)).collect();
        for t in [0, 7, 15, 29] {
            let c = encode_relative_chunk(&steps, t, 20, &tm);
            for (i, a) in c.iter().enumerate() {
                let s = &steps[(t + i).min(29)];
                // oracle: homogeneous matrices, translation difference and rotation R_t R_r^T
                let ht = s.action_wrist_pose.to_homogeneous();
                let hr = tm.to_homogeneous();
                let dp = ht.fixed_view::<3, 1>(0, 3) - hr.fixed_view::<3, 1>(0, 3);
                let dr = ht.fixed_view::<3, 3>(0, 0) * hr.fixed_view::<3, 3>(0, 0).transpose();
                let back = Rotation::from_axis_angle(AxisAngle::from_array([a[3], a[4], a[5]]));
                assert!((Vec3::new(a[0], a[1], a[2]) - dp).norm() < 1e-12);
                assert!((back.matrix() - dr).amax() < 1e-9);
                let rebuilt = apply_relative(&tm, &Vec3::new(a[0], a[1], a[2]), &AxisAngle::from_array([a[3], a[4], a[5]]));
                assert!(rebuilt.max_abs_diff(&s.action_wrist_pose) < 1e-7);
            }
        }
    }

    #[test]
    fn chunk_is_invariant_to_rigid_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tm = random_pose(&mut rng);
        let steps: Vec<Step> = (0..10).map(|i| step_at(random_pose(&mut rng), random_pose(&mut rng), i as f64)).collect();
        let g = Pose::from_translation(Vec3::new(0.2, -0.1, 0.03));
        let moved: Vec<Step> = steps
            .iter()
            .map(|s| Step { wrist_pose: g.compose(&s.wrist_pose), action_wrist_pose: g.compose(&s.action_wrist_pose), ..*s })
            .collect();
        let a = encode_relative_chunk(&steps, 2, 6, &tm);
        let b = encode_relative_chunk(&moved, 2, 6, &g.compose(&tm));
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn record_round_trip_is_within_f32_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = step_at(random_pose(&mut rng), random_pose(&mut rng), 1.5);
        let r = s.to_record();
        // rotations are re-projected onto SO(3) on load
        let again = Step::from_record(&r).to_record();
        assert!(r.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(Step::from_record(&r).wrist_pose.max_abs_diff(&s.wrist_pose) < 1e-6);
    }

    #[test]
    fn batch_sampling() {
        let one = [7];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_batch(&one, 1, &mut rng).unwrap(), vec![&7]);
        let items: Vec<usize> = (0..10).collect();
        let a = sample_batch(&items, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&items, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(sample_batch::<usize>(&[], 4, &mut rng), Err(Error::EmptySamples)));
        // 100k draws over 10 items: every count within 3 binomial sigmas
        let mut counts = [0usize; 10];
        for &&i in &sample_batch(&items, 100_000, &mut rng).unwrap() {
            counts[i] += 1;
        }
        let sigma = (100_000.0f64 * 0.1 * 0.9).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 10_000.0).abs() < 3.0 * sigma), "{counts:?}");
    }

    #[test]
    fn truncated_steps_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.bin");
        let s = step_at(Pose::identity(), Pose::identity(), 0.0);
        let mut bytes = records_bytes(&[s, s]);
        bytes.truncate(bytes.len() - 3);
        match parse_records(&path, &bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (RECORD_LEN * 4) as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn method_flags() {
        assert!(Method::Ofa.relative() && Method::Ofa.hand_focus() && Method::Ofa.arrival());
        assert!(!Method::WoRel.relative() && Method::WoRel.hand_focus());
        assert!(Method::WoOf.relative() && !Method::WoOf.hand_focus());
        assert!(!Method::WoRelOf.relative() && !Method::WoRelOf.hand_focus() && Method::WoRelOf.arrival());
        assert!(!Method::Act.relative() && !Method::Act.hand_focus() && !Method::Act.arrival());
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
    }
}
