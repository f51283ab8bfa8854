//! Desk-scale tasks with a kinematic gripper: object generators, stepping,
//! success checks, the scripted expert and the evaluation harness.

mod expert;
mod pipeline;
pub mod shapes;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgmError, Result};
use crate::features::ObjectCategory;
use crate::geometry::{fps_from, nearest_index, Payload, Point3, PointCloud, Rotation3, CANONICAL, INTRINSIC, LABELS};
use crate::tensor::Tensor;

pub use expert::{scripted_expert, Demonstration, ExpertController};
pub use pipeline::*;

/// Per-point 0/1 flag on the operated object marking where it can be held.
pub const GRASPABLE: &str = "graspable";

/// Spread of the kinematic cloth deformation, in intrinsic metres.
pub const DEFORM_LAMBDA: f64 = 0.15;

/// Per-axis translation cap of one action.
pub const STEP_CAP: f64 = 0.05;

pub const HOME: Point3 = Point3::new(0.0, 0.0, 0.3);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskName {
    #[serde(rename = "place-synth")]
    Place,
    #[serde(rename = "hang-synth")]
    Hang,
    #[serde(rename = "stack-synth")]
    Stack,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [TaskName::Place, TaskName::Hang, TaskName::Stack];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Place => "place-synth",
            TaskName::Hang => "hang-synth",
            TaskName::Stack => "stack-synth",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = HgmError;
    fn from_str(s: &str) -> Result<Self> {
        TaskName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| HgmError::UnknownTask(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = HgmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(HgmError::InvalidConfig(format!("unknown split {s}"))),
        }
    }
}

/// Half-open sampling interval `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.random_range(self.lo..self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v < self.hi
    }

    pub fn overlaps(&self, o: &Interval) -> bool {
        self.lo < o.hi && o.lo < self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParam {
    pub name: String,
    pub range: Interval,
}

/// Placement distribution of one object: position box and yaw bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    pub x: Interval,
    pub y: Interval,
    pub max_yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub split: Split,
    pub operated_category: ObjectCategory,
    pub background_category: ObjectCategory,
    pub operated_shape: Vec<ShapeParam>,
    pub background_shape: Vec<ShapeParam>,
    pub operated_pose: PoseRange,
    pub background_pose: PoseRange,
    /// Success radius in metres.
    pub tolerance: f64,
    pub max_steps: usize,
    /// Closing attaches only within this distance of a graspable point.
    pub grasp_radius: f64,
    /// Rigid grasps also need the gripper within this angle (radians) of
    /// the object's grasp orientation.
    pub orientation_tolerance: f64,
}

fn params(list: &[(&str, Interval)]) -> Vec<ShapeParam> {
    list.iter().map(|(n, r)| ShapeParam { name: n.to_string(), range: *r }).collect()
}

impl TaskSpec {
    pub fn new(name: TaskName, split: Split) -> Self {
        let train = split == Split::Train;
        let pick = |a: Interval, b: Interval| if train { a } else { b };
        let operated_pose = if train {
            PoseRange { x: Interval::new(-0.22, -0.14), y: Interval::new(-0.08, 0.08), max_yaw: 0.4 }
        } else {
            PoseRange { x: Interval::new(-0.28, -0.10), y: Interval::new(-0.16, 0.16), max_yaw: 0.9 }
        };
        let background_pose = if train {
            PoseRange { x: Interval::new(0.14, 0.22), y: Interval::new(-0.08, 0.08), max_yaw: 0.3 }
        } else {
            PoseRange { x: Interval::new(0.10, 0.28), y: Interval::new(-0.16, 0.16), max_yaw: 0.6 }
        };
        let (operated_category, background_category, operated_shape, background_shape) = match name {
            TaskName::Place => (
                ObjectCategory::Rigid,
                ObjectCategory::Rigid,
                params(&[
                    ("radius", pick(Interval::new(0.034, 0.044), Interval::new(0.046, 0.054))),
                    ("height", pick(Interval::new(0.080, 0.095), Interval::new(0.100, 0.115))),
                ]),
                params(&[("radius", pick(Interval::new(0.090, 0.105), Interval::new(0.110, 0.125)))]),
            ),
            TaskName::Hang => (
                ObjectCategory::Deformable,
                ObjectCategory::Rigid,
                params(&[
                    ("width", pick(Interval::new(0.18, 0.21), Interval::new(0.22, 0.25))),
                    ("length", pick(Interval::new(0.22, 0.25), Interval::new(0.26, 0.29))),
                ]),
                params(&[
                    ("length", pick(Interval::new(0.30, 0.36), Interval::new(0.38, 0.44))),
                    ("height", pick(Interval::new(0.22, 0.26), Interval::new(0.27, 0.31))),
                ]),
            ),
            TaskName::Stack => (
                ObjectCategory::Deformable,
                ObjectCategory::Deformable,
                params(&[
                    ("width", pick(Interval::new(0.14, 0.16), Interval::new(0.17, 0.19))),
                    ("length", pick(Interval::new(0.14, 0.16), Interval::new(0.17, 0.19))),
                ]),
                params(&[
                    ("width", pick(Interval::new(0.24, 0.27), Interval::new(0.28, 0.31))),
                    ("length", pick(Interval::new(0.24, 0.27), Interval::new(0.28, 0.31))),
                ]),
            ),
        };
        Self {
            name,
            split,
            operated_category,
            background_category,
            operated_shape,
            background_shape,
            operated_pose,
            background_pose,
            tolerance: 0.03,
            max_steps: 60,
            grasp_radius: 0.02,
            orientation_tolerance: 35f64.to_radians(),
        }
    }
}

/// Scene facts known to the generator and the expert, never to the policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub manipulation_index: usize,
    pub reference_indices: Vec<usize>,
    /// Operated point judged against the goal.
    pub designated_index: usize,
    /// Background goal-site point.
    pub goal_index: usize,
    /// Goal position relative to the goal-site point.
    pub site_offset: Point3,
    /// Gripper orientation the object must be held with (rigid objects).
    pub grasp_orientation: Rotation3,
    /// Clothesline segment for hang-synth.
    pub line: Option<[Point3; 2]>,
    pub operated_shape: Vec<f64>,
    pub background_shape: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub spec: TaskSpec,
    pub seed: u64,
    pub truth: GroundTruth,
}

impl TaskInstance {
    pub fn goal_site(&self, state: &SimState) -> Point3 {
        state.background.point(self.truth.goal_index) + self.truth.site_offset
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub operated: PointCloud,
    pub background: PointCloud,
    pub gripper: Point3,
    pub gripper_orientation: Rotation3,
    pub closed: bool,
    /// Operated point index held by the gripper.
    pub attached: Option<usize>,
    /// Last point that was held, kept after release.
    pub grasped: Option<usize>,
    /// Set by the opening that ends the episode.
    pub released: bool,
    pub steps: usize,
}

fn cloud_from(points: Vec<Point3>, model: &shapes::Model, canonical: &[Point3]) -> Result<PointCloud> {
    let rows = |ps: &[Point3]| Tensor::new(vec![ps.len(), 3], ps.iter().flat_map(|p| p.to_f32()).collect());
    PointCloud::new(points)?
        .with_payload(CANONICAL, Payload::Features(rows(canonical)?))?
        .with_payload(INTRINSIC, Payload::Features(rows(&model.intrinsic)?))?
        .with_payload(LABELS, Payload::Labels(model.labels.clone()))?
        .with_payload(GRASPABLE, Payload::Labels(model.graspable.iter().map(|&g| i32::from(g)).collect()))
}

fn sample_pose(range: &PoseRange, rng: &mut ChaCha8Rng) -> (Rotation3, f64, Point3) {
    let yaw = rng.random_range(-range.max_yaw..=range.max_yaw);
    let t = Point3::new(range.x.sample(rng), range.y.sample(rng), 0.0);
    (Rotation3::yaw(yaw), yaw, t)
}

/// Sheets expose extent-normalised world coordinates as their canonical
/// payload; rigid models keep their nominal-shape coordinates.
fn place_model(model: &shapes::Model, category: ObjectCategory, rot: &Rotation3, t: Point3) -> Result<PointCloud> {
    let world = model.placed(rot, t);
    let canonical = if category.is_deformable() {
        shapes::extent_normalized(&world, 0.2)
    } else {
        model.canonical.clone()
    };
    cloud_from(world, model, &canonical)
}

/// Deterministic scene for `(name, split, seed)`.
pub fn make_task(name: &str, split: Split, seed: u64) -> Result<(TaskInstance, SimState)> {
    let name: TaskName = name.parse()?;
    let spec = TaskSpec::new(name, split);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a5c_0000_0000 ^ name as u64);
    let op_shape: Vec<f64> = spec.operated_shape.iter().map(|p| p.range.sample(&mut rng)).collect();
    let bg_shape: Vec<f64> = spec.background_shape.iter().map(|p| p.range.sample(&mut rng)).collect();
    let (op_rot, op_yaw, op_t) = sample_pose(&spec.operated_pose, &mut rng);
    let (bg_rot, _, bg_t) = sample_pose(&spec.background_pose, &mut rng);
    let (op_model, bg_model, site_offset) = match name {
        TaskName::Place => {
            (shapes::mug(op_shape[0], op_shape[1]), shapes::plate(bg_shape[0]), Point3::ZERO)
        }
        TaskName::Hang => {
            let warp = shapes::Warp::sample(&mut rng);
            let garment = shapes::sheet(
                op_shape[0],
                op_shape[1],
                (0.2, 0.24),
                15,
                warp,
                shapes::SheetKey::Collar,
                0.03,
            );
            (garment, shapes::clothesline(bg_shape[0], bg_shape[1]), Point3::ZERO)
        }
        TaskName::Stack => {
            let (wa, wb) = (shapes::Warp::sample(&mut rng), shapes::Warp::sample(&mut rng));
            let a = shapes::sheet(op_shape[0], op_shape[1], (0.15, 0.15), 13, wa, shapes::SheetKey::Corner, 0.03);
            let b = shapes::sheet(bg_shape[0], bg_shape[1], (0.26, 0.26), 17, wb, shapes::SheetKey::Corner, 0.03);
            (a, b, Point3::new(0.0, 0.0, 0.01))
        }
    };
    let operated = place_model(&op_model, spec.operated_category, &op_rot, op_t)?;
    let background = place_model(&bg_model, spec.background_category, &bg_rot, bg_t)?;
    let line = (name == TaskName::Hang).then(|| {
        let (l, h) = (bg_shape[0], bg_shape[1]);
        [bg_rot.rotate(Point3::new(-l / 2.0, 0.0, h)) + bg_t, bg_rot.rotate(Point3::new(l / 2.0, 0.0, h)) + bg_t]
    });
    let grasp_orientation =
        if spec.operated_category.is_deformable() { Rotation3::IDENTITY } else { Rotation3::yaw(op_yaw) };
    let truth = GroundTruth {
        manipulation_index: op_model.key,
        reference_indices: op_model.reference.into_iter().collect(),
        designated_index: op_model.designated,
        goal_index: bg_model.key,
        site_offset,
        grasp_orientation,
        line,
        operated_shape: op_shape,
        background_shape: bg_shape,
    };
    let state = SimState {
        operated,
        background,
        gripper: HOME,
        gripper_orientation: Rotation3::IDENTITY,
        closed: false,
        attached: None,
        grasped: None,
        released: false,
        steps: 0,
    };
    Ok((TaskInstance { spec, seed, truth }, state))
}

fn clip(v: f64) -> f64 {
    if v.is_finite() {
        v.clamp(-STEP_CAP, STEP_CAP)
    } else {
        0.0
    }
}

/// Moves the held object along with a gripper displacement `d`.
fn carry(inst: &TaskInstance, state: &mut SimState, held: usize, d: Point3) {
    let mut pts = state.operated.points().to_vec();
    if inst.spec.operated_category.is_deformable() {
        let intrinsic = state.operated.features(INTRINSIC).expect("generated clouds carry intrinsic rows");
        let anchor = Point3::from_slice(intrinsic.row(held));
        for (i, p) in pts.iter_mut().enumerate() {
            let dist = Point3::from_slice(intrinsic.row(i)).distance(anchor);
            *p += d * (-dist / DEFORM_LAMBDA).exp();
        }
        pts[held] = state.operated.point(held) + d;
    } else {
        for p in pts.iter_mut() {
            *p += d;
        }
    }
    state.operated.set_points(pts).expect("same point count");
}

/// Closing attaches the nearest graspable point within the grasp radius;
/// the gripper snaps onto it.
fn try_attach(inst: &TaskInstance, state: &mut SimState) {
    let spec = &inst.spec;
    if !spec.operated_category.is_deformable()
        && state.gripper_orientation.angle_to(&inst.truth.grasp_orientation) > spec.orientation_tolerance
    {
        return;
    }
    let graspable = state.operated.labels(GRASPABLE).expect("generated clouds carry grasp flags");
    let best = state
        .operated
        .points()
        .iter()
        .enumerate()
        .filter(|(i, _)| graspable[*i] == 1)
        .map(|(i, p)| (p.distance(state.gripper), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if let Some((d, i)) = best {
        if d <= spec.grasp_radius {
            state.gripper = state.operated.point(i);
            state.attached = Some(i);
            state.grasped = Some(i);
        }
    }
}

/// One control step: translate by the clipped `Δ`, then apply the gripper
/// channel (`> 0.5` closes). Opening a closed gripper releases whatever is
/// held and ends the episode.
pub fn step(inst: &TaskInstance, state: &SimState, action: &[f32]) -> SimState {
    let mut s = state.clone();
    s.steps += 1;
    if s.released {
        return s;
    }
    let a = |i: usize| action.get(i).copied().unwrap_or(0.0) as f64;
    let d = Point3::new(clip(a(0)), clip(a(1)), clip(a(2)));
    s.gripper += d;
    if let Some(held) = s.attached {
        carry(inst, &mut s, held, d);
    }
    let close = a(3) > 0.5;
    if close && !s.closed {
        s.closed = true;
        try_attach(inst, &mut s);
    } else if !close && s.closed {
        s.closed = false;
        s.attached = None;
        s.released = true;
    }
    s
}

/// Clothesline check: horizontal distance of `p` to the segment and how far
/// `p` sits outside the band `[line, line + 2·tol]` vertically.
fn line_offsets(line: &[Point3; 2], p: Point3, tol: f64) -> (f64, f64) {
    let (a, b) = (line[0], line[1]);
    let ab = Point3::new(b.x - a.x, b.y - a.y, 0.0);
    let ap = Point3::new(p.x - a.x, p.y - a.y, 0.0);
    let s = (ap.dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
    let closest = ab * s;
    let horizontal = (ap - closest).norm();
    let h = a.z + (b.z - a.z) * s;
    let vertical = if p.z < h { h - p.z } else if p.z > h + 2.0 * tol { p.z - h - 2.0 * tol } else { 0.0 };
    (horizontal, vertical)
}

/// Distance of the judged operated point from the goal region.
pub fn goal_distance(inst: &TaskInstance, state: &SimState) -> f64 {
    match &inst.truth.line {
        Some(line) => {
            let idx = state.grasped.unwrap_or(inst.truth.designated_index);
            let (h, v) = line_offsets(line, state.operated.point(idx), inst.spec.tolerance);
            h.hypot(v)
        }
        None => state.operated.point(inst.truth.designated_index).distance(inst.goal_site(state)),
    }
}

pub fn success(inst: &TaskInstance, state: &SimState) -> bool {
    if state.closed {
        return false;
    }
    let tol = inst.spec.tolerance;
    match &inst.truth.line {
        Some(line) => match state.grasped {
            Some(g) => {
                let (h, v) = line_offsets(line, state.operated.point(g), tol);
                h <= tol && v == 0.0
            }
            None => false,
        },
        None => goal_distance(inst, state) <= tol,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureStage {
    /// Nothing was ever held.
    Grasp,
    /// Held, but never brought within three tolerances of the goal.
    Move,
    /// Came close, then ended outside the tolerance or still closed.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub final_distance: f64,
    pub failure_stage: Option<FailureStage>,
    /// Steps driven by the learned policy.
    pub policy_steps: usize,
    /// Number of policy chunks sampled.
    pub sampler_calls: usize,
}

/// Tracks what failure attribution needs over an episode.
#[derive(Clone, Debug, Default)]
pub struct EpisodeMonitor {
    ever_attached: bool,
    closest: f64,
}

impl EpisodeMonitor {
    pub fn new() -> Self {
        Self { ever_attached: false, closest: f64::INFINITY }
    }

    pub fn observe(&mut self, inst: &TaskInstance, state: &SimState) {
        if state.attached.is_some() {
            self.ever_attached = true;
            self.closest = self.closest.min(goal_distance(inst, state));
        }
    }

    pub fn finish(&self, inst: &TaskInstance, state: &SimState, policy_steps: usize, sampler_calls: usize) -> EpisodeResult {
        let ok = success(inst, state);
        let failure_stage = if ok {
            None
        } else if !self.ever_attached {
            Some(FailureStage::Grasp)
        } else if self.closest > 3.0 * inst.spec.tolerance {
            Some(FailureStage::Move)
        } else {
            Some(FailureStage::Final)
        };
        EpisodeResult {
            seed: inst.seed,
            success: ok,
            steps: state.steps,
            final_distance: goal_distance(inst, state),
            failure_stage,
            policy_steps,
            sampler_calls,
        }
    }
}

/// Fixed point subsets observed every step, chosen once at `t = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationLayout {
    /// Indices into the operated points followed by the background points.
    pub global: Vec<usize>,
    pub operated_tokens: Vec<usize>,
    pub background_tokens: Vec<usize>,
}

impl ObservationLayout {
    /// Farthest-point subsets: token sets start from the point nearest each
    /// object's centroid, the global cloud from the first operated point.
    pub fn new(state: &SimState, n_points: usize, tokens: usize) -> Self {
        let mut all = state.operated.points().to_vec();
        all.extend_from_slice(state.background.points());
        let start = |c: &PointCloud| nearest_index(c, c.centroid());
        Self {
            global: fps_from(&all, n_points, 0),
            operated_tokens: fps_from(state.operated.points(), tokens, start(&state.operated)),
            background_tokens: fps_from(state.background.points(), tokens, start(&state.background)),
        }
    }
}

/// Geometry observed at one step, before any provider is involved. Point
/// coordinates are relative to the gripper; the joint state is absolute.
#[derive(Clone, Debug, PartialEq)]
pub struct RawObservation {
    pub global_cloud: Tensor,
    pub operated_xyz: Tensor,
    pub background_xyz: Tensor,
    pub joint_state: Vec<f32>,
}

fn rows_of(points: impl Iterator<Item = Point3>) -> Tensor {
    let data: Vec<f32> = points.flat_map(|p| p.to_f32()).collect();
    Tensor::new(vec![data.len() / 3, 3], data).expect("non-empty subset")
}

pub fn observe(state: &SimState, layout: &ObservationLayout) -> RawObservation {
    let n_op = state.operated.len();
    let point = |i: usize| if i < n_op { state.operated.point(i) } else { state.background.point(i - n_op) };
    let g = state.gripper;
    RawObservation {
        global_cloud: rows_of(layout.global.iter().map(|&i| point(i) - g)),
        operated_xyz: rows_of(layout.operated_tokens.iter().map(|&i| state.operated.point(i) - g)),
        background_xyz: rows_of(layout.background_tokens.iter().map(|&i| state.background.point(i) - g)),
        joint_state: vec![g.x as f32, g.y as f32, g.z as f32, f32::from(u8::from(state.closed))],
    }
}
