//! Core 3-D primitives: points, unit-quaternion rotations, point clouds with
//! named per-point payloads, farthest-point sampling and nearest lookup.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgmError, Result};
use crate::tensor::Tensor;

/// Payload holding per-point provider features.
pub const FEATURES: &str = "features";
/// Integer semantic part labels.
pub const LABELS: &str = "label";
/// Nominal-shape object-frame coordinates (what a rigid-object model sees).
pub const CANONICAL: &str = "canonical";
/// Intrinsic material coordinates of deformable surfaces.
pub const INTRINSIC: &str = "intrinsic";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_slice(v: &[f32]) -> Self {
        Self::new(v[0] as f64, v[1] as f64, v[2] as f64)
    }

    pub fn to_f32(self) -> [f32; 3] {
        [self.x as f32, self.y as f32, self.z as f32]
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(self, o: Point3) -> f64 {
        (self - o).norm()
    }

    pub fn normalized(self) -> Option<Point3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn component(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Point3) {
        *self = *self + o;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Point3 {
    type Output = Point3;
    fn div(self, s: f64) -> Point3 {
        Point3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation3 {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Rotation3 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Rotation3 {
    pub const IDENTITY: Rotation3 = Rotation3 { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalises an arbitrary non-zero quaternion.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n <= 1e-12 {
            return Err(HgmError::DegenerateVector(format!("quaternion norm {n}")));
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    pub fn from_axis_angle(axis: Point3, angle: f64) -> Result<Self> {
        let a = axis
            .normalized()
            .ok_or_else(|| HgmError::DegenerateVector("zero rotation axis".into()))?;
        let (s, c) = (angle / 2.0).sin_cos();
        Ok(Self { w: c, x: a.x * s, y: a.y * s, z: a.z * s })
    }

    /// Rotation about +z, the only rotation tabletop objects undergo.
    pub fn yaw(angle: f64) -> Self {
        let (s, c) = (angle / 2.0).sin_cos();
        Self { w: c, x: 0.0, y: 0.0, z: s }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn inverse(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self ∘ other` (apply `other` first), renormalised.
    pub fn compose(&self, o: &Rotation3) -> Self {
        let q = Self {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        };
        let n = q.norm();
        Self { w: q.w / n, x: q.x / n, y: q.y / n, z: q.z / n }
    }

    pub fn rotate(&self, p: Point3) -> Point3 {
        let u = Point3::new(self.x, self.y, self.z);
        let t = u.cross(p) * 2.0;
        p + t * self.w + u.cross(t)
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let Self { w, x, y, z } = *self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Geodesic angle between two rotations, in radians, in `[0, π]`.
    pub fn angle_to(&self, o: &Rotation3) -> f64 {
        let d = (self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z).abs();
        2.0 * d.min(1.0).acos()
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, o: Rotation3) -> Rotation3 {
        self.compose(&o)
    }
}

/// Shortest-arc rotation taking the direction of `u` onto that of `v`.
///
/// Antiparallel inputs get a half turn about `û × e_k`, where `e_k` is the
/// coordinate axis least aligned with `û` (lowest index on ties).
pub fn rotation_between(u: Point3, v: Point3) -> Result<Rotation3> {
    if !(u.norm() >= 1e-9 && v.norm() >= 1e-9) {
        return Err(HgmError::DegenerateVector(format!(
            "rotation_between needs non-zero inputs (|u|={:.3e}, |v|={:.3e})",
            u.norm(),
            v.norm()
        )));
    }
    let (uh, vh) = (u / u.norm(), v / v.norm());
    let d = uh.dot(vh);
    if d < -1.0 + 1e-9 {
        let k = (0..3)
            .min_by(|&a, &b| uh.component(a).abs().total_cmp(&uh.component(b).abs()))
            .unwrap();
        let mut e = Point3::ZERO;
        match k {
            0 => e.x = 1.0,
            1 => e.y = 1.0,
            _ => e.z = 1.0,
        }
        let axis = uh.cross(e).normalized().expect("least-aligned axis is never parallel");
        return Ok(Rotation3 { w: 0.0, x: axis.x, y: axis.y, z: axis.z });
    }
    let c = uh.cross(vh);
    Rotation3::from_quaternion(1.0 + d, c.x, c.y, c.z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub position: Point3,
    pub orientation: Rotation3,
    /// 0 = open, 1 = closed.
    pub gripper: f64,
}

impl GraspPose {
    pub fn new(position: Point3, orientation: Rotation3, gripper: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gripper) {
            return Err(HgmError::InvalidConfig(format!("gripper command {gripper} outside [0,1]")));
        }
        Ok(Self { position, orientation, gripper })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// `N×D` feature rows.
    Features(Tensor),
    Labels(Vec<i32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Features(t) => t.rows(),
            Payload::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Payload {
        match self {
            Payload::Features(t) => Payload::Features(t.gather_rows(idx)),
            Payload::Labels(l) => Payload::Labels(idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Ordered points with optional named per-point payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    payloads: BTreeMap<String, Payload>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(HgmError::Shape("point cloud needs at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(HgmError::NonFinite(format!("point {i}")));
        }
        Ok(Self { points, payloads: BTreeMap::new() })
    }

    pub fn with_payload(mut self, name: &str, payload: Payload) -> Result<Self> {
        self.set_payload(name, payload)?;
        Ok(self)
    }

    pub fn set_payload(&mut self, name: &str, payload: Payload) -> Result<()> {
        if payload.len() != self.points.len() {
            return Err(HgmError::Shape(format!(
                "payload {name} has {} rows for {} points",
                payload.len(),
                self.points.len()
            )));
        }
        self.payloads.insert(name.to_string(), payload);
        Ok(())
    }

    pub fn remove_payload(&mut self, name: &str) -> Option<Payload> {
        self.payloads.remove(name)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point3 {
        self.points[i]
    }

    /// Replaces coordinates while keeping payloads; the count must not change.
    pub fn set_points(&mut self, points: Vec<Point3>) -> Result<()> {
        if points.len() != self.points.len() {
            return Err(HgmError::Shape("set_points changes the point count".into()));
        }
        self.points = points;
        Ok(())
    }

    pub fn payloads(&self) -> &BTreeMap<String, Payload> {
        &self.payloads
    }

    pub fn payload(&self, name: &str) -> Option<&Payload> {
        self.payloads.get(name)
    }

    pub fn features(&self, name: &str) -> Option<&Tensor> {
        match self.payloads.get(name) {
            Some(Payload::Features(t)) => Some(t),
            _ => None,
        }
    }

    pub fn labels(&self, name: &str) -> Option<&[i32]> {
        match self.payloads.get(name) {
            Some(Payload::Labels(l)) => Some(l),
            _ => None,
        }
    }

    /// Sub-cloud at `idx`; payload rows follow the points.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            payloads: self.payloads.iter().map(|(k, p)| (k.clone(), p.select(idx))).collect(),
        }
    }

    pub fn coords(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| p.to_f32()).collect();
        Tensor::new(vec![self.points.len(), 3], data).expect("cloud is non-empty")
    }

    pub fn centroid(&self) -> Point3 {
        let sum = self.points.iter().fold(Point3::ZERO, |a, p| a + *p);
        sum / self.points.len() as f64
    }
}

/// `p ↦ R·p + t` for every point; payloads copied unchanged.
pub fn apply_transform(cloud: &PointCloud, rotation: &Rotation3, translation: Point3) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| rotation.rotate(*p) + translation).collect(),
        payloads: cloud.payloads.clone(),
    }
}

/// Farthest-point sampling indices. The first index is a seeded uniform
/// draw; later ties go to the lowest index. Returns all indices in order
/// when `m ≥ N`.
pub fn fps_indices(points: &[Point3], m: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if m >= n {
        return (0..n).collect();
    }
    if m == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    fps_from(points, m, first)
}

/// Farthest-point sampling from a fixed starting index.
pub fn fps_from(points: &[Point3], m: usize, first: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    let mut chosen = Vec::with_capacity(m);
    let mut dist = vec![f64::INFINITY; n];
    let mut current = first;
    for _ in 0..m {
        chosen.push(current);
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = p.distance(c);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        current = best.1;
    }
    chosen
}

pub fn fps_downsample(cloud: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    if m == 0 {
        return Err(HgmError::InvalidConfig("fps_downsample needs m ≥ 1".into()));
    }
    if m >= cloud.len() {
        return Ok(cloud.clone());
    }
    Ok(cloud.select(&fps_indices(&cloud.points, m, seed)))
}

/// Index of the point closest to `query`; ties go to the lowest index.
pub fn nearest_index(cloud: &PointCloud, query: Point3) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for (i, p) in cloud.points.iter().enumerate() {
        let d = p.distance(query);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// `a·b / (‖a‖‖b‖)`, accumulated in `f64`. A zero vector on either side
/// yields 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(HgmError::DimMismatch(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
