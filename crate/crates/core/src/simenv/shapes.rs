//! Procedural object models in their own frame: points, part labels, the
//! coordinates the providers read, and annotated keypoints.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Point3, Rotation3};

pub const LABEL_BODY: i32 = 0;
pub const LABEL_HANDLE: i32 = 1;
pub const LABEL_BOTTOM: i32 = 2;
pub const LABEL_RIM: i32 = 3;
pub const LABEL_SURFACE: i32 = 4;
pub const LABEL_POST: i32 = 5;
pub const LABEL_GOAL: i32 = 6;
pub const LABEL_CLOTH: i32 = 7;

/// Object-frame model. `canonical` rows are nominal-shape coordinates for
/// rigid objects; `intrinsic` rows are nominal-size UV coordinates for
/// sheets (and a copy of `canonical` otherwise).
#[derive(Clone, Debug)]
pub struct Model {
    pub points: Vec<Point3>,
    pub labels: Vec<i32>,
    pub canonical: Vec<Point3>,
    pub intrinsic: Vec<Point3>,
    pub graspable: Vec<bool>,
    /// Manipulation point (operated objects) or goal site (background).
    pub key: usize,
    pub reference: Option<usize>,
    /// Point judged for success when it differs from `key`.
    pub designated: usize,
}

impl Model {
    fn push(&mut self, p: Point3, label: i32, canonical: Point3) -> usize {
        self.points.push(p);
        self.labels.push(label);
        self.canonical.push(canonical);
        self.intrinsic.push(canonical);
        self.graspable.push(false);
        self.points.len() - 1
    }

    fn empty() -> Self {
        Self {
            points: Vec::new(),
            labels: Vec::new(),
            canonical: Vec::new(),
            intrinsic: Vec::new(),
            graspable: Vec::new(),
            key: 0,
            reference: None,
            designated: 0,
        }
    }

    /// World coordinates under yaw `rotation` and `translation`.
    pub fn placed(&self, rotation: &Rotation3, translation: Point3) -> Vec<Point3> {
        self.points.iter().map(|p| rotation.rotate(*p) + translation).collect()
    }
}

pub const MUG_RADIUS: f64 = 0.04;
pub const MUG_HEIGHT: f64 = 0.09;

/// Cylindrical mug standing on z = 0 with a half-ring handle on +x. The
/// manipulation point is the outermost handle point at mid height and the
/// reference sits on the far side of the body at the same height.
pub fn mug(radius: f64, height: f64) -> Model {
    let (sr, sh) = (MUG_RADIUS / radius, MUG_HEIGHT / height);
    let canon = |p: Point3| Point3::new(p.x * sr, p.y * sr, p.z * sh);
    let mut m = Model::empty();
    let sectors = 20;
    let levels = 8;
    let mut reference = 0;
    for k in 0..levels {
        let z = height * k as f64 / levels as f64;
        for s in 0..sectors {
            let a = 2.0 * PI * s as f64 / sectors as f64;
            let p = Point3::new(radius * a.cos(), radius * a.sin(), z);
            let i = m.push(p, LABEL_BODY, canon(p));
            if k == levels / 2 && s == sectors / 2 {
                reference = i;
            }
        }
    }
    for s in 0..sectors {
        let a = 2.0 * PI * s as f64 / sectors as f64;
        let p = Point3::new(radius * a.cos(), radius * a.sin(), height);
        m.push(p, LABEL_RIM, canon(p));
    }
    let bottom = m.push(Point3::ZERO, LABEL_BOTTOM, Point3::ZERO);
    for (frac, count) in [(0.35, 6), (0.7, 12)] {
        for s in 0..count {
            let a = 2.0 * PI * s as f64 / count as f64;
            let p = Point3::new(frac * radius * a.cos(), frac * radius * a.sin(), 0.0);
            m.push(p, LABEL_BOTTOM, canon(p));
        }
    }
    let reach = 0.7 * radius;
    let mut key = 0;
    for j in 0..11 {
        let phi = -PI / 2.0 + PI * j as f64 / 10.0;
        for dy in [-0.004, 0.0, 0.004] {
            let p = Point3::new(radius + reach * phi.cos(), dy, height / 2.0 + reach * phi.sin());
            let i = m.push(p, LABEL_HANDLE, canon(p));
            m.graspable[i] = true;
            if j == 5 && dy == 0.0 {
                key = i;
            }
        }
    }
    m.key = key;
    m.reference = Some(reference);
    m.designated = bottom;
    m
}

pub const PLATE_RADIUS: f64 = 0.1;
pub const PLATE_TOP: f64 = 0.01;

/// Flat plate whose goal site is the centre of the top face.
pub fn plate(radius: f64) -> Model {
    let s = PLATE_RADIUS / radius;
    let canon = |p: Point3| Point3::new(p.x * s, p.y * s, p.z);
    let mut m = Model::empty();
    let goal = m.push(Point3::new(0.0, 0.0, PLATE_TOP), LABEL_GOAL, Point3::new(0.0, 0.0, PLATE_TOP));
    for (frac, count) in [(0.25, 8), (0.5, 12), (0.75, 16)] {
        for k in 0..count {
            let a = 2.0 * PI * k as f64 / count as f64;
            let p = Point3::new(frac * radius * a.cos(), frac * radius * a.sin(), PLATE_TOP);
            m.push(p, LABEL_SURFACE, canon(p));
        }
    }
    for (z, count) in [(PLATE_TOP + 0.008, 24), (0.0, 24)] {
        for k in 0..count {
            let a = 2.0 * PI * (k as f64 + 0.5) / count as f64;
            let p = Point3::new(radius * a.cos(), radius * a.sin(), z);
            m.push(p, LABEL_RIM, canon(p));
        }
    }
    m.key = goal;
    m.designated = goal;
    m
}

pub const LINE_LENGTH: f64 = 0.34;
pub const LINE_HEIGHT: f64 = 0.24;

/// Clothesline along x between two posts; the goal site is the middle of
/// the line.
pub fn clothesline(length: f64, height: f64) -> Model {
    let (sl, sh) = (LINE_LENGTH / length, LINE_HEIGHT / height);
    let canon = |p: Point3| Point3::new(p.x * sl, p.y, p.z * sh);
    let mut m = Model::empty();
    let mut goal = 0;
    let n = 31;
    for k in 0..n {
        let x = -length / 2.0 + length * k as f64 / (n - 1) as f64;
        for dy in [-0.003, 0.003] {
            let p = Point3::new(x, dy, height);
            let label = if k == n / 2 { LABEL_GOAL } else { LABEL_RIM };
            let i = m.push(p, label, canon(p));
            if k == n / 2 && dy > 0.0 {
                goal = i;
            }
        }
    }
    for side in [-1.0, 1.0] {
        for k in 0..12 {
            let p = Point3::new(side * length / 2.0, 0.0, height * k as f64 / 12.0);
            m.push(p, LABEL_POST, canon(p));
        }
    }
    m.key = goal;
    m.designated = goal;
    m
}

/// Smooth random in-plane and out-of-plane warp of a sheet.
#[derive(Clone, Copy, Debug)]
pub struct Warp {
    amp: [f64; 3],
    phase: [f64; 3],
}

impl Warp {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            amp: [rng.random_range(-0.012..0.012), rng.random_range(-0.012..0.012), rng.random_range(0.0..0.015)],
            phase: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
        }
    }

    fn apply(&self, u: f64, v: f64, p: Point3) -> Point3 {
        Point3::new(
            p.x + self.amp[0] * (PI * v + self.phase[0]).sin(),
            p.y + self.amp[1] * (PI * u + self.phase[1]).sin(),
            p.z + self.amp[2] * (0.5 + 0.5 * (2.0 * PI * u + self.phase[2]).sin() * (PI * v).sin()),
        )
    }
}

/// Which sheet point is annotated, in UV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SheetKey {
    /// Middle of the top edge.
    Collar,
    /// The (0, 0) corner.
    Corner,
}

/// `grid×grid` sheet of `width×length` lying on the table. Intrinsic rows
/// are UV scaled to the nominal size, so they ignore both the instance size
/// and the warp. Points within `grasp_radius` (intrinsic) of the key are
/// graspable.
pub fn sheet(
    width: f64,
    length: f64,
    nominal: (f64, f64),
    grid: usize,
    warp: Warp,
    key: SheetKey,
    grasp_radius: f64,
) -> Model {
    let mut m = Model::empty();
    let key_uv = match key {
        SheetKey::Collar => (0.5, 1.0),
        SheetKey::Corner => (0.0, 0.0),
    };
    let mut key_index = 0;
    for j in 0..grid {
        for i in 0..grid {
            let (u, v) = (i as f64 / (grid - 1) as f64, j as f64 / (grid - 1) as f64);
            let flat = Point3::new((u - 0.5) * width, (v - 0.5) * length, 0.002);
            let p = warp.apply(u, v, flat);
            let idx = m.push(p, LABEL_CLOTH, Point3::ZERO);
            m.intrinsic[idx] = Point3::new(u * nominal.0, v * nominal.1, 0.0);
            if (u - key_uv.0).abs() < 1e-9 && (v - key_uv.1).abs() < 1e-9 {
                key_index = idx;
            }
        }
    }
    let k = m.intrinsic[key_index];
    for (g, q) in m.graspable.iter_mut().zip(&m.intrinsic) {
        *g = q.distance(k) <= grasp_radius;
    }
    m.key = key_index;
    m.designated = key_index;
    m
}

/// Pose-dependent stand-in for canonical coordinates of a sheet: world
/// points about their centroid, scaled by the horizontal extent. This is
/// what a rigid-object provider effectively sees on cloth.
pub fn extent_normalized(points: &[Point3], nominal_extent: f64) -> Vec<Point3> {
    let c = points.iter().fold(Point3::ZERO, |a, p| a + *p) / points.len() as f64;
    let extent = points
        .iter()
        .map(|p| (p.x - c.x).abs().max((p.y - c.y).abs()))
        .fold(0.0, f64::max)
        .max(1e-9);
    points.iter().map(|p| (*p - c) * (nominal_extent / (2.0 * extent))).collect()
}
