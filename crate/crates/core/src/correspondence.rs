//! Manipulation-point transfer by feature matching, and grasp orientation
//! from auxiliary reference points.

use serde::{Deserialize, Serialize};

use crate::error::{HgmError, Result};
use crate::features::ObjectCategory;
use crate::geometry::{cosine_similarity, rotation_between, GraspPose, Point3, PointCloud, Rotation3, FEATURES};
use crate::tensor::Tensor;

/// An annotated demonstration object.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoAnnotation {
    pub demo_cloud: PointCloud,
    pub manipulation_index: usize,
    pub reference_indices: Vec<usize>,
    pub category: ObjectCategory,
    /// Gripper orientation used in the demonstration.
    pub grasp_orientation: Rotation3,
    /// Orientation applied to deformable targets; identity when absent.
    pub fixed_orientation: Option<Rotation3>,
}

impl DemoAnnotation {
    pub fn new(
        demo_cloud: PointCloud,
        manipulation_index: usize,
        reference_indices: Vec<usize>,
        category: ObjectCategory,
    ) -> Result<Self> {
        let n = demo_cloud.len();
        if manipulation_index >= n || reference_indices.iter().any(|&i| i >= n) {
            return Err(HgmError::InvalidConfig(format!("annotation index out of range for {n} points")));
        }
        if !category.is_deformable() && reference_indices.is_empty() {
            return Err(HgmError::InvalidConfig(format!("{category} annotations need a reference point")));
        }
        if demo_cloud.features(FEATURES).is_none() {
            return Err(HgmError::NoFeatures("demonstration cloud".into()));
        }
        Ok(Self {
            demo_cloud,
            manipulation_index,
            reference_indices,
            category,
            grasp_orientation: Rotation3::IDENTITY,
            fixed_orientation: None,
        })
    }

    pub fn with_grasp_orientation(mut self, orientation: Rotation3) -> Self {
        self.grasp_orientation = orientation;
        self
    }

    pub fn with_fixed_orientation(mut self, orientation: Rotation3) -> Self {
        self.fixed_orientation = Some(orientation);
        self
    }

    fn features(&self) -> &Tensor {
        self.demo_cloud.features(FEATURES).expect("checked at construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceResult {
    pub target_index: usize,
    pub score: f64,
    pub runner_up_score: f64,
}

/// Exhaustive cosine-similarity scan; ties go to the lowest index.
pub fn match_point(query: &[f32], target_features: &Tensor) -> Result<CorrespondenceResult> {
    if target_features.cols() != query.len() {
        return Err(HgmError::DimMismatch(format!(
            "query has {} entries, targets {} columns",
            query.len(),
            target_features.cols()
        )));
    }
    if target_features.rows() == 0 {
        return Err(HgmError::Shape("no target rows to match against".into()));
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for i in 0..target_features.rows() {
        let s = cosine_similarity(query, target_features.row(i))?;
        if s > best.1 {
            second = best.1;
            best = (i, s);
        } else if s > second {
            second = s;
        }
    }
    if target_features.rows() == 1 {
        second = best.1;
    }
    Ok(CorrespondenceResult { target_index: best.0, score: best.1, runner_up_score: second })
}

fn target_features(cloud: &PointCloud) -> Result<&Tensor> {
    cloud
        .features(FEATURES)
        .ok_or_else(|| HgmError::NoFeatures("target cloud has no `features` payload".into()))
}

fn transfer(demo: &DemoAnnotation, demo_index: usize, target: &Tensor) -> Result<CorrespondenceResult> {
    match_point(demo.features().row(demo_index), target)
}

/// World position of the target counterpart of the demo manipulation point.
pub fn locate_manipulation_point(
    demo: &DemoAnnotation,
    target_cloud: &PointCloud,
) -> Result<(Point3, CorrespondenceResult)> {
    let feats = target_features(target_cloud)?;
    let m = transfer(demo, demo.manipulation_index, feats)?;
    Ok((target_cloud.point(m.target_index), m))
}

/// Mean offset of the reference points from the manipulation point.
fn mean_offset(anchor: Point3, refs: impl Iterator<Item = Point3>) -> Point3 {
    let (sum, n) = refs.fold((Point3::ZERO, 0usize), |(s, n), p| (s + (p - anchor), n + 1));
    sum * (1.0 / n.max(1) as f64)
}

/// Grasp pose for the target object, pre-grasp (open gripper).
pub fn plan_grasp(demo: &DemoAnnotation, target_cloud: &PointCloud) -> Result<GraspPose> {
    let (position, _) = locate_manipulation_point(demo, target_cloud)?;
    if demo.category.is_deformable() {
        let orientation = demo.fixed_orientation.unwrap_or(Rotation3::IDENTITY);
        return GraspPose::new(position, orientation, 0.0);
    }
    let feats = target_features(target_cloud)?;
    let demo_anchor = demo.demo_cloud.point(demo.manipulation_index);
    let u = mean_offset(demo_anchor, demo.reference_indices.iter().map(|&i| demo.demo_cloud.point(i)));
    let mut matched = Vec::with_capacity(demo.reference_indices.len());
    for &r in &demo.reference_indices {
        matched.push(target_cloud.point(transfer(demo, r, feats)?.target_index));
    }
    let v = mean_offset(position, matched.into_iter());
    for w in [u, v] {
        if w.norm() < 1e-6 {
            return Err(HgmError::DegenerateReference(w.norm()));
        }
    }
    let delta = rotation_between(u, v)?;
    GraspPose::new(position, delta.compose(&demo.grasp_orientation), 0.0)
}
