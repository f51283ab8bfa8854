//! Directory layouts built from JSON manifests plus `HGM1` blobs: array
//! references, point clouds and demo annotations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hgm_core::correspondence::DemoAnnotation;
use hgm_core::features::ObjectCategory;
use hgm_core::geometry::{Payload, Point3, PointCloud, Rotation3};
use hgm_core::{HgmError, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::blob::{read_blob, write_blob, Blob, DType};

/// A blob file named in a manifest, with the header it must carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRef {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

impl ArrayRef {
    pub fn write(dir: &Path, file: &str, blob: &Blob) -> Result<Self> {
        write_blob(&dir.join(file), blob)?;
        Ok(Self { file: file.to_string(), dtype: blob.dtype().name().to_string(), shape: blob.shape() })
    }

    /// Reads the blob and checks it against the declared dtype and shape.
    pub fn read(&self, dir: &Path) -> Result<Blob> {
        let blob = read_blob(&dir.join(&self.file))?;
        if blob.dtype() != DType::parse(&self.dtype)? || blob.shape() != self.shape {
            return Err(HgmError::Format(format!(
                "{}: header says {} {:?}, manifest declares {} {:?}",
                self.file,
                blob.dtype().name(),
                blob.shape(),
                self.dtype,
                self.shape
            )));
        }
        Ok(blob)
    }

    pub fn read_tensor(&self, dir: &Path) -> Result<Tensor> {
        self.read(dir)?.into_tensor()
    }
}

pub fn points_tensor(points: &[Point3]) -> Tensor {
    Tensor::new(vec![points.len(), 3], points.iter().flat_map(|p| p.to_f32()).collect()).expect("3 columns")
}

pub fn tensor_points(t: &Tensor) -> Result<Vec<Point3>> {
    if t.cols() != 3 || t.shape().len() != 2 {
        return Err(HgmError::Shape(format!("points need N×3, got {:?}", t.shape())));
    }
    Ok((0..t.rows()).map(|i| Point3::from_slice(t.row(i))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Features,
    Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadRef {
    pub kind: PayloadKind,
    pub array: ArrayRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudRef {
    pub points: ArrayRef,
    pub payloads: BTreeMap<String, PayloadRef>,
}

impl CloudRef {
    /// Writes `<stem>_points.bin` and one `<stem>_<payload>.bin` per payload.
    pub fn write(dir: &Path, stem: &str, cloud: &PointCloud) -> Result<Self> {
        let points = ArrayRef::write(dir, &format!("{stem}_points.bin"), &Blob::from_tensor(&points_tensor(cloud.points())))?;
        let mut payloads = BTreeMap::new();
        for (name, payload) in cloud.payloads() {
            let file = format!("{stem}_{name}.bin");
            let r = match payload {
                Payload::Features(t) => PayloadRef { kind: PayloadKind::Features, array: ArrayRef::write(dir, &file, &Blob::from_tensor(t))? },
                Payload::Labels(l) => PayloadRef {
                    kind: PayloadKind::Labels,
                    array: ArrayRef::write(dir, &file, &Blob::i32(vec![l.len()], l.clone())?)?,
                },
            };
            payloads.insert(name.clone(), r);
        }
        Ok(Self { points, payloads })
    }

    pub fn read(&self, dir: &Path) -> Result<PointCloud> {
        let mut cloud = PointCloud::new(tensor_points(&self.points.read_tensor(dir)?)?)?;
        for (name, p) in &self.payloads {
            let payload = match p.kind {
                PayloadKind::Features => Payload::Features(p.array.read_tensor(dir)?),
                PayloadKind::Labels => Payload::Labels(p.array.read(dir)?.into_i32()?),
            };
            cloud.set_payload(name, payload)?;
        }
        Ok(cloud)
    }
}

pub const CLOUD_FILE: &str = "cloud.json";

/// Standalone cloud directory: `cloud.json` plus blobs.
pub fn write_cloud_dir(dir: &Path, cloud: &PointCloud) -> Result<()> {
    fs::create_dir_all(dir)?;
    let r = CloudRef::write(dir, "cloud", cloud)?;
    fs::write(dir.join(CLOUD_FILE), serde_json::to_string_pretty(&r)?)?;
    Ok(())
}

pub fn read_cloud_dir(dir: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(dir.join(CLOUD_FILE))
        .map_err(|e| HgmError::Format(format!("{}: {e}", dir.join(CLOUD_FILE).display())))?;
    let r: CloudRef = serde_json::from_str(&text)?;
    r.read(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub manipulation_index: usize,
    pub reference_indices: Vec<usize>,
    pub category: ObjectCategory,
    pub grasp_orientation: Rotation3,
    pub fixed_orientation: Option<Rotation3>,
    pub cloud: CloudRef,
}

pub const ANNOTATION_FILE: &str = "annotation.json";

/// Annotation directory: `annotation.json` plus the demo cloud blobs.
pub fn write_annotation_dir(dir: &Path, a: &DemoAnnotation) -> Result<()> {
    fs::create_dir_all(dir)?;
    let record = AnnotationRecord {
        manipulation_index: a.manipulation_index,
        reference_indices: a.reference_indices.clone(),
        category: a.category,
        grasp_orientation: a.grasp_orientation,
        fixed_orientation: a.fixed_orientation,
        cloud: CloudRef::write(dir, "demo", &a.demo_cloud)?,
    };
    fs::write(dir.join(ANNOTATION_FILE), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

pub fn read_annotation_dir(dir: &Path) -> Result<DemoAnnotation> {
    let path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HgmError::Format(format!("{}: {e}", path.display())))?;
    let r: AnnotationRecord = serde_json::from_str(&text)?;
    let mut a = DemoAnnotation::new(r.cloud.read(dir)?, r.manipulation_index, r.reference_indices, r.category)?
        .with_grasp_orientation(r.grasp_orientation);
    a.fixed_orientation = r.fixed_orientation;
    Ok(a)
}
