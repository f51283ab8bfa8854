//! Trained-policy checkpoints: `checkpoint.json`, one blob per parameter,
//! anchor blobs, and the grasp annotation as a sub-directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hgm_core::features::PcaModel;
use hgm_core::policy::{ActionStats, PolicyBundle};
use hgm_core::simenv::{RoleContext, TrainedPolicy};
use hgm_core::{HgmError, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::blob::Blob;
use crate::config::{TaskConfig, SCHEMA_VERSION};
use crate::store::{read_annotation_dir, write_annotation_dir, ArrayRef};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const ANNOTATION_DIR: &str = "annotation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaRecord {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "lowercase")]
pub enum RoleRecord {
    Pca,
    Anchors { array: ArrayRef },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub config: TaskConfig,
    pub stats: ActionStats,
    pub pca: Option<PcaRecord>,
    pub operated: RoleRecord,
    pub background: RoleRecord,
    pub operated_width: usize,
    pub background_width: usize,
    pub parameters: BTreeMap<String, ArrayRef>,
    pub annotation: Option<String>,
}

fn role_record(dir: &Path, name: &str, role: &RoleContext) -> Result<RoleRecord> {
    Ok(match role {
        RoleContext::Pca => RoleRecord::Pca,
        RoleContext::Anchors(t) => RoleRecord::Anchors { array: ArrayRef::write(dir, &format!("{name}_anchors.bin"), &Blob::from_tensor(t))? },
    })
}

fn role_context(dir: &Path, r: &RoleRecord) -> Result<RoleContext> {
    Ok(match r {
        RoleRecord::Pca => RoleContext::Pca,
        RoleRecord::Anchors { array } => RoleContext::Anchors(array.read_tensor(dir)?),
    })
}

pub fn write_checkpoint(dir: &Path, config: &TaskConfig, policy: &TrainedPolicy) -> Result<()> {
    fs::create_dir_all(dir)?;
    let fusion = &policy.bundle.network.fusion;
    let mut parameters = BTreeMap::new();
    for (i, (name, value)) in policy.bundle.store.named_values().enumerate() {
        parameters.insert(name.to_string(), ArrayRef::write(dir, &format!("param{i:03}.bin"), &Blob::from_tensor(value))?);
    }
    let annotation = match &policy.annotation {
        Some(a) => {
            write_annotation_dir(&dir.join(ANNOTATION_DIR), a)?;
            Some(ANNOTATION_DIR.to_string())
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        stats: policy.bundle.stats.clone(),
        pca: policy.pca.as_ref().map(|p| PcaRecord { mean: p.mean().to_vec(), components: p.components().to_vec() }),
        operated: role_record(dir, "operated", &policy.operated)?,
        background: role_record(dir, "background", &policy.background)?,
        operated_width: fusion.operated_width(),
        background_width: fusion.background_width(),
        parameters,
        annotation,
    };
    fs::write(dir.join(CHECKPOINT_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(TaskConfig, TrainedPolicy)> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HgmError::Format(format!("{}: {e}", path.display())))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(HgmError::Format(format!("unsupported checkpoint schema {}", m.schema_version)));
    }
    m.config.validate()?;
    let settings = m.config.settings();
    let mut bundle = PolicyBundle::new(settings.policy.clone(), m.operated_width, m.background_width, m.stats.clone())?;
    let values = m
        .parameters
        .iter()
        .map(|(name, r)| Ok((name.clone(), r.read_tensor(dir)?)))
        .collect::<Result<BTreeMap<String, Tensor>>>()?;
    bundle.store.load_values(&values)?;
    let pca = m.pca.map(|p| PcaModel::from_parts(p.mean, p.components)).transpose()?;
    let annotation = m.annotation.as_ref().map(|a| read_annotation_dir(&dir.join(a))).transpose()?;
    let policy = TrainedPolicy {
        task: m.config.task,
        settings,
        bundle,
        pca,
        operated: role_context(dir, &m.operated)?,
        background: role_context(dir, &m.background)?,
        annotation,
    };
    Ok((m.config, policy))
}
