//! Demonstration datasets: `manifest.json` plus one blob per array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hgm_core::geometry::Rotation3;
use hgm_core::simenv::{
    Demonstration, GroundTruth, ObservationLayout, RawObservation, SimState, Split, TaskInstance, TaskName, TaskSpec, HOME,
};
use hgm_core::{HgmError, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::blob::Blob;
use crate::config::{TaskConfig, SCHEMA_VERSION};
use crate::store::{ArrayRef, CloudRef};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub steps: usize,
    pub grasp_step: usize,
    pub success: bool,
    pub truth: GroundTruth,
    pub layout: ObservationLayout,
    pub operated: CloudRef,
    pub background: CloudRef,
    /// `global` (T×n×3), `operated_tokens` and `background_tokens` (T×m×3),
    /// `joint` (T×4) and `actions` (T×4).
    pub arrays: BTreeMap<String, ArrayRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: TaskConfig,
    pub split: Split,
    pub seed: u64,
    pub episode_count: usize,
    /// Set when some experts failed and their episodes are missing.
    pub partial: bool,
    pub failed_seeds: Vec<u64>,
    pub episodes: Vec<EpisodeRecord>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub demos: Vec<Demonstration>,
}

fn stack_rows(steps: &[RawObservation], pick: impl Fn(&RawObservation) -> &Tensor) -> Result<Blob> {
    let first = pick(&steps[0]);
    let mut dims = vec![steps.len()];
    dims.extend_from_slice(first.shape());
    Blob::f32(dims, steps.iter().flat_map(|s| pick(s).data().to_vec()).collect())
}

fn split_rows(t: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != steps {
        return Err(HgmError::Format(format!("expected {steps}×N×3 array, got {shape:?}")));
    }
    let per = shape[1] * shape[2];
    t.data().chunks(per).map(|c| Tensor::new(vec![shape[1], shape[2]], c.to_vec())).collect()
}

pub fn write_dataset(
    dir: &Path,
    config: &TaskConfig,
    split: Split,
    seed: u64,
    demos: &[Demonstration],
    failed_seeds: Vec<u64>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut episodes = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        let stem = format!("ep{i:04}");
        let mut arrays = BTreeMap::new();
        let steps = &d.observations;
        let mut put = |name: &str, blob: Blob| -> Result<()> {
            arrays.insert(name.to_string(), ArrayRef::write(dir, &format!("{stem}_{name}.bin"), &blob)?);
            Ok(())
        };
        put("global", stack_rows(steps, |s| &s.global_cloud)?)?;
        put("operated_tokens", stack_rows(steps, |s| &s.operated_xyz)?)?;
        put("background_tokens", stack_rows(steps, |s| &s.background_xyz)?)?;
        put("joint", Blob::f32(vec![steps.len(), 4], steps.iter().flat_map(|s| s.joint_state.clone()).collect())?)?;
        put("actions", Blob::from_tensor(&d.actions))?;
        episodes.push(EpisodeRecord {
            seed: d.instance.seed,
            steps: d.len(),
            grasp_step: d.grasp_step,
            success: d.success,
            truth: d.instance.truth.clone(),
            layout: d.layout.clone(),
            operated: CloudRef::write(dir, &format!("{stem}_operated"), &d.initial.operated)?,
            background: CloudRef::write(dir, &format!("{stem}_background"), &d.initial.background)?,
            arrays,
        });
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        split,
        seed,
        episode_count: episodes.len(),
        partial: !failed_seeds.is_empty(),
        failed_seeds,
        episodes,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn array<'a>(rec: &'a EpisodeRecord, name: &str) -> Result<&'a ArrayRef> {
    rec.arrays.get(name).ok_or_else(|| HgmError::Format(format!("episode {} lacks array {name}", rec.seed)))
}

fn read_episode(dir: &Path, task: TaskName, split: Split, rec: &EpisodeRecord) -> Result<Demonstration> {
    let t = rec.steps;
    let global = split_rows(&array(rec, "global")?.read_tensor(dir)?, t)?;
    let op = split_rows(&array(rec, "operated_tokens")?.read_tensor(dir)?, t)?;
    let bg = split_rows(&array(rec, "background_tokens")?.read_tensor(dir)?, t)?;
    let joint = array(rec, "joint")?.read_tensor(dir)?;
    let actions = array(rec, "actions")?.read_tensor(dir)?;
    if joint.rows() != t || actions.rows() != t || rec.grasp_step >= t.max(1) {
        return Err(HgmError::Format(format!("episode {} arrays disagree with its {t} steps", rec.seed)));
    }
    let observations = (0..t)
        .map(|i| RawObservation {
            global_cloud: global[i].clone(),
            operated_xyz: op[i].clone(),
            background_xyz: bg[i].clone(),
            joint_state: joint.row(i).to_vec(),
        })
        .collect();
    let initial = SimState {
        operated: rec.operated.read(dir)?,
        background: rec.background.read(dir)?,
        gripper: HOME,
        gripper_orientation: Rotation3::IDENTITY,
        closed: false,
        attached: None,
        grasped: None,
        released: false,
        steps: 0,
    };
    Ok(Demonstration {
        instance: TaskInstance { spec: TaskSpec::new(task, split), seed: rec.seed, truth: rec.truth.clone() },
        initial,
        layout: rec.layout.clone(),
        observations,
        actions,
        grasp_step: rec.grasp_step,
        success: rec.success,
    })
}

/// Loads and validates a dataset: every referenced blob must exist and
/// carry the declared header.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| HgmError::Format(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(HgmError::Format(format!("unsupported dataset schema {}", manifest.schema_version)));
    }
    if manifest.episode_count != manifest.episodes.len() {
        return Err(HgmError::Format(format!(
            "manifest lists {} episodes but declares {}",
            manifest.episodes.len(),
            manifest.episode_count
        )));
    }
    let demos = manifest
        .episodes
        .iter()
        .map(|rec| read_episode(dir, manifest.config.task, manifest.split, rec))
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, demos })
}
