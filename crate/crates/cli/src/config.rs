//! Task configuration: object roles, categories, provider routing and the
//! hyperparameters handed to the pipeline.

use std::fs;
use std::path::Path;

use hgm_core::features::{ObjectCategory, SyntheticDeformableProvider, SyntheticProviderConfig, SyntheticRigidProvider};
use hgm_core::policy::PolicyConfig;
use hgm_core::simenv::{PipelineSettings, Split, TaskName, TaskSpec, Variant};
use hgm_core::{HgmError, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Operated,
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub role: Role,
    pub name: String,
    pub category: ObjectCategory,
    pub provider: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorParams {
    /// PCA components for rigid and articulated objects.
    pub k: usize,
    /// Anchor count for deformable objects.
    pub anchors: usize,
    /// Descriptor tokens per object.
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskName,
    pub variant: Variant,
    pub objects: Vec<ObjectEntry>,
    pub descriptor: DescriptorParams,
    pub provider: SyntheticProviderConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
}

fn object_names(task: TaskName) -> (&'static str, &'static str) {
    match task {
        TaskName::Place => ("mug", "plate"),
        TaskName::Hang => ("shirt", "clothesline"),
        TaskName::Stack => ("small-towel", "large-towel"),
    }
}

impl TaskConfig {
    pub fn default_for(task: TaskName, variant: Variant) -> Self {
        let settings = PipelineSettings::new(variant);
        let spec = TaskSpec::new(task, Split::Train);
        let (op, bg) = object_names(task);
        let entry = |role, name: &str, category| ObjectEntry {
            role,
            name: name.to_string(),
            category,
            provider: settings.route(category).0.to_string(),
        };
        Self {
            task,
            variant,
            objects: vec![
                entry(Role::Operated, op, spec.operated_category),
                entry(Role::Background, bg, spec.background_category),
            ],
            descriptor: DescriptorParams { k: settings.pca_k, anchors: settings.anchors, tokens: settings.tokens },
            provider: settings.provider,
            policy: settings.policy,
            seed: 42,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HgmError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let cfg: TaskConfig =
            serde_json::from_str(&text).map_err(|e| HgmError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn object(&self, role: Role) -> Result<&ObjectEntry> {
        let mut it = self.objects.iter().filter(|o| o.role == role);
        match (it.next(), it.next()) {
            (Some(o), None) => Ok(o),
            _ => Err(HgmError::InvalidConfig(format!("need exactly one {role:?} object").to_lowercase())),
        }
    }

    /// Checks roles, that categories match the task, and that each object
    /// is routed to the provider the variant prescribes.
    pub fn validate(&self) -> Result<()> {
        let spec = TaskSpec::new(self.task, Split::Train);
        let settings = self.settings();
        for (role, want) in [(Role::Operated, spec.operated_category), (Role::Background, spec.background_category)] {
            let o = self.object(role)?;
            if o.category != want {
                return Err(HgmError::InvalidConfig(format!(
                    "{} is {} in {}, config says {}",
                    o.name, want, self.task, o.category
                )));
            }
            if o.provider != SyntheticRigidProvider::ID && o.provider != SyntheticDeformableProvider::ID {
                return Err(HgmError::NoProvider(o.provider.clone()));
            }
            let routed = settings.route(o.category).0;
            if o.provider != routed {
                return Err(HgmError::InvalidConfig(format!(
                    "{} routes to {}, but variant {} uses {routed} for {} objects",
                    o.name, o.provider, self.variant, o.category
                )));
            }
        }
        settings.policy.validate()
    }

    pub fn settings(&self) -> PipelineSettings {
        let mut s = PipelineSettings::new(self.variant);
        s.provider = self.provider;
        s.tokens = self.descriptor.tokens;
        s.pca_k = self.descriptor.k;
        s.anchors = self.descriptor.anchors;
        s.policy = self.policy.clone();
        s.policy.seed = self.seed;
        s.policy.fusion.enable_dual_stream = self.variant != Variant::NoPe;
        s
    }
}
