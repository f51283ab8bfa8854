//! Two-stage pipeline on the synthetic tasks: descriptor preparation,
//! policy training from demonstrations, and episode evaluation for the full
//! method and its ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::correspondence::{plan_grasp, DemoAnnotation};
use crate::error::{HgmError, Result};
use crate::features::{
    descriptors_from_features, fit_pca, DescriptorContext, ObjectCategory, PcaModel, ProviderRegistry,
    SyntheticDeformableProvider, SyntheticProviderConfig, SyntheticRigidProvider,
};
use crate::geometry::{fps_from, Payload, Point3, PointCloud, FEATURES};
use crate::par;
use crate::policy::{build_condition, ddim_sample, fit, ActionStats, EpisodeSamples, Observation, PolicyBundle, PolicyConfig, StepLog, TrainingSet};
use crate::tensor::Tensor;

use super::expert::{capped_delta, Demonstration, ExpertController, EXPERT_CAP};
use super::{make_task, observe, step, EpisodeMonitor, EpisodeResult, ObservationLayout, RawObservation, SimState, Split, TaskInstance, TaskName};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    /// No correspondence-guided grasp: the policy also has to grasp.
    #[serde(rename = "no-cg")]
    NoCg,
    /// No positional encoding of background coordinates.
    #[serde(rename = "no-pe")]
    NoPe,
    /// No multi-provider routing: the rigid provider serves every object.
    #[serde(rename = "no-mfm")]
    NoMfm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoCg, Variant::NoPe, Variant::NoMfm];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCg => "no-cg",
            Variant::NoPe => "no-pe",
            Variant::NoMfm => "no-mfm",
        }
    }

    pub fn uses_grasp_stage(self) -> bool {
        self != Variant::NoCg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = HgmError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| HgmError::InvalidConfig(format!("unknown variant {s}")))
    }
}

/// Everything besides the network that shapes a trained policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub variant: Variant,
    pub provider: SyntheticProviderConfig,
    /// Descriptor tokens per object.
    pub tokens: usize,
    pub pca_k: usize,
    pub anchors: usize,
    pub policy: PolicyConfig,
}

impl PipelineSettings {
    pub fn new(variant: Variant) -> Self {
        let mut policy = PolicyConfig { epochs: 300, lr: 1e-3, lr_warmup_steps: 100, ..PolicyConfig::default() };
        policy.fusion.enable_dual_stream = variant != Variant::NoPe;
        Self { variant, provider: SyntheticProviderConfig::default(), tokens: 16, pca_k: 5, anchors: 8, policy }
    }

    /// Provider id and whether the PCA route applies, per object category.
    pub fn route(&self, category: ObjectCategory) -> (&'static str, bool) {
        if self.variant == Variant::NoMfm || !category.is_deformable() {
            (SyntheticRigidProvider::ID, true)
        } else {
            (SyntheticDeformableProvider::ID, false)
        }
    }

    pub fn registry(&self) -> Result<ProviderRegistry> {
        let mut reg = ProviderRegistry::synthetic(self.provider)?;
        if self.variant == Variant::NoMfm {
            reg.force_single(SyntheticRigidProvider::ID)?;
        }
        Ok(reg)
    }
}

/// Compression context of one object role.
#[derive(Clone, Debug, PartialEq)]
pub enum RoleContext {
    Pca,
    Anchors(Tensor),
}

/// A trained policy plus the descriptor state and grasp annotation it was
/// trained with.
#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub task: TaskName,
    pub settings: PipelineSettings,
    pub bundle: PolicyBundle,
    pub pca: Option<PcaModel>,
    pub operated: RoleContext,
    pub background: RoleContext,
    /// Absent for the variant without the grasp stage.
    pub annotation: Option<DemoAnnotation>,
}

/// Features of both objects at `t = 0`, routed per the settings.
fn scene_features(
    settings: &PipelineSettings,
    registry: &ProviderRegistry,
    inst: &TaskInstance,
    state: &SimState,
) -> Result<(Tensor, Tensor)> {
    let feats = |cloud: &PointCloud, category: ObjectCategory| -> Result<Tensor> {
        let (id, _) = settings.route(category);
        let provider = registry.by_id(id).ok_or_else(|| HgmError::NoProvider(id.to_string()))?;
        provider.compute(cloud)
    };
    Ok((
        feats(&state.operated, inst.spec.operated_category)?,
        feats(&state.background, inst.spec.background_category)?,
    ))
}

fn context<'a>(role: &'a RoleContext, pca: Option<&'a PcaModel>) -> Result<DescriptorContext<'a>> {
    match role {
        RoleContext::Anchors(a) => Ok(DescriptorContext::Anchors(a)),
        RoleContext::Pca => pca
            .map(DescriptorContext::Pca)
            .ok_or_else(|| HgmError::MissingContext("PCA route without a fitted model".into())),
    }
}

/// Semantic rows of the descriptor tokens; they are fixed for an episode
/// while the coordinates follow the objects.
fn token_semantics(features: &Tensor, tokens: &[usize], ctx: DescriptorContext<'_>) -> Result<Tensor> {
    let f = features.gather_rows(tokens);
    let zeros = Tensor::zeros(&[tokens.len(), 3]);
    let d = descriptors_from_features(&f, &zeros, ctx)?;
    let w = d.route.semantic_width();
    let rows: Vec<f32> = (0..d.data.rows()).flat_map(|i| d.data.row(i)[..w].to_vec()).collect();
    Tensor::new(vec![tokens.len(), w], rows)
}

/// Per-episode constant parts of the observation.
struct EpisodeContext {
    op_semantic: Tensor,
    bg_semantic: Tensor,
}

impl EpisodeContext {
    fn observation(&self, raw: &RawObservation) -> Result<Observation> {
        Ok(Observation {
            global_cloud: raw.global_cloud.clone(),
            joint_state: raw.joint_state.clone(),
            operated_descriptors: Tensor::concat_cols(&[&self.op_semantic, &raw.operated_xyz])?,
            background_descriptors: Tensor::concat_cols(&[&self.bg_semantic, &raw.background_xyz])?,
        })
    }
}

fn with_features(cloud: &PointCloud, features: Tensor) -> Result<PointCloud> {
    cloud.clone().with_payload(FEATURES, Payload::Features(features))
}

/// First step of the segment the policy is trained on.
fn segment_start(variant: Variant, demo: &Demonstration) -> usize {
    if variant.uses_grasp_stage() {
        demo.grasp_step
    } else {
        0
    }
}

/// Everything `fit` needs, built from demonstrations: fitted PCA and anchors,
/// the grasp annotation, action statistics and the training windows.
pub struct Prepared {
    pub policy: TrainedPolicy,
    pub data: TrainingSet,
}

pub fn prepare(task: TaskName, settings: &PipelineSettings, demos: &[Demonstration]) -> Result<Prepared> {
    let first = demos.first().ok_or_else(|| HgmError::InvalidConfig("no demonstrations".into()))?;
    if let Some(d) = demos.iter().find(|d| d.instance.spec.name != task) {
        return Err(HgmError::CheckpointTaskMismatch(format!(
            "demonstration of {} in a {task} dataset",
            d.instance.spec.name
        )));
    }
    let registry = settings.registry()?;
    let features: Vec<(Tensor, Tensor)> = par::map_indexed(demos.len(), |i| {
        scene_features(settings, &registry, &demos[i].instance, &demos[i].initial)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let spec = &first.instance.spec;
    let (_, op_pca) = settings.route(spec.operated_category);
    let (_, bg_pca) = settings.route(spec.background_category);
    let mut pca_rows: Vec<&Tensor> = Vec::new();
    for (op, bg) in &features {
        if op_pca {
            pca_rows.push(op);
        }
        if bg_pca {
            pca_rows.push(bg);
        }
    }
    let pca = if pca_rows.is_empty() { None } else { Some(fit_pca(&Tensor::concat_rows(&pca_rows)?, settings.pca_k)?) };
    let anchors = |feats: &Tensor, cloud: &PointCloud| {
        RoleContext::Anchors(feats.gather_rows(&fps_from(cloud.points(), settings.anchors, 0)))
    };
    let operated = if op_pca { RoleContext::Pca } else { anchors(&features[0].0, &first.initial.operated) };
    let background = if bg_pca { RoleContext::Pca } else { anchors(&features[0].1, &first.initial.background) };

    let annotation = if settings.variant.uses_grasp_stage() {
        let t = &first.instance.truth;
        Some(
            DemoAnnotation::new(
                with_features(&first.initial.operated, features[0].0.clone())?,
                t.manipulation_index,
                t.reference_indices.clone(),
                spec.operated_category,
            )?
            .with_grasp_orientation(t.grasp_orientation),
        )
    } else {
        None
    };

    let mut episodes = Vec::with_capacity(demos.len());
    let mut all_actions = Vec::new();
    for (demo, (op_f, bg_f)) in demos.iter().zip(&features) {
        let ctx = EpisodeContext {
            op_semantic: token_semantics(op_f, &demo.layout.operated_tokens, context(&operated, pca.as_ref())?)?,
            bg_semantic: token_semantics(bg_f, &demo.layout.background_tokens, context(&background, pca.as_ref())?)?,
        };
        let start = segment_start(settings.variant, demo);
        let observations =
            demo.observations[start..].iter().map(|o| ctx.observation(o)).collect::<Result<Vec<_>>>()?;
        let rows: Vec<f32> = (start..demo.len()).flat_map(|t| demo.actions.row(t).to_vec()).collect();
        let actions = Tensor::new(vec![demo.len() - start, demo.actions.cols()], rows)?;
        all_actions.push(actions.clone());
        episodes.push(EpisodeSamples { observations, actions });
    }
    let stats = ActionStats::fit(&Tensor::concat_rows(&all_actions.iter().collect::<Vec<_>>())?)?;
    for ep in &mut episodes {
        ep.actions = stats.normalize(&ep.actions);
    }
    let op_w = context(&operated, pca.as_ref())?.route().width();
    let bg_w = context(&background, pca.as_ref())?.route().width();
    let bundle = PolicyBundle::new(settings.policy.clone(), op_w, bg_w, stats)?;
    let data = TrainingSet::new(&episodes, &settings.policy)?;
    Ok(Prepared {
        policy: TrainedPolicy { task, settings: settings.clone(), bundle, pca, operated, background, annotation },
        data,
    })
}

/// Prepares and fits a policy for `settings.policy.epochs` epochs.
pub fn train_policy(
    task: TaskName,
    settings: &PipelineSettings,
    demos: &[Demonstration],
    on_step: impl FnMut(StepLog),
) -> Result<TrainedPolicy> {
    let Prepared { mut policy, data } = prepare(task, settings, demos)?;
    fit(&mut policy.bundle, &data, settings.policy.epochs, settings.policy.seed, on_step)?;
    Ok(policy)
}

/// `num` expert demonstrations on seeds `seed, seed + 1, …`.
pub fn generate_demos(task: TaskName, split: Split, num: usize, seed: u64, settings: &PipelineSettings) -> Vec<Result<Demonstration>> {
    par::map_indexed(num, |i| {
        super::scripted_expert(task.as_str(), split, seed.wrapping_add(i as u64), settings.policy.n_points, settings.tokens)
    })
}

/// Who acts in an evaluation episode.
#[derive(Clone, Copy, Debug)]
pub enum Agent<'a> {
    /// The scripted expert with privileged state.
    Expert,
    Policy(&'a TrainedPolicy),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskName,
    pub split: Split,
    pub seed: u64,
    pub success_rate: f64,
    pub episodes: Vec<EpisodeResult>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn expert_episode(inst: &TaskInstance, mut state: SimState) -> EpisodeResult {
    state.gripper_orientation = inst.truth.grasp_orientation;
    let mut ctl = ExpertController::new();
    let mut monitor = EpisodeMonitor::new();
    while !state.released && state.steps < inst.spec.max_steps {
        let a = ctl.act(inst, &state);
        state = step(inst, &state, &a);
        monitor.observe(inst, &state);
    }
    monitor.finish(inst, &state, 0, 0)
}

/// Straight-line approach to `target`, then close. Returns `false` when the
/// step budget runs out first.
fn scripted_grasp(inst: &TaskInstance, state: &mut SimState, target: Point3, monitor: &mut EpisodeMonitor) -> bool {
    while state.steps < inst.spec.max_steps {
        let d = target - state.gripper;
        if d.x.abs().max(d.y.abs()).max(d.z.abs()) <= 1e-9 {
            *state = step(inst, state, &[0.0, 0.0, 0.0, 1.0]);
            monitor.observe(inst, state);
            return true;
        }
        let d = capped_delta(state.gripper, target, EXPERT_CAP);
        *state = step(inst, state, &[d.x as f32, d.y as f32, d.z as f32, 0.0]);
        monitor.observe(inst, state);
    }
    false
}

/// One episode of the trained two-stage pipeline.
pub fn policy_episode(policy: &TrainedPolicy, inst: &TaskInstance, mut state: SimState) -> Result<EpisodeResult> {
    let settings = &policy.settings;
    let cfg = &policy.bundle.config;
    let registry = settings.registry()?;
    let layout = ObservationLayout::new(&state, cfg.n_points, settings.tokens);
    let (op_f, bg_f) = scene_features(settings, &registry, inst, &state)?;
    let ctx = EpisodeContext {
        op_semantic: token_semantics(&op_f, &layout.operated_tokens, context(&policy.operated, policy.pca.as_ref())?)?,
        bg_semantic: token_semantics(&bg_f, &layout.background_tokens, context(&policy.background, policy.pca.as_ref())?)?,
    };
    let mut monitor = EpisodeMonitor::new();
    if let Some(annotation) = &policy.annotation {
        let target = with_features(&state.operated, op_f)?;
        let pose = match plan_grasp(annotation, &target) {
            Ok(p) => p,
            Err(HgmError::DegenerateReference(_)) => return Ok(monitor.finish(inst, &state, 0, 0)),
            Err(e) => return Err(e),
        };
        state.gripper_orientation = pose.orientation;
        if !scripted_grasp(inst, &mut state, pose.position, &mut monitor) || state.attached.is_none() {
            return Ok(monitor.finish(inst, &state, 0, 0));
        }
    }
    let policy_start = state.steps;
    let mut history = vec![ctx.observation(&observe(&state, &layout))?];
    let mut calls = 0usize;
    let n_obs = cfg.n_obs_steps;
    while !state.released && state.steps < inst.spec.max_steps {
        let window: Vec<Observation> = (0..n_obs)
            .map(|k| history[(history.len() + k).saturating_sub(n_obs)].clone())
            .collect();
        let cond = build_condition(&window, &policy.bundle)?;
        let chunk = ddim_sample(&cond, &policy.bundle, cfg.num_inference_steps, mix(inst.seed, calls as u64))?;
        calls += 1;
        for k in 0..cfg.n_action_steps {
            if state.released || state.steps >= inst.spec.max_steps {
                break;
            }
            let mut a = chunk.action(k).to_vec();
            a[3] = a[3].clamp(0.0, 1.0);
            state = step(inst, &state, &a);
            monitor.observe(inst, &state);
            history.push(ctx.observation(&observe(&state, &layout))?);
        }
    }
    Ok(monitor.finish(inst, &state, state.steps - policy_start, calls))
}

/// Runs `episodes` episodes on seeds `seed + i`, sharded across workers and
/// merged in episode order.
pub fn evaluate(agent: Agent<'_>, task: TaskName, split: Split, episodes: usize, seed: u64) -> Result<EvalReport> {
    if let Agent::Policy(p) = agent {
        if p.task != task {
            return Err(HgmError::CheckpointTaskMismatch(format!("policy trained on {}, asked to run {task}", p.task)));
        }
    }
    let results: Vec<Result<EpisodeResult>> = par::map_indexed(episodes, |i| {
        let (inst, state) = make_task(task.as_str(), split, seed.wrapping_add(i as u64))?;
        match agent {
            Agent::Expert => Ok(expert_episode(&inst, state)),
            Agent::Policy(p) => policy_episode(p, &inst, state),
        }
    });
    let episodes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let wins = episodes.iter().filter(|e| e.success).count();
    let success_rate = if episodes.is_empty() { 0.0 } else { wins as f64 / episodes.len() as f64 };
    Ok(EvalReport { task, split, seed, success_rate, episodes })
}
