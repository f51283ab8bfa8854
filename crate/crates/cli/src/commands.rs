//! The `hgm` subcommands, callable as library functions.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use hgm_core::correspondence::{locate_manipulation_point, plan_grasp};
use hgm_core::geometry::{GraspPose, Payload, FEATURES};
use hgm_core::simenv::{
    evaluate, generate_demos, make_task, train_policy, Agent, FailureStage, Split, TaskName, Variant,
};
use hgm_core::{HgmError, Result};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::config::TaskConfig;
use crate::dataset::{read_dataset, write_dataset};
use crate::store::{read_annotation_dir, read_cloud_dir, write_cloud_dir};

/// Process exit code for an error: 1 for bad input, 2 for runtime failures.
pub fn exit_code(err: &HgmError) -> i32 {
    match err {
        HgmError::UnknownTask(_)
        | HgmError::InvalidConfig(_)
        | HgmError::CheckpointTaskMismatch(_)
        | HgmError::NoFeatures(_)
        | HgmError::MissingPayload(_)
        | HgmError::NoProvider(_)
        | HgmError::MissingContext(_)
        | HgmError::Format(_)
        | HgmError::Json(_)
        | HgmError::DimMismatch(_)
        | HgmError::Shape(_)
        | HgmError::HeadSplit { .. } => 1,
        _ => 2,
    }
}

#[derive(Clone, Debug)]
pub struct GenDemosArgs {
    pub task: String,
    pub split: Split,
    pub num: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes the successful demonstrations; any expert failure is recorded in
/// the manifest and reported as an error after the dataset is written.
pub fn gen_demos(args: &GenDemosArgs, log: &mut String) -> Result<()> {
    let task: TaskName = args.task.parse()?;
    let config = TaskConfig::default_for(task, Variant::Full);
    let settings = config.settings();
    let results = generate_demos(task, args.split, args.num, args.seed, &settings);
    let mut demos = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let seed = args.seed.wrapping_add(i as u64);
        match r {
            Ok(d) => {
                let _ = writeln!(log, "episode {i} seed {seed}: success in {} steps", d.len());
                demos.push(d);
            }
            Err(e) => {
                let _ = writeln!(log, "episode {i} seed {seed}: {e}");
                failed.push(seed);
            }
        }
    }
    write_dataset(&args.out, &config, args.split, args.seed, &demos, failed.clone())?;
    let _ = writeln!(log, "wrote {} episodes to {}", demos.len(), args.out.display());
    if !failed.is_empty() {
        return Err(HgmError::ExpertFailed(format!("{} of {} episodes failed: seeds {failed:?}", failed.len(), args.num)));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub const LOSS_LOG: &str = "loss.csv";

/// Fits a policy and writes `checkpoint.json` and `loss.csv` into `--out`.
/// The loss log is written even when training fails; an existing checkpoint
/// is only replaced by a successful run.
pub fn train(args: &TrainArgs, log: &mut String) -> Result<()> {
    let data = read_dataset(&args.data)?;
    let task = data.manifest.config.task;
    let mut config = match &args.config {
        Some(p) => TaskConfig::load(p)?,
        None => TaskConfig::default_for(task, args.variant.unwrap_or(Variant::Full)),
    };
    if config.task != task {
        return Err(HgmError::CheckpointTaskMismatch(format!("config is for {}, dataset holds {task}", config.task)));
    }
    if let Some(v) = args.variant {
        if v != config.variant {
            return Err(HgmError::InvalidConfig(format!("--variant {v} contradicts config variant {}", config.variant)));
        }
    }
    if let Some(e) = args.epochs {
        config.policy.epochs = e;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    if data.demos.is_empty() {
        return Err(HgmError::InvalidConfig("dataset has no episodes".into()));
    }
    let mut csv = String::from("step,epoch,loss,lr\n");
    let mut last = None;
    let result = train_policy(task, &config.settings(), &data.demos, |s| {
        let _ = writeln!(csv, "{},{},{},{}", s.step, s.epoch, s.loss, s.lr);
        last = Some(s);
    });
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(LOSS_LOG), &csv)?;
    let policy = result?;
    write_checkpoint(&args.out, &config, &policy)?;
    if let Some(s) = last {
        let _ = writeln!(log, "trained {} steps over {} epochs, final loss {:.4}", s.step + 1, s.epoch + 1, s.loss);
    }
    let _ = writeln!(log, "checkpoint written to {}", args.out.display());
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub task: String,
    pub split: Split,
    pub episodes: usize,
    pub runs: usize,
    pub seed: u64,
    pub variant: Option<Variant>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureHistogram {
    pub grasp: usize,
    #[serde(rename = "move")]
    pub move_: usize,
    #[serde(rename = "final")]
    pub final_: usize,
}

impl FailureHistogram {
    fn add(&mut self, stage: FailureStage) {
        match stage {
            FailureStage::Grasp => self.grasp += 1,
            FailureStage::Move => self.move_ += 1,
            FailureStage::Final => self.final_ += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub success_rate: f64,
    pub failures: FailureHistogram,
    pub mean_final_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: TaskName,
    pub split: Split,
    pub variant: Variant,
    pub episodes: usize,
    pub runs: Vec<RunReport>,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
    pub failures: FailureHistogram,
    /// Attention calls that consumed background coordinates.
    pub coord_attention_calls: u64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Run `r` covers episode seeds `seed + r·episodes ..`.
pub fn eval(args: &EvalArgs, log: &mut String) -> Result<EvalSummary> {
    let (config, policy) = read_checkpoint(&args.checkpoint)?;
    let task: TaskName = args.task.parse()?;
    if task != config.task {
        return Err(HgmError::CheckpointTaskMismatch(format!("checkpoint trained on {}, asked to run {task}", config.task)));
    }
    if let Some(v) = args.variant {
        if v != config.variant {
            return Err(HgmError::CheckpointTaskMismatch(format!("checkpoint is variant {}, asked for {v}", config.variant)));
        }
    }
    if args.runs == 0 {
        return Err(HgmError::InvalidConfig("--runs must be at least 1".into()));
    }
    let fusion = &policy.bundle.network.fusion;
    fusion.reset_counters();
    let mut runs = Vec::with_capacity(args.runs);
    let mut total = FailureHistogram::default();
    for r in 0..args.runs {
        let seed = args.seed.wrapping_add((r * args.episodes) as u64);
        let report = evaluate(Agent::Policy(&policy), task, args.split, args.episodes, seed)?;
        let mut failures = FailureHistogram::default();
        for stage in report.episodes.iter().filter_map(|e| e.failure_stage) {
            failures.add(stage);
            total.add(stage);
        }
        let n = report.episodes.len().max(1) as f64;
        let run = RunReport {
            seed,
            success_rate: report.success_rate,
            failures,
            mean_final_distance: report.episodes.iter().map(|e| e.final_distance).sum::<f64>() / n,
        };
        let _ = writeln!(log, "run {r} (seed {seed}): success {:.3} failures {:?}", run.success_rate, run.failures);
        runs.push(run);
    }
    let rates: Vec<f64> = runs.iter().map(|r| r.success_rate).collect();
    let (mean, std) = mean_std(&rates);
    let summary = EvalSummary {
        task,
        split: args.split,
        variant: config.variant,
        episodes: args.episodes,
        runs,
        mean,
        std,
        failures: total,
        coord_attention_calls: fusion.coord_attention_calls(),
    };
    let _ = writeln!(
        log,
        "{task} {} {}: success {mean:.3} ± {std:.3} over {} runs of {} episodes; failures grasp {} move {} final {}",
        args.split,
        config.variant,
        args.runs,
        args.episodes,
        summary.failures.grasp,
        summary.failures.move_,
        summary.failures.final_
    );
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(out, serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct GraspArgs {
    pub demo_annotation: PathBuf,
    pub target_cloud: PathBuf,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspReport {
    pub matched_index: usize,
    pub score: f64,
    pub runner_up_score: f64,
    pub grasp_pose: GraspPose,
}

/// Payload written on the annotated output cloud: 1 at the matched point.
pub const MATCH_PAYLOAD: &str = "match";

pub fn grasp(args: &GraspArgs, log: &mut String) -> Result<GraspReport> {
    let annotation = read_annotation_dir(&args.demo_annotation)?;
    let target = read_cloud_dir(&args.target_cloud)?;
    let (_, m) = locate_manipulation_point(&annotation, &target)?;
    let pose = plan_grasp(&annotation, &target)?;
    let report = GraspReport { matched_index: m.target_index, score: m.score, runner_up_score: m.runner_up_score, grasp_pose: pose };
    let _ = writeln!(log, "{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &args.out {
        let mut flags = vec![0; target.len()];
        flags[m.target_index] = 1;
        let annotated = target.with_payload(MATCH_PAYLOAD, Payload::Labels(flags))?;
        write_cloud_dir(out, &annotated)?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneRole {
    Operated,
    Background,
}

#[derive(Clone, Debug)]
pub struct SceneArgs {
    pub task: String,
    pub split: Split,
    pub seed: u64,
    pub role: SceneRole,
    pub variant: Variant,
    pub features: bool,
    pub out: PathBuf,
}

/// Exports one object of a scene as a cloud directory, optionally with the
/// features of the provider the variant routes it to.
pub fn scene(args: &SceneArgs, log: &mut String) -> Result<()> {
    let task: TaskName = args.task.parse()?;
    let (inst, state) = make_task(task.as_str(), args.split, args.seed)?;
    let (mut cloud, category) = match args.role {
        SceneRole::Operated => (state.operated, inst.spec.operated_category),
        SceneRole::Background => (state.background, inst.spec.background_category),
    };
    if args.features {
        let settings = TaskConfig::default_for(task, args.variant).settings();
        let id = settings.route(category).0;
        let provider = settings.registry()?.by_id(id).ok_or_else(|| HgmError::NoProvider(id.to_string()))?;
        let f = provider.compute(&cloud)?;
        cloud.set_payload(FEATURES, Payload::Features(f))?;
    }
    write_cloud_dir(&args.out, &cloud)?;
    let names: Vec<&String> = cloud.payloads().keys().collect();
    let _ = writeln!(log, "wrote {} points with payloads {names:?} to {}", cloud.len(), args.out.display());
    Ok(())
}
