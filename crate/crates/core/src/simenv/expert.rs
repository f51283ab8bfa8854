//! Scripted demonstrator with privileged access to the ground truth.

use crate::error::{HgmError, Result};
use crate::geometry::Point3;
use crate::tensor::Tensor;

use super::{make_task, observe, step, success, ObservationLayout, RawObservation, SimState, Split, TaskInstance, TaskName};

/// Per-axis translation of one expert action.
pub const EXPERT_CAP: f64 = 0.04;

/// Clearance above the higher of start and goal while carrying.
const CARRY_CLEARANCE: f64 = 0.1;

const ARRIVED: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Approach,
    Lift,
    Move,
    Descend,
    Open,
    Done,
}

/// Waypoint follower: approach the annotated point, close, lift, carry
/// over the goal, descend, open.
#[derive(Clone, Debug)]
pub struct ExpertController {
    phase: Phase,
    target: Point3,
    carry_z: f64,
}

/// Capped straight-line move towards `goal`; scales uniformly so the
/// direction is kept.
pub fn capped_delta(from: Point3, goal: Point3, cap: f64) -> Point3 {
    let d = goal - from;
    let m = d.x.abs().max(d.y.abs()).max(d.z.abs());
    if m <= cap {
        d
    } else {
        d * (cap / m)
    }
}

fn linf(a: Point3, b: Point3) -> f64 {
    let d = a - b;
    d.x.abs().max(d.y.abs()).max(d.z.abs())
}

fn action(d: Point3, closed: bool) -> [f32; 4] {
    [d.x as f32, d.y as f32, d.z as f32, if closed { 1.0 } else { 0.0 }]
}

/// Gripper position that puts the judged point onto the goal, given the
/// current grasp.
pub fn carry_target(inst: &TaskInstance, state: &SimState) -> Point3 {
    match (inst.spec.name, &inst.truth.line) {
        (TaskName::Hang, Some(line)) => (line[0] + line[1]) * 0.5 + Point3::new(0.0, 0.0, 0.02),
        _ => {
            let designated = state.operated.point(inst.truth.designated_index);
            inst.goal_site(state) + (state.gripper - designated)
        }
    }
}

impl ExpertController {
    pub fn new() -> Self {
        Self { phase: Phase::Approach, target: Point3::ZERO, carry_z: 0.0 }
    }

    /// Starts in the carrying phase for a state that already holds the
    /// object.
    pub fn from_grasp(inst: &TaskInstance, state: &SimState) -> Self {
        let mut c = Self::new();
        c.begin_carry(inst, state);
        c
    }

    fn begin_carry(&mut self, inst: &TaskInstance, state: &SimState) {
        self.target = carry_target(inst, state);
        self.carry_z = self.target.z.max(state.gripper.z) + CARRY_CLEARANCE;
        self.phase = Phase::Lift;
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Next action for `state`.
    pub fn act(&mut self, inst: &TaskInstance, state: &SimState) -> [f32; 4] {
        let g = state.gripper;
        loop {
            match self.phase {
                Phase::Approach => {
                    if state.attached.is_some() {
                        self.begin_carry(inst, state);
                        continue;
                    }
                    let goal = state.operated.point(inst.truth.manipulation_index);
                    if linf(g, goal) <= ARRIVED {
                        return action(Point3::ZERO, true);
                    }
                    return action(capped_delta(g, goal, EXPERT_CAP), false);
                }
                Phase::Lift => {
                    let goal = Point3::new(g.x, g.y, self.carry_z);
                    if linf(g, goal) <= ARRIVED {
                        self.phase = Phase::Move;
                        continue;
                    }
                    return action(capped_delta(g, goal, EXPERT_CAP), true);
                }
                Phase::Move => {
                    let goal = Point3::new(self.target.x, self.target.y, self.carry_z);
                    if linf(g, goal) <= ARRIVED {
                        self.phase = Phase::Descend;
                        continue;
                    }
                    return action(capped_delta(g, goal, EXPERT_CAP), true);
                }
                Phase::Descend => {
                    if linf(g, self.target) <= ARRIVED {
                        self.phase = Phase::Open;
                        continue;
                    }
                    return action(capped_delta(g, self.target, EXPERT_CAP), true);
                }
                Phase::Open => {
                    self.phase = Phase::Done;
                    return action(Point3::ZERO, false);
                }
                Phase::Done => return action(Point3::ZERO, false),
            }
        }
    }
}

impl Default for ExpertController {
    fn default() -> Self {
        Self::new()
    }
}

/// One recorded expert episode.
#[derive(Clone, Debug)]
pub struct Demonstration {
    pub instance: TaskInstance,
    /// Scene at `t = 0`, payloads included.
    pub initial: SimState,
    pub layout: ObservationLayout,
    /// Observation before each action.
    pub observations: Vec<RawObservation>,
    /// `T×4` executed actions.
    pub actions: Tensor,
    /// Index of the first action after the grasp closed.
    pub grasp_step: usize,
    pub success: bool,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Rolls out the expert on a fresh scene. The gripper is turned to the
/// required grasp orientation before the first step.
pub fn scripted_expert(
    task: &str,
    split: Split,
    seed: u64,
    n_points: usize,
    tokens: usize,
) -> Result<Demonstration> {
    let (inst, initial) = make_task(task, split, seed)?;
    let layout = ObservationLayout::new(&initial, n_points, tokens);
    let mut state = initial.clone();
    state.gripper_orientation = inst.truth.grasp_orientation;
    let mut ctl = ExpertController::new();
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut grasp_step = None;
    while !state.released && state.steps < inst.spec.max_steps {
        if grasp_step.is_none() && state.attached.is_some() {
            grasp_step = Some(actions.len() / 4);
        }
        observations.push(observe(&state, &layout));
        let a = ctl.act(&inst, &state);
        actions.extend_from_slice(&a);
        state = step(&inst, &state, &a);
    }
    let ok = success(&inst, &state);
    let grasp_step = match (ok, grasp_step) {
        (true, Some(g)) => g,
        _ => {
            return Err(HgmError::ExpertFailed(format!(
                "{task} {split} seed {seed}: ended after {} steps without success",
                state.steps
            )))
        }
    };
    let n = observations.len();
    Ok(Demonstration {
        instance: inst,
        initial,
        layout,
        observations,
        actions: Tensor::new(vec![n, 4], actions)?,
        grasp_step,
        success: ok,
    })
}
