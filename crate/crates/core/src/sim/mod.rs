//! Deterministic 2-D two-arm tabletop simulator with three synthetic
//! cameras and a scripted expert.
//!
//! The workspace is the unit square. Each task object carries a small
//! `fine_offset` displacement that the 48×48 top view cannot resolve (top
//! rendering quantizes to its pixel grid and ignores the offset entirely)
//! while the 24×24 wrist views, covering a 0.15-wide window, render it at
//! roughly 1.6 pixels — that asymmetry is what makes view importance causal
//! rather than cosmetic.

mod episode;
mod expert;
mod render;
mod task;

pub use episode::{read_episode, write_episode, EpisodeRecord, Frame, Image};
pub use expert::{generate_episode, plan_episode, EpisodePlan, GeneratedEpisode};
pub use render::render_views;
pub use task::TaskSpec;

use crate::error::{Error, Result};

/// Expert/action step cap in workspace units per frame.
pub const MAX_STEP: f64 = 0.02;
/// A closed gripper drags an object within this radius.
pub const GRASP_RADIUS: f64 = 0.02;
/// Stage waypoint tolerance.
pub const EPS_STAGE: f64 = 0.02;
/// Residual fine-offset alignment tolerance for Operating stages.
pub const EPS_FINE: f64 = 0.005;
/// Proximity radius at which an arm counts as operating on its object.
pub const EPS_OPERATE: f64 = 0.03;
/// Fine offset component magnitudes are sampled from this band, keeping the
/// offset norm above EPS_FINE so a coarse-only policy cannot pass by luck.
pub const FINE_OFFSET_MIN: f64 = 0.006;
pub const FINE_OFFSET_MAX: f64 = 0.01;
/// Default pixel-noise std for views that do not contain the active target.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.15;

pub const TOP_RES: usize = 48;
pub const WRIST_RES: usize = 24;
pub const WRIST_WINDOW: f64 = 0.15;

/// Per-arm state vocabulary used by stages, rules and the annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArmState {
    Holding,
    Approaching,
    Operating,
    Returning,
}

impl ArmState {
    pub const ALL: [ArmState; 4] =
        [ArmState::Holding, ArmState::Approaching, ArmState::Operating, ArmState::Returning];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArmState::Holding => "holding",
            ArmState::Approaching => "approaching",
            ArmState::Operating => "operating",
            ArmState::Returning => "returning",
        }
    }

    pub fn from_str_loose(s: &str) -> Option<ArmState> {
        match s.trim().to_ascii_lowercase().as_str() {
            "holding" => Some(ArmState::Holding),
            "approaching" => Some(ArmState::Approaching),
            "operating" => Some(ArmState::Operating),
            "returning" => Some(ArmState::Returning),
            _ => None,
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            ArmState::Holding => 0,
            ArmState::Approaching => 1,
            ArmState::Operating => 2,
            ArmState::Returning => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<ArmState> {
        Some(match v {
            0 => ArmState::Holding,
            1 => ArmState::Approaching,
            2 => ArmState::Operating,
            3 => ArmState::Returning,
            _ => return None,
        })
    }
}

impl std::fmt::Display for ArmState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskName {
    Unzip,
    OpenBox,
    FoldTowel,
}

impl TaskName {
    pub const ALL: [TaskName; 3] = [TaskName::Unzip, TaskName::OpenBox, TaskName::FoldTowel];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::Unzip => "unzip",
            TaskName::OpenBox => "open_box",
            TaskName::FoldTowel => "fold_towel",
        }
    }
}

impl std::fmt::Display for TaskName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskName {
    type Err = Error;
    fn from_str(s: &str) -> Result<TaskName> {
        match s {
            "unzip" => Ok(TaskName::Unzip),
            "open_box" => Ok(TaskName::OpenBox),
            "fold_towel" => Ok(TaskName::FoldTowel),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected unzip, open_box or fold_towel)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    BagCorner,
    ZipperSlider,
    BoxLid,
    TowelLeftCorner,
    TowelRightCorner,
}

impl ObjectKind {
    /// Render intensity in the grayscale views.
    pub fn intensity(&self) -> f64 {
        match self {
            ObjectKind::BagCorner => 0.70,
            ObjectKind::ZipperSlider => 0.60,
            ObjectKind::BoxLid => 0.65,
            ObjectKind::TowelLeftCorner => 0.55,
            ObjectKind::TowelRightCorner => 0.50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectState {
    pub kind: ObjectKind,
    pub x: f64,
    pub y: f64,
    /// Sub-top-view-pixel displacement, each component within ±0.01.
    pub fine_dx: f64,
    pub fine_dy: f64,
    /// Set permanently once a gripper has closed on the object; rendered
    /// dimmer, so an operated object is visually distinct (this is what
    /// keeps the scene Markovian for a reactive policy).
    pub done: bool,
}

impl ObjectState {
    pub fn coarse(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn fine_pos(&self) -> (f64, f64) {
        (self.x + self.fine_dx, self.y + self.fine_dy)
    }
}

/// Fixed per-arm home positions; distance to these drives the annotator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestPose {
    pub left: (f64, f64),
    pub right: (f64, f64),
}

impl Default for RestPose {
    fn default() -> RestPose {
        RestPose { left: (0.12, 0.5), right: (0.88, 0.5) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub left: (f64, f64),
    pub right: (f64, f64),
    pub left_closed: bool,
    pub right_closed: bool,
    pub objects: Vec<ObjectState>,
    /// Indices of the objects the current stage is about; views that do not
    /// contain any of them receive distractor noise when rendered.
    pub active_targets: Vec<usize>,
    pub step_index: u32,
}

impl WorldState {
    pub fn at_rest(rest: &RestPose, objects: Vec<ObjectState>) -> WorldState {
        WorldState {
            left: rest.left,
            right: rest.right,
            left_closed: false,
            right_closed: false,
            objects,
            active_targets: Vec::new(),
            step_index: 0,
        }
    }

    pub fn gripper(&self, arm: Arm) -> (f64, f64) {
        match arm {
            Arm::Left => self.left,
            Arm::Right => self.right,
        }
    }

    pub fn closed(&self, arm: Arm) -> bool {
        match arm {
            Arm::Left => self.left_closed,
            Arm::Right => self.right_closed,
        }
    }

    pub fn proprio(&self) -> [f64; 6] {
        [
            self.left.0,
            self.left.1,
            if self.left_closed { 1.0 } else { 0.0 },
            self.right.0,
            self.right.1,
            if self.right_closed { 1.0 } else { 0.0 },
        ]
    }
}

pub fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Environment transition: deltas clamped to ±[`MAX_STEP`], positions
/// clamped to the workspace, grip command > 0.5 closes, and an object
/// follows a gripper that was already closed within [`GRASP_RADIUS`] of it.
pub fn step(w: &WorldState, action: &[f64; 6]) -> Result<WorldState> {
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "action".into() });
    }
    let ldx = action[0].clamp(-MAX_STEP, MAX_STEP);
    let ldy = action[1].clamp(-MAX_STEP, MAX_STEP);
    let rdx = action[3].clamp(-MAX_STEP, MAX_STEP);
    let rdy = action[4].clamp(-MAX_STEP, MAX_STEP);

    let mut next = w.clone();
    // Objects follow grippers that were closed on them before the move and
    // are marked operated the first time that happens.
    for obj in &mut next.objects {
        let fine = (obj.x + obj.fine_dx, obj.y + obj.fine_dy);
        if w.left_closed && dist(w.left, fine) <= GRASP_RADIUS {
            obj.x += ldx;
            obj.y += ldy;
            obj.done = true;
        } else if w.right_closed && dist(w.right, fine) <= GRASP_RADIUS {
            obj.x += rdx;
            obj.y += rdy;
            obj.done = true;
        }
    }
    next.left = (clamp01(w.left.0 + ldx), clamp01(w.left.1 + ldy));
    next.right = (clamp01(w.right.0 + rdx), clamp01(w.right.1 + rdy));
    next.left_closed = action[2] > 0.5;
    next.right_closed = action[5] > 0.5;
    next.step_index = w.step_index + 1;
    Ok(next)
}

/// One concrete stage of an episode plan: arm states, waypoints instantiated
/// from the sampled object layout, and the completion tolerances.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub name: String,
    pub left_state: ArmState,
    pub right_state: ArmState,
    pub left_waypoint: Option<(f64, f64)>,
    pub right_waypoint: Option<(f64, f64)>,
    /// Fine-adjusted targets (waypoint + object fine offset) for Operating arms.
    pub left_fine: Option<(f64, f64)>,
    pub right_fine: Option<(f64, f64)>,
    pub epsilon_stage: f64,
    pub active_targets: Vec<usize>,
}

impl StageSpec {
    fn arm_state(&self, arm: Arm) -> ArmState {
        match arm {
            Arm::Left => self.left_state,
            Arm::Right => self.right_state,
        }
    }

    fn waypoint(&self, arm: Arm) -> Option<(f64, f64)> {
        match arm {
            Arm::Left => self.left_waypoint,
            Arm::Right => self.right_waypoint,
        }
    }

    fn fine(&self, arm: Arm) -> Option<(f64, f64)> {
        match arm {
            Arm::Left => self.left_fine,
            Arm::Right => self.right_fine,
        }
    }

    /// True if the world satisfies this stage's completion predicate:
    /// every non-holding arm within epsilon_stage of its waypoint with the
    /// grip state its arm state implies, and Operating arms additionally
    /// within [`EPS_FINE`] of the fine-adjusted target.
    pub fn satisfied(&self, w: &WorldState) -> bool {
        for arm in [Arm::Left, Arm::Right] {
            let state = self.arm_state(arm);
            if state == ArmState::Holding {
                continue;
            }
            let Some(wp) = self.waypoint(arm) else { continue };
            let pos = w.gripper(arm);
            if dist(pos, wp) > self.epsilon_stage {
                return false;
            }
            match state {
                ArmState::Operating => {
                    if !w.closed(arm) {
                        return false;
                    }
                    if let Some(fine) = self.fine(arm) {
                        if dist(pos, fine) > EPS_FINE {
                            return false;
                        }
                    }
                }
                ArmState::Approaching | ArmState::Returning => {
                    if w.closed(arm) {
                        return false;
                    }
                }
                ArmState::Holding => unreachable!(),
            }
        }
        true
    }
}

/// Per-stage success over a rollout trace: stage k is true iff its
/// predicate holds at some frame at or after the frame stage k−1 was
/// reached. The output is a prefix of trues by construction.
pub fn stage_success(trace: &[WorldState], stages: &[StageSpec]) -> Vec<bool> {
    let mut out = vec![false; stages.len()];
    let mut cursor = 0usize;
    for (k, stage) in stages.iter().enumerate() {
        let mut hit = None;
        for (t, w) in trace.iter().enumerate().skip(cursor) {
            if stage.satisfied(w) {
                hit = Some(t);
                break;
            }
        }
        match hit {
            Some(t) => {
                out[k] = true;
                cursor = t;
            }
            None => break,
        }
    }
    out
}

/// Incremental variant of [`stage_success`] used during rollouts to decide
/// which stage (and therefore which active targets) the policy is in.
pub struct StageTracker {
    next_stage: usize,
}

impl StageTracker {
    pub fn new() -> StageTracker {
        StageTracker { next_stage: 0 }
    }

    /// Advance past any stages the current world satisfies; returns the
    /// index of the stage currently being attempted (clamped to the last).
    pub fn observe(&mut self, stages: &[StageSpec], w: &WorldState) -> usize {
        while self.next_stage < stages.len() && stages[self.next_stage].satisfied(w) {
            self.next_stage += 1;
        }
        self.next_stage.min(stages.len().saturating_sub(1))
    }

    pub fn reached(&self) -> usize {
        self.next_stage
    }
}

impl Default for StageTracker {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_world() -> WorldState {
        WorldState::at_rest(&RestPose::default(), vec![])
    }

    #[test]
    fn zero_action_only_bumps_step_index() {
        let w = empty_world();
        let n = step(&w, &[0.0; 6]).unwrap();
        assert_eq!(n.left, w.left);
        assert_eq!(n.right, w.right);
        assert_eq!(n.step_index, 1);
    }

    #[test]
    fn deltas_clamp_to_step_cap() {
        let w = empty_world();
        let n = step(&w, &[0.05, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((n.left.0 - (w.left.0 + 0.02)).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_action_rejected() {
        let w = empty_world();
        assert!(step(&w, &[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn closed_gripper_drags_object() {
        let mut w = empty_world();
        w.left = (0.5, 0.5);
        w.left_closed = true;
        w.objects.push(ObjectState {
            kind: ObjectKind::BagCorner,
            x: 0.5,
            y: 0.5,
            fine_dx: 0.0,
            fine_dy: 0.0,
            done: false,
        });
        let mut cur = w;
        for _ in 0..3 {
            cur = step(&cur, &[0.01, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        }
        assert!((cur.objects[0].x - 0.53).abs() < 1e-12);
        assert!((cur.left.0 - 0.53).abs() < 1e-12);
    }

    #[test]
    fn open_gripper_leaves_object() {
        let mut w = empty_world();
        w.left = (0.5, 0.5);
        w.left_closed = false;
        w.objects.push(ObjectState {
            kind: ObjectKind::BagCorner,
            x: 0.5,
            y: 0.5,
            fine_dx: 0.0,
            fine_dy: 0.0,
            done: false,
        });
        let n = step(&w, &[0.01, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(n.objects[0].x, 0.5);
    }

    #[test]
    fn grip_command_threshold() {
        let w = empty_world();
        let n = step(&w, &[0.0, 0.0, 0.6, 0.0, 0.0, 0.4]).unwrap();
        assert!(n.left_closed);
        assert!(!n.right_closed);
    }
}
