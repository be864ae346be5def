//! Arm-state classification from distance-to-rest traces.

use crate::error::{Error, Result};
use crate::sim::{dist, Arm, ArmState, EpisodeRecord, RestPose, TaskName, TaskSpec};

/// Per-frame Euclidean distance of each gripper to its rest pose.
#[derive(Debug, Clone)]
pub struct DistanceTrace {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl DistanceTrace {
    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn arm(&self, arm: Arm) -> &[f64] {
        match arm {
            Arm::Left => &self.left,
            Arm::Right => &self.right,
        }
    }
}

/// Per-frame distance of each gripper to the object it works on in this
/// task; infinity for an arm with no task object.
#[derive(Debug, Clone)]
pub struct ProximityTrace {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl ProximityTrace {
    pub fn arm(&self, arm: Arm) -> &[f64] {
        match arm {
            Arm::Left => &self.left,
            Arm::Right => &self.right,
        }
    }
}

pub fn distance_trace(ep: &EpisodeRecord, rest: &RestPose) -> DistanceTrace {
    let mut left = Vec::with_capacity(ep.len());
    let mut right = Vec::with_capacity(ep.len());
    for f in &ep.frames {
        let lp = (f.proprio[0] as f64, f.proprio[1] as f64);
        let rp = (f.proprio[3] as f64, f.proprio[4] as f64);
        left.push(dist(lp, rest.left));
        right.push(dist(rp, rest.right));
    }
    DistanceTrace { left, right }
}

/// Distance of each arm to its task object per frame. The object's true
/// (fine) position comes from the episode plan; an arm without an object
/// (the parked arm of single-arm tasks) gets infinity.
pub fn proximity_trace(ep: &EpisodeRecord, task: &TaskSpec, objects: &[(f64, f64)]) -> ProximityTrace {
    let per_arm = |arm: Arm| -> Vec<f64> {
        let target = task.arm_object(arm).and_then(|i| objects.get(i)).copied();
        ep.frames
            .iter()
            .map(|f| {
                let p = match arm {
                    Arm::Left => (f.proprio[0] as f64, f.proprio[1] as f64),
                    Arm::Right => (f.proprio[3] as f64, f.proprio[4] as f64),
                };
                target.map_or(f64::INFINITY, |t| dist(p, t))
            })
            .collect()
    };
    ProximityTrace { left: per_arm(Arm::Left), right: per_arm(Arm::Right) }
}

/// Thresholds for the rule-based classifier. Velocity and rest thresholds
/// apply to the range-normalized trace, so classification is invariant to
/// uniform scaling of the distances.
#[derive(Debug, Clone, Copy)]
pub struct RuleThresholds {
    /// Minimum |smoothed slope| per frame that counts as motion.
    pub delta_v: f64,
    /// Operating proximity radius (absolute workspace units).
    pub eps_op: f64,
    /// Band above the trace baseline that still counts as "at rest".
    pub delta_rest: f64,
    /// Centered smoothing window.
    pub smooth_window: usize,
}

impl Default for RuleThresholds {
    fn default() -> RuleThresholds {
        RuleThresholds { delta_v: 0.002, eps_op: 0.03, delta_rest: 0.05, smooth_window: 5 }
    }
}

/// Dense per-frame classification of both arms.
///
/// Per arm: frames within `eps_op` of the task object are Operating (any
/// gap between the first and last such frame is bridged); frames before
/// the first operating frame are Holding while the smoothed slope stays
/// under `delta_v` near the baseline and Approaching otherwise; frames
/// after the last operating frame are Returning. Arms that never operate
/// are classified by motion alone.
pub fn classify_states_rule(
    trace: &DistanceTrace,
    prox: &ProximityTrace,
    thresholds: &RuleThresholds,
) -> Result<Vec<(ArmState, ArmState)>> {
    if trace.len() < 3 {
        return Err(Error::TraceTooShort { len: trace.len() });
    }
    if trace.left.len() != trace.right.len() {
        return Err(Error::LengthMismatch {
            what: "distance trace arms".into(),
            lhs: trace.left.len(),
            rhs: trace.right.len(),
        });
    }
    let left = classify_arm(&trace.left, &prox.left, thresholds);
    let right = classify_arm(&trace.right, &prox.right, thresholds);
    Ok(left.into_iter().zip(right).collect())
}

fn classify_arm(d: &[f64], prox: &[f64], th: &RuleThresholds) -> Vec<ArmState> {
    let n = d.len();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-12);
    let z: Vec<f64> = d.iter().map(|&v| (v - lo) / range).collect();

    // centered moving average
    let half = th.smooth_window / 2;
    let smooth: Vec<f64> = (0..n)
        .map(|t| {
            let a = t.saturating_sub(half);
            let b = (t + half).min(n - 1);
            z[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    // central difference of the smoothed trace
    let slope: Vec<f64> = (0..n)
        .map(|t| {
            let a = t.saturating_sub(1);
            let b = (t + 1).min(n - 1);
            if b == a {
                0.0
            } else {
                (smooth[b] - smooth[a]) / (b - a) as f64
            }
        })
        .collect();

    let op: Vec<bool> = prox.iter().map(|&p| p <= th.eps_op).collect();
    let first_op = op.iter().position(|&b| b);
    let last_op = op.iter().rposition(|&b| b);

    let flat_at_rest = |t: usize| slope[t].abs() < th.delta_v && z[t] < th.delta_rest;

    match (first_op, last_op) {
        (Some(f), Some(l)) => (0..n)
            .map(|t| {
                if t < f {
                    if flat_at_rest(t) {
                        ArmState::Holding
                    } else {
                        ArmState::Approaching
                    }
                } else if t <= l {
                    ArmState::Operating
                } else {
                    ArmState::Returning
                }
            })
            .collect(),
        _ => {
            // never near an object: motion only, ambiguous frames carry the
            // previous state forward
            let mut out = Vec::with_capacity(n);
            let mut prev = ArmState::Holding;
            for (t, &sl) in slope.iter().enumerate() {
                let s = if sl > th.delta_v {
                    ArmState::Approaching
                } else if sl < -th.delta_v {
                    ArmState::Returning
                } else if flat_at_rest(t) {
                    ArmState::Holding
                } else {
                    prev
                };
                out.push(s);
                prev = s;
            }
            out
        }
    }
}

/// Everything a state classifier may look at for one episode.
pub struct EpisodeContext {
    pub task: TaskName,
    pub seed: u64,
    pub trace: DistanceTrace,
    pub prox: ProximityTrace,
}

impl EpisodeContext {
    pub fn len(&self) -> usize {
        self.trace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.is_empty()
    }

    /// Build the context for an episode using the plan's object positions.
    pub fn from_episode(ep: &EpisodeRecord, task: &TaskSpec, objects: &[(f64, f64)]) -> EpisodeContext {
        EpisodeContext {
            task: ep.task,
            seed: ep.seed,
            trace: distance_trace(ep, &RestPose::default()),
            prox: proximity_trace(ep, task, objects),
        }
    }
}

/// A per-frame arm-state classifier; `calls` counts classification
/// invocations so the frame-skip strategy's savings can be reported.
pub trait StateClassifier {
    fn classify(&mut self, ctx: &EpisodeContext, frame: usize) -> Result<(ArmState, ArmState)>;
    fn calls(&self) -> usize;
    fn backend_name(&self) -> &'static str;
}

/// The rule-based backend. Classification is derived once per episode from
/// the full traces and cached; every `classify` call still counts.
pub struct RuleClassifier {
    thresholds: RuleThresholds,
    cache: Option<(u64, Vec<(ArmState, ArmState)>)>,
    calls: usize,
}

impl RuleClassifier {
    pub fn new(thresholds: RuleThresholds) -> RuleClassifier {
        RuleClassifier { thresholds, cache: None, calls: 0 }
    }
}

impl Default for RuleClassifier {
    fn default() -> Self {
        Self::new(RuleThresholds::default())
    }
}

impl StateClassifier for RuleClassifier {
    fn classify(&mut self, ctx: &EpisodeContext, frame: usize) -> Result<(ArmState, ArmState)> {
        self.calls += 1;
        let fresh = match &self.cache {
            Some((seed, states)) => *seed != ctx.seed || states.len() != ctx.len(),
            None => true,
        };
        if fresh {
            let states = classify_states_rule(&ctx.trace, &ctx.prox, &self.thresholds)?;
            self.cache = Some((ctx.seed, states));
        }
        Ok(self.cache.as_ref().unwrap().1[frame])
    }

    fn calls(&self) -> usize {
        self.calls
    }

    fn backend_name(&self) -> &'static str {
        "rule"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_ctx(n: usize) -> (DistanceTrace, ProximityTrace) {
        (
            DistanceTrace { left: vec![0.0; n], right: vec![0.0; n] },
            ProximityTrace { left: vec![f64::INFINITY; n], right: vec![f64::INFINITY; n] },
        )
    }

    #[test]
    fn flat_zero_trace_is_holding() {
        let (trace, prox) = flat_ctx(40);
        let states = classify_states_rule(&trace, &prox, &RuleThresholds::default()).unwrap();
        assert!(states.iter().all(|s| *s == (ArmState::Holding, ArmState::Holding)));
    }

    #[test]
    fn monotone_rise_is_approaching_after_frame_two() {
        let n = 60;
        let rising: Vec<f64> = (0..n).map(|t| t as f64 * 0.01).collect();
        let trace = DistanceTrace { left: rising, right: vec![0.0; n] };
        let prox = ProximityTrace { left: vec![f64::INFINITY; n], right: vec![f64::INFINITY; n] };
        let states = classify_states_rule(&trace, &prox, &RuleThresholds::default()).unwrap();
        for (t, s) in states.iter().enumerate().skip(2) {
            assert_eq!(s.0, ArmState::Approaching, "frame {t}");
        }
    }

    #[test]
    fn scale_invariance_of_rule_classifier() {
        // thresholds act on the range-normalized trace, so any c > 0 leaves
        // the classification unchanged (proximities are separate inputs)
        let n = 80;
        let wave: Vec<f64> = (0..n)
            .map(|t| {
                let t = t as f64;
                if t < 30.0 {
                    t * 0.01
                } else if t < 50.0 {
                    0.3
                } else {
                    (0.3 - (t - 50.0) * 0.01).max(0.0)
                }
            })
            .collect();
        let mut prox_l = vec![f64::INFINITY; n];
        for (t, p) in prox_l.iter_mut().enumerate() {
            if (30..50).contains(&t) {
                *p = 0.0;
            }
        }
        let prox = ProximityTrace { left: prox_l, right: vec![f64::INFINITY; n] };
        let base = classify_states_rule(
            &DistanceTrace { left: wave.clone(), right: vec![0.0; n] },
            &prox,
            &RuleThresholds::default(),
        )
        .unwrap();
        for c in [0.1, 3.0, 42.0] {
            let scaled: Vec<f64> = wave.iter().map(|&v| v * c).collect();
            let got = classify_states_rule(
                &DistanceTrace { left: scaled, right: vec![0.0; n] },
                &prox,
                &RuleThresholds::default(),
            )
            .unwrap();
            assert_eq!(base, got, "scale {c}");
        }
    }

    #[test]
    fn trace_too_short_errors() {
        let (trace, prox) = flat_ctx(2);
        assert!(matches!(
            classify_states_rule(&trace, &prox, &RuleThresholds::default()),
            Err(Error::TraceTooShort { len: 2 })
        ));
    }
}
