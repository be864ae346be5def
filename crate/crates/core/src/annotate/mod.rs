//! Stage/importance-score annotation pipeline: arm-state classification
//! from distance-to-rest traces, the hard state→label rules, and the
//! every-fifth-frame annotation strategy.

mod classify;
mod plot;
mod vlm;

pub use classify::{
    classify_states_rule, distance_trace, proximity_trace, DistanceTrace, EpisodeContext,
    ProximityTrace, RuleClassifier, RuleThresholds, StateClassifier,
};
pub use plot::{render_scatter_plot, PLOT_HEIGHT, PLOT_WIDTH};
pub use vlm::{
    parse_state_reply, ChatClient, ChatRequest, FixtureClient, FixtureExchange, HttpVlmClient,
    VlmStateClassifier, SYSTEM_PROMPT,
};

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::{ArmState, EpisodeRecord, TaskName};

/// Multi-hot per-view importance target, view order [left, top, right].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImportanceLabel(pub [u8; 3]);

impl ImportanceLabel {
    pub fn new(bits: [u8; 3]) -> ImportanceLabel {
        assert!(bits.iter().all(|&b| b <= 1), "label entries must be 0/1");
        assert!(bits.contains(&1), "label must mark at least one view");
        ImportanceLabel(bits)
    }

    pub const LEFT: ImportanceLabel = ImportanceLabel([1, 0, 0]);
    pub const TOP: ImportanceLabel = ImportanceLabel([0, 1, 0]);
    pub const RIGHT: ImportanceLabel = ImportanceLabel([0, 0, 1]);
    pub const LEFT_RIGHT: ImportanceLabel = ImportanceLabel([1, 0, 1]);

    pub fn as_f64(&self) -> [f64; 3] {
        [self.0[0] as f64, self.0[1] as f64, self.0[2] as f64]
    }
}

/// One hard rule row: left state, right state (None matches the single-arm
/// "/" rows), and the label it maps to.
#[derive(Debug, Clone, Copy)]
pub struct Rule {
    pub left: ArmState,
    pub right: Option<ArmState>,
    pub label: ImportanceLabel,
}

/// The embedded state/stage rule table for the three supported tasks.
#[derive(Debug, Clone)]
pub struct StageRuleTable {
    rules: Vec<(TaskName, Vec<Rule>)>,
}

impl StageRuleTable {
    pub fn builtin() -> StageRuleTable {
        use ArmState::*;
        StageRuleTable {
            rules: vec![
                (
                    TaskName::Unzip,
                    vec![
                        Rule { left: Approaching, right: Some(Holding), label: ImportanceLabel::TOP },
                        Rule { left: Operating, right: Some(Holding), label: ImportanceLabel::LEFT },
                        Rule { left: Operating, right: Some(Approaching), label: ImportanceLabel::TOP },
                        Rule { left: Operating, right: Some(Operating), label: ImportanceLabel::RIGHT },
                        Rule { left: Returning, right: Some(Returning), label: ImportanceLabel::TOP },
                    ],
                ),
                (
                    TaskName::FoldTowel,
                    vec![
                        Rule { left: Approaching, right: Some(Approaching), label: ImportanceLabel::TOP },
                        Rule { left: Operating, right: Some(Operating), label: ImportanceLabel::LEFT_RIGHT },
                        Rule { left: Returning, right: Some(Returning), label: ImportanceLabel::TOP },
                    ],
                ),
                (
                    TaskName::OpenBox,
                    vec![
                        Rule { left: Approaching, right: None, label: ImportanceLabel::TOP },
                        Rule { left: Operating, right: None, label: ImportanceLabel::LEFT },
                        Rule { left: Returning, right: None, label: ImportanceLabel::TOP },
                    ],
                ),
            ],
        }
    }

    pub fn rows(&self, task: TaskName) -> &[Rule] {
        self.rules
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, r)| r.as_slice())
            .unwrap_or(&[])
    }
}

/// Exact table lookup; unmapped pairs are hard errors, never defaulted.
pub fn map_states_to_label(
    task: TaskName,
    states: (ArmState, ArmState),
    rules: &StageRuleTable,
) -> Result<ImportanceLabel> {
    for rule in rules.rows(task) {
        if rule.left == states.0 && rule.right.is_none_or(|r| r == states.1) {
            return Ok(rule.label);
        }
    }
    Err(Error::UnmappedStatePair {
        task: task.to_string(),
        left: states.0.to_string(),
        right: states.1.to_string(),
    })
}

/// Fraction of frames with identical labels.
pub fn annotation_agreement(a: &[ImportanceLabel], b: &[ImportanceLabel]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { what: "label streams".into(), lhs: a.len(), rhs: b.len() });
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Frame-skip annotation output.
#[derive(Debug, Clone)]
pub struct FrameskipResult {
    pub labels: Vec<ImportanceLabel>,
    pub states: Vec<(ArmState, ArmState)>,
    pub classifier_calls: usize,
}

/// Annotate every fifth frame; windows whose endpoint labels agree are
/// filled with that label, other windows are classified frame by frame.
pub fn annotate_episode_frameskip(
    ctx: &EpisodeContext,
    classifier: &mut dyn StateClassifier,
    rules: &StageRuleTable,
) -> Result<FrameskipResult> {
    let n = ctx.len();
    if n < 2 {
        return Err(Error::LengthMismatch { what: "episode frames (need at least 2)".into(), lhs: n, rhs: 2 });
    }
    let mut labels: Vec<Option<ImportanceLabel>> = vec![None; n];
    let mut states: Vec<Option<(ArmState, ArmState)>> = vec![None; n];
    let calls_before = classifier.calls();

    let classify_at = |t: usize,
                           labels: &mut Vec<Option<ImportanceLabel>>,
                           states: &mut Vec<Option<(ArmState, ArmState)>>,
                           classifier: &mut dyn StateClassifier|
     -> Result<ImportanceLabel> {
        if let Some(l) = labels[t] {
            return Ok(l);
        }
        let st = classifier.classify(ctx, t)?;
        let label = map_states_to_label(ctx.task, st, rules)?;
        labels[t] = Some(label);
        states[t] = Some(st);
        Ok(label)
    };

    // anchor frames 0,5,10,…,last
    let mut anchors: Vec<usize> = (0..n).step_by(5).collect();
    if *anchors.last().unwrap() != n - 1 {
        anchors.push(n - 1);
    }
    for &t in &anchors {
        classify_at(t, &mut labels, &mut states, classifier)?;
    }
    for w in anchors.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (la, lb) = (labels[a].unwrap(), labels[b].unwrap());
        if la == lb {
            for t in a + 1..b {
                labels[t] = Some(la);
                states[t] = states[a];
            }
        } else {
            for t in a + 1..b {
                classify_at(t, &mut labels, &mut states, classifier)?;
            }
        }
    }

    Ok(FrameskipResult {
        labels: labels.into_iter().map(|l| l.unwrap()).collect(),
        states: states.into_iter().map(|s| s.unwrap()).collect(),
        classifier_calls: classifier.calls() - calls_before,
    })
}

/// Classify every frame; the oracle the frame-skip strategy is checked against.
pub fn annotate_episode_dense(
    ctx: &EpisodeContext,
    classifier: &mut dyn StateClassifier,
    rules: &StageRuleTable,
) -> Result<FrameskipResult> {
    let calls_before = classifier.calls();
    let mut labels = Vec::with_capacity(ctx.len());
    let mut states = Vec::with_capacity(ctx.len());
    for t in 0..ctx.len() {
        let st = classifier.classify(ctx, t)?;
        labels.push(map_states_to_label(ctx.task, st, rules)?);
        states.push(st);
    }
    Ok(FrameskipResult { labels, states, classifier_calls: classifier.calls() - calls_before })
}

/// Build a classifier context for a simulator-native episode: the object
/// layout is recomputed from the (task, seed) plan, which is a pure
/// function of the episode identity.
pub fn episode_context(ep: &EpisodeRecord) -> EpisodeContext {
    let task = crate::sim::TaskSpec::builtin(ep.task);
    let plan = crate::sim::plan_episode(&task, ep.seed);
    let objects: Vec<(f64, f64)> = plan.objects.iter().map(|o| o.fine_pos()).collect();
    EpisodeContext::from_episode(ep, &task, &objects)
}

/// Ground-truth labels straight from the simulator's recorded arm states.
pub fn ground_truth_labels(ep: &EpisodeRecord, rules: &StageRuleTable) -> Result<Vec<ImportanceLabel>> {
    ep.frames
        .iter()
        .map(|f| map_states_to_label(ep.task, f.arm_states, rules))
        .collect()
}

/// Write a label file: `# bfa-labels v1 task=<name> episode=<seed>` header,
/// then one `frame,left_state,right_state,s_left,s_top,s_right` line per frame.
pub fn write_label_file(path: &Path, ep_task: TaskName, seed: u64, result: &FrameskipResult) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# bfa-labels v1 task={ep_task} episode={seed}").unwrap();
    for (t, (label, states)) in result.labels.iter().zip(&result.states).enumerate() {
        writeln!(
            out,
            "{t},{},{},{},{},{}",
            states.0,
            states.1,
            label.0[0],
            label.0[1],
            label.0[2]
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LabelFile {
    pub task: TaskName,
    pub seed: u64,
    pub labels: Vec<ImportanceLabel>,
    pub states: Vec<(ArmState, ArmState)>,
}

pub fn read_label_file(path: &Path) -> Result<LabelFile> {
    let bad = |reason: String| Error::Format { path: path.display().to_string(), reason };
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    if !header.starts_with("# bfa-labels v1") {
        return Err(bad("missing bfa-labels v1 header".into()));
    }
    let mut task = None;
    let mut seed = 0u64;
    for part in header.split_whitespace() {
        if let Some(t) = part.strip_prefix("task=") {
            task = Some(t.parse::<TaskName>()?);
        }
        if let Some(s) = part.strip_prefix("episode=") {
            seed = s.parse().map_err(|_| bad(format!("bad episode seed {s:?}")))?;
        }
    }
    let task = task.ok_or_else(|| bad("header lacks task=".into()))?;
    let mut labels = Vec::new();
    let mut states = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(format!("line {}: expected 6 fields", i + 2)));
        }
        let l = ArmState::from_str_loose(fields[1]).ok_or_else(|| bad(format!("bad state {:?}", fields[1])))?;
        let r = ArmState::from_str_loose(fields[2]).ok_or_else(|| bad(format!("bad state {:?}", fields[2])))?;
        let mut bits = [0u8; 3];
        for (j, f) in fields[3..6].iter().enumerate() {
            bits[j] = match f.trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("bad score bit {other:?}"))),
            };
        }
        states.push((l, r));
        labels.push(ImportanceLabel::new(bits));
    }
    Ok(LabelFile { task, seed, labels, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lookups_match_embedded_rows() {
        use ArmState::*;
        let rules = StageRuleTable::builtin();
        assert_eq!(
            map_states_to_label(TaskName::Unzip, (Operating, Holding), &rules).unwrap(),
            ImportanceLabel::LEFT
        );
        assert_eq!(
            map_states_to_label(TaskName::FoldTowel, (Operating, Operating), &rules).unwrap(),
            ImportanceLabel::LEFT_RIGHT
        );
        // single-arm task: right state is ignored by the "/" rows
        assert_eq!(
            map_states_to_label(TaskName::OpenBox, (Returning, Holding), &rules).unwrap(),
            ImportanceLabel::TOP
        );
    }

    #[test]
    fn unmapped_pair_is_a_hard_error() {
        use ArmState::*;
        let rules = StageRuleTable::builtin();
        let err = map_states_to_label(TaskName::Unzip, (Holding, Holding), &rules).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unzip") && msg.contains("holding"), "{msg}");
    }

    #[test]
    fn agreement_basics() {
        let a = vec![ImportanceLabel::TOP, ImportanceLabel::LEFT];
        assert_eq!(annotation_agreement(&a, &a).unwrap(), 1.0);
        let b = vec![ImportanceLabel::TOP, ImportanceLabel::TOP];
        assert_eq!(annotation_agreement(&a, &b).unwrap(), 0.5);
        assert!(annotation_agreement(&a, &[]).is_err());
    }

    #[test]
    fn label_invariants_enforced() {
        let ok = std::panic::catch_unwind(|| ImportanceLabel::new([0, 0, 0]));
        assert!(ok.is_err(), "all-zero label must be rejected");
        let ok = std::panic::catch_unwind(|| ImportanceLabel::new([2, 0, 0]));
        assert!(ok.is_err(), "non-binary entries must be rejected");
    }
}
