//! Built-in task definitions: stage templates and object layout regions.

use super::{ArmState, ObjectKind, TaskName};

/// Where an arm is headed during a stage, resolved against the sampled
/// object layout when an episode plan is instantiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaypointRef {
    /// No waypoint (holding arm).
    None,
    /// The coarse position of an object (approach target).
    Object(usize),
    /// The fine-adjusted position of an object (operating target).
    ObjectFine(usize),
    /// The arm's rest pose.
    Rest,
}

#[derive(Debug, Clone)]
pub struct StageTemplate {
    pub name: &'static str,
    pub left_state: ArmState,
    pub right_state: ArmState,
    pub left_target: WaypointRef,
    pub right_target: WaypointRef,
    /// Objects the stage is about; other views are treated as distractors.
    pub active_targets: &'static [usize],
}

/// Axis-aligned sampling region for an object's coarse position.
#[derive(Debug, Clone, Copy)]
pub struct ObjectSpec {
    pub kind: ObjectKind,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: TaskName,
    pub stages: Vec<StageTemplate>,
    pub objects: Vec<ObjectSpec>,
    pub episode_length_range: (usize, usize),
}

impl TaskSpec {
    pub fn builtin(name: TaskName) -> TaskSpec {
        use ArmState::*;
        match name {
            // Left arm grabs the bag corner and holds it while the right arm
            // moves in and pinches the zipper slider; both return.
            TaskName::Unzip => TaskSpec {
                name,
                objects: vec![
                    ObjectSpec {
                        kind: ObjectKind::BagCorner,
                        x_range: (0.34, 0.46),
                        y_range: (0.26, 0.44),
                    },
                    ObjectSpec {
                        kind: ObjectKind::ZipperSlider,
                        x_range: (0.54, 0.66),
                        y_range: (0.56, 0.74),
                    },
                ],
                stages: vec![
                    StageTemplate {
                        name: "reach",
                        left_state: Approaching,
                        right_state: Holding,
                        left_target: WaypointRef::Object(0),
                        right_target: WaypointRef::None,
                        active_targets: &[0],
                    },
                    StageTemplate {
                        name: "grab",
                        left_state: Operating,
                        right_state: Holding,
                        left_target: WaypointRef::ObjectFine(0),
                        right_target: WaypointRef::None,
                        active_targets: &[0],
                    },
                    StageTemplate {
                        name: "pinch_reach",
                        left_state: Operating,
                        right_state: Approaching,
                        left_target: WaypointRef::ObjectFine(0),
                        right_target: WaypointRef::Object(1),
                        active_targets: &[1],
                    },
                    StageTemplate {
                        name: "slide",
                        left_state: Operating,
                        right_state: Operating,
                        left_target: WaypointRef::ObjectFine(0),
                        right_target: WaypointRef::ObjectFine(1),
                        active_targets: &[1],
                    },
                    StageTemplate {
                        name: "return",
                        left_state: Returning,
                        right_state: Returning,
                        left_target: WaypointRef::Rest,
                        right_target: WaypointRef::Rest,
                        active_targets: &[],
                    },
                ],
                // Five stages need room; the longer floor also keeps the
                // frame-skip call budget comfortable on label boundaries.
                episode_length_range: (190, 240),
            },
            // Single-arm task: the right arm stays parked at rest.
            TaskName::OpenBox => TaskSpec {
                name,
                objects: vec![ObjectSpec {
                    kind: ObjectKind::BoxLid,
                    x_range: (0.32, 0.52),
                    y_range: (0.32, 0.68),
                }],
                stages: vec![
                    StageTemplate {
                        name: "align_reach",
                        left_state: Approaching,
                        right_state: Holding,
                        left_target: WaypointRef::Object(0),
                        right_target: WaypointRef::None,
                        active_targets: &[0],
                    },
                    StageTemplate {
                        name: "lift",
                        left_state: Operating,
                        right_state: Holding,
                        left_target: WaypointRef::ObjectFine(0),
                        right_target: WaypointRef::None,
                        active_targets: &[0],
                    },
                    StageTemplate {
                        name: "return",
                        left_state: Returning,
                        right_state: Holding,
                        left_target: WaypointRef::Rest,
                        right_target: WaypointRef::None,
                        active_targets: &[],
                    },
                ],
                episode_length_range: (120, 200),
            },
            // Both arms approach the two towel corners, fold together, return.
            TaskName::FoldTowel => TaskSpec {
                name,
                objects: vec![
                    ObjectSpec {
                        kind: ObjectKind::TowelLeftCorner,
                        x_range: (0.30, 0.42),
                        y_range: (0.34, 0.66),
                    },
                    ObjectSpec {
                        kind: ObjectKind::TowelRightCorner,
                        x_range: (0.58, 0.70),
                        y_range: (0.34, 0.66),
                    },
                ],
                stages: vec![
                    StageTemplate {
                        name: "grab_reach",
                        left_state: Approaching,
                        right_state: Approaching,
                        left_target: WaypointRef::Object(0),
                        right_target: WaypointRef::Object(1),
                        active_targets: &[0, 1],
                    },
                    StageTemplate {
                        name: "fold",
                        left_state: Operating,
                        right_state: Operating,
                        left_target: WaypointRef::ObjectFine(0),
                        right_target: WaypointRef::ObjectFine(1),
                        active_targets: &[0, 1],
                    },
                    StageTemplate {
                        name: "return",
                        left_state: Returning,
                        right_state: Returning,
                        left_target: WaypointRef::Rest,
                        right_target: WaypointRef::Rest,
                        active_targets: &[],
                    },
                ],
                episode_length_range: (120, 200),
            },
        }
    }

    pub fn stage_names(&self) -> Vec<String> {
        self.stages.iter().map(|s| s.name.to_string()).collect()
    }

    /// The object each arm works on in this task, if any.
    pub fn arm_object(&self, arm: super::Arm) -> Option<usize> {
        let want = match arm {
            super::Arm::Left => super::ArmState::Operating,
            super::Arm::Right => super::ArmState::Operating,
        };
        for st in &self.stages {
            let (state, target) = match arm {
                super::Arm::Left => (st.left_state, st.left_target),
                super::Arm::Right => (st.right_state, st.right_target),
            };
            if state == want {
                if let WaypointRef::ObjectFine(i) | WaypointRef::Object(i) = target {
                    return Some(i);
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unzip_matches_rule_table_stage_order() {
        use ArmState::*;
        let t = TaskSpec::builtin(TaskName::Unzip);
        let pairs: Vec<_> = t.stages.iter().map(|s| (s.left_state, s.right_state)).collect();
        assert_eq!(
            pairs,
            vec![
                (Approaching, Holding),
                (Operating, Holding),
                (Operating, Approaching),
                (Operating, Operating),
                (Returning, Returning),
            ]
        );
    }

    #[test]
    fn arm_objects() {
        let t = TaskSpec::builtin(TaskName::Unzip);
        assert_eq!(t.arm_object(super::super::Arm::Left), Some(0));
        assert_eq!(t.arm_object(super::super::Arm::Right), Some(1));
        let ob = TaskSpec::builtin(TaskName::OpenBox);
        assert_eq!(ob.arm_object(super::super::Arm::Right), None);
    }
}
