//! Counterfactual task suites.
//!
//! Each [`SceneTaskSet`] pairs one scene layout with a well-supervised
//! in-domain task and at least two counterfactual tasks that are feasible in
//! the same layout. Four suite kinds probe different failure axes: spatial
//! grounding, object identity, multi-step order/cardinality, and
//! generalization to classes held out of the dataset entirely.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy;
use crate::seeding::stream_seed;
use crate::sim::{
    build_scene, Cell, ClassId, ObjectId, ObjectSpec, Predicate, Rect, SceneLayout, SubGoal,
    HELD_OUT_CLASSES,
};

/// Default horizon for single-step tasks.
pub const HORIZON: usize = 60;
/// Horizon for long-horizon (two sub-goal) tasks.
pub const HORIZON_LONG: usize = 120;

/// Default scene counts per suite, preserving the benchmark's relative
/// weighting of spatial/object/long/ood.
pub const DEFAULT_SCENES: [(SuiteKind, usize); 4] = [
    (SuiteKind::Spatial, 6),
    (SuiteKind::Object, 4),
    (SuiteKind::Long, 4),
    (SuiteKind::Ood, 6),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Spatial,
    Object,
    Long,
    Ood,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 4] = [
        SuiteKind::Spatial,
        SuiteKind::Object,
        SuiteKind::Long,
        SuiteKind::Ood,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::Spatial => "spatial",
            SuiteKind::Object => "object",
            SuiteKind::Long => "long",
            SuiteKind::Ood => "ood",
        }
    }
}

impl std::fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How well a task is covered by demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observedness {
    InDomain,
    UnderObserved,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub instruction: Vec<String>,
    pub target_object_id: ObjectId,
    pub success_predicate: Predicate,
    pub horizon: usize,
    pub observedness: Observedness,
}

/// One scene layout with its in-domain task and counterfactual alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTaskSet {
    pub suite_kind: SuiteKind,
    pub layout: SceneLayout,
    pub in_domain: TaskSpec,
    pub counterfactuals: Vec<TaskSpec>,
}

/// Demonstration quota per task observedness level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub demos_in_domain: usize,
    pub demos_under_observed: usize,
    pub demos_ood: usize,
}

impl Default for BiasProfile {
    fn default() -> Self {
        BiasProfile {
            demos_in_domain: 200,
            demos_under_observed: 1,
            demos_ood: 0,
        }
    }
}

impl BiasProfile {
    pub fn validate(&self) -> Result<(), SuiteError> {
        if self.demos_ood != 0 {
            return Err(SuiteError::InvalidProfile("demos_ood must be zero".into()));
        }
        if self.demos_in_domain <= self.demos_under_observed {
            return Err(SuiteError::InvalidProfile(
                "demos_in_domain must exceed demos_under_observed".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("held-out class set is empty")]
    HeldOutEmpty,
    #[error("training-task object not removable: {0}")]
    NotRemovable(String),
    #[error("invalid bias profile: {0}")]
    InvalidProfile(String),
    #[error("invalid task set: {0}")]
    InvalidSet(String),
}

impl TaskSpec {
    pub fn is_sequence(&self) -> bool {
        matches!(self.success_predicate, Predicate::Sequence { .. })
    }
}

impl SceneTaskSet {
    /// The in-domain task followed by the counterfactuals.
    pub fn all_tasks(&self) -> Vec<&TaskSpec> {
        std::iter::once(&self.in_domain)
            .chain(self.counterfactuals.iter())
            .collect()
    }

    /// Tasks whose predicates fully resolve in the current layout. After the
    /// CF-Focused transform the in-domain task drops out of this list.
    pub fn active_tasks(&self) -> Vec<&TaskSpec> {
        self.all_tasks()
            .into_iter()
            .filter(|t| self.task_resolves(t))
            .collect()
    }

    fn task_resolves(&self, task: &TaskSpec) -> bool {
        task.success_predicate
            .referenced_objects()
            .iter()
            .all(|id| self.layout.objects.iter().any(|o| o.id == *id))
    }

    /// Whether the in-domain task has been removed by the CF-Focused transform.
    pub fn is_focused(&self) -> bool {
        !self.task_resolves(&self.in_domain)
    }

    /// Structural invariants; the instruction vocabulary check runs against
    /// the policy module's token table.
    pub fn validate(&self) -> Result<(), SuiteError> {
        if self.counterfactuals.len() < 2 {
            return Err(SuiteError::InvalidSet(format!(
                "{}: fewer than two counterfactual tasks",
                self.in_domain.id
            )));
        }
        for task in self.all_tasks() {
            for token in &task.instruction {
                if policy::token_index(token).is_none() {
                    return Err(SuiteError::InvalidSet(format!(
                        "{}: token {token:?} not in vocabulary",
                        task.id
                    )));
                }
            }
            if let Predicate::Sequence { steps } = &task.success_predicate {
                if steps.is_empty() {
                    return Err(SuiteError::InvalidSet(format!(
                        "{}: empty sequence predicate",
                        task.id
                    )));
                }
            }
            if task.observedness == Observedness::Ood {
                let class = self
                    .layout
                    .objects
                    .iter()
                    .find(|o| o.id == task.target_object_id)
                    .map(|o| o.class_id);
                if !class.is_some_and(|c| HELD_OUT_CLASSES.contains(&c)) {
                    return Err(SuiteError::InvalidSet(format!(
                        "{}: OOD task targets a non-held-out class",
                        task.id
                    )));
                }
            }
        }
        if !self.is_focused()
            && !self.in_domain.is_sequence()
            && self.layout.training_task_object_id != Some(self.in_domain.target_object_id)
        {
            return Err(SuiteError::InvalidSet(format!(
                "{}: in-domain target is not the training-task object",
                self.in_domain.id
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Suite construction
// ---------------------------------------------------------------------------

// Placement bands shared by the suites. Regions are disjoint from each other,
// from the gripper start, and from the tray, so per-object placement streams
// never interact.
const LEFT_BAND: Rect = Rect { x0: 1, y0: 3, x1: 1, y1: 4 };
const MIDDLE_BAND: Rect = Rect { x0: 4, y0: 3, x1: 4, y1: 4 };
const RIGHT_BAND: Rect = Rect { x0: 7, y0: 3, x1: 7, y1: 4 };
const TOP_BAND: Rect = Rect { x0: 0, y0: 0, x1: 1, y1: 0 };
const TRAY: Rect = Rect { x0: 3, y0: 7, x1: 5, y1: 8 };
const GRIPPER_START: Cell = Cell { x: 4, y: 0 };

fn trainable(class: usize) -> ClassId {
    ClassId(class % 10)
}

fn object_spec(id: u32, class_id: ClassId, region: Rect) -> ObjectSpec {
    ObjectSpec {
        id: ObjectId(id),
        class_id,
        region,
        removable: true,
        eval_only: false,
    }
}

fn pick_task(
    id: String,
    instruction: Vec<&str>,
    target: ObjectId,
    observedness: Observedness,
) -> TaskSpec {
    TaskSpec {
        id,
        instruction: instruction.into_iter().map(String::from).collect(),
        target_object_id: target,
        success_predicate: Predicate::Pick { target },
        horizon: HORIZON,
        observedness,
    }
}

/// Build a suite of the given kind. Generation is a pure function of
/// `(kind, n_scenes, seed)`; the seed rotates which classes the scenes use.
pub fn make_suite(
    kind: SuiteKind,
    n_scenes: usize,
    seed: u64,
) -> Result<Vec<SceneTaskSet>, SuiteError> {
    make_suite_with_held_out(kind, n_scenes, seed, &HELD_OUT_CLASSES)
}

/// [`make_suite`] with an explicit held-out class set for the OOD suite.
pub fn make_suite_with_held_out(
    kind: SuiteKind,
    n_scenes: usize,
    seed: u64,
    held_out: &[ClassId],
) -> Result<Vec<SceneTaskSet>, SuiteError> {
    if kind == SuiteKind::Ood && held_out.is_empty() {
        return Err(SuiteError::HeldOutEmpty);
    }
    let rotation = (stream_seed(seed, "class-rotation", &[]) % 10) as usize;
    let mut sets = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let set = match kind {
            SuiteKind::Spatial => spatial_scene(i, rotation),
            SuiteKind::Object => object_scene(i, rotation),
            SuiteKind::Long => long_scene(i, rotation),
            SuiteKind::Ood => ood_scene(i, rotation, held_out),
        };
        set.validate()?;
        sets.push(set);
    }
    Ok(sets)
}

/// Three same-class objects told apart only by a spatial token.
fn spatial_scene(i: usize, rotation: usize) -> SceneTaskSet {
    let class = trainable(rotation + i);
    let layout = SceneLayout {
        width: 9,
        height: 9,
        objects: vec![
            object_spec(0, class, LEFT_BAND),
            object_spec(1, class, MIDDLE_BAND),
            object_spec(2, class, RIGHT_BAND),
        ],
        goal_regions: [(String::from("tray"), TRAY)].into(),
        gripper_start: GRIPPER_START,
        training_task_object_id: Some(ObjectId(1)),
    };
    SceneTaskSet {
        suite_kind: SuiteKind::Spatial,
        layout,
        in_domain: pick_task(
            format!("spatial-{i}-in"),
            vec!["middle"],
            ObjectId(1),
            Observedness::InDomain,
        ),
        counterfactuals: vec![
            pick_task(
                format!("spatial-{i}-cf0"),
                vec!["left"],
                ObjectId(0),
                Observedness::UnderObserved,
            ),
            pick_task(
                format!("spatial-{i}-cf1"),
                vec!["right"],
                ObjectId(2),
                Observedness::UnderObserved,
            ),
        ],
    }
}

/// Three distinct classes; counterfactuals swap the instructed class.
///
/// The in-domain target's band rotates per scene so class tokens bind to the
/// class channel across positions rather than to one fixed location.
fn object_scene(i: usize, rotation: usize) -> SceneTaskSet {
    let base = rotation + 6 + 3 * i;
    let (c_in, c_cf0, c_cf1) = (trainable(base), trainable(base + 1), trainable(base + 2));
    let bands = [LEFT_BAND, MIDDLE_BAND, RIGHT_BAND];
    let layout = SceneLayout {
        width: 9,
        height: 9,
        objects: vec![
            object_spec(0, c_in, bands[i % 3]),
            object_spec(1, c_cf0, bands[(i + 1) % 3]),
            object_spec(2, c_cf1, bands[(i + 2) % 3]),
        ],
        goal_regions: [(String::from("tray"), TRAY)].into(),
        gripper_start: GRIPPER_START,
        training_task_object_id: Some(ObjectId(0)),
    };
    SceneTaskSet {
        suite_kind: SuiteKind::Object,
        layout,
        in_domain: pick_task(
            format!("object-{i}-in"),
            vec![c_in.name()],
            ObjectId(0),
            Observedness::InDomain,
        ),
        counterfactuals: vec![
            pick_task(
                format!("object-{i}-cf0"),
                vec![c_cf0.name()],
                ObjectId(1),
                Observedness::UnderObserved,
            ),
            pick_task(
                format!("object-{i}-cf1"),
                vec![c_cf1.name()],
                ObjectId(2),
                Observedness::UnderObserved,
            ),
        ],
    }
}

/// Two-step place sequence; counterfactuals reverse the order or keep only
/// the one-step prefix.
fn long_scene(i: usize, rotation: usize) -> SceneTaskSet {
    let a = trainable(rotation + 6 + i);
    let b = trainable(rotation + i);
    let distractor = trainable(rotation + 3 + i);
    let layout = SceneLayout {
        width: 9,
        height: 9,
        objects: vec![
            object_spec(0, a, LEFT_BAND),
            object_spec(1, b, RIGHT_BAND),
            object_spec(2, distractor, TOP_BAND),
        ],
        goal_regions: [(String::from("tray"), TRAY)].into(),
        gripper_start: GRIPPER_START,
        training_task_object_id: Some(ObjectId(0)),
    };
    let place = |target: u32| SubGoal::PlaceOn {
        target: ObjectId(target),
        region: "tray".into(),
    };
    let seq_task = |id: String, instruction: Vec<&str>, steps: Vec<SubGoal>, obs: Observedness| {
        let target_object_id = steps[0].target();
        TaskSpec {
            id,
            instruction: instruction.into_iter().map(String::from).collect(),
            target_object_id,
            success_predicate: Predicate::Sequence { steps },
            horizon: HORIZON_LONG,
            observedness: obs,
        }
    };
    SceneTaskSet {
        suite_kind: SuiteKind::Long,
        layout,
        in_domain: seq_task(
            format!("long-{i}-in"),
            vec!["place", a.name(), "tray", "then", "place", b.name(), "tray"],
            vec![place(0), place(1)],
            Observedness::InDomain,
        ),
        counterfactuals: vec![
            seq_task(
                format!("long-{i}-cf0"),
                vec!["place", b.name(), "tray", "then", "place", a.name(), "tray"],
                vec![place(1), place(0)],
                Observedness::UnderObserved,
            ),
            seq_task(
                format!("long-{i}-cf1"),
                vec!["place", a.name(), "tray"],
                vec![place(0)],
                Observedness::UnderObserved,
            ),
        ],
    }
}

/// One familiar object plus two objects of held-out classes. The held-out
/// objects are present at evaluation time only, so no demonstration ever
/// observes them.
fn ood_scene(i: usize, rotation: usize, held_out: &[ClassId]) -> SceneTaskSet {
    let familiar = trainable(rotation + i);
    let ood0 = held_out[0];
    let ood1 = held_out[held_out.len().min(2) - 1];
    let bands = [LEFT_BAND, MIDDLE_BAND, RIGHT_BAND];
    let mut obj_cf0 = object_spec(1, ood0, bands[(i + 1) % 3]);
    obj_cf0.eval_only = true;
    let mut obj_cf1 = object_spec(2, ood1, bands[(i + 2) % 3]);
    obj_cf1.eval_only = true;
    let layout = SceneLayout {
        width: 9,
        height: 9,
        objects: vec![object_spec(0, familiar, bands[i % 3]), obj_cf0, obj_cf1],
        goal_regions: [(String::from("tray"), TRAY)].into(),
        gripper_start: GRIPPER_START,
        training_task_object_id: Some(ObjectId(0)),
    };
    SceneTaskSet {
        suite_kind: SuiteKind::Ood,
        layout,
        in_domain: pick_task(
            format!("ood-{i}-in"),
            vec![familiar.name()],
            ObjectId(0),
            Observedness::InDomain,
        ),
        counterfactuals: vec![
            pick_task(
                format!("ood-{i}-cf0"),
                vec![ood0.name()],
                ObjectId(1),
                Observedness::Ood,
            ),
            pick_task(
                format!("ood-{i}-cf1"),
                vec![ood1.name()],
                ObjectId(2),
                Observedness::Ood,
            ),
        ],
    }
}

/// Build all default suites: 6 spatial, 4 object, 4 long, 6 ood scenes.
pub fn make_default_suites(seed: u64) -> Result<Vec<SceneTaskSet>, SuiteError> {
    let mut out = Vec::new();
    for (kind, n) in DEFAULT_SCENES {
        out.extend(make_suite(kind, n, seed)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CF-Focused transform
// ---------------------------------------------------------------------------

/// Remove the training-task object from the scene and keep only the
/// counterfactual tasks active.
pub fn apply_cf_focused(set: &SceneTaskSet) -> Result<SceneTaskSet, SuiteError> {
    let attractor = set
        .layout
        .training_task_object_id
        .ok_or_else(|| SuiteError::NotRemovable("no training-task object in layout".into()))?;
    let spec = set
        .layout
        .objects
        .iter()
        .find(|o| o.id == attractor)
        .ok_or_else(|| SuiteError::NotRemovable("training-task object missing".into()))?;
    if !spec.removable {
        return Err(SuiteError::NotRemovable(format!(
            "object {attractor:?} is marked non-removable"
        )));
    }
    for task in &set.counterfactuals {
        if task
            .success_predicate
            .referenced_objects()
            .contains(&attractor)
        {
            return Err(SuiteError::NotRemovable(format!(
                "counterfactual {} references the training-task object",
                task.id
            )));
        }
    }
    Ok(SceneTaskSet {
        suite_kind: set.suite_kind,
        layout: set.layout.without_object(attractor),
        in_domain: set.in_domain.clone(),
        counterfactuals: set.counterfactuals.clone(),
    })
}

// ---------------------------------------------------------------------------
// Feasibility
// ---------------------------------------------------------------------------

/// True iff the scripted expert completes every active task within its
/// horizon from 10 random resets.
pub fn feasibility_check(set: &SceneTaskSet) -> bool {
    for task in set.active_tasks() {
        for reset in 0..10u64 {
            let seed = crate::seeding::stream_seed_str(0xFEA5_1B1E, "feasibility", &task.id, reset);
            let Ok(mut scene) = build_scene(&set.layout, seed) else {
                return false;
            };
            if !crate::dataset::expert_completes(&mut scene, task) {
                return false;
            }
        }
    }
    true
}
