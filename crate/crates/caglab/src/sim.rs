//! Deterministic discrete tabletop world.
//!
//! A [`Scene`] is a small grid holding typed objects, a gripper, and named
//! goal regions. [`step`] executes one of seven discrete actions and reports
//! the events it produced; gripper-object cell co-location is the contact
//! event that the grounding metric is built on. Observations are fixed-length
//! per-class occupancy grids rendered by [`render_observation`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{rng_from, stream_seed};
use rand::Rng;

/// Number of object classes in the fixed vocabulary.
pub const NUM_CLASSES: usize = 12;

/// Classes that never appear in any demonstration (out-of-distribution).
pub const HELD_OUT_CLASSES: [ClassId; 2] = [ClassId(10), ClassId(11)];

/// Display names for the class vocabulary; these double as instruction tokens.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "mug", "bowl", "plate", "can", "cube", "ball", "book", "cup", "pen", "jar", "toy", "lamp",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.0]
    }
}

/// A grid cell. `x` is the column, `y` the row; `y` grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

/// Inclusive rectangular region of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        assert!(x0 <= x1 && y0 <= y1, "degenerate rect");
        Rect { x0, y0, x1, y1 }
    }

    pub fn single(cell: Cell) -> Self {
        Rect::new(cell.x, cell.y, cell.x, cell.y)
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= self.x0 && c.x <= self.x1 && c.y >= self.y0 && c.y <= self.y1
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::with_capacity((self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1));
        for y in self.y0..=self.y1 {
            for x in self.x0..=self.x1 {
                out.push(Cell::new(x, y));
            }
        }
        out
    }
}

/// Discrete action set; the support of every policy distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionId {
    Up,
    Down,
    Left,
    Right,
    Grasp,
    Release,
    Noop,
}

/// Number of discrete actions.
pub const NUM_ACTIONS: usize = 7;

impl ActionId {
    pub const ALL: [ActionId; NUM_ACTIONS] = [
        ActionId::Up,
        ActionId::Down,
        ActionId::Left,
        ActionId::Right,
        ActionId::Grasp,
        ActionId::Release,
        ActionId::Noop,
    ];

    pub fn index(self) -> usize {
        match self {
            ActionId::Up => 0,
            ActionId::Down => 1,
            ActionId::Left => 2,
            ActionId::Right => 3,
            ActionId::Grasp => 4,
            ActionId::Release => 5,
            ActionId::Noop => 6,
        }
    }

    pub fn from_index(ix: usize) -> Option<ActionId> {
        ActionId::ALL.get(ix).copied()
    }

    pub fn is_move(self) -> bool {
        matches!(
            self,
            ActionId::Up | ActionId::Down | ActionId::Left | ActionId::Right
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: ObjectId,
    pub class_id: ClassId,
    pub position: Cell,
    pub held: bool,
    pub removable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GripperState {
    pub position: Cell,
    pub holding: Option<ObjectId>,
}

/// The observation source: grid, objects, gripper, and goal regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectInstance>,
    pub gripper: GripperState,
    pub goal_regions: BTreeMap<String, Vec<Cell>>,
    pub training_task_object_id: Option<ObjectId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    ContactedObject(ObjectId),
    Grasped(ObjectId),
    Released(ObjectId),
    Moved,
}

/// Result of one simulator step. `terminated` is always false here; the
/// rollout layer owns episode termination and flips it on the record it logs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub events: Vec<Event>,
    pub terminated: bool,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("placement infeasible for object {object:?} after {attempts} rejection samples")]
    PlacementInfeasible { object: ObjectId, attempts: usize },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

// ---------------------------------------------------------------------------
// Layout and scene construction
// ---------------------------------------------------------------------------

/// Placement spec for one object: class plus the region it is sampled in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub class_id: ClassId,
    pub region: Rect,
    pub removable: bool,
    /// Present during evaluation only; stripped when collecting demonstrations.
    #[serde(default)]
    pub eval_only: bool,
}

/// Scene template: everything except the sampled object positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectSpec>,
    pub goal_regions: BTreeMap<String, Rect>,
    pub gripper_start: Cell,
    pub training_task_object_id: Option<ObjectId>,
}

impl SceneLayout {
    /// Copy of the layout without eval-only objects (the collection view).
    pub fn without_eval_only(&self) -> SceneLayout {
        let mut out = self.clone();
        out.objects.retain(|o| !o.eval_only);
        out
    }

    /// Copy of the layout without the given object.
    pub fn without_object(&self, id: ObjectId) -> SceneLayout {
        let mut out = self.clone();
        out.objects.retain(|o| o.id != id);
        if out.training_task_object_id == Some(id) {
            out.training_task_object_id = None;
        }
        out
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Sample a scene from the layout. Each object draws from its own seed
/// stream, so removing one object leaves the others' positions unchanged.
pub fn build_scene(layout: &SceneLayout, seed: u64) -> Result<Scene, SimError> {
    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(layout.objects.len());
    for spec in &layout.objects {
        let cells = spec.region.cells();
        let mut rng = rng_from(stream_seed(seed, "placement", &[u64::from(spec.id.0)]));
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cell = cells[rng.random_range(0..cells.len())];
            if objects.iter().all(|o| o.position != cell) {
                placed = Some(cell);
                break;
            }
        }
        let position = placed.ok_or(SimError::PlacementInfeasible {
            object: spec.id,
            attempts: PLACEMENT_ATTEMPTS,
        })?;
        objects.push(ObjectInstance {
            id: spec.id,
            class_id: spec.class_id,
            position,
            held: false,
            removable: spec.removable,
        });
    }
    let scene = Scene {
        width: layout.width,
        height: layout.height,
        objects,
        gripper: GripperState {
            position: layout.gripper_start,
            holding: None,
        },
        goal_regions: layout
            .goal_regions
            .iter()
            .map(|(name, rect)| (name.clone(), rect.cells()))
            .collect(),
        training_task_object_id: layout.training_task_object_id,
    };
    scene.validate()?;
    Ok(scene)
}

impl Scene {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: ObjectId) -> Option<&mut ObjectInstance> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height
    }

    /// Check the scene invariants; used after construction and in tests.
    pub fn validate(&self) -> Result<(), SimError> {
        if !self.in_bounds(self.gripper.position) {
            return Err(SimError::InvalidScene("gripper out of bounds".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.objects {
            if !self.in_bounds(o.position) {
                return Err(SimError::InvalidScene(format!(
                    "object {:?} out of bounds",
                    o.id
                )));
            }
            if !ids.insert(o.id) {
                return Err(SimError::InvalidScene(format!(
                    "duplicate object id {:?}",
                    o.id
                )));
            }
            if o.class_id.0 >= NUM_CLASSES {
                return Err(SimError::InvalidScene(format!(
                    "class {:?} outside vocabulary",
                    o.class_id
                )));
            }
            if o.held && o.position != self.gripper.position {
                return Err(SimError::InvalidScene(
                    "held object away from gripper".into(),
                ));
            }
        }
        match self.gripper.holding {
            Some(id) => match self.object(id) {
                Some(o) if o.held => {}
                _ => {
                    return Err(SimError::InvalidScene(
                        "holding refers to a missing or unheld object".into(),
                    ))
                }
            },
            None => {
                if self.objects.iter().any(|o| o.held) {
                    return Err(SimError::InvalidScene("held object but empty gripper".into()));
                }
            }
        }
        if let Some(id) = self.training_task_object_id {
            if self.object(id).is_none() {
                return Err(SimError::InvalidScene(
                    "training_task_object_id refers to a missing object".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

/// Execute one action. Moves clamp at grid edges; invalid grasp/release are
/// silent no-ops. Contact fires for every unheld object on a cell the gripper
/// *enters* (a clamped move is not an entry). If several ungrasped objects
/// share the gripper cell, grasp takes the lowest object id.
pub fn step(scene: &mut Scene, action: ActionId) -> StepOutcome {
    let mut events = Vec::new();
    match action {
        ActionId::Up | ActionId::Down | ActionId::Left | ActionId::Right => {
            let p = scene.gripper.position;
            let target = match action {
                ActionId::Up => Cell::new(p.x, p.y.saturating_sub(1)),
                ActionId::Down => Cell::new(p.x, (p.y + 1).min(scene.height - 1)),
                ActionId::Left => Cell::new(p.x.saturating_sub(1), p.y),
                ActionId::Right => Cell::new((p.x + 1).min(scene.width - 1), p.y),
                _ => unreachable!(),
            };
            events.push(Event::Moved);
            if target != p {
                scene.gripper.position = target;
                if let Some(held) = scene.gripper.holding {
                    scene.object_mut(held).expect("held object exists").position = target;
                }
                let mut contacted: Vec<ObjectId> = scene
                    .objects
                    .iter()
                    .filter(|o| !o.held && o.position == target)
                    .map(|o| o.id)
                    .collect();
                contacted.sort();
                events.extend(contacted.into_iter().map(Event::ContactedObject));
            }
        }
        ActionId::Grasp => {
            if scene.gripper.holding.is_none() {
                let at = scene.gripper.position;
                let mut candidates: Vec<ObjectId> = scene
                    .objects
                    .iter()
                    .filter(|o| !o.held && o.position == at)
                    .map(|o| o.id)
                    .collect();
                candidates.sort();
                if let Some(&id) = candidates.first() {
                    scene.object_mut(id).expect("candidate exists").held = true;
                    scene.gripper.holding = Some(id);
                    events.push(Event::Grasped(id));
                }
            }
        }
        ActionId::Release => {
            if let Some(id) = scene.gripper.holding.take() {
                let obj = scene.object_mut(id).expect("held object exists");
                obj.held = false;
                events.push(Event::Released(id));
            }
        }
        ActionId::Noop => {}
    }
    StepOutcome {
        events,
        terminated: false,
    }
}

// ---------------------------------------------------------------------------
// Success predicates
// ---------------------------------------------------------------------------

/// An atomic goal: hold an object, or have it resting in a region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubGoal {
    Pick { target: ObjectId },
    PlaceOn { target: ObjectId, region: String },
}

impl SubGoal {
    pub fn target(&self) -> ObjectId {
        match self {
            SubGoal::Pick { target } | SubGoal::PlaceOn { target, .. } => *target,
        }
    }
}

/// Task success predicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    Pick { target: ObjectId },
    PlaceOn { target: ObjectId, region: String },
    Sequence { steps: Vec<SubGoal> },
}

impl Predicate {
    /// The predicate as an ordered list of atomic goals.
    pub fn subgoals(&self) -> Vec<SubGoal> {
        match self {
            Predicate::Pick { target } => vec![SubGoal::Pick { target: *target }],
            Predicate::PlaceOn { target, region } => vec![SubGoal::PlaceOn {
                target: *target,
                region: region.clone(),
            }],
            Predicate::Sequence { steps } => steps.clone(),
        }
    }

    /// The object the first instructed sub-goal refers to.
    pub fn first_target(&self) -> ObjectId {
        self.subgoals()[0].target()
    }

    /// All objects this predicate refers to.
    pub fn referenced_objects(&self) -> Vec<ObjectId> {
        self.subgoals().iter().map(|g| g.target()).collect()
    }

    /// Whether `self`'s sub-goal list is a proper prefix of `other`'s.
    pub fn is_proper_prefix_of(&self, other: &Predicate) -> bool {
        let a = self.subgoals();
        let b = other.subgoals();
        a.len() < b.len() && a[..] == b[..a.len()]
    }
}

fn require_object<'s>(scene: &'s Scene, id: ObjectId) -> Result<&'s ObjectInstance, SimError> {
    scene
        .object(id)
        .ok_or_else(|| SimError::DanglingReference(format!("object {:?} not in scene", id)))
}

/// Whether an atomic goal holds in the current scene state.
pub fn subgoal_satisfied(scene: &Scene, goal: &SubGoal) -> Result<bool, SimError> {
    match goal {
        SubGoal::Pick { target } => {
            require_object(scene, *target)?;
            Ok(scene.gripper.holding == Some(*target))
        }
        SubGoal::PlaceOn { target, region } => {
            let obj = require_object(scene, *target)?;
            let cells = scene.goal_regions.get(region).ok_or_else(|| {
                SimError::DanglingReference(format!("goal region {region:?} not in scene"))
            })?;
            Ok(!obj.held && cells.contains(&obj.position))
        }
    }
}

/// Ordered sub-goal tracker for one task over one episode.
///
/// The first sub-goal completes whenever its predicate holds. Later sub-goals
/// complete only on a rising edge after their predecessor completed, so a
/// sequence executed in the wrong order never counts as done. At most one
/// sub-goal advances per update.
#[derive(Debug, Clone)]
pub struct TaskProgress {
    goals: Vec<SubGoal>,
    completed: usize,
    pending_prev_sat: bool,
}

impl TaskProgress {
    pub fn new(pred: &Predicate) -> Self {
        TaskProgress {
            goals: pred.subgoals(),
            completed: 0,
            pending_prev_sat: false,
        }
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn is_complete(&self) -> bool {
        self.completed == self.goals.len()
    }

    /// Advance the tracker against the post-step scene state.
    pub fn update(&mut self, scene: &Scene) -> Result<(), SimError> {
        if self.is_complete() {
            return Ok(());
        }
        let sat = subgoal_satisfied(scene, &self.goals[self.completed])?;
        let fire = if self.completed == 0 {
            sat
        } else {
            sat && !self.pending_prev_sat
        };
        if fire {
            self.completed += 1;
            if !self.is_complete() {
                // Baseline for the next sub-goal: if it already holds here, a
                // fresh edge is required before it may complete.
                self.pending_prev_sat = subgoal_satisfied(scene, &self.goals[self.completed])?;
            }
        } else if self.completed > 0 {
            self.pending_prev_sat = sat;
        }
        Ok(())
    }
}

/// Evaluate a task's success predicate.
///
/// Atomic predicates are pure functions of the scene; sequences are read off
/// the progress log the rollout maintains. Errors if the predicate names an
/// object or region absent from the scene.
pub fn check_success(
    scene: &Scene,
    pred: &Predicate,
    progress: &TaskProgress,
) -> Result<bool, SimError> {
    for goal in pred.subgoals() {
        // Surface dangling references even when the log already answers.
        let _ = match &goal {
            SubGoal::Pick { target } => require_object(scene, *target).map(|_| ()),
            SubGoal::PlaceOn { target, region } => {
                require_object(scene, *target)?;
                scene
                    .goal_regions
                    .get(region)
                    .map(|_| ())
                    .ok_or_else(|| {
                        SimError::DanglingReference(format!("goal region {region:?} not in scene"))
                    })
            }
        }?;
    }
    match pred {
        Predicate::Pick { .. } | Predicate::PlaceOn { .. } => {
            subgoal_satisfied(scene, &pred.subgoals()[0])
        }
        Predicate::Sequence { .. } => Ok(progress.is_complete()),
    }
}

// ---------------------------------------------------------------------------
// Observation encoding
// ---------------------------------------------------------------------------

/// Sparse fixed-length observation vector.
///
/// Layout: `num_classes` occupancy channels of `width*height` cells each
/// (row-major, cell `(x, y)` at `y*width + x`), one gripper position channel,
/// and a trailing holding flag. Stored sparsely; almost every entry is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEncoding {
    pub len: usize,
    /// `(index, value)` pairs with strictly increasing indices.
    pub nz: Vec<(u32, f64)>,
}

impl ObservationEncoding {
    pub fn zeros(len: usize) -> Self {
        ObservationEncoding { len, nz: Vec::new() }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        ObservationEncoding {
            len: values.len(),
            nz: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i as u32, *v))
                .collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for &(i, v) in &self.nz {
            out[i as usize] = v;
        }
        out
    }

    /// Check index ordering and bounds (used when loading datasets).
    pub fn well_formed(&self) -> bool {
        let mut prev: Option<u32> = None;
        for &(i, v) in &self.nz {
            if (i as usize) >= self.len || !v.is_finite() {
                return false;
            }
            if let Some(p) = prev {
                if i <= p {
                    return false;
                }
            }
            prev = Some(i);
        }
        true
    }
}

/// Observation length for a grid with the given class vocabulary size.
pub fn observation_len(width: usize, height: usize, num_classes: usize) -> usize {
    (num_classes + 1) * width * height + 1
}

/// Render the scene into its observation encoding. Deterministic, and
/// injective on scenes that differ in occupied cells per class, gripper
/// position, or the holding flag.
pub fn render_observation(scene: &Scene, num_classes: usize) -> ObservationEncoding {
    let cells = scene.width * scene.height;
    let len = observation_len(scene.width, scene.height, num_classes);
    let mut indices: Vec<u32> = Vec::with_capacity(scene.objects.len() + 2);
    for o in &scene.objects {
        assert!(
            o.class_id.0 < num_classes,
            "class {:?} outside vocabulary of {num_classes}",
            o.class_id
        );
        let flat = o.class_id.0 * cells + o.position.y * scene.width + o.position.x;
        indices.push(flat as u32);
    }
    let gpos = num_classes * cells
        + scene.gripper.position.y * scene.width
        + scene.gripper.position.x;
    indices.push(gpos as u32);
    if scene.gripper.holding.is_some() {
        indices.push((len - 1) as u32);
    }
    indices.sort_unstable();
    indices.dedup();
    ObservationEncoding {
        len,
        nz: indices.into_iter().map(|i| (i, 1.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_layout() -> SceneLayout {
        SceneLayout {
            width: 9,
            height: 9,
            objects: vec![
                ObjectSpec {
                    id: ObjectId(0),
                    class_id: ClassId(0),
                    region: Rect::new(0, 3, 2, 5),
                    removable: true,
                    eval_only: false,
                },
                ObjectSpec {
                    id: ObjectId(1),
                    class_id: ClassId(1),
                    region: Rect::new(3, 3, 5, 5),
                    removable: true,
                    eval_only: false,
                },
                ObjectSpec {
                    id: ObjectId(2),
                    class_id: ClassId(2),
                    region: Rect::new(6, 3, 8, 5),
                    removable: true,
                    eval_only: false,
                },
            ],
            goal_regions: BTreeMap::from([(String::from("tray"), Rect::new(3, 7, 5, 8))]),
            gripper_start: Cell::new(4, 0),
            training_task_object_id: Some(ObjectId(1)),
        }
    }

    #[test]
    fn build_scene_is_deterministic() {
        let layout = simple_layout();
        let a = build_scene(&layout, 7).unwrap();
        let b = build_scene(&layout, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_scene_seeds_differ() {
        let layout = simple_layout();
        let mut differing = 0;
        for k in 0..100u64 {
            let a = build_scene(&layout, 2 * k).unwrap();
            let b = build_scene(&layout, 2 * k + 1).unwrap();
            let pos = |s: &Scene| s.objects.iter().map(|o| o.position).collect::<Vec<_>>();
            if pos(&a) != pos(&b) {
                differing += 1;
            }
        }
        assert!(differing >= 95, "only {differing}/100 seed pairs differ");
    }

    #[test]
    fn build_scene_rejects_overfull_region() {
        let mut layout = simple_layout();
        let tight = Rect::single(Cell::new(1, 1));
        layout.objects[0].region = tight;
        layout.objects[1].region = tight;
        let err = build_scene(&layout, 0).unwrap_err();
        assert!(matches!(err, SimError::PlacementInfeasible { .. }));
    }

    #[test]
    fn removing_an_object_keeps_other_placements() {
        let layout = simple_layout();
        let full = build_scene(&layout, 11).unwrap();
        let reduced = build_scene(&layout.without_object(ObjectId(1)), 11).unwrap();
        for o in &reduced.objects {
            assert_eq!(o.position, full.object(o.id).unwrap().position);
        }
        assert_eq!(reduced.objects.len(), 2);
    }

    #[test]
    fn moves_clamp_at_edges() {
        let mut scene = build_scene(&simple_layout(), 3).unwrap();
        scene.gripper.position = Cell::new(0, 0);
        let out = step(&mut scene, ActionId::Left);
        assert_eq!(scene.gripper.position, Cell::new(0, 0));
        assert_eq!(out.events, vec![Event::Moved]);
        let out = step(&mut scene, ActionId::Up);
        assert_eq!(scene.gripper.position, Cell::new(0, 0));
        assert_eq!(out.events, vec![Event::Moved]);
    }

    #[test]
    fn grasp_on_shared_cell() {
        let mut scene = build_scene(&simple_layout(), 3).unwrap();
        let target = scene.object(ObjectId(0)).unwrap().position;
        scene.gripper.position = target;
        let out = step(&mut scene, ActionId::Grasp);
        assert_eq!(out.events, vec![Event::Grasped(ObjectId(0))]);
        assert_eq!(scene.gripper.holding, Some(ObjectId(0)));
        assert!(scene.object(ObjectId(0)).unwrap().held);
        scene.validate().unwrap();
    }

    #[test]
    fn grasp_while_holding_is_silent_noop() {
        let mut scene = build_scene(&simple_layout(), 3).unwrap();
        scene.gripper.position = scene.object(ObjectId(0)).unwrap().position;
        step(&mut scene, ActionId::Grasp);
        // Walk onto another object while holding, then try to grasp it.
        let other = scene.object(ObjectId(1)).unwrap().position;
        scene.gripper.position = other;
        scene.object_mut(ObjectId(0)).unwrap().position = other;
        let before = scene.clone();
        let out = step(&mut scene, ActionId::Grasp);
        assert!(out.events.is_empty());
        assert_eq!(scene, before);
    }

    #[test]
    fn held_object_tracks_gripper_and_release_drops_it() {
        let mut scene = build_scene(&simple_layout(), 3).unwrap();
        scene.gripper.position = scene.object(ObjectId(0)).unwrap().position;
        step(&mut scene, ActionId::Grasp);
        step(&mut scene, ActionId::Down);
        assert_eq!(
            scene.object(ObjectId(0)).unwrap().position,
            scene.gripper.position
        );
        let out = step(&mut scene, ActionId::Release);
        assert_eq!(out.events, vec![Event::Released(ObjectId(0))]);
        assert_eq!(scene.gripper.holding, None);
        assert!(!scene.object(ObjectId(0)).unwrap().held);
        scene.validate().unwrap();
    }

    #[test]
    fn contact_fires_on_entry_only() {
        let mut scene = build_scene(&simple_layout(), 3).unwrap();
        let target = scene.object(ObjectId(1)).unwrap().position;
        scene.gripper.position = Cell::new(target.x, target.y - 1);
        let out = step(&mut scene, ActionId::Down);
        assert!(out
            .events
            .contains(&Event::ContactedObject(ObjectId(1))));
        // Clamped move while standing on the object: no re-entry, no contact.
        scene.gripper.position = Cell::new(0, 0);
        scene.object_mut(ObjectId(1)).unwrap().position = Cell::new(0, 0);
        let out = step(&mut scene, ActionId::Left);
        assert_eq!(out.events, vec![Event::Moved]);
    }

    #[test]
    fn pick_predicate_checks_holding() {
        let mut scene = build_scene(&simple_layout(), 3).unwrap();
        let pred = Predicate::Pick { target: ObjectId(2) };
        let progress = TaskProgress::new(&pred);
        assert!(!check_success(&scene, &pred, &progress).unwrap());
        scene.gripper.position = scene.object(ObjectId(2)).unwrap().position;
        step(&mut scene, ActionId::Grasp);
        assert!(check_success(&scene, &pred, &progress).unwrap());
    }

    #[test]
    fn place_predicate_requires_region_and_not_held() {
        let mut scene = build_scene(&simple_layout(), 3).unwrap();
        let pred = Predicate::PlaceOn {
            target: ObjectId(0),
            region: "tray".into(),
        };
        let progress = TaskProgress::new(&pred);
        scene.gripper.position = scene.object(ObjectId(0)).unwrap().position;
        step(&mut scene, ActionId::Grasp);
        scene.gripper.position = Cell::new(4, 7);
        scene.object_mut(ObjectId(0)).unwrap().position = Cell::new(4, 7);
        assert!(!check_success(&scene, &pred, &progress).unwrap());
        step(&mut scene, ActionId::Release);
        assert!(check_success(&scene, &pred, &progress).unwrap());
    }

    #[test]
    fn dangling_reference_is_an_error() {
        let scene = build_scene(&simple_layout().without_object(ObjectId(1)), 3).unwrap();
        let pred = Predicate::Pick { target: ObjectId(1) };
        let progress = TaskProgress::new(&pred);
        let err = check_success(&scene, &pred, &progress).unwrap_err();
        assert!(matches!(err, SimError::DanglingReference(_)));
    }

    #[test]
    fn sequence_requires_order() {
        let seq = Predicate::Sequence {
            steps: vec![
                SubGoal::PlaceOn {
                    target: ObjectId(0),
                    region: "tray".into(),
                },
                SubGoal::PlaceOn {
                    target: ObjectId(2),
                    region: "tray".into(),
                },
            ],
        };
        // Right order: object 0 placed, then object 2.
        let mut scene = build_scene(&simple_layout(), 3).unwrap();
        let mut progress = TaskProgress::new(&seq);
        let place = |scene: &mut Scene, id: ObjectId, cell: Cell| {
            scene.gripper.position = scene.object(id).unwrap().position;
            step(scene, ActionId::Grasp);
            scene.gripper.position = cell;
            scene.object_mut(id).unwrap().position = cell;
            step(scene, ActionId::Release);
        };
        place(&mut scene, ObjectId(0), Cell::new(3, 7));
        progress.update(&scene).unwrap();
        assert_eq!(progress.completed(), 1);
        place(&mut scene, ObjectId(2), Cell::new(5, 7));
        progress.update(&scene).unwrap();
        assert!(progress.is_complete());
        assert!(check_success(&scene, &seq, &progress).unwrap());

        // Wrong order: object 2 placed first never completes the sequence.
        let mut scene = build_scene(&simple_layout(), 3).unwrap();
        let mut progress = TaskProgress::new(&seq);
        place(&mut scene, ObjectId(2), Cell::new(5, 7));
        progress.update(&scene).unwrap();
        place(&mut scene, ObjectId(0), Cell::new(3, 7));
        progress.update(&scene).unwrap();
        progress.update(&scene).unwrap();
        assert_eq!(progress.completed(), 1);
        assert!(!check_success(&scene, &seq, &progress).unwrap());
    }

    #[test]
    fn prefix_relation() {
        let full = Predicate::Sequence {
            steps: vec![
                SubGoal::PlaceOn {
                    target: ObjectId(0),
                    region: "tray".into(),
                },
                SubGoal::PlaceOn {
                    target: ObjectId(2),
                    region: "tray".into(),
                },
            ],
        };
        let prefix = Predicate::Sequence {
            steps: vec![SubGoal::PlaceOn {
                target: ObjectId(0),
                region: "tray".into(),
            }],
        };
        let reversed = Predicate::Sequence {
            steps: vec![
                SubGoal::PlaceOn {
                    target: ObjectId(2),
                    region: "tray".into(),
                },
                SubGoal::PlaceOn {
                    target: ObjectId(0),
                    region: "tray".into(),
                },
            ],
        };
        assert!(prefix.is_proper_prefix_of(&full));
        assert!(!full.is_proper_prefix_of(&prefix));
        assert!(!reversed.is_proper_prefix_of(&full));
        assert!(!full.is_proper_prefix_of(&full));
    }

    #[test]
    fn observation_length_and_gripper_channel() {
        // Empty 2x2 grid, one class: 9 entries, one nonzero for the gripper.
        let scene = Scene {
            width: 2,
            height: 2,
            objects: vec![],
            gripper: GripperState {
                position: Cell::new(0, 0),
                holding: None,
            },
            goal_regions: BTreeMap::new(),
            training_task_object_id: None,
        };
        let obs = render_observation(&scene, 1);
        assert_eq!(obs.len, 9);
        assert_eq!(obs.nz, vec![(4, 1.0)]);
        assert_eq!(obs, render_observation(&scene, 1));
    }

    #[test]
    fn observation_class_channel_indexing() {
        // Class-2 object at (1,1) on a 3x3 grid: channel 2 holds a single 1
        // at flat cell index 4.
        let scene = Scene {
            width: 3,
            height: 3,
            objects: vec![ObjectInstance {
                id: ObjectId(9),
                class_id: ClassId(2),
                position: Cell::new(1, 1),
                held: false,
                removable: false,
            }],
            gripper: GripperState {
                position: Cell::new(0, 0),
                holding: None,
            },
            goal_regions: BTreeMap::new(),
            training_task_object_id: None,
        };
        let obs = render_observation(&scene, 3);
        let dense = obs.to_dense();
        let channel2 = &dense[2 * 9..3 * 9];
        assert_eq!(channel2.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(channel2[4], 1.0);
    }

    #[test]
    fn observation_injective_on_distinct_scenes() {
        use std::collections::BTreeSet;
        let mut layout = simple_layout();
        for spec in &mut layout.objects {
            spec.region = Rect::new(0, 0, 8, 8);
        }
        let mut seen_scenes: BTreeSet<Vec<(ClassId, Cell)>> = BTreeSet::new();
        let mut seen_obs: BTreeSet<Vec<(u32, u64)>> = BTreeSet::new();
        for seed in 0..3000u64 {
            if seen_scenes.len() >= 1000 {
                break;
            }
            let scene = build_scene(&layout, seed).unwrap();
            let mut key: Vec<(ClassId, Cell)> = scene
                .objects
                .iter()
                .map(|o| (o.class_id, o.position))
                .collect();
            key.sort();
            if !seen_scenes.insert(key) {
                continue;
            }
            let obs = render_observation(&scene, NUM_CLASSES);
            let bits: Vec<(u32, u64)> = obs.nz.iter().map(|&(i, v)| (i, v.to_bits())).collect();
            assert!(
                seen_obs.insert(bits),
                "observation collision for distinct scenes"
            );
        }
        assert!(seen_scenes.len() >= 1000);
    }

    #[test]
    fn object_count_conserved_over_random_walks() {
        let layout = simple_layout();
        let mut scene = build_scene(&layout, 1).unwrap();
        let mut rng = crate::seeding::rng_from(99);
        for _ in 0..500 {
            let a = ActionId::from_index(rng.random_range(0..NUM_ACTIONS)).unwrap();
            step(&mut scene, a);
            assert_eq!(scene.objects.len(), 3);
            scene.validate().unwrap();
        }
    }
}
