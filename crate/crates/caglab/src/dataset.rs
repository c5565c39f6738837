//! Scripted expert and biased demonstration collection.
//!
//! The expert walks greedy Manhattan paths (x axis before y) toward the
//! current sub-goal, grasping on arrival and releasing inside goal regions.
//! [`collect_demos`] replays it under a [`BiasProfile`] to manufacture the
//! in-domain / under-observed imbalance that induces vision shortcuts.
//! Demonstrations store encoded observations, never raw scenes; the replay
//! audit re-derives encodings from the simulator and compares bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::stream_seed_str;
use crate::sim::{
    build_scene, check_success, render_observation, step, subgoal_satisfied, ActionId, Cell,
    ClassId, ObservationEncoding, Scene, SubGoal, TaskProgress, NUM_CLASSES,
};
use crate::suites::{BiasProfile, Observedness, SceneTaskSet, TaskSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("expert failed to finish {task_id} within horizon (scene seed {seed})")]
    ExpertFailure { task_id: String, seed: u64 },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Suite(#[from] crate::suites::SuiteError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
}

// ---------------------------------------------------------------------------
// Scripted expert
// ---------------------------------------------------------------------------

fn move_toward(from: Cell, to: Cell) -> Option<ActionId> {
    if from.x < to.x {
        Some(ActionId::Right)
    } else if from.x > to.x {
        Some(ActionId::Left)
    } else if from.y < to.y {
        Some(ActionId::Down)
    } else if from.y > to.y {
        Some(ActionId::Up)
    } else {
        None
    }
}

/// Closest region cell to the gripper; ties break in row-major region order.
fn nearest_region_cell(scene: &Scene, region: &str) -> Option<Cell> {
    let cells = scene.goal_regions.get(region)?;
    cells
        .iter()
        .copied()
        .min_by_key(|c| scene.gripper.position.manhattan(*c))
}

/// Expert action for the current sub-goal, read off the scene state alone.
///
/// The current sub-goal is the first one not presently satisfied; because the
/// expert never undoes completed work, this matches the episode's ordered
/// progress log. Returns `Noop` once every sub-goal holds.
pub fn scripted_expert_action(scene: &Scene, task: &TaskSpec) -> ActionId {
    for goal in task.success_predicate.subgoals() {
        if subgoal_satisfied(scene, &goal).unwrap_or(false) {
            continue;
        }
        return expert_action_for(scene, &goal);
    }
    ActionId::Noop
}

fn expert_action_for(scene: &Scene, goal: &SubGoal) -> ActionId {
    let gripper = scene.gripper.position;
    match goal {
        SubGoal::Pick { target } => {
            if scene.gripper.holding.is_some() {
                // Wrong object in hand; put it down before pathing on.
                return ActionId::Release;
            }
            let Some(obj) = scene.object(*target) else {
                return ActionId::Noop;
            };
            match move_toward(gripper, obj.position) {
                Some(mv) => mv,
                None => ActionId::Grasp,
            }
        }
        SubGoal::PlaceOn { target, region } => {
            if scene.gripper.holding == Some(*target) {
                let Some(dest) = nearest_region_cell(scene, region) else {
                    return ActionId::Noop;
                };
                match move_toward(gripper, dest) {
                    Some(mv) => mv,
                    None => ActionId::Release,
                }
            } else if scene.gripper.holding.is_some() {
                ActionId::Release
            } else {
                let Some(obj) = scene.object(*target) else {
                    return ActionId::Noop;
                };
                match move_toward(gripper, obj.position) {
                    Some(mv) => mv,
                    None => ActionId::Grasp,
                }
            }
        }
    }
}

/// Roll the expert closed-loop; true iff the task succeeds within horizon.
pub fn expert_completes(scene: &mut Scene, task: &TaskSpec) -> bool {
    let mut progress = TaskProgress::new(&task.success_predicate);
    for _ in 0..task.horizon {
        let action = scripted_expert_action(scene, task);
        step(scene, action);
        if progress.update(scene).is_err() {
            return false;
        }
        match check_success(scene, &task.success_predicate, &progress) {
            Ok(true) => return true,
            Ok(false) => {}
            Err(_) => return false,
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub obs: ObservationEncoding,
    pub action: ActionId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task_id: String,
    pub instruction: Vec<String>,
    pub steps: Vec<DemoStep>,
    pub seed: u64,
}

/// Collected demonstrations plus bookkeeping derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub demonstrations: Vec<Demonstration>,
    pub per_task_counts: BTreeMap<String, usize>,
    pub class_coverage: BTreeSet<ClassId>,
}

impl DemoDataset {
    pub fn from_demos(demonstrations: Vec<Demonstration>) -> Self {
        let mut per_task_counts = BTreeMap::new();
        let mut class_coverage = BTreeSet::new();
        for demo in &demonstrations {
            *per_task_counts.entry(demo.task_id.clone()).or_insert(0) += 1;
            for step in &demo.steps {
                coverage_from_obs(&step.obs, &mut class_coverage);
            }
        }
        DemoDataset {
            demonstrations,
            per_task_counts,
            class_coverage,
        }
    }

    pub fn len(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demonstrations.is_empty()
    }
}

/// Classes whose occupancy channels carry mass in this observation.
fn coverage_from_obs(obs: &ObservationEncoding, coverage: &mut BTreeSet<ClassId>) {
    let cells = (obs.len - 1) / (NUM_CLASSES + 1);
    for &(ix, _) in &obs.nz {
        let channel = ix as usize / cells;
        if channel < NUM_CLASSES {
            coverage.insert(ClassId(channel));
        }
    }
}

/// Roll the expert on one task and record the trajectory.
fn collect_one(
    set: &SceneTaskSet,
    task: &TaskSpec,
    scene_seed: u64,
) -> Result<Demonstration, DataError> {
    let layout = set.layout.without_eval_only();
    let mut scene = build_scene(&layout, scene_seed)?;
    let mut progress = TaskProgress::new(&task.success_predicate);
    let mut steps = Vec::new();
    for _ in 0..task.horizon {
        let obs = render_observation(&scene, NUM_CLASSES);
        let action = scripted_expert_action(&scene, task);
        step(&mut scene, action);
        progress.update(&scene)?;
        steps.push(DemoStep { obs, action });
        if check_success(&scene, &task.success_predicate, &progress)? {
            return Ok(Demonstration {
                task_id: task.id.clone(),
                instruction: task.instruction.clone(),
                steps,
                seed: scene_seed,
            });
        }
    }
    Err(DataError::ExpertFailure {
        task_id: task.id.clone(),
        seed: scene_seed,
    })
}

fn quota(profile: &BiasProfile, observedness: Observedness) -> usize {
    match observedness {
        Observedness::InDomain => profile.demos_in_domain,
        Observedness::UnderObserved => profile.demos_under_observed,
        Observedness::Ood => profile.demos_ood,
    }
}

/// Collect the biased dataset: `demos_in_domain` trajectories per in-domain
/// task, `demos_under_observed` per counterfactual, none for OOD tasks. Every
/// trajectory uses a fresh scene seed and ends in success.
pub fn collect_demos(
    sets: &[SceneTaskSet],
    profile: &BiasProfile,
    seed: u64,
) -> Result<DemoDataset, DataError> {
    profile.validate()?;
    let mut jobs: Vec<(&SceneTaskSet, &TaskSpec, u64)> = Vec::new();
    for set in sets {
        for task in set.all_tasks() {
            for j in 0..quota(profile, task.observedness) {
                let scene_seed = stream_seed_str(seed, "demo", &task.id, j as u64);
                jobs.push((set, task, scene_seed));
            }
        }
    }
    let demos: Result<Vec<Demonstration>, DataError> = jobs
        .par_iter()
        .map(|(set, task, scene_seed)| collect_one(set, task, *scene_seed))
        .collect();
    Ok(DemoDataset::from_demos(demos?))
}

// ---------------------------------------------------------------------------
// Persistence: newline-delimited JSON, one demonstration per line
// ---------------------------------------------------------------------------

pub fn save_dataset(ds: &DemoDataset, path: &Path) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for demo in &ds.demonstrations {
        let line = serde_json::to_string(demo).expect("demonstration serializes");
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DemoDataset, DataError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut demos = Vec::new();
    for (ix, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let demo: Demonstration =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedRecord {
                line: ix + 1,
                message: e.to_string(),
            })?;
        if demo.steps.is_empty() {
            return Err(DataError::MalformedRecord {
                line: ix + 1,
                message: "demonstration has no steps".into(),
            });
        }
        if demo.steps.iter().any(|s| !s.obs.well_formed()) {
            return Err(DataError::MalformedRecord {
                line: ix + 1,
                message: "malformed observation encoding".into(),
            });
        }
        demos.push(demo);
    }
    Ok(DemoDataset::from_demos(demos))
}

// ---------------------------------------------------------------------------
// Replay audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub total: usize,
    pub replayed_ok: usize,
    pub failures: Vec<String>,
}

impl AuditReport {
    pub fn all_ok(&self) -> bool {
        self.failures.is_empty() && self.replayed_ok == self.total
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "replay audit: {}/{} demonstrations replayed to success\n",
            self.replayed_ok, self.total
        );
        for f in &self.failures {
            out.push_str("FAIL ");
            out.push_str(f);
            out.push('\n');
        }
        out
    }
}

fn find_task<'s>(
    sets: &'s [SceneTaskSet],
    task_id: &str,
) -> Option<(&'s SceneTaskSet, &'s TaskSpec)> {
    for set in sets {
        for task in set.all_tasks() {
            if task.id == task_id {
                return Some((set, task));
            }
        }
    }
    None
}

/// Replay every demonstration from its scene seed, re-derive each encoded
/// observation, and confirm the stored trajectory ends in success.
pub fn replay_audit(ds: &DemoDataset, sets: &[SceneTaskSet]) -> AuditReport {
    let results: Vec<Option<String>> = ds
        .demonstrations
        .par_iter()
        .map(|demo| replay_one(demo, sets).err())
        .collect();
    let failures: Vec<String> = results.into_iter().flatten().collect();
    AuditReport {
        total: ds.len(),
        replayed_ok: ds.len() - failures.len(),
        failures,
    }
}

fn replay_one(demo: &Demonstration, sets: &[SceneTaskSet]) -> Result<(), String> {
    let (set, task) =
        find_task(sets, &demo.task_id).ok_or_else(|| format!("{}: unknown task", demo.task_id))?;
    let layout = set.layout.without_eval_only();
    let mut scene = build_scene(&layout, demo.seed)
        .map_err(|e| format!("{} seed {}: {e}", demo.task_id, demo.seed))?;
    let mut progress = TaskProgress::new(&task.success_predicate);
    for (t, demo_step) in demo.steps.iter().enumerate() {
        let obs = render_observation(&scene, NUM_CLASSES);
        if obs != demo_step.obs {
            return Err(format!(
                "{} seed {} step {t}: stored observation mismatch",
                demo.task_id, demo.seed
            ));
        }
        step(&mut scene, demo_step.action);
        progress
            .update(&scene)
            .map_err(|e| format!("{} seed {} step {t}: {e}", demo.task_id, demo.seed))?;
    }
    match check_success(&scene, &task.success_predicate, &progress) {
        Ok(true) => Ok(()),
        Ok(false) => Err(format!(
            "{} seed {}: final state does not satisfy the predicate",
            demo.task_id, demo.seed
        )),
        Err(e) => Err(format!("{} seed {}: {e}", demo.task_id, demo.seed)),
    }
}
