//! Rollout engine, outcome classification, and suite metrics.
//!
//! A rollout steps the policy (single branch or guided pair) through a scene
//! until any known task in the scene's set completes or the horizon runs out.
//! One exception keeps over-execution observable: when a completed task is a
//! proper prefix of a longer known task, termination is deferred so the
//! episode can reveal whether the policy keeps executing the longer one.
//!
//! Outcome attribution: the completed task decides the success class, and a
//! successful episode's grounding class follows its success class (completing
//! a task entails contacting its target). Unsuccessful episodes are grounded
//! by the first contact event. This keeps faithful/biased counts disjoint and
//! the breakdown matrix an exact decomposition of every headline rate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::{
    baseline_distribution, cag_mix_action_vectors, cag_mix_logits, select_action, softmax,
    GuidanceConfig, GuidanceError, MixingSpace, Selector, Wiring,
};
use crate::policy::{forward_logits, InstructionEncoding, PolicyError};
use crate::seeding::stream_seed_str;
use crate::sim::{
    build_scene, check_success, render_observation, step, ActionId, Cell, Event,
    ObservationEncoding, ObjectId, Scene, SimError, TaskProgress, NUM_CLASSES,
};
use crate::suites::{apply_cf_focused, SceneTaskSet, SuiteError, SuiteKind, TaskSpec};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration inconsistent: {0}")]
    ConfigInconsistency(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
}

/// Which input modalities the policy receives at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    VisionAndLanguage,
    VisionOnly,
    LanguageOnly,
}

impl AblationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::VisionAndLanguage => "vision_and_language",
            AblationMode::VisionOnly => "vision_only",
            AblationMode::LanguageOnly => "language_only",
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub task_id: String,
    pub trial: usize,
    pub actions: Vec<ActionId>,
    /// `(step index, event)` pairs in emission order.
    pub events: Vec<(usize, Event)>,
    pub first_contact_object: Option<ObjectId>,
    pub first_grasp_cell: Option<Cell>,
    pub succeeded_task: Option<String>,
    pub steps_used: usize,
    pub seed: u64,
}

/// Both branch forwards plus the mix, for one step.
pub fn guided_distribution(
    cfg: &GuidanceConfig,
    obs: &ObservationEncoding,
    instr_cond: &InstructionEncoding,
) -> Result<crate::guidance::MixedDistribution, EvalError> {
    let logits_cond = forward_logits(&cfg.cond, obs, instr_cond)?;
    match cfg.wiring {
        Wiring::Baseline => Ok(baseline_distribution(&logits_cond, cfg.omega)),
        Wiring::Tf | Wiring::DropoutShared => {
            let logits_uncond = forward_logits(&cfg.cond, obs, &InstructionEncoding::null())?;
            mix_in_space(cfg, &logits_cond, &logits_uncond)
        }
        Wiring::Va => {
            let uncond = cfg.uncond.as_ref().expect("validated va wiring");
            let logits_uncond = forward_logits(uncond, obs, &InstructionEncoding::null())?;
            mix_in_space(cfg, &logits_cond, &logits_uncond)
        }
    }
}

fn mix_in_space(
    cfg: &GuidanceConfig,
    logits_cond: &[f64],
    logits_uncond: &[f64],
) -> Result<crate::guidance::MixedDistribution, EvalError> {
    match cfg.space {
        MixingSpace::Logit => Ok(cag_mix_logits(logits_cond, logits_uncond, cfg.omega)?),
        MixingSpace::ActionVector => {
            // Continuous-head contract: mix the branch probability vectors
            // linearly. The result can leave the simplex for omega > 1, so
            // only argmax selection is defined over it.
            let mixed = cag_mix_action_vectors(
                &softmax(logits_cond),
                &softmax(logits_uncond),
                cfg.omega,
            )?;
            Ok(crate::guidance::MixedDistribution {
                probs: mixed.clone(),
                mixed_logits: mixed,
                provenance: crate::guidance::MixProvenance {
                    omega: cfg.omega,
                    space: MixingSpace::ActionVector,
                    logits_cond: logits_cond.to_vec(),
                    logits_uncond: Some(logits_uncond.to_vec()),
                },
            })
        }
    }
}

/// Tracks progress of every known task and decides termination.
struct EpisodeTracker<'a> {
    tasks: Vec<&'a TaskSpec>,
    progresses: Vec<TaskProgress>,
    completed: Vec<bool>,
}

impl<'a> EpisodeTracker<'a> {
    fn new(tasks: Vec<&'a TaskSpec>) -> Self {
        let progresses = tasks
            .iter()
            .map(|t| TaskProgress::new(&t.success_predicate))
            .collect();
        let completed = vec![false; tasks.len()];
        EpisodeTracker {
            tasks,
            progresses,
            completed,
        }
    }

    /// Update all trackers; true when the episode should terminate.
    fn update(&mut self, scene: &Scene) -> Result<bool, EvalError> {
        for (ix, progress) in self.progresses.iter_mut().enumerate() {
            progress.update(scene)?;
            if !self.completed[ix]
                && check_success(scene, &self.tasks[ix].success_predicate, progress)?
            {
                self.completed[ix] = true;
            }
        }
        // Terminate on any completion that is not a proper prefix of a longer
        // known task still in progress (deferring lets over-execution show).
        for ix in 0..self.tasks.len() {
            if !self.completed[ix] {
                continue;
            }
            let deferred = (0..self.tasks.len()).any(|jx| {
                jx != ix
                    && !self.completed[jx]
                    && self.tasks[ix]
                        .success_predicate
                        .is_proper_prefix_of(&self.tasks[jx].success_predicate)
            });
            if !deferred {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// The task the episode is credited to: completed tasks that are not a
    /// proper prefix of another completed task, preferring the instructed
    /// task, then the in-domain task, then set order.
    fn succeeded_task(&self, instructed: &str, in_domain: &str) -> Option<String> {
        let maximal: Vec<usize> = (0..self.tasks.len())
            .filter(|&ix| {
                self.completed[ix]
                    && !(0..self.tasks.len()).any(|jx| {
                        jx != ix
                            && self.completed[jx]
                            && self.tasks[ix]
                                .success_predicate
                                .is_proper_prefix_of(&self.tasks[jx].success_predicate)
                    })
            })
            .collect();
        maximal
            .iter()
            .find(|&&ix| self.tasks[ix].id == instructed)
            .or_else(|| maximal.iter().find(|&&ix| self.tasks[ix].id == in_domain))
            .or_else(|| maximal.first())
            .map(|&ix| self.tasks[ix].id.clone())
    }
}

/// Roll one episode: encode, forward both branches, mix, select, step.
pub fn rollout(
    scene_seed: u64,
    task: &TaskSpec,
    set: &SceneTaskSet,
    cfg: &GuidanceConfig,
    mode: AblationMode,
    selector: &mut Selector,
) -> Result<RolloutRecord, EvalError> {
    cfg.validate()?;
    let known = set.active_tasks();
    if !known.iter().any(|t| t.id == task.id) {
        return Err(EvalError::ConfigInconsistency(format!(
            "instructed task {} is not active in the scene set",
            task.id
        )));
    }
    if matches!(cfg.space, MixingSpace::ActionVector) && matches!(selector, Selector::Sample(_)) {
        return Err(EvalError::ConfigInconsistency(
            "sampling is undefined over action-vector mixtures".into(),
        ));
    }
    let mut scene = build_scene(&set.layout, scene_seed)?;
    let expected_obs_len =
        crate::sim::observation_len(scene.width, scene.height, NUM_CLASSES);
    if cfg.cond.obs_dim != expected_obs_len {
        return Err(EvalError::ConfigInconsistency(format!(
            "policy expects observation length {}, scene produces {}",
            cfg.cond.obs_dim, expected_obs_len
        )));
    }
    let instr_cond = match mode {
        AblationMode::VisionOnly => InstructionEncoding::null(),
        _ => InstructionEncoding::encode(&task.instruction)?,
    };
    let zero_obs = ObservationEncoding::zeros(expected_obs_len);

    let mut tracker = EpisodeTracker::new(known);
    let mut record = RolloutRecord {
        task_id: task.id.clone(),
        trial: 0,
        actions: Vec::new(),
        events: Vec::new(),
        first_contact_object: None,
        first_grasp_cell: None,
        succeeded_task: None,
        steps_used: 0,
        seed: scene_seed,
    };
    for t in 0..task.horizon {
        let obs = match mode {
            AblationMode::LanguageOnly => zero_obs.clone(),
            _ => render_observation(&scene, NUM_CLASSES),
        };
        let dist = guided_distribution(cfg, &obs, &instr_cond)?;
        let action = select_action(&dist, selector);
        let outcome = step(&mut scene, action);
        record.actions.push(action);
        for event in &outcome.events {
            match event {
                Event::ContactedObject(id) if record.first_contact_object.is_none() => {
                    record.first_contact_object = Some(*id);
                }
                Event::Grasped(_) if record.first_grasp_cell.is_none() => {
                    record.first_grasp_cell = Some(scene.gripper.position);
                }
                _ => {}
            }
            record.events.push((t, event.clone()));
        }
        record.steps_used = t + 1;
        if tracker.update(&scene)? {
            break;
        }
    }
    record.succeeded_task = tracker.succeeded_task(&task.id, &set.in_domain.id);
    Ok(record)
}

// ---------------------------------------------------------------------------
// Outcome classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundingClass {
    FaithfulGrounded,
    BiasedGrounded,
    OtherGrounded,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuccessClass {
    FaithfulSuccess,
    BiasedSuccess,
    NoSuccess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutcomeClass {
    pub grounding: GroundingClass,
    pub success: SuccessClass,
}

/// Attribute one rollout. Success comes from the completed task; grounding
/// follows success when there is one and first contact otherwise.
pub fn classify_outcome(
    rec: &RolloutRecord,
    set: &SceneTaskSet,
    instructed: &TaskSpec,
) -> OutcomeClass {
    let success = match &rec.succeeded_task {
        Some(id) if *id == instructed.id => SuccessClass::FaithfulSuccess,
        Some(id) if *id == set.in_domain.id => SuccessClass::BiasedSuccess,
        _ => SuccessClass::NoSuccess,
    };
    let grounding = match success {
        SuccessClass::FaithfulSuccess => GroundingClass::FaithfulGrounded,
        SuccessClass::BiasedSuccess => GroundingClass::BiasedGrounded,
        SuccessClass::NoSuccess => match rec.first_contact_object {
            Some(id) if id == instructed.target_object_id => GroundingClass::FaithfulGrounded,
            Some(id) if !set.is_focused() && id == set.in_domain.target_object_id => {
                GroundingClass::BiasedGrounded
            }
            Some(_) => GroundingClass::OtherGrounded,
            None => GroundingClass::Fail,
        },
    };
    OutcomeClass { grounding, success }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Counts over a group of trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetricBlock {
    pub trials: usize,
    pub faithful_grounded: usize,
    pub biased_grounded: usize,
    pub other_grounded: usize,
    pub fail: usize,
    pub faithful_success: usize,
    pub biased_success: usize,
}

impl MetricBlock {
    fn add(&mut self, outcome: OutcomeClass) {
        self.trials += 1;
        match outcome.grounding {
            GroundingClass::FaithfulGrounded => self.faithful_grounded += 1,
            GroundingClass::BiasedGrounded => self.biased_grounded += 1,
            GroundingClass::OtherGrounded => self.other_grounded += 1,
            GroundingClass::Fail => self.fail += 1,
        }
        match outcome.success {
            SuccessClass::FaithfulSuccess => self.faithful_success += 1,
            SuccessClass::BiasedSuccess => self.biased_success += 1,
            SuccessClass::NoSuccess => {}
        }
    }

    fn merge(&mut self, other: &MetricBlock) {
        self.trials += other.trials;
        self.faithful_grounded += other.faithful_grounded;
        self.biased_grounded += other.biased_grounded;
        self.other_grounded += other.other_grounded;
        self.fail += other.fail;
        self.faithful_success += other.faithful_success;
        self.biased_success += other.biased_success;
    }

    fn rate(count: usize, trials: usize) -> f64 {
        if trials == 0 {
            0.0
        } else {
            count as f64 / trials as f64
        }
    }

    pub fn faithful_grounding_rate(&self) -> f64 {
        Self::rate(self.faithful_grounded, self.trials)
    }

    pub fn biased_grounding_rate(&self) -> f64 {
        Self::rate(self.biased_grounded, self.trials)
    }

    pub fn other_grounding_rate(&self) -> f64 {
        Self::rate(self.other_grounded, self.trials)
    }

    pub fn faithful_success_rate(&self) -> f64 {
        Self::rate(self.faithful_success, self.trials)
    }

    pub fn biased_success_rate(&self) -> f64 {
        Self::rate(self.biased_success, self.trials)
    }
}

/// Per-task counts within a suite run.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub task_id: String,
    pub suite_kind: SuiteKind,
    pub set_index: usize,
    pub in_domain_task: bool,
    pub block: MetricBlock,
}

/// Executed-outcome column of the breakdown matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Executed {
    Object(ObjectId),
    Fail,
}

impl std::fmt::Display for Executed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Executed::Object(id) => write!(f, "object-{}", id.0),
            Executed::Fail => f.write_str("fail"),
        }
    }
}

/// One cell of the successes/attempts matrix for one instructed task.
#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownRow {
    pub task_id: String,
    pub instructed_target: ObjectId,
    pub in_domain_target: ObjectId,
    pub executed: Executed,
    pub successes: usize,
    pub attempts: usize,
}

/// Aggregated results of one suite run under one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteMetrics {
    pub wiring: Wiring,
    pub omega: f64,
    pub space: MixingSpace,
    pub mode: AblationMode,
    pub base_seed: u64,
    pub trials_per_task: usize,
    /// Counterfactual tasks only.
    pub counterfactual: MetricBlock,
    /// In-domain tasks, reported separately.
    pub in_domain: MetricBlock,
    pub per_task: Vec<TaskMetrics>,
    pub breakdown: Vec<BreakdownRow>,
}

impl SuiteMetrics {
    /// Recompute every headline rate from the breakdown matrix; used by the
    /// consistency tests and the report command.
    pub fn consistent_with_breakdown(&self) -> bool {
        for task in &self.per_task {
            let rows: Vec<&BreakdownRow> = self
                .breakdown
                .iter()
                .filter(|r| r.task_id == task.task_id)
                .collect();
            let attempts: usize = rows.iter().map(|r| r.attempts).sum();
            if attempts != task.block.trials {
                return false;
            }
            let instructed = rows
                .first()
                .map(|r| r.instructed_target)
                .unwrap_or(ObjectId(u32::MAX));
            let in_domain = rows
                .first()
                .map(|r| r.in_domain_target)
                .unwrap_or(ObjectId(u32::MAX));
            let mut faithful_grounded = 0;
            let mut biased_grounded = 0;
            let mut other_grounded = 0;
            let mut fail = 0;
            let mut faithful_success = 0;
            let mut biased_success = 0;
            for row in &rows {
                match row.executed {
                    Executed::Object(id) if id == instructed => {
                        faithful_grounded += row.attempts;
                        faithful_success += row.successes;
                    }
                    Executed::Object(id) if id == in_domain => {
                        biased_grounded += row.attempts;
                        biased_success += row.successes;
                    }
                    Executed::Object(_) => other_grounded += row.attempts,
                    Executed::Fail => fail += row.attempts,
                }
            }
            let b = &task.block;
            if (
                faithful_grounded,
                biased_grounded,
                other_grounded,
                fail,
                faithful_success,
                biased_success,
            ) != (
                b.faithful_grounded,
                b.biased_grounded,
                b.other_grounded,
                b.fail,
                b.faithful_success,
                b.biased_success,
            ) {
                return false;
            }
        }
        true
    }
}

fn executed_of(outcome: OutcomeClass, rec: &RolloutRecord, set: &SceneTaskSet, task: &TaskSpec) -> Executed {
    match outcome.grounding {
        GroundingClass::FaithfulGrounded => Executed::Object(task.target_object_id),
        GroundingClass::BiasedGrounded => Executed::Object(set.in_domain.target_object_id),
        GroundingClass::OtherGrounded => {
            Executed::Object(rec.first_contact_object.expect("other-grounded has contact"))
        }
        GroundingClass::Fail => Executed::Fail,
    }
}

/// Run every active task of every set for `trials_per_task` trials. Trial
/// seeds derive from `(base_seed, task id, trial)`, so results are a pure
/// function of the inputs regardless of worker count.
pub fn run_suite(
    sets: &[SceneTaskSet],
    cfg: &GuidanceConfig,
    mode: AblationMode,
    trials_per_task: usize,
    base_seed: u64,
) -> Result<SuiteMetrics, EvalError> {
    if trials_per_task == 0 {
        return Err(EvalError::ConfigInconsistency(
            "trials_per_task must be positive".into(),
        ));
    }
    cfg.validate()?;
    struct Job<'a> {
        set_index: usize,
        set: &'a SceneTaskSet,
        task: &'a TaskSpec,
        trial: usize,
    }
    let mut jobs = Vec::new();
    for (set_index, set) in sets.iter().enumerate() {
        for task in set.active_tasks() {
            for trial in 0..trials_per_task {
                jobs.push(Job {
                    set_index,
                    set,
                    task,
                    trial,
                });
            }
        }
    }
    let outcomes: Result<Vec<(RolloutRecord, OutcomeClass)>, EvalError> = jobs
        .par_iter()
        .map(|job| {
            let seed = stream_seed_str(base_seed, "trial", &job.task.id, job.trial as u64);
            let mut selector = Selector::Argmax;
            let mut rec = rollout(seed, job.task, job.set, cfg, mode, &mut selector)?;
            rec.trial = job.trial;
            let outcome = classify_outcome(&rec, job.set, job.task);
            Ok((rec, outcome))
        })
        .collect();
    let outcomes = outcomes?;

    // Deterministic fold in job order.
    let mut per_task: Vec<TaskMetrics> = Vec::new();
    let mut breakdown: Vec<BreakdownRow> = Vec::new();
    let mut counterfactual = MetricBlock::default();
    let mut in_domain = MetricBlock::default();
    for (job, (rec, outcome)) in jobs.iter().zip(&outcomes) {
        let is_in_domain = job.task.id == job.set.in_domain.id;
        let entry = match per_task.iter_mut().find(|m| m.task_id == job.task.id) {
            Some(entry) => entry,
            None => {
                per_task.push(TaskMetrics {
                    task_id: job.task.id.clone(),
                    suite_kind: job.set.suite_kind,
                    set_index: job.set_index,
                    in_domain_task: is_in_domain,
                    block: MetricBlock::default(),
                });
                per_task.last_mut().expect("just pushed")
            }
        };
        entry.block.add(*outcome);
        if is_in_domain {
            in_domain.add(*outcome);
        } else {
            counterfactual.add(*outcome);
        }
        let executed = executed_of(*outcome, rec, job.set, job.task);
        match breakdown
            .iter_mut()
            .find(|r| r.task_id == job.task.id && r.executed == executed)
        {
            Some(row) => {
                row.attempts += 1;
                row.successes += usize::from(outcome.success != SuccessClass::NoSuccess);
            }
            None => breakdown.push(BreakdownRow {
                task_id: job.task.id.clone(),
                instructed_target: job.task.target_object_id,
                in_domain_target: job.set.in_domain.target_object_id,
                executed,
                successes: usize::from(outcome.success != SuccessClass::NoSuccess),
                attempts: 1,
            }),
        }
    }
    Ok(SuiteMetrics {
        wiring: cfg.wiring,
        omega: cfg.omega,
        space: cfg.space,
        mode,
        base_seed,
        trials_per_task,
        counterfactual,
        in_domain,
        per_task,
        breakdown,
    })
}

/// One `run_suite` per guidance scale on the grid.
pub fn guidance_sweep(
    sets: &[SceneTaskSet],
    cfg: &GuidanceConfig,
    omega_grid: &[f64],
    trials_per_task: usize,
    base_seed: u64,
) -> Result<Vec<(f64, SuiteMetrics)>, EvalError> {
    if omega_grid.is_empty() {
        return Err(EvalError::ConfigInconsistency("empty omega grid".into()));
    }
    omega_grid
        .iter()
        .map(|&omega| {
            let mut swept = cfg.clone();
            swept.omega = omega;
            run_suite(sets, &swept, AblationMode::VisionAndLanguage, trials_per_task, base_seed)
                .map(|m| (omega, m))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Grasp heatmaps
// ---------------------------------------------------------------------------

/// Instruction variant driving a heatmap run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapVariant {
    Trained,
    Counterfactual,
    Empty,
}

impl HeatmapVariant {
    pub const ALL: [HeatmapVariant; 3] = [
        HeatmapVariant::Trained,
        HeatmapVariant::Counterfactual,
        HeatmapVariant::Empty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapVariant::Trained => "trained",
            HeatmapVariant::Counterfactual => "counterfactual",
            HeatmapVariant::Empty => "empty",
        }
    }
}

/// Counts of first-grasp gripper cells over a batch of trials.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
    pub task_id: String,
    pub variant: HeatmapVariant,
}

impl HeatmapGrid {
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// Most frequent bin; ties break to the lowest flat index.
    pub fn modal_cell(&self) -> Option<Cell> {
        let (ix, &count) = self
            .counts
            .iter()
            .enumerate()
            .max_by_key(|(ix, c)| (**c, std::cmp::Reverse(*ix)))?;
        if count == 0 {
            return None;
        }
        Some(Cell::new(ix % self.width, ix / self.width))
    }
}

/// Bin the gripper cell at the first grasp across trials.
///
/// All trials share one reset (derived from the seed) and vary only through
/// sampled action selection, mirroring repeated trials of a stochastic policy
/// on a fixed layout. Trials without a grasp contribute nothing.
pub fn grasp_heatmap(
    set: &SceneTaskSet,
    cfg: &GuidanceConfig,
    variant: HeatmapVariant,
    trials: usize,
    seed: u64,
) -> Result<HeatmapGrid, EvalError> {
    cfg.validate()?;
    let task = match variant {
        HeatmapVariant::Trained | HeatmapVariant::Empty => &set.in_domain,
        HeatmapVariant::Counterfactual => &set.counterfactuals[0],
    };
    let instr = match variant {
        HeatmapVariant::Empty => InstructionEncoding::null(),
        _ => InstructionEncoding::encode(&task.instruction)?,
    };
    let reset_seed = stream_seed_str(seed, "heatmap-reset", &task.id, 0);
    let template = build_scene(&set.layout, reset_seed)?;
    let mut counts = vec![0u32; template.width * template.height];
    let cells: Vec<Option<Cell>> = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<Option<Cell>, EvalError> {
            let mut scene = template.clone();
            let mut selector =
                Selector::sample_with_seed(stream_seed_str(seed, "heatmap-trial", &task.id, trial as u64));
            for _ in 0..task.horizon {
                let obs = render_observation(&scene, NUM_CLASSES);
                let dist = guided_distribution(cfg, &obs, &instr)?;
                let action = select_action(&dist, &mut selector);
                let outcome = step(&mut scene, action);
                if outcome
                    .events
                    .iter()
                    .any(|e| matches!(e, Event::Grasped(_)))
                {
                    return Ok(Some(scene.gripper.position));
                }
            }
            Ok(None)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    for cell in cells.into_iter().flatten() {
        counts[cell.y * template.width + cell.x] += 1;
    }
    Ok(HeatmapGrid {
        width: template.width,
        height: template.height,
        counts,
        task_id: task.id.clone(),
        variant,
    })
}

// ---------------------------------------------------------------------------
// CF-Focused comparison
// ---------------------------------------------------------------------------

/// Per-set faithful deltas between the focused and original variants.
#[derive(Debug, Clone, PartialEq)]
pub struct CfFocusedDelta {
    pub set_index: usize,
    pub in_domain_id: String,
    pub faithful_grounding_delta: f64,
    pub faithful_success_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfFocusedComparison {
    pub original: SuiteMetrics,
    pub focused: SuiteMetrics,
    pub per_set: Vec<CfFocusedDelta>,
}

fn per_set_cf_block(metrics: &SuiteMetrics, set_index: usize) -> MetricBlock {
    let mut block = MetricBlock::default();
    for task in &metrics.per_task {
        if task.set_index == set_index && !task.in_domain_task {
            block.merge(&task.block);
        }
    }
    block
}

/// Run the original and CF-Focused variants with identical trial seeds.
pub fn compare_cf_focused(
    sets: &[SceneTaskSet],
    cfg: &GuidanceConfig,
    trials_per_task: usize,
    base_seed: u64,
) -> Result<CfFocusedComparison, EvalError> {
    let focused_sets: Vec<SceneTaskSet> = sets
        .iter()
        .map(apply_cf_focused)
        .collect::<Result<_, _>>()?;
    let original = run_suite(sets, cfg, AblationMode::VisionAndLanguage, trials_per_task, base_seed)?;
    let focused = run_suite(
        &focused_sets,
        cfg,
        AblationMode::VisionAndLanguage,
        trials_per_task,
        base_seed,
    )?;
    let per_set = (0..sets.len())
        .map(|ix| {
            let orig = per_set_cf_block(&original, ix);
            let foc = per_set_cf_block(&focused, ix);
            CfFocusedDelta {
                set_index: ix,
                in_domain_id: sets[ix].in_domain.id.clone(),
                faithful_grounding_delta: foc.faithful_grounding_rate()
                    - orig.faithful_grounding_rate(),
                faithful_success_delta: foc.faithful_success_rate() - orig.faithful_success_rate(),
            }
        })
        .collect();
    Ok(CfFocusedComparison {
        original,
        focused,
        per_set,
    })
}

// ---------------------------------------------------------------------------
// CSV and SVG emission
// ---------------------------------------------------------------------------

/// Fixed column order of the metrics CSV.
pub const METRICS_CSV_HEADER: &str = "suite,wiring,omega,mode,seed,task_id,faithful_grounding,biased_grounding,other_grounding,faithful_success,biased_success,fail";

/// One CSV row per task of this run, in fold order.
pub fn metrics_csv_rows(metrics: &SuiteMetrics) -> Vec<String> {
    metrics
        .per_task
        .iter()
        .map(|task| {
            let b = &task.block;
            format!(
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                task.suite_kind,
                metrics.wiring,
                metrics.omega,
                metrics.mode,
                metrics.base_seed,
                task.task_id,
                b.faithful_grounding_rate(),
                b.biased_grounding_rate(),
                b.other_grounding_rate(),
                b.faithful_success_rate(),
                b.biased_success_rate(),
                b.fail,
            )
        })
        .collect()
}

pub const BREAKDOWN_CSV_HEADER: &str = "suite,wiring,omega,mode,seed,task_id,instructed_target,in_domain_target,executed,successes,attempts";

pub fn breakdown_csv_rows(metrics: &SuiteMetrics) -> Vec<String> {
    metrics
        .breakdown
        .iter()
        .map(|row| {
            let kind = metrics
                .per_task
                .iter()
                .find(|t| t.task_id == row.task_id)
                .map(|t| t.suite_kind.as_str())
                .unwrap_or("unknown");
            format!(
                "{},{},{},{},{},{},object-{},object-{},{},{},{}",
                kind,
                metrics.wiring,
                metrics.omega,
                metrics.mode,
                metrics.base_seed,
                row.task_id,
                row.instructed_target.0,
                row.in_domain_target.0,
                row.executed,
                row.successes,
                row.attempts,
            )
        })
        .collect()
}

/// Heatmap as a CSV grid of counts, one row per grid row.
pub fn heatmap_csv(grid: &HeatmapGrid) -> String {
    let mut out = String::new();
    for y in 0..grid.height {
        let row: Vec<String> = (0..grid.width)
            .map(|x| grid.counts[y * grid.width + x].to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Heatmap as a standalone SVG: one shaded rectangle per cell.
pub fn heatmap_svg(grid: &HeatmapGrid) -> String {
    const CELL: usize = 32;
    const MARGIN: usize = 24;
    let width = grid.width * CELL + 2 * MARGIN;
    let height = grid.height * CELL + 2 * MARGIN + 16;
    let max = grid.counts.iter().copied().max().unwrap_or(0).max(1);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{MARGIN}\" y=\"16\" font-family=\"monospace\" font-size=\"12\">{} / {} (n={})</text>\n",
        grid.task_id,
        grid.variant.as_str(),
        grid.total()
    ));
    for y in 0..grid.height {
        for x in 0..grid.width {
            let count = grid.counts[y * grid.width + x];
            let intensity = 255 - ((count as f64 / max as f64) * 215.0).round() as u32;
            out.push_str(&format!(
                "  <rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({intensity},{intensity},255)\" stroke=\"rgb(200,200,200)\"/>\n",
                MARGIN + x * CELL,
                MARGIN + 16 + y * CELL,
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Convenience wrapper used in tests and the pipeline: one metrics run per
/// evaluation seed replica, rows concatenated.
pub fn run_suite_replicas(
    sets: &[SceneTaskSet],
    cfg: &GuidanceConfig,
    mode: AblationMode,
    trials_per_task: usize,
    base_seed: u64,
    replicas: usize,
) -> Result<Vec<SuiteMetrics>, EvalError> {
    (0..replicas)
        .map(|r| {
            run_suite(
                sets,
                cfg,
                mode,
                trials_per_task,
                base_seed.wrapping_add(r as u64),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyParams;
    use crate::sim::{observation_len, ObjectSpec, Rect, SceneLayout};
    use crate::suites::{make_suite, Observedness};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn spatial_set() -> SceneTaskSet {
        make_suite(SuiteKind::Spatial, 1, 0).unwrap().remove(0)
    }

    fn random_policy(seed: u64, conditioned: bool) -> Arc<PolicyParams> {
        let obs_dim = observation_len(9, 9, NUM_CLASSES);
        Arc::new(PolicyParams::init(obs_dim, 16, conditioned, seed))
    }

    fn baseline_cfg(seed: u64) -> GuidanceConfig {
        GuidanceConfig {
            omega: 1.5,
            space: MixingSpace::Logit,
            wiring: Wiring::Baseline,
            cond: random_policy(seed, true),
            uncond: None,
        }
    }

    #[test]
    fn baseline_equals_tf_at_omega_one() {
        let set = spatial_set();
        let task = &set.counterfactuals[0];
        let cond = random_policy(3, true);
        let base = GuidanceConfig {
            omega: 1.0,
            space: MixingSpace::Logit,
            wiring: Wiring::Baseline,
            cond: cond.clone(),
            uncond: None,
        };
        let tf = GuidanceConfig {
            wiring: Wiring::Tf,
            ..base.clone()
        };
        let a = rollout(7, task, &set, &base, AblationMode::VisionAndLanguage, &mut Selector::Argmax).unwrap();
        let b = rollout(7, task, &set, &tf, AblationMode::VisionAndLanguage, &mut Selector::Argmax).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.succeeded_task, b.succeeded_task);
    }

    #[test]
    fn tf_wiring_mixes_null_instruction_branch() {
        let set = spatial_set();
        let scene = build_scene(&set.layout, 5).unwrap();
        let obs = render_observation(&scene, NUM_CLASSES);
        let instr = InstructionEncoding::encode(&set.counterfactuals[0].instruction).unwrap();
        let cond = random_policy(4, true);
        let cfg = GuidanceConfig {
            omega: 2.0,
            space: MixingSpace::Logit,
            wiring: Wiring::Tf,
            cond: cond.clone(),
            uncond: None,
        };
        let via_rollout = guided_distribution(&cfg, &obs, &instr).unwrap();
        let lc = forward_logits(&cond, &obs, &instr).unwrap();
        let lu = forward_logits(&cond, &obs, &InstructionEncoding::null()).unwrap();
        let direct = cag_mix_logits(&lc, &lu, 2.0).unwrap();
        assert_eq!(via_rollout.probs, direct.probs);
        assert_eq!(via_rollout.mixed_logits, direct.mixed_logits);
    }

    #[test]
    fn va_wiring_requires_unconditioned_branch() {
        let set = spatial_set();
        let task = &set.counterfactuals[0];
        let cfg = GuidanceConfig {
            omega: 1.5,
            space: MixingSpace::Logit,
            wiring: Wiring::Va,
            cond: random_policy(3, true),
            uncond: None,
        };
        let err = rollout(7, task, &set, &cfg, AblationMode::VisionAndLanguage, &mut Selector::Argmax)
            .unwrap_err();
        assert!(matches!(
            err,
            EvalError::Guidance(GuidanceError::ConfigInconsistency(_))
        ));
        let cfg_bad_branch = GuidanceConfig {
            uncond: Some(random_policy(5, true)),
            ..cfg
        };
        assert!(cfg_bad_branch.validate().is_err());
    }

    #[test]
    fn classification_rules() {
        let set = spatial_set();
        let instructed = &set.counterfactuals[0];
        let mut rec = RolloutRecord {
            task_id: instructed.id.clone(),
            trial: 0,
            actions: vec![],
            events: vec![],
            first_contact_object: Some(instructed.target_object_id),
            first_grasp_cell: None,
            succeeded_task: Some(instructed.id.clone()),
            steps_used: 5,
            seed: 0,
        };
        let out = classify_outcome(&rec, &set, instructed);
        assert_eq!(out.grounding, GroundingClass::FaithfulGrounded);
        assert_eq!(out.success, SuccessClass::FaithfulSuccess);

        rec.succeeded_task = Some(set.in_domain.id.clone());
        rec.first_contact_object = Some(set.in_domain.target_object_id);
        let out = classify_outcome(&rec, &set, instructed);
        assert_eq!(out.grounding, GroundingClass::BiasedGrounded);
        assert_eq!(out.success, SuccessClass::BiasedSuccess);

        rec.succeeded_task = None;
        rec.first_contact_object = None;
        let out = classify_outcome(&rec, &set, instructed);
        assert_eq!(out.grounding, GroundingClass::Fail);
        assert_eq!(out.success, SuccessClass::NoSuccess);

        rec.first_contact_object = Some(set.counterfactuals[1].target_object_id);
        let out = classify_outcome(&rec, &set, instructed);
        assert_eq!(out.grounding, GroundingClass::OtherGrounded);
    }

    /// Drive the tracker with expert actions executing the full in-domain
    /// sequence while the prefix task is instructed: termination must defer
    /// past the prefix completion and credit the in-domain task.
    #[test]
    fn prefix_completion_defers_to_over_execution() {
        let set = make_suite(SuiteKind::Long, 1, 0).unwrap().remove(0);
        let prefix_task = &set.counterfactuals[1];
        let in_domain = set.in_domain.clone();
        let mut scene = build_scene(&set.layout, 3).unwrap();
        let mut tracker = EpisodeTracker::new(set.active_tasks());
        let mut terminated_at = None;
        let mut prefix_done_at = None;
        for t in 0..in_domain.horizon {
            let action = crate::dataset::scripted_expert_action(&scene, &in_domain);
            step(&mut scene, action);
            let done = tracker.update(&scene).unwrap();
            if prefix_done_at.is_none() {
                let ix = tracker
                    .tasks
                    .iter()
                    .position(|x| x.id == prefix_task.id)
                    .unwrap();
                if tracker.completed[ix] {
                    prefix_done_at = Some(t);
                }
            }
            if done {
                terminated_at = Some(t);
                break;
            }
        }
        let (prefix_done, terminated) = (prefix_done_at.unwrap(), terminated_at.unwrap());
        assert!(terminated > prefix_done);
        let succeeded = tracker.succeeded_task(&prefix_task.id, &in_domain.id);
        assert_eq!(succeeded.as_deref(), Some(in_domain.id.as_str()));

        // classify_outcome turns that into an over-execution: biased success.
        let rec = RolloutRecord {
            task_id: prefix_task.id.clone(),
            trial: 0,
            actions: vec![],
            events: vec![],
            first_contact_object: Some(prefix_task.target_object_id),
            first_grasp_cell: None,
            succeeded_task: succeeded,
            steps_used: terminated + 1,
            seed: 3,
        };
        let out = classify_outcome(&rec, &set, prefix_task);
        assert_eq!(out.success, SuccessClass::BiasedSuccess);
        assert_eq!(out.grounding, GroundingClass::BiasedGrounded);
    }

    /// A faithful prefix execution (expert for the prefix task itself) runs to
    /// horizon without the in-domain sequence completing, then credits the
    /// prefix task.
    #[test]
    fn faithful_prefix_execution_is_faithful() {
        let set = make_suite(SuiteKind::Long, 1, 0).unwrap().remove(0);
        let prefix_task = set.counterfactuals[1].clone();
        let mut scene = build_scene(&set.layout, 3).unwrap();
        let mut tracker = EpisodeTracker::new(set.active_tasks());
        for _ in 0..prefix_task.horizon {
            let action = crate::dataset::scripted_expert_action(&scene, &prefix_task);
            step(&mut scene, action);
            if tracker.update(&scene).unwrap() {
                break;
            }
        }
        let succeeded = tracker.succeeded_task(&prefix_task.id, &set.in_domain.id);
        assert_eq!(succeeded.as_deref(), Some(prefix_task.id.as_str()));
        let rec = RolloutRecord {
            task_id: prefix_task.id.clone(),
            trial: 0,
            actions: vec![],
            events: vec![],
            first_contact_object: Some(prefix_task.target_object_id),
            first_grasp_cell: None,
            succeeded_task: succeeded,
            steps_used: prefix_task.horizon,
            seed: 3,
        };
        let out = classify_outcome(&rec, &set, &prefix_task);
        assert_eq!(out.success, SuccessClass::FaithfulSuccess);
        assert_eq!(out.grounding, GroundingClass::FaithfulGrounded);
    }

    #[test]
    fn run_suite_is_deterministic_and_consistent() {
        let sets = make_suite(SuiteKind::Spatial, 2, 0).unwrap();
        let cfg = baseline_cfg(1);
        let a = run_suite(&sets, &cfg, AblationMode::VisionAndLanguage, 10, 42).unwrap();
        let b = run_suite(&sets, &cfg, AblationMode::VisionAndLanguage, 10, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.consistent_with_breakdown());
        // Every cf rollout lands in exactly one grounding class.
        let cf = &a.counterfactual;
        assert_eq!(
            cf.faithful_grounded + cf.biased_grounded + cf.other_grounded + cf.fail,
            cf.trials
        );
        assert_eq!(cf.trials, 2 * 2 * 10);
        assert_eq!(a.in_domain.trials, 2 * 10);
    }

    #[test]
    fn csv_rows_have_fixed_shape() {
        let sets = make_suite(SuiteKind::Object, 1, 0).unwrap();
        let cfg = baseline_cfg(2);
        let metrics = run_suite(&sets, &cfg, AblationMode::VisionAndLanguage, 4, 7).unwrap();
        assert_eq!(METRICS_CSV_HEADER.split(',').count(), 12);
        for row in metrics_csv_rows(&metrics) {
            assert_eq!(row.split(',').count(), 12, "{row}");
        }
        for row in breakdown_csv_rows(&metrics) {
            assert_eq!(row.split(',').count(), BREAKDOWN_CSV_HEADER.split(',').count());
        }
    }

    #[test]
    fn sweep_covers_grid_in_order() {
        let sets = make_suite(SuiteKind::Object, 1, 0).unwrap();
        let cond = random_policy(3, true);
        let va = random_policy(4, false);
        let cfg = GuidanceConfig {
            omega: 1.5,
            space: MixingSpace::Logit,
            wiring: Wiring::Va,
            cond,
            uncond: Some(va),
        };
        let swept = guidance_sweep(&sets, &cfg, &[0.0, 1.0, 2.0], 2, 5).unwrap();
        assert_eq!(swept.len(), 3);
        assert_eq!(swept[0].0, 0.0);
        assert_eq!(swept[2].1.omega, 2.0);
    }

    #[test]
    fn heatmap_counts_grasps_at_fixed_cell() {
        // Object pinned under the gripper start; a net that always grasps.
        let target = Cell::new(3, 4);
        let obs_dim = observation_len(9, 9, NUM_CLASSES);
        let mut params = PolicyParams::init(obs_dim, 4, true, 0);
        params.w1.iter_mut().for_each(|v| *v = 0.0);
        params.w2.iter_mut().for_each(|v| *v = 0.0);
        params.b2[ActionId::Grasp.index()] = 25.0;
        let layout = SceneLayout {
            width: 9,
            height: 9,
            objects: vec![ObjectSpec {
                id: ObjectId(0),
                class_id: crate::sim::ClassId(0),
                region: Rect::single(target),
                removable: true,
                eval_only: false,
            }],
            goal_regions: BTreeMap::new(),
            gripper_start: target,
            training_task_object_id: Some(ObjectId(0)),
        };
        let task = |id: &str| TaskSpec {
            id: id.into(),
            instruction: vec!["mug".into()],
            target_object_id: ObjectId(0),
            success_predicate: crate::sim::Predicate::Pick { target: ObjectId(0) },
            horizon: 10,
            observedness: Observedness::InDomain,
        };
        let set = SceneTaskSet {
            suite_kind: SuiteKind::Spatial,
            layout,
            in_domain: task("fixed-in"),
            counterfactuals: vec![task("fixed-cf0"), task("fixed-cf1")],
        };
        let cfg = GuidanceConfig {
            omega: 1.0,
            space: MixingSpace::Logit,
            wiring: Wiring::Baseline,
            cond: Arc::new(params),
            uncond: None,
        };
        let grid = grasp_heatmap(&set, &cfg, HeatmapVariant::Trained, 10, 3).unwrap();
        assert_eq!(grid.total(), 10);
        assert_eq!(grid.counts[target.y * 9 + target.x], 10);
        assert_eq!(grid.modal_cell(), Some(target));
    }

    #[test]
    fn heatmap_total_bounded_by_trials() {
        let set = spatial_set();
        let cfg = baseline_cfg(5);
        for variant in HeatmapVariant::ALL {
            let grid = grasp_heatmap(&set, &cfg, variant, 12, 9).unwrap();
            assert!(grid.total() <= 12);
        }
    }

    #[test]
    fn cf_focused_comparison_has_one_delta_per_set() {
        let sets = make_suite(SuiteKind::Spatial, 3, 0).unwrap();
        let cfg = baseline_cfg(6);
        let cmp = compare_cf_focused(&sets, &cfg, 3, 11).unwrap();
        assert_eq!(cmp.per_set.len(), 3);
        assert!(cmp.focused.per_task.iter().all(|t| !t.in_domain_task));
        // Identical seeds: shared objects sit at identical cells.
        for (orig_set, _) in sets.iter().zip(0..) {
            let focused_layout = apply_cf_focused(orig_set).unwrap().layout;
            let seed = stream_seed_str(11, "trial", &orig_set.counterfactuals[0].id, 0);
            let orig_scene = build_scene(&orig_set.layout, seed).unwrap();
            let focused_scene = build_scene(&focused_layout, seed).unwrap();
            for obj in &focused_scene.objects {
                assert_eq!(obj.position, orig_scene.object(obj.id).unwrap().position);
            }
        }
    }

    #[test]
    fn svg_and_csv_render() {
        let set = spatial_set();
        let cfg = baseline_cfg(7);
        let grid = grasp_heatmap(&set, &cfg, HeatmapVariant::Empty, 5, 1).unwrap();
        let csv = heatmap_csv(&grid);
        assert_eq!(csv.lines().count(), 9);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 9);
        let svg = heatmap_svg(&grid);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<rect").count(), 81);
    }

    #[test]
    fn language_only_mode_zeroes_observation() {
        let set = spatial_set();
        let task = &set.in_domain;
        let cond = random_policy(8, true);
        let cfg = GuidanceConfig {
            omega: 1.0,
            space: MixingSpace::Logit,
            wiring: Wiring::Baseline,
            cond,
            uncond: None,
        };
        // With a zeroed observation the policy's actions cannot depend on the
        // scene seed.
        let a = rollout(1, task, &set, &cfg, AblationMode::LanguageOnly, &mut Selector::Argmax)
            .unwrap();
        let b = rollout(999, task, &set, &cfg, AblationMode::LanguageOnly, &mut Selector::Argmax)
            .unwrap();
        assert_eq!(a.actions, b.actions);
    }

    #[test]
    fn action_vector_space_rejects_sampling() {
        let set = spatial_set();
        let task = &set.in_domain;
        let cfg = GuidanceConfig {
            omega: 1.5,
            space: MixingSpace::ActionVector,
            wiring: Wiring::Tf,
            cond: random_policy(9, true),
            uncond: None,
        };
        let mut sampler = Selector::sample_with_seed(3);
        let err = rollout(1, task, &set, &cfg, AblationMode::VisionAndLanguage, &mut sampler)
            .unwrap_err();
        assert!(matches!(err, EvalError::ConfigInconsistency(_)));
        // Argmax over the extrapolated vector is fine.
        let ok = rollout(1, task, &set, &cfg, AblationMode::VisionAndLanguage, &mut Selector::Argmax);
        assert!(ok.is_ok());
    }
}
