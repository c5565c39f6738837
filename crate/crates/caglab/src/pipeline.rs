//! Command layer: suite generation, data collection, training, evaluation,
//! sweeps, and report emission, end to end from one config.
//!
//! Every command records the artifacts it writes in `manifest.json` together
//! with the hash of the effective config. Downstream commands verify those
//! hashes before running and refuse stale mixes, so a table never silently
//! compares outputs of different configurations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{hex, ConfigError, ExperimentConfig};
use crate::dataset::{collect_demos, load_dataset, replay_audit, save_dataset, DataError};
use crate::eval::{
    breakdown_csv_rows, compare_cf_focused, grasp_heatmap, guidance_sweep, heatmap_csv,
    heatmap_svg, metrics_csv_rows, run_suite, AblationMode, EvalError, HeatmapVariant,
    SuiteMetrics, BREAKDOWN_CSV_HEADER, METRICS_CSV_HEADER,
};
use crate::guidance::{GuidanceConfig, GuidanceError, Wiring};
use crate::policy::{load_params, save_params, train, PolicyError, PolicyParams, TrainConfig};
use crate::sim::SimError;
use crate::suites::{feasibility_check, make_suite, SceneTaskSet, SuiteError, SuiteKind};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("stale artifacts: {0}")]
    Stale(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("missing inputs: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInput(Vec<PathBuf>),
    #[error("inconsistent artifacts: {0}")]
    Inconsistent(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Exit codes: 2 config, 3 infeasibility/divergence, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Stale(_) => 2,
            PipelineError::Infeasible(_) | PipelineError::Divergence(_) => 3,
            PipelineError::MissingInput(_)
            | PipelineError::Inconsistent(_)
            | PipelineError::Io { .. } => 4,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<SuiteError> for PipelineError {
    fn from(e: SuiteError) -> Self {
        match e {
            SuiteError::NotRemovable(_) => PipelineError::Infeasible(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::PlacementInfeasible { .. } => PipelineError::Infeasible(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::ExpertFailure { .. } => PipelineError::Infeasible(e.to_string()),
            DataError::Io(source) => PipelineError::Io {
                path: PathBuf::new(),
                source,
            },
            DataError::MalformedRecord { .. } => PipelineError::Inconsistent(e.to_string()),
            DataError::Suite(inner) => inner.into(),
            DataError::Sim(inner) => inner.into(),
        }
    }
}

impl From<PolicyError> for PipelineError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Divergence { .. } | PolicyError::NonFiniteLoss => {
                PipelineError::Divergence(e.to_string())
            }
            PolicyError::Io(source) => PipelineError::Io {
                path: PathBuf::new(),
                source,
            },
            PolicyError::ChecksumMismatch
            | PolicyError::ShapeMismatch(_)
            | PolicyError::MalformedParams(_) => PipelineError::Inconsistent(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<GuidanceError> for PipelineError {
    fn from(e: GuidanceError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Guidance(inner) => inner.into(),
            EvalError::Policy(inner) => inner.into(),
            EvalError::Sim(inner) => inner.into(),
            EvalError::Suite(inner) => inner.into(),
            EvalError::ConfigInconsistency(m) => PipelineError::Config(m),
        }
    }
}

// ---------------------------------------------------------------------------
// Output layout and manifest
// ---------------------------------------------------------------------------

/// Trained policy branch selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Cond,
    Va,
    Dropout,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Cond, Branch::Va, Branch::Dropout];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Cond => "cond",
            Branch::Va => "va",
            Branch::Dropout => "dropout",
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cond" => Ok(Branch::Cond),
            "va" => Ok(Branch::Va),
            "dropout" => Ok(Branch::Dropout),
            other => Err(format!("unknown branch {other:?} (cond|va|dropout)")),
        }
    }
}

/// All artifact paths relative to the configured output directory.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub root: PathBuf,
}

impl OutputPaths {
    pub fn new(root: &Path) -> Self {
        OutputPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn suite_rel(kind: SuiteKind, index: usize) -> String {
        format!("suites/{kind}/{index}.json")
    }

    pub fn dataset_rel() -> &'static str {
        "dataset.ndjson"
    }

    pub fn audit_rel() -> &'static str {
        "replay_audit.txt"
    }

    pub fn params_rel(branch: Branch) -> String {
        format!("params/{branch}.params")
    }

    pub fn loss_rel(branch: Branch) -> String {
        format!("params/{branch}_loss.csv")
    }

    pub fn metrics_rel(wiring: Wiring, mode: AblationMode) -> String {
        format!("metrics/{wiring}_{mode}.csv")
    }

    pub fn breakdown_rel(wiring: Wiring, mode: AblationMode) -> String {
        format!("metrics/breakdown_{wiring}_{mode}.csv")
    }

    pub fn sweep_rel(wiring: Wiring) -> String {
        format!("metrics/sweep_{wiring}.csv")
    }

    pub fn cf_focused_rel() -> &'static str {
        "metrics/cf_focused_baseline.csv"
    }

    pub fn heatmap_rel(set_id: &str, variant: HeatmapVariant, ext: &str) -> String {
        format!("heatmaps/{set_id}_{}.{ext}", variant.as_str())
    }

    pub fn summary_rel() -> &'static str {
        "summary.md"
    }

    pub fn abs(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub config_sha: String,
    pub entries: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Manifest {
    pub fn load(paths: &OutputPaths) -> Result<Manifest, PipelineError> {
        let path = paths.manifest();
        if !path.exists() {
            return Err(PipelineError::MissingInput(vec![path]));
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Inconsistent(format!("manifest unreadable: {e}")))
    }

    pub fn save(&self, paths: &OutputPaths) -> Result<(), PipelineError> {
        let path = paths.manifest();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(&path, text.as_bytes())
    }

    /// Record a freshly written artifact.
    pub fn record(&mut self, paths: &OutputPaths, rel: &str) -> Result<(), PipelineError> {
        let path = paths.abs(rel);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        self.entries.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Verify a previously recorded artifact is still bit-identical.
    pub fn verify(&self, paths: &OutputPaths, rel: &str) -> Result<(), PipelineError> {
        let path = paths.abs(rel);
        if !path.exists() {
            return Err(PipelineError::MissingInput(vec![path]));
        }
        let recorded = self.entries.get(rel).ok_or_else(|| {
            PipelineError::Stale(format!("{rel} is not recorded in the manifest; rerun the producing step"))
        })?;
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != *recorded {
            return Err(PipelineError::Stale(format!(
                "{rel} changed since it was recorded; rerun the producing step"
            )));
        }
        Ok(())
    }

    pub fn check_config(&self, config: &ExperimentConfig) -> Result<(), PipelineError> {
        if self.config_sha != config.content_hash() {
            return Err(PipelineError::Stale(
                "config changed since `gen`; rerun the pipeline from `gen`".into(),
            ));
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// gen / collect / train
// ---------------------------------------------------------------------------

/// Generate all suites, check feasibility, and write them with a manifest.
pub fn cmd_gen(config: &ExperimentConfig) -> Result<(), PipelineError> {
    config.validate()?;
    let paths = OutputPaths::new(&config.out_dir);
    let mut manifest = Manifest {
        config_sha: config.content_hash(),
        entries: BTreeMap::new(),
    };
    let mut total = 0usize;
    for spec in &config.suites {
        let sets = make_suite(spec.kind, spec.scenes, config.base_seed)?;
        for (ix, set) in sets.iter().enumerate() {
            if !feasibility_check(set) {
                return Err(PipelineError::Infeasible(format!(
                    "suite {} scene {ix} failed the expert feasibility check",
                    spec.kind
                )));
            }
            let rel = OutputPaths::suite_rel(spec.kind, ix);
            let mut text =
                serde_json::to_string_pretty(set).expect("scene task set serializes");
            text.push('\n');
            write_file(&paths.abs(&rel), text.as_bytes())?;
            manifest.record(&paths, &rel)?;
            total += 1;
        }
    }
    manifest.save(&paths)?;
    println!("gen: wrote {total} scene task sets under {}", paths.root.display());
    Ok(())
}

/// Load the generated suites, verifying manifest hashes.
pub fn load_suites(
    config: &ExperimentConfig,
    manifest: &Manifest,
) -> Result<Vec<SceneTaskSet>, PipelineError> {
    let paths = OutputPaths::new(&config.out_dir);
    let mut sets = Vec::new();
    for spec in &config.suites {
        for ix in 0..spec.scenes {
            let rel = OutputPaths::suite_rel(spec.kind, ix);
            manifest.verify(&paths, &rel)?;
            let path = paths.abs(&rel);
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let set: SceneTaskSet = serde_json::from_str(&text)
                .map_err(|e| PipelineError::Inconsistent(format!("{rel}: {e}")))?;
            set.validate()?;
            sets.push(set);
        }
    }
    Ok(sets)
}

/// Collect the biased dataset and write it plus the replay-audit report.
pub fn cmd_collect(config: &ExperimentConfig) -> Result<(), PipelineError> {
    config.validate()?;
    let paths = OutputPaths::new(&config.out_dir);
    let mut manifest = Manifest::load(&paths)?;
    manifest.check_config(config)?;
    let sets = load_suites(config, &manifest)?;
    let ds = collect_demos(&sets, &config.bias, config.base_seed)?;
    save_dataset(&ds, &paths.abs(OutputPaths::dataset_rel()))?;
    let report = replay_audit(&ds, &sets);
    write_file(
        &paths.abs(OutputPaths::audit_rel()),
        report.render().as_bytes(),
    )?;
    manifest.record(&paths, OutputPaths::dataset_rel())?;
    manifest.record(&paths, OutputPaths::audit_rel())?;
    manifest.save(&paths)?;
    if !report.all_ok() {
        return Err(PipelineError::Infeasible(format!(
            "replay audit failed: {}/{} demonstrations replayed",
            report.replayed_ok, report.total
        )));
    }
    println!(
        "collect: {} demonstrations, replay audit {}/{} ok",
        ds.len(),
        report.replayed_ok,
        report.total
    );
    Ok(())
}

fn branch_train_config(config: &ExperimentConfig, branch: Branch) -> &TrainConfig {
    match branch {
        Branch::Cond => &config.train.cond,
        Branch::Va => &config.train.va,
        Branch::Dropout => &config.train.dropout,
    }
}

/// Train one branch and write its parameters and loss curve.
pub fn cmd_train(config: &ExperimentConfig, branch: Branch) -> Result<(), PipelineError> {
    config.validate()?;
    let paths = OutputPaths::new(&config.out_dir);
    let mut manifest = Manifest::load(&paths)?;
    manifest.check_config(config)?;
    manifest.verify(&paths, OutputPaths::dataset_rel())?;
    let ds = load_dataset(&paths.abs(OutputPaths::dataset_rel()))?;
    let train_cfg = branch_train_config(config, branch);
    let conditioned = branch != Branch::Va;
    let outcome = train(&ds, train_cfg, conditioned)?;
    save_params(&outcome.params, &paths.abs(&OutputPaths::params_rel(branch)))?;
    let mut loss_csv = String::from("epoch,loss\n");
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        loss_csv.push_str(&format!("{epoch},{loss}\n"));
    }
    write_file(&paths.abs(&OutputPaths::loss_rel(branch)), loss_csv.as_bytes())?;
    manifest.record(&paths, &OutputPaths::params_rel(branch))?;
    manifest.record(&paths, &OutputPaths::loss_rel(branch))?;
    manifest.save(&paths)?;
    println!(
        "train {branch}: final loss {:.6} over {} epochs",
        outcome.epoch_losses.last().unwrap_or(&f64::NAN),
        outcome.epoch_losses.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / sweep
// ---------------------------------------------------------------------------

fn load_branch(
    paths: &OutputPaths,
    manifest: &Manifest,
    branch: Branch,
) -> Result<Arc<PolicyParams>, PipelineError> {
    let rel = OutputPaths::params_rel(branch);
    manifest.verify(paths, &rel)?;
    Ok(Arc::new(load_params(&paths.abs(&rel))?))
}

/// Assemble the guidance configuration for a wiring from trained branches.
pub fn wiring_config(
    config: &ExperimentConfig,
    paths: &OutputPaths,
    manifest: &Manifest,
    wiring: Wiring,
    omega: f64,
) -> Result<GuidanceConfig, PipelineError> {
    let cfg = match wiring {
        Wiring::Baseline | Wiring::Tf => GuidanceConfig {
            omega,
            space: config.guidance.space,
            wiring,
            cond: load_branch(paths, manifest, Branch::Cond)?,
            uncond: None,
        },
        Wiring::Va => GuidanceConfig {
            omega,
            space: config.guidance.space,
            wiring,
            cond: load_branch(paths, manifest, Branch::Cond)?,
            uncond: Some(load_branch(paths, manifest, Branch::Va)?),
        },
        Wiring::DropoutShared => GuidanceConfig {
            omega,
            space: config.guidance.space,
            wiring,
            cond: load_branch(paths, manifest, Branch::Dropout)?,
            uncond: None,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn kinds_in_order(config: &ExperimentConfig) -> Vec<SuiteKind> {
    config.suites.iter().map(|s| s.kind).collect()
}

fn write_metrics_files(
    paths: &OutputPaths,
    manifest: &mut Manifest,
    metrics_rel: &str,
    breakdown_rel: &str,
    runs: &[SuiteMetrics],
) -> Result<(), PipelineError> {
    let mut metrics_text = String::from(METRICS_CSV_HEADER);
    metrics_text.push('\n');
    let mut breakdown_text = String::from(BREAKDOWN_CSV_HEADER);
    breakdown_text.push('\n');
    for run in runs {
        for row in metrics_csv_rows(run) {
            metrics_text.push_str(&row);
            metrics_text.push('\n');
        }
        for row in breakdown_csv_rows(run) {
            breakdown_text.push_str(&row);
            breakdown_text.push('\n');
        }
    }
    write_file(&paths.abs(metrics_rel), metrics_text.as_bytes())?;
    write_file(&paths.abs(breakdown_rel), breakdown_text.as_bytes())?;
    manifest.record(paths, metrics_rel)?;
    manifest.record(paths, breakdown_rel)?;
    Ok(())
}

/// Evaluate one wiring under one ablation mode across all suites and seed
/// replicas. The baseline standard evaluation additionally emits the grasp
/// heatmaps and the CF-Focused comparison, both baseline-policy studies.
pub fn cmd_eval(
    config: &ExperimentConfig,
    wiring: Wiring,
    mode: AblationMode,
) -> Result<(), PipelineError> {
    config.validate()?;
    let paths = OutputPaths::new(&config.out_dir);
    let mut manifest = Manifest::load(&paths)?;
    manifest.check_config(config)?;
    let sets = load_suites(config, &manifest)?;
    let cfg = wiring_config(config, &paths, &manifest, wiring, config.guidance.omega)?;

    let mut runs = Vec::new();
    for kind in kinds_in_order(config) {
        let kind_sets: Vec<SceneTaskSet> = sets
            .iter()
            .filter(|s| s.suite_kind == kind)
            .cloned()
            .collect();
        for replica in 0..config.eval_seeds {
            runs.push(run_suite(
                &kind_sets,
                &cfg,
                mode,
                config.trials,
                config.base_seed.wrapping_add(replica as u64),
            )?);
        }
    }
    write_metrics_files(
        &paths,
        &mut manifest,
        &OutputPaths::metrics_rel(wiring, mode),
        &OutputPaths::breakdown_rel(wiring, mode),
        &runs,
    )?;

    if wiring == Wiring::Baseline && mode == AblationMode::VisionAndLanguage {
        emit_baseline_studies(config, &paths, &mut manifest, &sets, &cfg)?;
    }
    manifest.save(&paths)?;
    println!(
        "eval {wiring} {mode}: {} suite runs, {} trials per task",
        runs.len(),
        config.trials
    );
    Ok(())
}

/// Grasp heatmaps (spatial sets, three instruction variants) and the
/// CF-Focused comparison, evaluated with the baseline conditional policy.
fn emit_baseline_studies(
    config: &ExperimentConfig,
    paths: &OutputPaths,
    manifest: &mut Manifest,
    sets: &[SceneTaskSet],
    cfg: &GuidanceConfig,
) -> Result<(), PipelineError> {
    let spatial: Vec<SceneTaskSet> = sets
        .iter()
        .filter(|s| s.suite_kind == SuiteKind::Spatial)
        .cloned()
        .collect();
    if spatial.is_empty() {
        return Ok(());
    }
    for set in &spatial {
        for variant in HeatmapVariant::ALL {
            let grid = grasp_heatmap(set, cfg, variant, config.trials, config.base_seed)?;
            let csv_rel = OutputPaths::heatmap_rel(&set.in_domain.id, variant, "csv");
            let svg_rel = OutputPaths::heatmap_rel(&set.in_domain.id, variant, "svg");
            write_file(&paths.abs(&csv_rel), heatmap_csv(&grid).as_bytes())?;
            write_file(&paths.abs(&svg_rel), heatmap_svg(&grid).as_bytes())?;
            manifest.record(paths, &csv_rel)?;
            manifest.record(paths, &svg_rel)?;
        }
    }

    let mut text = String::from(
        "seed,set_index,in_domain_id,original_faithful_grounding,focused_faithful_grounding,grounding_delta,original_faithful_success,focused_faithful_success,success_delta\n",
    );
    for replica in 0..config.eval_seeds {
        let seed = config.base_seed.wrapping_add(replica as u64);
        let cmp = compare_cf_focused(&spatial, cfg, config.trials, seed)?;
        for delta in &cmp.per_set {
            let orig = cmp
                .original
                .per_task
                .iter()
                .filter(|t| t.set_index == delta.set_index && !t.in_domain_task)
                .fold((0usize, 0usize, 0usize), |acc, t| {
                    (
                        acc.0 + t.block.faithful_grounded,
                        acc.1 + t.block.faithful_success,
                        acc.2 + t.block.trials,
                    )
                });
            let foc = cmp
                .focused
                .per_task
                .iter()
                .filter(|t| t.set_index == delta.set_index && !t.in_domain_task)
                .fold((0usize, 0usize, 0usize), |acc, t| {
                    (
                        acc.0 + t.block.faithful_grounded,
                        acc.1 + t.block.faithful_success,
                        acc.2 + t.block.trials,
                    )
                });
            let rate = |n: usize, d: usize| n as f64 / d.max(1) as f64;
            text.push_str(&format!(
                "{seed},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                delta.set_index,
                delta.in_domain_id,
                rate(orig.0, orig.2),
                rate(foc.0, foc.2),
                delta.faithful_grounding_delta,
                rate(orig.1, orig.2),
                rate(foc.1, foc.2),
                delta.faithful_success_delta,
            ));
        }
    }
    write_file(&paths.abs(OutputPaths::cf_focused_rel()), text.as_bytes())?;
    manifest.record(paths, OutputPaths::cf_focused_rel())?;
    Ok(())
}

/// Sweep the guidance scale over the configured grid and wiring.
pub fn cmd_sweep(config: &ExperimentConfig) -> Result<(), PipelineError> {
    config.validate()?;
    let paths = OutputPaths::new(&config.out_dir);
    let mut manifest = Manifest::load(&paths)?;
    manifest.check_config(config)?;
    let sets = load_suites(config, &manifest)?;
    let wiring = config.sweep.wiring;
    let cfg = wiring_config(config, &paths, &manifest, wiring, config.guidance.omega)?;

    let mut runs = Vec::new();
    for replica in 0..config.eval_seeds {
        let seed = config.base_seed.wrapping_add(replica as u64);
        for (_, metrics) in guidance_sweep(&sets, &cfg, &config.sweep.omegas, config.trials, seed)? {
            runs.push(metrics);
        }
    }
    let rel = OutputPaths::sweep_rel(wiring);
    let mut text = String::from(METRICS_CSV_HEADER);
    text.push('\n');
    for run in &runs {
        for row in metrics_csv_rows(run) {
            text.push_str(&row);
            text.push('\n');
        }
    }
    write_file(&paths.abs(&rel), text.as_bytes())?;
    manifest.record(&paths, &rel)?;
    manifest.save(&paths)?;
    println!(
        "sweep {wiring}: {} omegas x {} replicas",
        config.sweep.omegas.len(),
        config.eval_seeds
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct MetricsRow {
    suite: String,
    omega: f64,
    seed: u64,
    task_id: String,
    faithful_grounding: f64,
    biased_grounding: f64,
    other_grounding: f64,
    faithful_success: f64,
    biased_success: f64,
    fail: usize,
}

fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if ix == 0 {
            if line != METRICS_CSV_HEADER {
                return Err(PipelineError::Inconsistent(format!(
                    "{}: unexpected header",
                    path.display()
                )));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(PipelineError::Inconsistent(format!(
                "{} line {}: expected 12 fields",
                path.display(),
                ix + 1
            )));
        }
        let parse_f = |s: &str| -> Result<f64, PipelineError> {
            s.parse()
                .map_err(|_| PipelineError::Inconsistent(format!("bad float {s:?}")))
        };
        rows.push(MetricsRow {
            suite: fields[0].to_string(),
            omega: parse_f(fields[2])?,
            seed: fields[4]
                .parse()
                .map_err(|_| PipelineError::Inconsistent("bad seed".into()))?,
            task_id: fields[5].to_string(),
            faithful_grounding: parse_f(fields[6])?,
            biased_grounding: parse_f(fields[7])?,
            other_grounding: parse_f(fields[8])?,
            faithful_success: parse_f(fields[9])?,
            biased_success: parse_f(fields[10])?,
            fail: fields[11]
                .parse()
                .map_err(|_| PipelineError::Inconsistent("bad fail count".into()))?,
        });
    }
    Ok(rows)
}

/// Verify a metrics CSV against its breakdown CSV: rates recomputed from the
/// successes/attempts matrix must reproduce the reported rates exactly (after
/// the same 6-digit formatting).
fn verify_against_breakdown(
    metrics_path: &Path,
    breakdown_path: &Path,
) -> Result<(), PipelineError> {
    let metrics = parse_metrics_csv(metrics_path)?;
    let text = std::fs::read_to_string(breakdown_path).map_err(io_err(breakdown_path))?;

    // (seed, task) -> (instructed, in_domain, Vec<(executed, successes, attempts)>)
    type Key = (u64, String);
    let mut grouped: BTreeMap<Key, (String, String, Vec<(String, usize, usize)>)> =
        BTreeMap::new();
    for (ix, line) in text.lines().enumerate() {
        if ix == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(PipelineError::Inconsistent(format!(
                "{} line {}: expected 11 fields",
                breakdown_path.display(),
                ix + 1
            )));
        }
        let seed: u64 = fields[4]
            .parse()
            .map_err(|_| PipelineError::Inconsistent("bad seed".into()))?;
        let entry = grouped
            .entry((seed, fields[5].to_string()))
            .or_insert_with(|| (fields[6].to_string(), fields[7].to_string(), Vec::new()));
        entry.2.push((
            fields[8].to_string(),
            fields[9]
                .parse()
                .map_err(|_| PipelineError::Inconsistent("bad successes".into()))?,
            fields[10]
                .parse()
                .map_err(|_| PipelineError::Inconsistent("bad attempts".into()))?,
        ));
    }
    for row in &metrics {
        let Some((instructed, in_domain, cells)) =
            grouped.get(&(row.seed, row.task_id.clone()))
        else {
            return Err(PipelineError::Inconsistent(format!(
                "no breakdown rows for task {} seed {}",
                row.task_id, row.seed
            )));
        };
        let trials: usize = cells.iter().map(|c| c.2).sum();
        let mut fg = 0;
        let mut bg = 0;
        let mut og = 0;
        let mut fail = 0;
        let mut fs = 0;
        let mut bs = 0;
        for (executed, successes, attempts) in cells {
            if executed == "fail" {
                fail += attempts;
            } else if executed == instructed {
                fg += attempts;
                fs += successes;
            } else if executed == in_domain {
                bg += attempts;
                bs += successes;
            } else {
                og += attempts;
            }
        }
        let fmt = |n: usize| format!("{:.6}", n as f64 / trials as f64);
        let reported = [
            format!("{:.6}", row.faithful_grounding),
            format!("{:.6}", row.biased_grounding),
            format!("{:.6}", row.other_grounding),
            format!("{:.6}", row.faithful_success),
            format!("{:.6}", row.biased_success),
        ];
        let recomputed = [fmt(fg), fmt(bg), fmt(og), fmt(fs), fmt(bs)];
        if reported != recomputed || fail != row.fail {
            return Err(PipelineError::Inconsistent(format!(
                "task {} seed {}: breakdown does not reproduce reported rates",
                row.task_id, row.seed
            )));
        }
    }
    Ok(())
}

struct Aggregate {
    faithful_grounding: f64,
    biased_grounding: f64,
    other_grounding: f64,
    faithful_success: f64,
    biased_success: f64,
    fail_count: usize,
    rows: usize,
}

fn aggregate<'r>(rows: impl Iterator<Item = &'r MetricsRow>) -> Aggregate {
    let mut agg = Aggregate {
        faithful_grounding: 0.0,
        biased_grounding: 0.0,
        other_grounding: 0.0,
        faithful_success: 0.0,
        biased_success: 0.0,
        fail_count: 0,
        rows: 0,
    };
    for row in rows {
        agg.faithful_grounding += row.faithful_grounding;
        agg.biased_grounding += row.biased_grounding;
        agg.other_grounding += row.other_grounding;
        agg.faithful_success += row.faithful_success;
        agg.biased_success += row.biased_success;
        agg.fail_count += row.fail;
        agg.rows += 1;
    }
    if agg.rows > 0 {
        let n = agg.rows as f64;
        agg.faithful_grounding /= n;
        agg.biased_grounding /= n;
        agg.other_grounding /= n;
        agg.faithful_success /= n;
        agg.biased_success /= n;
    }
    agg
}

fn is_cf(row: &MetricsRow) -> bool {
    !row.task_id.ends_with("-in")
}

/// Compose the summary document comparing wirings per suite from the CSVs
/// written by `eval` and `sweep`. Reads artifacts only; never recomputes
/// rollouts.
pub fn cmd_report(config: &ExperimentConfig) -> Result<(), PipelineError> {
    config.validate()?;
    let paths = OutputPaths::new(&config.out_dir);
    let manifest = Manifest::load(&paths)?;
    manifest.check_config(config)?;

    let required_wirings = [Wiring::Baseline, Wiring::Tf, Wiring::Va];
    let mode = AblationMode::VisionAndLanguage;
    let missing: Vec<PathBuf> = required_wirings
        .iter()
        .map(|w| paths.abs(&OutputPaths::metrics_rel(*w, mode)))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::MissingInput(missing));
    }

    let mut by_wiring: Vec<(Wiring, Vec<MetricsRow>)> = Vec::new();
    let mut wirings_present = required_wirings.to_vec();
    if paths
        .abs(&OutputPaths::metrics_rel(Wiring::DropoutShared, mode))
        .exists()
    {
        wirings_present.push(Wiring::DropoutShared);
    }
    for wiring in &wirings_present {
        let metrics_rel = OutputPaths::metrics_rel(*wiring, mode);
        let breakdown_rel = OutputPaths::breakdown_rel(*wiring, mode);
        manifest.verify(&paths, &metrics_rel)?;
        manifest.verify(&paths, &breakdown_rel)?;
        verify_against_breakdown(&paths.abs(&metrics_rel), &paths.abs(&breakdown_rel))?;
        by_wiring.push((*wiring, parse_metrics_csv(&paths.abs(&metrics_rel))?));
    }

    let mut out = String::new();
    out.push_str("# Experiment summary\n\n");
    out.push_str(&format!(
        "- config hash: `{}`\n- base seed: {}\n- trials per task: {}\n- seed replicas: {}\n\n",
        manifest.config_sha, config.base_seed, config.trials, config.eval_seeds
    ));
    out.push_str(
        "Counterfactual-task rates are means over tasks and seed replicas; \
         `faithful` attributes the episode to the instructed task, `biased` to \
         the scene's original training task. In-domain success is reported \
         separately to show preservation.\n\n",
    );

    let mut suite_names: Vec<String> = by_wiring
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.suite.clone()))
        .collect();
    suite_names.sort();
    suite_names.dedup();
    let ordered: Vec<String> = kinds_in_order(config)
        .iter()
        .map(|k| k.to_string())
        .filter(|k| suite_names.contains(k))
        .collect();

    for suite in ordered.iter().chain(std::iter::once(&"average".to_string())) {
        out.push_str(&format!(
            "## {}\n\n",
            if suite == "average" {
                "Average across suites".to_string()
            } else {
                format!("CF-{suite}")
            }
        ));
        out.push_str("| wiring | faithful grounding | biased grounding | other grounding | faithful success | biased success | in-domain success |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for (wiring, rows) in &by_wiring {
            let select = |r: &&MetricsRow| (suite == "average" || r.suite == *suite) && is_cf(r);
            let cf = aggregate(rows.iter().filter(|r| select(r)));
            let in_domain = aggregate(
                rows.iter()
                    .filter(|r| (suite == "average" || r.suite == *suite) && !is_cf(r)),
            );
            out.push_str(&format!(
                "| {wiring} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                cf.faithful_grounding,
                cf.biased_grounding,
                cf.other_grounding,
                cf.faithful_success,
                cf.biased_success,
                in_domain.faithful_success,
            ));
        }
        out.push('\n');
    }

    let sweep_rel = OutputPaths::sweep_rel(config.sweep.wiring);
    if paths.abs(&sweep_rel).exists() {
        manifest.verify(&paths, &sweep_rel)?;
        let rows = parse_metrics_csv(&paths.abs(&sweep_rel))?;
        let mut omegas: Vec<f64> = rows.iter().map(|r| r.omega).collect();
        omegas.sort_by(|a, b| a.partial_cmp(b).expect("finite omegas"));
        omegas.dedup();
        out.push_str(&format!(
            "## Guidance-scale sweep ({} wiring)\n\n",
            config.sweep.wiring
        ));
        out.push_str(
            "| omega | faithful grounding | biased grounding | faithful success | biased success |\n|---|---|---|---|---|\n",
        );
        for omega in omegas {
            let agg = aggregate(rows.iter().filter(|r| r.omega == omega && is_cf(r)));
            out.push_str(&format!(
                "| {omega} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                agg.faithful_grounding, agg.biased_grounding, agg.faithful_success, agg.biased_success,
            ));
        }
        out.push('\n');
    }

    if paths.abs(OutputPaths::cf_focused_rel()).exists() {
        manifest.verify(&paths, OutputPaths::cf_focused_rel())?;
        let text = std::fs::read_to_string(paths.abs(OutputPaths::cf_focused_rel()))
            .map_err(io_err(&paths.abs(OutputPaths::cf_focused_rel())))?;
        let mut grounding_deltas = Vec::new();
        let mut success_deltas = Vec::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() == 9 {
                grounding_deltas.push(fields[5].parse::<f64>().unwrap_or(f64::NAN));
                success_deltas.push(fields[8].parse::<f64>().unwrap_or(f64::NAN));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        out.push_str("## CF-Focused (training-task object removed)\n\n");
        out.push_str(&format!(
            "Mean faithful-grounding delta (focused - original): {:.3}; mean faithful-success delta: {:.3} over {} (set, seed) pairs.\n\n",
            mean(&grounding_deltas),
            mean(&success_deltas),
            grounding_deltas.len()
        ));
    }

    let heatmap_files: Vec<String> = manifest
        .entries
        .keys()
        .filter(|k| k.starts_with("heatmaps/"))
        .cloned()
        .collect();
    if !heatmap_files.is_empty() {
        out.push_str("## Grasp heatmaps\n\n");
        for file in heatmap_files {
            out.push_str(&format!("- `{file}`\n"));
        }
        out.push('\n');
    }

    write_file(&paths.abs(OutputPaths::summary_rel()), out.as_bytes())?;
    println!("report: wrote {}", paths.abs(OutputPaths::summary_rel()).display());
    Ok(())
}
