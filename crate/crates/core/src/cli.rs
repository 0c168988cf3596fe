//! Command implementations behind the `curriculum-rag` binary.
//!
//! Argument parsing lives in the binary; everything here takes a resolved
//! [`ExperimentConfig`] and returns typed results so the commands can be
//! driven from tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Preset};
use crate::env::World;
use crate::error::{Error, Result};
use crate::experiment::{self, CompareRow, RunOutcome, Variant};
use crate::io::{self, RunLayout, SavedPolicy, SavedRm, StepCountRow, WorldManifest};
use crate::metrics::EvalReport;
use crate::policy::RolloutEnv;
use crate::schedule::{ScheduleMode, StageId};
use crate::trainer::{self, Checkpoint, CycleRecord};

/// Command-line settings that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<ScheduleMode>,
    pub preset: Option<Preset>,
}

impl Overrides {
    pub fn apply(&self, cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = cfg.clone();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(p) = self.preset {
            cfg = cfg.with_preset(p);
        }
        if let Some(m) = self.mode {
            cfg = cfg.with_mode(m);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&base)
}

fn world_dir_or_default(cfg: &ExperimentConfig, world: Option<&Path>) -> PathBuf {
    world.map_or_else(|| RunLayout::new(&cfg.out_dir).world_dir(), Path::to_path_buf)
}

/// Loads a world and insists it was generated from this config's `[world]` section.
pub fn load_matching_world(cfg: &ExperimentConfig, world: Option<&Path>) -> Result<(World, WorldManifest)> {
    let dir = world_dir_or_default(cfg, world);
    let (w, manifest) = io::load_world(&dir)?;
    if manifest.world != cfg.world {
        return Err(Error::config("world", format!("world at {} was generated from different settings", dir.display())));
    }
    Ok((w, manifest))
}

pub fn cmd_gen_world(cfg: &ExperimentConfig) -> Result<WorldManifest> {
    cfg.world.validate()?;
    let world = experiment::world_for(cfg)?;
    io::save_world(&RunLayout::new(&cfg.out_dir).world_dir(), &world, &cfg.world)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub schedule_mode: ScheduleMode,
    pub preset: String,
    pub seed: u64,
    pub world_sha256: String,
    pub stage: StageId,
    pub cycle: usize,
    pub dev: EvalReport,
}

fn history(outcome: &RunOutcome) -> Vec<&CycleRecord> {
    outcome.result.stages().into_iter().flat_map(|s| s.history.iter()).collect()
}

fn save_checkpoint(layout: &RunLayout, ck: &Checkpoint, embed_dim: usize) -> Result<()> {
    io::save_policy(&layout.policy_checkpoint(ck.stage), &SavedPolicy { stage: ck.stage, cycle: ck.cycle, params: ck.policy.clone() })?;
    io::save_rm(&layout.rm_checkpoint(ck.stage), &SavedRm { stage: ck.stage, cycle: ck.cycle, embed_dim, params: ck.rm.clone() })
}

fn dev_step_counts(label: &str, cfg: &ExperimentConfig, world: &World, outcome: &RunOutcome) -> Result<Vec<StepCountRow>> {
    let env = RolloutEnv { world, schedule: &outcome.schedule, policy: cfg.policy, reward: cfg.reward };
    let best = outcome.result.best();
    let dev = trainer::dev_questions(world, &cfg.train_config())?;
    let trajs = trainer::episodes(&best.policy, &dev, &env, best.stage, true, 0)?;
    Ok(io::step_count_rows(label, &trajs))
}

fn run_label(cfg: &ExperimentConfig) -> String {
    match cfg.preset {
        Preset::Full => cfg.schedule.mode.as_str().to_string(),
        p => Variant::Preset(p).label(),
    }
}

/// Trains one curriculum and writes metrics, logs and checkpoints under `out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, world_dir: Option<&Path>) -> Result<RunReport> {
    let (world, manifest) = load_matching_world(cfg, world_dir)?;
    let outcome = experiment::train(cfg, &world)?;
    let layout = RunLayout::new(&cfg.out_dir);
    let mode = outcome.schedule.mode;
    let preset = cfg.preset.name();
    let hist = history(&outcome);

    io::write_csv(&layout.metrics(), &io::metrics_rows(&hist, mode, &preset))?;
    io::write_csv(&layout.losses(), &io::loss_rows(&hist))?;
    io::write_csv(&layout.weights(), &io::weight_rows(&outcome.schedule)?)?;
    io::write_jsonl(&layout.trajectories(), &io::trajectory_lines(&hist, &world, mode)?)?;
    io::write_jsonl(&layout.pairs(), &io::pair_lines(&hist))?;
    for stage in outcome.result.stages() {
        save_checkpoint(&layout, &stage.best, cfg.train.rm_embed_dim)?;
    }
    let label = run_label(cfg);
    io::write_csv(&layout.step_counts(), &dev_step_counts(&label, cfg, &world, &outcome)?)?;

    let best = outcome.result.best();
    let report = RunReport {
        label,
        schedule_mode: mode,
        preset,
        seed: cfg.seed,
        world_sha256: manifest.sha256,
        stage: best.stage,
        cycle: best.cycle,
        dev: best.dev,
    };
    io::write_report(&layout.report(), &report)?;
    Ok(report)
}

/// Greedy evaluation of a saved policy on the dev split of `cfg`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, world_dir: Option<&Path>) -> Result<EvalReport> {
    let saved = io::load_policy(checkpoint)?;
    let (world, _) = io::load_world(&world_dir_or_default(cfg, world_dir))?;
    let schedule = cfg.schedule()?;
    let env = RolloutEnv { world: &world, schedule: &schedule, policy: cfg.policy, reward: cfg.reward };
    let dev = trainer::dev_questions(&world, &cfg.train_config())?;
    let report = trainer::evaluate(&saved.params, &dev, &env, saved.stage, true, 0)?;
    io::write_report(&cfg.out_dir.join("eval.json"), &report)?;
    Ok(report)
}

/// Every schedule mode followed by the six reward-combination presets.
pub fn default_variants() -> Vec<Variant> {
    let mut v: Vec<Variant> = ScheduleMode::ALL.iter().map(|&m| Variant::Mode(m)).collect();
    v.extend(Preset::TABLE.iter().map(|&p| Variant::Preset(p)));
    v
}

pub fn parse_modes(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| ScheduleMode::parse(s).map(Variant::Mode).ok_or_else(|| Error::config("modes", format!("unknown schedule mode `{s}`"))))
        .collect()
}

pub fn parse_presets(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Preset>().map(Variant::Preset))
        .collect()
}

pub fn cmd_compare(cfg: &ExperimentConfig, world_dir: Option<&Path>, variants: &[Variant]) -> Result<Vec<CompareRow>> {
    if variants.is_empty() {
        return Err(Error::Empty("comparison variants"));
    }
    let (world, manifest) = load_matching_world(cfg, world_dir)?;
    let results = experiment::compare(cfg, &world, &manifest.sha256, variants)?;
    let mut steps = Vec::new();
    for ((row, outcome), v) in results.iter().zip(variants) {
        steps.extend(dev_step_counts(&row.label, &v.apply(cfg), &world, outcome)?);
    }
    let layout = RunLayout::new(&cfg.out_dir);
    let rows: Vec<CompareRow> = results.into_iter().map(|(row, _)| row).collect();
    io::write_csv(&layout.comparison(), &rows)?;
    io::write_csv(&layout.step_counts(), &steps)?;
    Ok(rows)
}

/// The run's schedule as CSV text, one row per (stage, t).
pub fn cmd_dump_weights(cfg: &ExperimentConfig) -> Result<String> {
    let rows = io::weight_rows(&cfg.schedule()?)?;
    let bytes = io::to_csv(&rows)?;
    String::from_utf8(bytes).map_err(|e| Error::Corrupt { what: "weight table".into(), reason: e.to_string() })
}
