//! Whole-run drivers shared by the command line and the test suites.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Preset};
use crate::env::{generate_world, World};
use crate::error::Result;
use crate::metrics::EvalReport;
use crate::policy::RolloutEnv;
use crate::schedule::{ScheduleConfig, ScheduleMode};
use crate::trainer::{self, CurriculumResult};

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub schedule: ScheduleConfig<f64>,
    pub result: CurriculumResult,
}

impl RunOutcome {
    /// Dev metrics of the final selected checkpoint.
    pub fn final_report(&self) -> EvalReport {
        self.result.best().dev
    }
}

pub fn world_for(cfg: &ExperimentConfig) -> Result<World> {
    generate_world(&cfg.world)
}

pub fn train(cfg: &ExperimentConfig, world: &World) -> Result<RunOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let env = RolloutEnv { world, schedule: &schedule, policy: cfg.policy, reward: cfg.reward };
    let result = trainer::run_curriculum(&cfg.train_config(), world, &env)?;
    Ok(RunOutcome { schedule, result })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub schedule_mode: String,
    pub preset: String,
    pub em: f64,
    pub f1: f64,
    pub avg_steps: f64,
    pub refusal_accuracy: f64,
    pub world_hash: String,
}

/// Label of a comparison variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Mode(ScheduleMode),
    Preset(Preset),
}

impl Variant {
    pub fn label(self) -> String {
        match self {
            Variant::Mode(m) => m.as_str().to_string(),
            Variant::Preset(Preset::NoReward) => "baseline".to_string(),
            Variant::Preset(p) => p.name(),
        }
    }

    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        match self {
            Variant::Mode(m) => cfg.with_preset(Preset::Full).with_mode(m),
            Variant::Preset(p) => cfg.with_preset(p),
        }
    }
}

/// Trains each variant on the same world and seed.
pub fn compare(cfg: &ExperimentConfig, world: &World, world_hash: &str, variants: &[Variant]) -> Result<Vec<(CompareRow, RunOutcome)>> {
    variants
        .iter()
        .map(|&v| {
            let c = v.apply(cfg);
            let outcome = train(&c, world)?;
            let r = outcome.final_report();
            let row = CompareRow {
                label: v.label(),
                schedule_mode: outcome.schedule.mode.as_str().to_string(),
                preset: c.preset.name(),
                em: r.em,
                f1: r.f1,
                avg_steps: r.avg_steps,
                refusal_accuracy: r.refusal_accuracy,
                world_hash: world_hash.to_string(),
            };
            Ok((row, outcome))
        })
        .collect()
}
