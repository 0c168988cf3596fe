//! Experiment configuration: TOML file with strict keys, presets and anchor overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::WorldConfig;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::reward::RewardConfig;
use crate::schedule::{default_anchors, prose_lambda_anchors, Component, ScheduleConfig, ScheduleMode, WeightAnchors};
use crate::trainer::TrainConfig;

/// Which reward components keep their weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Full,
    /// Answer correctness only, under the `no_reward` schedule.
    NoReward,
    Best2,
    Best3,
    ExplorationHeavy,
    EfficiencyHeavy,
    Single(Component),
}

impl Preset {
    /// The six rows of the reward-combination comparison.
    pub const TABLE: [Preset; 6] = [
        Preset::NoReward,
        Preset::Best2,
        Preset::Best3,
        Preset::ExplorationHeavy,
        Preset::EfficiencyHeavy,
        Preset::Full,
    ];

    pub fn components(self) -> Vec<Component> {
        use Component::*;
        match self {
            Preset::Full => Component::ALL.to_vec(),
            Preset::NoReward => vec![AnswerCorrectness],
            Preset::Best2 => vec![Backtrack, AnswerCorrectness],
            Preset::Best3 => vec![Backtrack, AnswerCorrectness, Overlap],
            Preset::ExplorationHeavy => vec![RetrievalBonus, Overlap],
            Preset::EfficiencyHeavy => vec![Backtrack, StepCost],
            Preset::Single(c) => vec![c],
        }
    }

    pub fn name(self) -> String {
        match self {
            Preset::Full => "full".into(),
            Preset::NoReward => "no_reward".into(),
            Preset::Best2 => "best2".into(),
            Preset::Best3 => "best3".into(),
            Preset::ExplorationHeavy => "exploration_heavy".into(),
            Preset::EfficiencyHeavy => "efficiency_heavy".into(),
            Preset::Single(c) => format!("single:{}", c.name()),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = match s {
            "full" => Preset::Full,
            "no_reward" | "baseline" => Preset::NoReward,
            "best2" => Preset::Best2,
            "best3" => Preset::Best3,
            "exploration_heavy" => Preset::ExplorationHeavy,
            "efficiency_heavy" => Preset::EfficiencyHeavy,
            other => match other.strip_prefix("single:").and_then(Component::from_name) {
                Some(c) => Preset::Single(c),
                None => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
            },
        };
        Ok(p)
    }
}

impl Serialize for Preset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Preset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPreset {
    #[default]
    Table,
    ProseLambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellOverride {
    pub start: Option<f64>,
    pub mid: Option<f64>,
    pub end: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorOverrides {
    pub beta: Option<CellOverride>,
    pub lambda: Option<CellOverride>,
    pub gamma: Option<CellOverride>,
    pub delta: Option<CellOverride>,
    pub rho: Option<CellOverride>,
    pub eta: Option<CellOverride>,
    pub kappa: Option<CellOverride>,
}

impl AnchorOverrides {
    fn rows(&self) -> [(&'static str, Option<CellOverride>); 7] {
        [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("rho", self.rho),
            ("eta", self.eta),
            ("kappa", self.kappa),
        ]
    }

    pub fn apply(&self, anchors: &mut WeightAnchors<f64>) {
        for (name, cell) in self.rows() {
            let Some(cell) = cell else { continue };
            for (value, column) in [(cell.start, &mut anchors.start), (cell.mid, &mut anchors.mid), (cell.end, &mut anchors.end)] {
                if let Some(v) = value {
                    column.set(name, v);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub mode: ScheduleMode,
    pub anchor_preset: AnchorPreset,
    pub anchors: AnchorOverrides,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let d = ScheduleConfig::<f64>::default();
        ScheduleSection { t_max: d.t_max, mode: d.mode, anchor_preset: AnchorPreset::Table, anchors: AnchorOverrides::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Training seed; the world carries its own.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub preset: Preset,
    pub world: WorldConfig,
    pub schedule: ScheduleSection,
    pub reward: RewardConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: TrainConfig::default().seed,
            out_dir: PathBuf::from("runs"),
            preset: Preset::Full,
            world: WorldConfig::default(),
            schedule: ScheduleSection::default(),
            reward: RewardConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.schedule()?;
        self.train_config().validate()?;
        if !(self.reward.step_cost >= 0.0 && self.reward.step_cost.is_finite()) {
            return Err(Error::config("reward.step_cost", "must be finite and non-negative"));
        }
        if !(self.reward.tau_dup.is_finite() && (0.0..=1.0).contains(&self.reward.tau_dup)) {
            return Err(Error::config("reward.tau_dup", "must lie in [0, 1]"));
        }
        if self.policy.candidate_limit == 0 {
            return Err(Error::config("policy.candidate_limit", "must be positive"));
        }
        if !(self.policy.temperature > 0.0 && self.policy.temperature.is_finite()) {
            return Err(Error::config("policy.temperature", "must be positive"));
        }
        Ok(())
    }

    /// Schedule with anchor preset, overrides, preset mask and mode applied.
    pub fn schedule(&self) -> Result<ScheduleConfig<f64>> {
        let mut anchors = match self.schedule.anchor_preset {
            AnchorPreset::Table => default_anchors(),
            AnchorPreset::ProseLambda => prose_lambda_anchors(),
        };
        self.schedule.anchors.apply(&mut anchors);
        let mode = match self.preset {
            Preset::NoReward => ScheduleMode::NoReward,
            _ => self.schedule.mode,
        };
        let cfg = ScheduleConfig { t_max: self.schedule.t_max, anchors: anchors.masked(&self.preset.components()), mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    pub fn with_mode(&self, mode: ScheduleMode) -> Self {
        let mut c = self.clone();
        c.schedule.mode = mode;
        c
    }

    pub fn with_preset(&self, preset: Preset) -> Self {
        ExperimentConfig { preset, ..self.clone() }
    }
}
