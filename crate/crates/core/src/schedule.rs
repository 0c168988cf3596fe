//! Stage-dependent reward-weight anchors and the per-step weight schedule.
//!
//! A run is split into a `Discovery` stage followed by a `Refinement` stage.
//! Within a stage the seven coefficients move linearly with the progress
//! ratio `p = t / t_max` from an early anchor to a late anchor:
//! `(start, mid)` in Discovery and `(mid, end)` in Refinement.

use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Discovery,
    Refinement,
}

impl StageId {
    pub const ALL: [StageId; 2] = [StageId::Discovery, StageId::Refinement];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Discovery => "discovery",
            StageId::Refinement => "refinement",
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The seven reward components, in the order of [`RewardVector`](crate::reward::RewardVector).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    RetrievalBonus,
    Overlap,
    Backtrack,
    Refusal,
    StepCost,
    AnswerCorrectness,
    ActionPenalty,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::RetrievalBonus,
        Component::Overlap,
        Component::Backtrack,
        Component::Refusal,
        Component::StepCost,
        Component::AnswerCorrectness,
        Component::ActionPenalty,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::RetrievalBonus => "retrieval_bonus",
            Component::Overlap => "overlap",
            Component::Backtrack => "backtrack",
            Component::Refusal => "refusal",
            Component::StepCost => "step_cost",
            Component::AnswerCorrectness => "answer_correctness",
            Component::ActionPenalty => "action_penalty",
        }
    }

    pub fn from_name(name: &str) -> Option<Component> {
        Component::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Coefficients `(beta, lambda, gamma, delta, rho, eta, kappa)` at one step.
///
/// Pairing with reward components: beta = retrieval bonus, lambda = retrieval
/// action penalty, gamma = sub-query overlap, delta = backtrack, rho = refusal,
/// eta = step cost, kappa = answer correctness.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightVector<T> {
    pub beta: T,
    pub lambda: T,
    pub gamma: T,
    pub delta: T,
    pub rho: T,
    pub eta: T,
    pub kappa: T,
}

impl<T: Real> WeightVector<T> {
    pub const NAMES: [&'static str; 7] = ["beta", "lambda", "gamma", "delta", "rho", "eta", "kappa"];

    pub fn zero() -> Self {
        Self::splat(T::zero())
    }

    pub fn splat(v: T) -> Self {
        WeightVector { beta: v, lambda: v, gamma: v, delta: v, rho: v, eta: v, kappa: v }
    }

    /// Builds from `[beta, lambda, gamma, delta, rho, eta, kappa]`.
    pub fn from_array(a: [T; 7]) -> Self {
        WeightVector { beta: a[0], lambda: a[1], gamma: a[2], delta: a[3], rho: a[4], eta: a[5], kappa: a[6] }
    }

    pub fn to_array(&self) -> [T; 7] {
        [self.beta, self.lambda, self.gamma, self.delta, self.rho, self.eta, self.kappa]
    }

    /// Coefficient applied to `component`.
    pub fn weight_for(&self, component: Component) -> T {
        match component {
            Component::RetrievalBonus => self.beta,
            Component::ActionPenalty => self.lambda,
            Component::Overlap => self.gamma,
            Component::Backtrack => self.delta,
            Component::Refusal => self.rho,
            Component::StepCost => self.eta,
            Component::AnswerCorrectness => self.kappa,
        }
    }

    pub fn weight_for_mut(&mut self, component: Component) -> &mut T {
        match component {
            Component::RetrievalBonus => &mut self.beta,
            Component::ActionPenalty => &mut self.lambda,
            Component::Overlap => &mut self.gamma,
            Component::Backtrack => &mut self.delta,
            Component::Refusal => &mut self.rho,
            Component::StepCost => &mut self.eta,
            Component::AnswerCorrectness => &mut self.kappa,
        }
    }

    pub fn get(&self, name: &str) -> Option<T> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.to_array()[i])
    }

    pub fn set(&mut self, name: &str, value: T) -> bool {
        match Self::NAMES.iter().position(|n| *n == name) {
            Some(i) => {
                let mut a = self.to_array();
                a[i] = value;
                *self = Self::from_array(a);
                true
            }
            None => false,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|w| w.is_finite() && *w >= T::zero())
    }

    /// `(1 - p) * self + p * late`, componentwise.
    pub fn lerp(&self, late: &Self, p: T) -> Self {
        let a = self.to_array();
        let b = late.to_array();
        let mut out = [T::zero(); 7];
        for i in 0..7 {
            out[i] = (T::one() - p) * a[i] + p * b[i];
        }
        Self::from_array(out)
    }

    /// Zeroes every coefficient whose component is not enabled.
    pub fn masked(&self, enabled: &[Component]) -> Self {
        let mut out = Self::zero();
        for &c in enabled {
            *out.weight_for_mut(c) = self.weight_for(c);
        }
        out
    }
}

impl<T: Real> Add for WeightVector<T> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        let a = self.to_array();
        let b = rhs.to_array();
        let mut out = [T::zero(); 7];
        for i in 0..7 {
            out[i] = a[i] + b[i];
        }
        Self::from_array(out)
    }
}

/// Start, mid and end columns of the weight table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightAnchors<T> {
    pub start: WeightVector<T>,
    pub mid: WeightVector<T>,
    pub end: WeightVector<T>,
}

impl<T: Real> WeightAnchors<T> {
    /// Early/late anchor pair for a stage.
    pub fn stage_pair(&self, stage: StageId) -> (&WeightVector<T>, &WeightVector<T>) {
        match stage {
            StageId::Discovery => (&self.start, &self.mid),
            StageId::Refinement => (&self.mid, &self.end),
        }
    }

    pub fn masked(&self, enabled: &[Component]) -> Self {
        WeightAnchors {
            start: self.start.masked(enabled),
            mid: self.mid.masked(enabled),
            end: self.end.masked(enabled),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (col, w) in [("start", &self.start), ("mid", &self.mid), ("end", &self.end)] {
            if !w.is_valid() {
                return Err(Error::config(
                    format!("schedule.anchors.{col}"),
                    "weights must be finite and non-negative",
                ));
            }
        }
        Ok(())
    }
}

/// The reward-weight table used for training.
pub fn default_anchors<T: Real>() -> WeightAnchors<T> {
    let v = |a: [f64; 7]| WeightVector::from_array(a.map(T::lit));
    WeightAnchors {
        start: v([2.0, 1.5, 0.1, 0.3, 0.5, 0.02, 0.05]),
        mid: v([1.0, 0.8, 0.5, 0.5, 0.5, 0.05, 0.10]),
        end: v([0.5, 0.4, 1.2, 1.0, 0.5, 0.10, 1.00]),
    }
}

/// Alternative reading in which the action-penalty weight rises
/// 0.4 → 0.8 → 1.2 instead of falling. Other rows match [`default_anchors`].
pub fn prose_lambda_anchors<T: Real>() -> WeightAnchors<T> {
    let mut a = default_anchors::<T>();
    a.start.lambda = T::lit(0.4);
    a.mid.lambda = T::lit(0.8);
    a.end.lambda = T::lit(1.2);
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    NoReward,
    #[serde(rename = "two_stage")]
    TwoStageFixed,
    TimeDynamic,
}

impl ScheduleMode {
    pub const ALL: [ScheduleMode; 3] =
        [ScheduleMode::NoReward, ScheduleMode::TwoStageFixed, ScheduleMode::TimeDynamic];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleMode::NoReward => "no_reward",
            ScheduleMode::TwoStageFixed => "two_stage",
            ScheduleMode::TimeDynamic => "time_dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "no_reward" => Some(ScheduleMode::NoReward),
            "two_stage" | "two_stage_fixed" => Some(ScheduleMode::TwoStageFixed),
            "time_dynamic" => Some(ScheduleMode::TimeDynamic),
            _ => None,
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig<T> {
    pub t_max: usize,
    pub anchors: WeightAnchors<T>,
    pub mode: ScheduleMode,
}

impl<T: Real> Default for ScheduleConfig<T> {
    fn default() -> Self {
        ScheduleConfig { t_max: 20, anchors: default_anchors(), mode: ScheduleMode::TimeDynamic }
    }
}

impl<T: Real> ScheduleConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::ZeroBudget);
        }
        self.anchors.validate()
    }
}

/// Progress ratio `t / t_max`.
pub fn progress<T: Real>(t: usize, t_max: usize) -> Result<T> {
    if t_max == 0 {
        return Err(Error::ZeroBudget);
    }
    if t > t_max {
        return Err(Error::StepOutOfRange { t, t_max });
    }
    Ok(T::from_usize(t).unwrap() / T::from_usize(t_max).unwrap())
}

/// Weight vector in force at step `t` of an episode in `stage`.
pub fn weights_at<T: Real>(cfg: &ScheduleConfig<T>, stage: StageId, t: usize) -> Result<WeightVector<T>> {
    let p = progress::<T>(t, cfg.t_max)?;
    Ok(match cfg.mode {
        ScheduleMode::NoReward => WeightVector { kappa: T::one(), ..WeightVector::zero() },
        ScheduleMode::TwoStageFixed => match stage {
            StageId::Discovery => cfg.anchors.start,
            StageId::Refinement => cfg.anchors.end,
        },
        ScheduleMode::TimeDynamic => {
            let (early, late) = cfg.anchors.stage_pair(stage);
            early.lerp(late, p)
        }
    })
}
