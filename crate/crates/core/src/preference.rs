//! Sibling-branch preference pairs.
//!
//! Every visited state of a trajectory is an origin. The trajectory's own
//! suffix is one branch; alternatives are produced by forcing a different
//! candidate at the origin and completing the episode with the current policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::{Action, EpisodeState, QuestionInstance};
use crate::error::{Error, Result};
use crate::policy::{self, episode_rng, CandidateAction, PolicyParams, RolloutEnv, Selection, StepRecord, Trajectory};
use crate::reward;
use crate::reward_model::{self, RmParams};
use crate::schedule::StageId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub trajectory_id: u64,
    pub origin_step: usize,
    pub question_id: u64,
    pub stage: StageId,
    pub origin_state: EpisodeState,
    /// Candidate set at the origin; shared by all siblings.
    pub candidates: Vec<CandidateAction>,
    pub action_index: usize,
    pub suffix: Vec<StepRecord>,
    pub final_answer: Option<String>,
    pub truncated: bool,
    pub return_from_origin: f64,
}

impl Branch {
    pub fn origin(&self) -> (u64, usize) {
        (self.trajectory_id, self.origin_step)
    }

    pub fn action(&self) -> &Action {
        &self.candidates[self.action_index].action
    }

    /// The trajectory's own continuation from `step`.
    pub fn from_trajectory(trajectory_id: u64, traj: &Trajectory, step: usize) -> Result<Self> {
        let rec = traj.steps.get(step).ok_or(Error::IndexOutOfRange { index: step, len: traj.steps.len() })?;
        Ok(Branch {
            trajectory_id,
            origin_step: step,
            question_id: traj.question_id,
            stage: traj.stage,
            origin_state: rec.state.clone(),
            candidates: rec.candidates.clone(),
            action_index: rec.chosen,
            suffix: traj.steps[step..].to_vec(),
            final_answer: traj.final_answer.clone(),
            truncated: traj.truncated,
            return_from_origin: reward::episode_return(traj, step)?,
        })
    }

    /// Weighted return split by reward component.
    pub fn component_returns(&self) -> [f64; 7] {
        let mut out = [0.0; 7];
        for s in &self.suffix {
            for (o, c) in out.iter_mut().zip(reward::weighted_components(&s.rewards, &s.weights)) {
                *o += c;
            }
        }
        out
    }
}

/// How an alternative branch is completed after its forced first action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Greedy,
    Sampled { global_seed: u64, stream: u64 },
}

/// Forces `alt` at `step` of `traj` and completes the episode.
#[allow(clippy::too_many_arguments)]
pub fn branch(
    trajectory_id: u64,
    traj: &Trajectory,
    step: usize,
    alt: &Action,
    params: &PolicyParams,
    question: &QuestionInstance,
    env: &RolloutEnv<'_>,
    completion: Completion,
) -> Result<Branch> {
    let rec = traj.steps.get(step).ok_or(Error::IndexOutOfRange { index: step, len: traj.steps.len() })?;
    let action_index = rec
        .candidates
        .iter()
        .position(|c| &c.action == alt)
        .ok_or_else(|| Error::InvalidAction(format!("`{alt}` is not a candidate at step {step}")))?;
    if action_index == rec.chosen {
        return Err(Error::InvalidAction("branch action must differ from the taken action".into()));
    }
    let mut rng;
    let selection = match completion {
        Completion::Greedy => Selection::Greedy,
        Completion::Sampled { global_seed, stream } => {
            rng = episode_rng(global_seed, stream);
            Selection::Sample(&mut rng)
        }
    };
    let (suffix, final_answer, truncated) =
        policy::run_from(params, question, env, traj.stage, rec.state.clone(), Some(alt), selection)?;
    let return_from_origin = suffix.iter().map(|s| reward::aggregate(&s.rewards, &s.weights)).sum();
    Ok(Branch {
        trajectory_id,
        origin_step: step,
        question_id: traj.question_id,
        stage: traj.stage,
        origin_state: rec.state.clone(),
        candidates: rec.candidates.clone(),
        action_index,
        suffix,
        final_answer,
        truncated,
        return_from_origin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairBasis {
    TrueReturn,
    RmScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub positive: Branch,
    pub negative: Branch,
    pub positive_score: f64,
    pub negative_score: f64,
    pub gap: f64,
    pub basis: PairBasis,
}

impl PreferencePair {
    /// Re-checks the stored record against `threshold`.
    pub fn satisfies(&self, threshold: f64) -> bool {
        self.gap >= threshold
            && self.gap == self.positive_score - self.negative_score
            && self.positive.origin() == self.negative.origin()
            && self.positive.action_index != self.negative.action_index
    }

    pub fn summary(&self) -> PairSummary {
        let (trajectory_id, origin_step) = self.positive.origin();
        PairSummary {
            trajectory_id,
            origin_step,
            question_id: self.positive.question_id,
            stage: self.positive.stage,
            positive: self.positive.action().clone(),
            negative: self.negative.action().clone(),
            positive_score: self.positive_score,
            negative_score: self.negative_score,
            gap: self.gap,
            basis: self.basis,
        }
    }
}

/// Branch-free record of a pair, as written to pair logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub trajectory_id: u64,
    pub origin_step: usize,
    pub question_id: u64,
    pub stage: StageId,
    pub positive: Action,
    pub negative: Action,
    pub positive_score: f64,
    pub negative_score: f64,
    pub gap: f64,
    pub basis: PairBasis,
}

/// Groups branches by origin, in `(trajectory id, step)` order.
pub fn group_by_origin(branches: &[Branch]) -> BTreeMap<(u64, usize), Vec<&Branch>> {
    let mut groups: BTreeMap<(u64, usize), Vec<&Branch>> = BTreeMap::new();
    for b in branches {
        groups.entry(b.origin()).or_default().push(b);
    }
    groups
}

fn max_min_pairs(branches: &[Branch], scores: &[f64], threshold: f64, basis: PairBasis) -> Vec<PreferencePair> {
    let mut groups: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (i, b) in branches.iter().enumerate() {
        groups.entry(b.origin()).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, group) in groups {
        if group.len() < 2 {
            continue;
        }
        let (mut hi, mut lo) = (group[0], group[0]);
        for &i in &group {
            if scores[i] > scores[hi] {
                hi = i;
            }
            if scores[i] < scores[lo] {
                lo = i;
            }
        }
        let gap = scores[hi] - scores[lo];
        if hi == lo || gap < threshold || branches[hi].action_index == branches[lo].action_index {
            continue;
        }
        out.push(PreferencePair {
            positive: branches[hi].clone(),
            negative: branches[lo].clone(),
            positive_score: scores[hi],
            negative_score: scores[lo],
            gap,
            basis,
        });
    }
    out
}

/// Every trajectory step as a branch, with trajectory ids taken from slice positions.
pub fn original_branches(trajectories: &[Trajectory]) -> Result<Vec<Branch>> {
    let mut out = Vec::new();
    for (id, traj) in trajectories.iter().enumerate() {
        for step in 0..traj.len() {
            out.push(Branch::from_trajectory(id as u64, traj, step)?);
        }
    }
    Ok(out)
}

/// Pairs for reward-model training: highest vs. lowest true return per origin,
/// kept when the gap reaches `delta`.
pub fn extract_rm_pairs(trajectories: &[Trajectory], alternatives: &[Branch], delta: f64) -> Result<Vec<PreferencePair>> {
    let mut all = original_branches(trajectories)?;
    all.extend_from_slice(alternatives);
    Ok(extract_rm_pairs_from(&all, delta))
}

pub fn extract_rm_pairs_from(branches: &[Branch], delta: f64) -> Vec<PreferencePair> {
    let scores: Vec<f64> = branches.iter().map(|b| b.return_from_origin).collect();
    max_min_pairs(branches, &scores, delta, PairBasis::TrueReturn)
}

/// Pairs for the policy update: top vs. bottom mean reward-model score per
/// origin, kept when the gap reaches `margin`.
pub fn extract_policy_pairs(branches: &[Branch], rm: &RmParams<f64>, rm_embed_dim: usize, margin: f64) -> Result<Vec<PreferencePair>> {
    let scores = branches
        .iter()
        .map(|b| {
            let enc = reward_model::encode_prefix(b, rm_embed_dim)?;
            reward_model::mean_score(rm, &enc.values)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(max_min_pairs(branches, &scores, margin, PairBasis::RmScore))
}
