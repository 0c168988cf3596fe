//! Step-level reward vector, weighted aggregate and episode returns.

use serde::{Deserialize, Serialize};

use crate::embed::{self, Embedding};
use crate::env::{Action, DocId, EpisodeState, QuestionInstance};
use crate::error::{Error, Result};
use crate::metrics;
use crate::policy::Trajectory;
use crate::scalar::Real;
use crate::schedule::{Component, WeightVector};

/// The progress ratio from which repeated searches start to cost.
pub const LATE_SEARCH_PROGRESS: f64 = 0.3;

/// Seven reward components for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardVector<T> {
    #[serde(rename = "ret")]
    pub retrieval: T,
    #[serde(rename = "dup")]
    pub overlap: T,
    #[serde(rename = "bt")]
    pub backtrack: T,
    #[serde(rename = "ref")]
    pub refusal: T,
    #[serde(rename = "step")]
    pub step: T,
    #[serde(rename = "ans")]
    pub answer: T,
    #[serde(rename = "act")]
    pub action: T,
}

impl<T: Real> RewardVector<T> {
    pub fn to_array(&self) -> [T; 7] {
        [self.retrieval, self.overlap, self.backtrack, self.refusal, self.step, self.answer, self.action]
    }

    pub fn from_array(a: [T; 7]) -> Self {
        RewardVector {
            retrieval: a[0],
            overlap: a[1],
            backtrack: a[2],
            refusal: a[3],
            step: a[4],
            answer: a[5],
            action: a[6],
        }
    }

    pub fn get(&self, c: Component) -> T {
        self.to_array()[c.index()]
    }
}

/// Tunable knobs of the reward definitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Magnitude of the per-step cost; `r_step = -step_cost`.
    pub step_cost: f64,
    /// Similarity threshold for the late-search penalty; 0 fires on any overlap.
    pub tau_dup: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { step_cost: 1.0, tau_dup: 0.0 }
    }
}

/// Everything needed to score one transition.
#[derive(Debug, Clone, Copy)]
pub struct RewardContext<'a, T> {
    /// State before the action.
    pub state: &'a EpisodeState,
    pub action: &'a Action,
    /// Documents returned by the search; empty for other actions.
    pub retrieved: &'a [DocId],
    pub question: &'a QuestionInstance,
    /// Verifier verdict on the pre-action evidence.
    pub enough_evidence: bool,
    pub progress: T,
    pub embed_dim: usize,
    pub config: RewardConfig,
}

pub fn retrieval_bonus<T: Real>(ctx: &RewardContext<'_, T>) -> T {
    match ctx.action {
        Action::Search(_) => {
            if ctx.retrieved.iter().any(|d| ctx.question.gold_doc_ids.contains(d)) {
                T::one()
            } else {
                -T::one()
            }
        }
        _ => T::zero(),
    }
}

/// Negated maximum cosine between the new query and every earlier sub-query.
pub fn overlap_penalty<T: Real>(ctx: &RewardContext<'_, T>) -> Result<T> {
    let Action::Search(q) = ctx.action else { return Ok(T::zero()) };
    if ctx.state.sub_queries.is_empty() {
        return Ok(T::zero());
    }
    let current: Embedding<T> = embed::embed_text(q, ctx.embed_dim)?;
    let mut max = T::neg_infinity();
    for prev in &ctx.state.sub_queries {
        let e = embed::embed_text(prev, ctx.embed_dim)?;
        max = max.max(embed::cosine(&current, &e)?);
    }
    Ok(-max)
}

pub fn backtrack_penalty<T: Real>(ctx: &RewardContext<'_, T>) -> T {
    if matches!(ctx.action, Action::Backtrack) {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn refusal_reward<T: Real>(ctx: &RewardContext<'_, T>) -> T {
    match (ctx.action, ctx.enough_evidence) {
        (Action::Refuse, false) => T::one(),
        (Action::Refuse, true) => -T::one(),
        _ => T::zero(),
    }
}

pub fn step_cost<T: Real>(ctx: &RewardContext<'_, T>) -> T {
    -T::lit(ctx.config.step_cost)
}

/// `(EM + F1) / 2`.
pub fn answer_correctness<T: Real>(pred: &str, gold: &str) -> T {
    let em = T::from_u8(metrics::em(pred, gold)).unwrap();
    (em + metrics::f1::<T>(pred, gold)) / T::lit(2.0)
}

/// Late-search penalty given the same step's overlap value.
pub fn action_penalty<T: Real>(ctx: &RewardContext<'_, T>, overlap: T) -> T {
    match ctx.action {
        Action::Search(_) if ctx.progress >= T::lit(LATE_SEARCH_PROGRESS) => {
            if overlap < -T::lit(ctx.config.tau_dup) {
                -T::one()
            } else {
                T::zero()
            }
        }
        _ => T::zero(),
    }
}

pub fn reward_vector<T: Real>(ctx: &RewardContext<'_, T>) -> Result<RewardVector<T>> {
    let overlap = overlap_penalty(ctx)?;
    let answer = match ctx.action {
        Action::Answer(a) => answer_correctness(a, &ctx.question.gold_answer),
        _ => T::zero(),
    };
    Ok(RewardVector {
        retrieval: retrieval_bonus(ctx),
        overlap,
        backtrack: backtrack_penalty(ctx),
        refusal: refusal_reward(ctx),
        step: step_cost(ctx),
        answer,
        action: action_penalty(ctx, overlap),
    })
}

/// `R_t = sum_i w_i(t) * r_i`.
pub fn aggregate<T: Real>(rv: &RewardVector<T>, w: &WeightVector<T>) -> T {
    w.beta * rv.retrieval
        + w.gamma * rv.overlap
        + w.delta * rv.backtrack
        + w.rho * rv.refusal
        + w.eta * rv.step
        + w.kappa * rv.answer
        + w.lambda * rv.action
}

/// Per-component weighted contributions `w_i * r_i`, in component order.
pub fn weighted_components<T: Real>(rv: &RewardVector<T>, w: &WeightVector<T>) -> [T; 7] {
    let mut out = [T::zero(); 7];
    for c in Component::ALL {
        out[c.index()] = w.weight_for(c) * rv.get(c);
    }
    out
}

/// Sum of recorded step aggregates from `from_step` to the end.
pub fn episode_return(traj: &Trajectory, from_step: usize) -> Result<f64> {
    if from_step > traj.steps.len() {
        return Err(Error::IndexOutOfRange { index: from_step, len: traj.steps.len() });
    }
    Ok(traj.steps[from_step..].iter().map(|s| aggregate(&s.rewards, &s.weights)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{default_anchors, weights_at, ScheduleConfig, StageId};
    use std::collections::BTreeSet;

    fn question() -> QuestionInstance {
        QuestionInstance {
            question_id: 0,
            question_text: "which born via e1".into(),
            gold_answer: "george v".into(),
            gold_doc_ids: BTreeSet::from([10, 11]),
            answerable: true,
            hops: 2,
        }
    }

    fn ctx<'a>(
        state: &'a EpisodeState,
        action: &'a Action,
        retrieved: &'a [DocId],
        q: &'a QuestionInstance,
        verdict: bool,
        p: f64,
    ) -> RewardContext<'a, f64> {
        RewardContext {
            state,
            action,
            retrieved,
            question: q,
            enough_evidence: verdict,
            progress: p,
            embed_dim: 1 << 16,
            config: RewardConfig::default(),
        }
    }

    #[test]
    fn retrieval_bonus_cases() {
        let q = question();
        let s = EpisodeState::initial(0);
        let search = Action::Search("e1".into());
        assert_eq!(retrieval_bonus(&ctx(&s, &search, &[3, 10], &q, false, 0.0)), 1.0);
        assert_eq!(retrieval_bonus(&ctx(&s, &search, &[3, 4], &q, false, 0.0)), -1.0);
        assert_eq!(retrieval_bonus(&ctx(&s, &Action::Backtrack, &[], &q, false, 0.0)), 0.0);
    }

    #[test]
    fn overlap_cases() {
        let q = question();
        let s0 = EpisodeState::initial(0);
        let a = Action::Search("alpha beta".into());
        assert_eq!(overlap_penalty(&ctx(&s0, &a, &[], &q, false, 0.0)).unwrap(), 0.0);
        let mut s1 = s0.clone();
        s1.sub_queries.push("alpha beta".into());
        s1.retrieved_sets.push(vec![]);
        assert!((overlap_penalty(&ctx(&s1, &a, &[], &q, false, 0.0)).unwrap() + 1.0).abs() < 1e-12);
        let d = 1 << 16;
        for x in ["alpha", "beta"] {
            for y in ["gamma", "delta"] {
                assert_ne!(embed::bucket(x, d), embed::bucket(y, d));
            }
        }
        let disjoint = Action::Search("gamma delta".into());
        assert_eq!(overlap_penalty(&ctx(&s1, &disjoint, &[], &q, false, 0.0)).unwrap(), 0.0);
        assert_eq!(overlap_penalty(&ctx(&s1, &Action::Refuse, &[], &q, false, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn answer_correctness_cases() {
        assert_eq!(answer_correctness::<f64>("george v", "george v"), 1.0);
        assert!((answer_correctness::<f64>("george", "george v") - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(answer_correctness::<f64>("", "george v"), 0.0);
    }

    #[test]
    fn action_penalty_cases() {
        let q = question();
        let mut s = EpisodeState::initial(0);
        s.sub_queries.push("alpha".into());
        s.retrieved_sets.push(vec![]);
        let dup = Action::Search("alpha".into());
        let fresh = Action::Search("omega".into());
        let at = |a: &Action, p: f64| {
            let c = ctx(&s, a, &[], &q, false, p);
            action_penalty(&c, overlap_penalty(&c).unwrap())
        };
        assert_eq!(at(&dup, 0.1), 0.0);
        assert_eq!(at(&dup, 0.5), -1.0);
        assert_eq!(at(&fresh, 0.3), 0.0);
        assert_eq!(at(&dup, 0.3), -1.0);
    }

    #[test]
    fn composed_vectors() {
        let q = question();
        let s = EpisodeState::initial(0);
        let search = Action::Search("e1".into());
        let rv = reward_vector(&ctx(&s, &search, &[10], &q, false, 0.0)).unwrap();
        assert_eq!(rv.to_array(), [1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        let rv = reward_vector(&ctx(&s, &Action::Refuse, &[], &q, false, 0.0)).unwrap();
        assert_eq!(rv.to_array(), [0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0]);
        let rv = reward_vector(&ctx(&s, &Action::Backtrack, &[], &q, false, 0.0)).unwrap();
        assert_eq!(rv.to_array(), [0.0, 0.0, -1.0, 0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn aggregate_examples() {
        let cfg = ScheduleConfig::<f64>::default();
        assert_eq!(aggregate(&RewardVector::default(), &default_anchors::<f64>().start), 0.0);
        let hit = RewardVector { retrieval: 1.0, step: -1.0, ..Default::default() };
        let w0 = weights_at(&cfg, StageId::Discovery, 0).unwrap();
        assert!((aggregate(&hit, &w0) - 1.98).abs() < 1e-12);
        let refuse = RewardVector { refusal: 1.0, step: -1.0, ..Default::default() };
        let wend = weights_at(&cfg, StageId::Refinement, 20).unwrap();
        assert!((aggregate(&refuse, &wend) - 0.40).abs() < 1e-12);
        let cost = RewardVector { step: -1.0, ..Default::default() };
        assert!((aggregate(&cost, &w0) + 0.02).abs() < 1e-15);
    }

    #[test]
    fn step_cost_override() {
        let q = question();
        let s = EpisodeState::initial(0);
        let mut c = ctx(&s, &Action::Refuse, &[], &q, false, 0.0);
        assert_eq!(step_cost(&c), -1.0);
        c.config.step_cost = 0.5;
        assert_eq!(step_cost(&c), -0.5);
    }

    #[test]
    fn aggregate_is_linear_in_weights() {
        let rv = RewardVector::from_array([1.0, -0.4, 0.0, 0.0, -1.0, 0.7, -1.0]);
        let a = default_anchors::<f64>();
        let lhs = aggregate(&rv, &(a.start + a.end));
        let rhs = aggregate(&rv, &a.start) + aggregate(&rv, &a.end);
        assert!((lhs - rhs).abs() < 1e-12);
        let parts: f64 = weighted_components(&rv, &a.mid).iter().sum();
        assert!((parts - aggregate(&rv, &a.mid)).abs() < 1e-12);
    }
}
