//! Linear-softmax policy over a finite, state-dependent candidate set.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{self, Embedding};
use crate::env::{self, Action, DocId, EpisodeState, Fact, QuestionInstance, World};
use crate::error::{Error, Result};
use crate::reward::{self, RewardConfig, RewardContext, RewardVector};
use crate::scalar::{log_softmax, Real};
use crate::schedule::{self, ScheduleConfig, StageId, WeightVector};

pub const FEATURE_NAMES: [&str; 19] = [
    "bias",
    "progress",
    "is_search",
    "is_backtrack",
    "is_answer",
    "is_refuse",
    "search_overlap",
    "search_load",
    "search_last_novelty",
    "search_frontier",
    "search_restart",
    "answer_verifier",
    "answer_grounded",
    "answer_progress",
    "refuse_verifier",
    "refuse_progress",
    "refuse_stuck",
    "backtrack_count",
    "backtrack_last_novelty",
];

pub const FEATURE_DIM: usize = FEATURE_NAMES.len();

mod f {
    pub const BIAS: usize = 0;
    pub const PROGRESS: usize = 1;
    pub const IS_SEARCH: usize = 2;
    pub const SEARCH_OVERLAP: usize = 6;
    pub const SEARCH_LOAD: usize = 7;
    pub const SEARCH_LAST_NOVELTY: usize = 8;
    pub const SEARCH_FRONTIER: usize = 9;
    pub const SEARCH_RESTART: usize = 10;
    pub const ANSWER_VERIFIER: usize = 11;
    pub const ANSWER_GROUNDED: usize = 12;
    pub const ANSWER_PROGRESS: usize = 13;
    pub const REFUSE_VERIFIER: usize = 14;
    pub const REFUSE_PROGRESS: usize = 15;
    pub const REFUSE_STUCK: usize = 16;
    pub const BACKTRACK_COUNT: usize = 17;
    pub const BACKTRACK_LAST_NOVELTY: usize = 18;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAction {
    pub action: Action,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros() -> Self {
        PolicyParams { weights: vec![0.0; FEATURE_DIM], version: 0 }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Next snapshot in the lineage with new weights.
    pub fn successor(&self, weights: Vec<f64>) -> Self {
        PolicyParams { weights, version: self.version + 1 }
    }

    pub fn named(&self) -> Vec<(String, f64)> {
        FEATURE_NAMES.iter().map(|n| n.to_string()).zip(self.weights.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Maximum number of Search candidates per state.
    pub candidate_limit: usize,
    pub temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { candidate_limit: 8, temperature: 1.0 }
    }
}

/// Static inputs shared by every rollout in a run.
#[derive(Debug, Clone, Copy)]
pub struct RolloutEnv<'a> {
    pub world: &'a World,
    pub schedule: &'a ScheduleConfig<f64>,
    pub policy: PolicyConfig,
    pub reward: RewardConfig,
}

impl RolloutEnv<'_> {
    pub fn t_max(&self) -> usize {
        self.schedule.t_max
    }
}

/// Agent-observable summary of a state.
struct Observation<'q> {
    progress: f64,
    enough_evidence: bool,
    question_entities: Vec<&'q str>,
    attribute: Option<&'q str>,
    query_embeddings: Vec<Embedding<f64>>,
    frontier: Vec<String>,
    grounded_answers: Vec<String>,
    ungrounded_answers: Vec<String>,
    load: f64,
    last_novelty: f64,
    backtracks: f64,
}

impl<'q> Observation<'q> {
    fn new(state: &EpisodeState, question: &'q QuestionInstance, env: &RolloutEnv<'_>) -> Result<Self> {
        let world = env.world;
        let progress = schedule::progress::<f64>(state.t.min(env.t_max()), env.t_max())?;
        let question_entities = question.entities();
        let attribute = question.attribute();

        let query_embeddings = state
            .sub_queries
            .iter()
            .map(|q| embed::embed_text(q, world.embed_dim))
            .collect::<Result<Vec<_>>>()?;
        let queried_tokens: HashSet<String> =
            state.sub_queries.iter().flat_map(|q| q.split_whitespace().map(str::to_owned)).collect();

        let evidence: Vec<&env::Document> = state
            .retrieved_sets
            .iter()
            .flatten()
            .filter_map(|&id| world.doc(id))
            .collect();

        // Entities reachable from the question by following links forward.
        let mut reached: BTreeSet<String> = question_entities.iter().map(|s| s.to_string()).collect();
        loop {
            let before = reached.len();
            for d in &evidence {
                if let Some(Fact::Link { subject, object }) = d.fact() {
                    if reached.contains(subject) {
                        reached.insert(object.to_string());
                    }
                }
            }
            if reached.len() == before {
                break;
            }
        }
        let frontier: Vec<String> = reached.iter().filter(|e| !queried_tokens.contains(*e)).cloned().collect();

        let mut grounded_answers = Vec::new();
        let mut ungrounded_answers = Vec::new();
        for d in &evidence {
            if let Some(Fact::Attribute { subject, attribute: a, value }) = d.fact() {
                if Some(a) != attribute {
                    continue;
                }
                let grounded = reached.contains(subject) && !question_entities.contains(&subject);
                let bucket = if grounded { &mut grounded_answers } else { &mut ungrounded_answers };
                if !bucket.iter().any(|v| v == value) {
                    bucket.push(value.to_string());
                }
            }
        }

        let distinct: BTreeSet<DocId> = state.evidence();
        let load = distinct.len() as f64 / (world.top_k as f64 * state.t.max(1) as f64);
        let last_novelty = match state.retrieved_sets.split_last() {
            Some((last, earlier)) if !last.is_empty() => {
                let seen: HashSet<DocId> = earlier.iter().flatten().copied().collect();
                last.iter().filter(|d| !seen.contains(d)).count() as f64 / last.len() as f64
            }
            _ => 0.0,
        };

        Ok(Observation {
            progress,
            enough_evidence: env::verifier(state, question),
            question_entities,
            attribute,
            query_embeddings,
            frontier,
            grounded_answers,
            ungrounded_answers,
            load,
            last_novelty,
            backtracks: state.backtracks() as f64 / (state.t + 1) as f64,
        })
    }

    fn features(&self, action: &Action, embed_dim: usize) -> Result<Vec<f64>> {
        let mut x = vec![0.0; FEATURE_DIM];
        x[f::BIAS] = 1.0;
        x[f::PROGRESS] = self.progress;
        let kind = action.kind();
        x[f::IS_SEARCH + kind as usize] = 1.0;
        let verdict = f64::from(u8::from(self.enough_evidence));
        match action {
            Action::Search(q) => {
                let e: Embedding<f64> = embed::embed_text(q, embed_dim)?;
                let mut overlap: f64 = 0.0;
                for prev in &self.query_embeddings {
                    overlap = overlap.max(embed::cosine(&e, prev)?);
                }
                x[f::SEARCH_OVERLAP] = overlap;
                x[f::SEARCH_LOAD] = self.load;
                x[f::SEARCH_LAST_NOVELTY] = self.last_novelty;
                let toks: Vec<&str> = q.split_whitespace().collect();
                x[f::SEARCH_FRONTIER] = f64::from(u8::from(toks.iter().any(|t| self.frontier.iter().any(|f| f == t))));
                let question_only = toks
                    .iter()
                    .all(|t| self.question_entities.contains(t) || Some(*t) == self.attribute || !env::is_entity(t));
                x[f::SEARCH_RESTART] = f64::from(u8::from(question_only));
            }
            Action::Answer(a) => {
                x[f::ANSWER_VERIFIER] = verdict;
                x[f::ANSWER_GROUNDED] = f64::from(u8::from(self.grounded_answers.iter().any(|g| g == a)));
                x[f::ANSWER_PROGRESS] = self.progress;
            }
            Action::Refuse => {
                x[f::REFUSE_VERIFIER] = verdict;
                x[f::REFUSE_PROGRESS] = self.progress;
                x[f::REFUSE_STUCK] = f64::from(u8::from(self.grounded_answers.is_empty() && self.frontier.is_empty()));
            }
            Action::Backtrack => {
                x[f::BACKTRACK_COUNT] = self.backtracks;
                x[f::BACKTRACK_LAST_NOVELTY] = self.last_novelty;
            }
        }
        Ok(x)
    }

    fn search_queries(&self, question: &QuestionInstance, state: &EpisodeState, world: &World, limit: usize) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let push = |q: String, out: &mut Vec<String>| {
            if !q.trim().is_empty() && !out.contains(&q) {
                out.push(q);
            }
        };
        push(question.question_text.clone(), &mut out);
        for e in &self.question_entities {
            push(e.to_string(), &mut out);
        }
        // entities from retrieved documents, most recent retrieval first
        let mut retrieved_entities: Vec<String> = Vec::new();
        for set in state.retrieved_sets.iter().rev() {
            for d in set.iter().filter_map(|&id| world.doc(id)) {
                for tok in d.text.split_whitespace().filter(|t| env::is_entity(t)) {
                    if !retrieved_entities.iter().any(|e| e == tok) {
                        retrieved_entities.push(tok.to_string());
                    }
                }
            }
        }
        for e in &retrieved_entities {
            push(e.clone(), &mut out);
        }
        for qe in &self.question_entities {
            for e in &retrieved_entities {
                if e != qe {
                    push(format!("{qe} {e}"), &mut out);
                }
            }
        }
        out.truncate(limit);
        out
    }
}

/// Candidate set for a non-terminal state, with features.
pub fn candidate_actions(
    state: &EpisodeState,
    question: &QuestionInstance,
    env: &RolloutEnv<'_>,
) -> Result<Vec<CandidateAction>> {
    if state.finished {
        return Err(Error::TerminalState);
    }
    let obs = Observation::new(state, question, env)?;
    let mut actions: Vec<Action> = obs
        .search_queries(question, state, env.world, env.policy.candidate_limit)
        .into_iter()
        .map(Action::Search)
        .collect();
    if !state.sub_queries.is_empty() {
        actions.push(Action::Backtrack);
    }
    for a in obs.grounded_answers.iter().chain(&obs.ungrounded_answers) {
        let answer = Action::Answer(a.clone());
        if !actions.contains(&answer) {
            actions.push(answer);
        }
    }
    actions.push(Action::Refuse);
    actions
        .into_iter()
        .map(|action| {
            let features = obs.features(&action, env.world.embed_dim)?;
            Ok(CandidateAction { action, features })
        })
        .collect()
}

/// Features of a single action at `state`.
pub fn featurize(state: &EpisodeState, action: &Action, question: &QuestionInstance, env: &RolloutEnv<'_>) -> Result<Vec<f64>> {
    Observation::new(state, question, env)?.features(action, env.world.embed_dim)
}

pub fn logits<T: Real>(weights: &[T], candidates: &[Vec<T>], temperature: T) -> Vec<T> {
    candidates
        .iter()
        .map(|x| x.iter().zip(weights).fold(T::zero(), |acc, (&a, &b)| acc + a * b) / temperature)
        .collect()
}

pub fn log_probs<T: Real>(weights: &[T], candidates: &[Vec<T>], temperature: T) -> Vec<T> {
    log_softmax(&logits(weights, candidates, temperature))
}

/// Exact log-probability of `chosen` under the softmax policy.
pub fn log_prob(params: &PolicyParams, candidates: &[CandidateAction], chosen: usize, temperature: f64) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if chosen >= candidates.len() {
        return Err(Error::IndexOutOfRange { index: chosen, len: candidates.len() });
    }
    if temperature <= 0.0 {
        return Err(Error::config("policy.temperature", "must be positive"));
    }
    let feats: Vec<Vec<f64>> = candidates.iter().map(|c| c.features.clone()).collect();
    Ok(log_probs(&params.weights, &feats, temperature)[chosen])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: EpisodeState,
    pub candidates: Vec<CandidateAction>,
    pub chosen: usize,
    pub retrieved: Vec<DocId>,
    pub enough_evidence: bool,
    pub log_prob: f64,
    pub rewards: RewardVector<f64>,
    pub weights: WeightVector<f64>,
    pub aggregate: f64,
}

impl StepRecord {
    pub fn action(&self) -> &Action {
        &self.candidates[self.chosen].action
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: u64,
    pub stage: StageId,
    pub steps: Vec<StepRecord>,
    pub final_answer: Option<String>,
    pub truncated: bool,
    pub total_return: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn refused(&self) -> bool {
        matches!(self.steps.last().map(StepRecord::action), Some(Action::Refuse))
    }
}

/// How the next action is picked.
pub enum Selection<'r> {
    Greedy,
    Sample(&'r mut ChaCha8Rng),
}

/// Per-episode RNG: one ChaCha stream per episode id.
pub fn episode_rng(global_seed: u64, episode_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(episode_id);
    rng
}

fn pick(log_p: &[f64], selection: &mut Selection<'_>) -> usize {
    match selection {
        Selection::Greedy => {
            let mut best = 0;
            for (i, &lp) in log_p.iter().enumerate() {
                if lp > log_p[best] {
                    best = i;
                }
            }
            best
        }
        Selection::Sample(rng) => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &lp) in log_p.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    return i;
                }
            }
            log_p.len() - 1
        }
    }
}

/// Runs an episode from `start` until it terminates. When `forced` is set, the
/// first action is that candidate instead of a policy choice.
pub fn run_from(
    params: &PolicyParams,
    question: &QuestionInstance,
    env: &RolloutEnv<'_>,
    stage: StageId,
    start: EpisodeState,
    forced: Option<&Action>,
    mut selection: Selection<'_>,
) -> Result<(Vec<StepRecord>, Option<String>, bool)> {
    let t_max = env.t_max();
    let temperature = env.policy.temperature;
    let mut state = start;
    let mut steps = Vec::new();
    let mut forced = forced;
    loop {
        let candidates = candidate_actions(&state, question, env)?;
        let feats: Vec<Vec<f64>> = candidates.iter().map(|c| c.features.clone()).collect();
        let log_p = log_probs(&params.weights, &feats, temperature);
        let chosen = match forced.take() {
            Some(a) => candidates
                .iter()
                .position(|c| &c.action == a)
                .ok_or_else(|| Error::InvalidAction(format!("`{a}` is not a candidate")))?,
            None => pick(&log_p, &mut selection),
        };
        if !log_p[chosen].is_finite() {
            return Err(Error::NonFinite("log_prob"));
        }
        let action = candidates[chosen].action.clone();
        let outcome = env::step(&state, &action, env.world, t_max)?;
        let enough_evidence = env::verifier(&state, question);
        let progress = schedule::progress::<f64>(state.t, t_max)?;
        let ctx = RewardContext {
            state: &state,
            action: &action,
            retrieved: &outcome.retrieved,
            question,
            enough_evidence,
            progress,
            embed_dim: env.world.embed_dim,
            config: env.reward,
        };
        let rewards = reward::reward_vector(&ctx)?;
        let weights = schedule::weights_at(env.schedule, stage, state.t)?;
        let aggregate = reward::aggregate(&rewards, &weights);
        steps.push(StepRecord {
            t: state.t,
            state: state.clone(),
            candidates,
            chosen,
            retrieved: outcome.retrieved,
            enough_evidence,
            log_prob: log_p[chosen],
            rewards,
            weights,
            aggregate,
        });
        state = outcome.next_state;
        if outcome.terminal {
            let final_answer = match action {
                Action::Answer(a) => Some(a),
                _ => None,
            };
            return Ok((steps, final_answer, outcome.truncated));
        }
    }
}

pub fn assemble(question_id: u64, stage: StageId, steps: Vec<StepRecord>, final_answer: Option<String>, truncated: bool) -> Trajectory {
    let total_return = steps.iter().map(|s| s.aggregate).sum();
    Trajectory { question_id, stage, steps, final_answer, truncated, total_return }
}

/// Samples one episode from the initial state.
pub fn rollout(
    params: &PolicyParams,
    question: &QuestionInstance,
    env: &RolloutEnv<'_>,
    stage: StageId,
    global_seed: u64,
    episode_id: u64,
) -> Result<Trajectory> {
    let mut rng = episode_rng(global_seed, episode_id);
    let start = EpisodeState::initial(question.question_id);
    let (steps, answer, truncated) = run_from(params, question, env, stage, start, None, Selection::Sample(&mut rng))?;
    Ok(assemble(question.question_id, stage, steps, answer, truncated))
}

/// Argmax episode; consumes no randomness.
pub fn greedy_episode(params: &PolicyParams, question: &QuestionInstance, env: &RolloutEnv<'_>, stage: StageId) -> Result<Trajectory> {
    let start = EpisodeState::initial(question.question_id);
    let (steps, answer, truncated) = run_from(params, question, env, stage, start, None, Selection::Greedy)?;
    Ok(assemble(question.question_id, stage, steps, answer, truncated))
}
