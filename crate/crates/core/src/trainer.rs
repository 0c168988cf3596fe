//! Two-stage training loop: rollouts, sibling branches, one reward-model epoch
//! and E DPO epochs per cycle, with dev-set checkpoint selection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpo::{self, DpoConfig};
use crate::env::{QuestionId, QuestionInstance, World};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, MetricPair};
use crate::policy::{self, PolicyParams, RolloutEnv, Trajectory};
use crate::preference::{self, Branch, Completion, PairSummary, PreferencePair};
use crate::reward_model::{self, HeadTargets, RmParams};
use crate::schedule::StageId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Episodes rolled out per cycle.
    pub episodes_per_cycle: usize,
    /// Rollouts per sampled question.
    pub rollouts: usize,
    pub rm_lr: f64,
    pub rm_batch_size: usize,
    pub rm_embed_dim: usize,
    pub rm_head_targets: HeadTargets,
    /// Single shared head instead of seven independent ones.
    pub rm_tied: bool,
    pub dpo: DpoConfig,
    pub delta_rm: f64,
    pub delta_policy: f64,
    pub max_cycles: usize,
    pub early_stop_patience: usize,
    pub stall_tolerance: f64,
    pub dev_fraction: f64,
    /// Set from the experiment's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes_per_cycle: 256,
            rollouts: 1,
            rm_lr: 10.0,
            rm_batch_size: 32,
            rm_embed_dim: 32,
            rm_head_targets: HeadTargets::Shared,
            rm_tied: false,
            dpo: DpoConfig::default(),
            delta_rm: 0.3,
            delta_policy: 0.2,
            max_cycles: 10,
            early_stop_patience: 2,
            stall_tolerance: 1e-3,
            dev_fraction: 0.2,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.episodes_per_cycle", self.episodes_per_cycle),
            ("train.rollouts", self.rollouts),
            ("train.rm_batch_size", self.rm_batch_size),
            ("train.max_cycles", self.max_cycles),
            ("train.early_stop_patience", self.early_stop_patience),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.rm_embed_dim < crate::embed::MIN_DIM {
            return Err(Error::config("train.rm_embed_dim", "must be at least 8"));
        }
        if !(self.rm_lr >= 0.0 && self.rm_lr.is_finite()) {
            return Err(Error::config("train.rm_lr", "must be finite and non-negative"));
        }
        for (field, v) in [("train.delta_rm", self.delta_rm), ("train.delta_policy", self.delta_policy)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if !(self.stall_tolerance >= 0.0) {
            return Err(Error::config("train.stall_tolerance", "must be non-negative"));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::config("train.dev_fraction", "must lie strictly between 0 and 1"));
        }
        self.dpo.validate()
    }

    pub fn rm_dim(&self) -> usize {
        self.rm_embed_dim + policy::FEATURE_DIM
    }

    pub fn initial_rm(&self) -> RmParams<f64> {
        RmParams { tied: self.rm_tied, ..RmParams::zeros(self.rm_dim()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub policy: PolicyParams,
    pub rm: RmParams<f64>,
    pub stage: StageId,
    pub cycle: usize,
    pub dev: EvalReport,
}

/// A rolled-out episode with its globally unique id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: u64,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub stage: StageId,
    pub cycle: usize,
    pub episodes: Vec<Episode>,
    pub branches: usize,
    pub rm_pairs: Vec<PairSummary>,
    pub policy_pairs: Vec<PairSummary>,
    pub rm_loss: Option<f64>,
    pub dpo_curve: Vec<f64>,
    pub policy: PolicyParams,
    pub rm: RmParams<f64>,
    pub dev: EvalReport,
}

impl CycleRecord {
    pub fn dpo_loss(&self) -> Option<f64> {
        self.dpo_curve.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub best: Checkpoint,
    pub history: Vec<CycleRecord>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumResult {
    pub discovery: StageResult,
    pub refinement: StageResult,
}

impl CurriculumResult {
    pub fn best(&self) -> &Checkpoint {
        &self.refinement.best
    }

    pub fn stages(&self) -> [&StageResult; 2] {
        [&self.discovery, &self.refinement]
    }
}

/// Stops once dev EM fails to beat the best so far by more than `tolerance`
/// for `patience` consecutive cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    tolerance: f64,
    best: f64,
    stalls: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, tolerance: f64) -> Self {
        EarlyStopper { patience, tolerance, best: f64::NEG_INFINITY, stalls: 0 }
    }

    /// Records a cycle's dev EM; true means stop.
    pub fn observe(&mut self, em: f64) -> bool {
        if em > self.best + self.tolerance {
            self.stalls = 0;
        } else {
            self.stalls += 1;
        }
        self.best = self.best.max(em);
        self.stalls >= self.patience
    }
}

/// Train/dev partition of question ids by seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<QuestionId>,
    pub dev: Vec<QuestionId>,
}

pub fn split_questions(world: &World, dev_fraction: f64, seed: u64) -> Result<Split> {
    let mut ids: Vec<QuestionId> = world.questions.iter().map(|q| q.question_id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = ((ids.len() as f64) * dev_fraction).round() as usize;
    if n_dev == 0 || n_dev >= ids.len() {
        return Err(Error::Empty("train or dev split"));
    }
    let train = ids.split_off(n_dev);
    Ok(Split { train, dev: ids })
}

/// Score of a finished episode: answer metrics when answerable, refusal otherwise.
pub fn episode_metrics(traj: &Trajectory, question: &QuestionInstance) -> MetricPair {
    if question.answerable {
        MetricPair::score(traj.final_answer.as_deref().unwrap_or(""), &question.gold_answer)
    } else if traj.refused() {
        MetricPair { em: 1, f1: 1.0 }
    } else {
        MetricPair { em: 0, f1: 0.0 }
    }
}

/// Metrics over finished episodes paired with their questions.
pub fn report(episodes: &[(&Trajectory, &QuestionInstance)]) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Empty("question set"));
    }
    let (mut em, mut f1, mut refused, mut steps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (traj, q) in episodes {
        steps.push(traj.len() as f64);
        if q.answerable {
            let m = episode_metrics(traj, q);
            em.push(f64::from(m.em));
            f1.push(m.f1);
        } else {
            refused.push(if traj.refused() { 1.0 } else { 0.0 });
        }
    }
    Ok(EvalReport {
        em: metrics::mean(&em),
        f1: metrics::mean(&f1),
        avg_steps: metrics::mean(&steps),
        refusal_accuracy: metrics::mean(&refused),
        answerable: em.len(),
        unanswerable: refused.len(),
        total: episodes.len(),
    })
}

/// One episode per question; greedy selection consumes no randomness.
pub fn episodes(
    params: &PolicyParams,
    questions: &[&QuestionInstance],
    env: &RolloutEnv<'_>,
    stage: StageId,
    greedy: bool,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    questions
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            if greedy {
                policy::greedy_episode(params, q, env, stage)
            } else {
                policy::rollout(params, q, env, stage, seed, i as u64)
            }
        })
        .collect()
}

pub fn evaluate(
    params: &PolicyParams,
    questions: &[&QuestionInstance],
    env: &RolloutEnv<'_>,
    stage: StageId,
    greedy: bool,
    seed: u64,
) -> Result<EvalReport> {
    let trajs = episodes(params, questions, env, stage, greedy, seed)?;
    let paired: Vec<(&Trajectory, &QuestionInstance)> = trajs.iter().zip(questions.iter().copied()).collect();
    report(&paired)
}

/// Dev questions of `world` under the split used by training.
pub fn dev_questions<'w>(world: &'w World, cfg: &TrainConfig) -> Result<Vec<&'w QuestionInstance>> {
    let split = split_questions(world, cfg.dev_fraction, cfg.seed)?;
    lookup(world, &split.dev)
}

fn stage_index(stage: StageId) -> u64 {
    match stage {
        StageId::Discovery => 0,
        StageId::Refinement => 1,
    }
}

fn episode_id(stage: StageId, cycle: usize, slot: usize) -> u64 {
    (stage_index(stage) << 40) | ((cycle as u64) << 24) | slot as u64
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn lookup<'w>(world: &'w World, ids: &[QuestionId]) -> Result<Vec<&'w QuestionInstance>> {
    ids.iter().map(|&id| world.question(id)).collect()
}

/// One untaken alternative per visited state, each completed by a sampled run.
pub fn generate_branches(
    episodes: &[Episode],
    params: &PolicyParams,
    world: &World,
    env: &RolloutEnv<'_>,
    seed: u64,
) -> Result<Vec<Branch>> {
    let per_episode = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let traj = &ep.trajectory;
            let question = world.question(traj.question_id)?;
            let mut out = Vec::new();
            for (s, rec) in traj.steps.iter().enumerate() {
                if rec.candidates.len() < 2 {
                    continue;
                }
                let stream = (ep.episode_id << 8) | s as u64;
                let mut rng = policy::episode_rng(mix(seed, 1), stream);
                let mut alt = rng.gen_range(0..rec.candidates.len() - 1);
                if alt >= rec.chosen {
                    alt += 1;
                }
                let completion = Completion::Sampled { global_seed: mix(seed, 2), stream };
                let action = &rec.candidates[alt].action;
                out.push(preference::branch(i as u64, traj, s, action, params, question, env, completion)?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Runs cycles of one curriculum stage from the given policy and reward model.
pub fn run_stage(
    stage: StageId,
    init_policy: &PolicyParams,
    init_rm: &RmParams<f64>,
    cfg: &TrainConfig,
    world: &World,
    env: &RolloutEnv<'_>,
    split: &Split,
) -> Result<StageResult> {
    cfg.validate()?;
    if split.train.is_empty() || split.dev.is_empty() {
        return Err(Error::Empty("train or dev split"));
    }
    let train = lookup(world, &split.train)?;
    let dev = lookup(world, &split.dev)?;
    let mut policy_params = init_policy.clone();
    let mut rm = init_rm.clone();
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience, cfg.stall_tolerance);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;
    let mut order: Vec<usize> = Vec::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 3 + stage_index(stage)));

    for cycle in 0..cfg.max_cycles {
        // questions are drawn without replacement until the split is exhausted
        let n_questions = cfg.episodes_per_cycle.div_ceil(cfg.rollouts);
        let mut picked = Vec::with_capacity(n_questions);
        while picked.len() < n_questions {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut order_rng);
            }
            picked.push(order.pop().unwrap());
        }
        let slots: Vec<(usize, &QuestionInstance)> = (0..cfg.episodes_per_cycle)
            .map(|slot| (slot, train[picked[slot / cfg.rollouts]]))
            .collect();
        let episodes = slots
            .par_iter()
            .map(|&(slot, q)| {
                let id = episode_id(stage, cycle, slot);
                let trajectory = policy::rollout(&policy_params, q, env, stage, cfg.seed, id)?;
                Ok(Episode { episode_id: id, trajectory })
            })
            .collect::<Result<Vec<_>>>()?;

        let cycle_seed = mix(cfg.seed, episode_id(stage, cycle, 0) + 17);
        let alternatives = generate_branches(&episodes, &policy_params, world, env, cycle_seed)?;
        let trajectories: Vec<Trajectory> = episodes.iter().map(|e| e.trajectory.clone()).collect();
        let mut branches = preference::original_branches(&trajectories)?;
        branches.extend(alternatives);

        let rm_pairs = preference::extract_rm_pairs_from(&branches, cfg.delta_rm);
        let rm_loss = if rm_pairs.is_empty() {
            None
        } else {
            let examples = reward_model::encode_pairs(&rm_pairs, cfg.rm_embed_dim, cfg.rm_head_targets)?;
            let (next, loss) = reward_model::rm_train_epoch(&rm, &examples, cfg.rm_lr, cfg.rm_batch_size, cycle_seed)?;
            rm = next;
            Some(loss)
        };

        let policy_pairs = preference::extract_policy_pairs(&branches, &rm, cfg.rm_embed_dim, cfg.delta_policy)?;
        let dpo_curve = if policy_pairs.is_empty() {
            Vec::new()
        } else {
            let (next, curve) = dpo::dpo_train(&policy_params, &policy_pairs, &cfg.dpo, env.policy.temperature, cycle_seed)?;
            policy_params = next;
            curve
        };

        let dev_report = evaluate(&policy_params, &dev, env, stage, true, 0)?;
        if best.as_ref().is_none_or(|b| dev_report.em > b.dev.em) {
            best = Some(Checkpoint { policy: policy_params.clone(), rm: rm.clone(), stage, cycle, dev: dev_report });
        }
        history.push(CycleRecord {
            stage,
            cycle,
            episodes,
            branches: branches.len(),
            rm_pairs: rm_pairs.iter().map(PreferencePair::summary).collect(),
            policy_pairs: policy_pairs.iter().map(PreferencePair::summary).collect(),
            rm_loss,
            dpo_curve,
            policy: policy_params.clone(),
            rm: rm.clone(),
            dev: dev_report,
        });
        if stopper.observe(dev_report.em) && cycle + 1 < cfg.max_cycles {
            stopped_early = true;
            break;
        }
    }
    Ok(StageResult { best: best.expect("max_cycles is positive"), history, stopped_early })
}

/// Discovery, then Refinement from Discovery's best policy and reward model.
pub fn run_curriculum(cfg: &TrainConfig, world: &World, env: &RolloutEnv<'_>) -> Result<CurriculumResult> {
    cfg.validate()?;
    let split = split_questions(world, cfg.dev_fraction, cfg.seed)?;
    let discovery = run_stage(StageId::Discovery, &PolicyParams::zeros(), &cfg.initial_rm(), cfg, world, env, &split)?;
    let (p, r) = (discovery.best.policy.clone(), discovery.best.rm.clone());
    let refinement = run_stage(StageId::Refinement, &p, &r, cfg, world, env, &split)?;
    Ok(CurriculumResult { discovery, refinement })
}
