//! On-disk formats: world files, trajectory and pair logs, checkpoints and CSV tables.
//!
//! Every writer goes through [`write_atomic`], so a crashed run never leaves a
//! half-written file behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{Action, ActionKind, DocId, Document, QuestionInstance, World, WorldConfig};
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Trajectory, FEATURE_DIM, FEATURE_NAMES};
use crate::preference::PairSummary;
use crate::reward::{self, RewardVector};
use crate::reward_model::{RmParams, HEADS, HEAD_NAMES};
use crate::schedule::{self, ScheduleConfig, ScheduleMode, StageId, WeightVector};
use crate::trainer::{self, CycleRecord};

pub const FORMAT_VERSION: u32 = 1;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str, what: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Corrupt { what: format!("{what} line {}", i + 1), reason: e.to_string() }))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(items)?)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Corrupt { what: path.display().to_string(), reason: e.to_string() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Corrupt { what: what.to_string(), reason: e.to_string() })
}

pub fn sha256_hex(chunks: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldManifest {
    pub format_version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub documents: usize,
    pub questions: usize,
    pub unanswerable: usize,
    /// Digest of the corpus and question files, in that order.
    pub sha256: String,
}

/// Serialized world: file contents plus manifest.
pub struct WorldFiles {
    pub corpus: Vec<u8>,
    pub questions: Vec<u8>,
    pub manifest: WorldManifest,
}

pub fn encode_world(world: &World, cfg: &WorldConfig) -> Result<WorldFiles> {
    let corpus = to_jsonl(&world.corpus)?;
    let questions = to_jsonl(&world.questions)?;
    let manifest = WorldManifest {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        world: cfg.clone(),
        documents: world.corpus.len(),
        questions: world.questions.len(),
        unanswerable: world.questions.iter().filter(|q| !q.answerable).count(),
        sha256: sha256_hex(&[&corpus, &questions]),
    };
    Ok(WorldFiles { corpus, questions, manifest })
}

pub fn save_world(dir: &Path, world: &World, cfg: &WorldConfig) -> Result<WorldManifest> {
    let files = encode_world(world, cfg)?;
    write_atomic(&dir.join(CORPUS_FILE), &files.corpus)?;
    write_atomic(&dir.join(QUESTIONS_FILE), &files.questions)?;
    write_json(&dir.join(MANIFEST_FILE), &files.manifest)?;
    Ok(files.manifest)
}

pub fn load_manifest(dir: &Path) -> Result<WorldManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Corrupt { what: "world".into(), reason: format!("no manifest at {}", path.display()) });
    }
    let m: WorldManifest = read_json(&path, "world manifest")?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Corrupt { what: "world manifest".into(), reason: format!("unsupported version {}", m.format_version) });
    }
    Ok(m)
}

/// Loads a world directory, checking file digests against the manifest.
pub fn load_world(dir: &Path) -> Result<(World, WorldManifest)> {
    let manifest = load_manifest(dir)?;
    let corpus_text = read_text(&dir.join(CORPUS_FILE))?;
    let questions_text = read_text(&dir.join(QUESTIONS_FILE))?;
    let digest = sha256_hex(&[corpus_text.as_bytes(), questions_text.as_bytes()]);
    if digest != manifest.sha256 {
        return Err(Error::Corrupt { what: "world".into(), reason: "file digest does not match manifest".into() });
    }
    let corpus: Vec<Document> = from_jsonl(&corpus_text, "corpus")?;
    let questions: Vec<QuestionInstance> = from_jsonl(&questions_text, "questions")?;
    if questions.is_empty() {
        return Err(Error::Empty("question file"));
    }
    for q in &questions {
        q.check()?;
    }
    let world = World::new(corpus, questions, manifest.world.top_k, manifest.world.embed_dim)?;
    Ok((world, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLine {
    pub t: usize,
    pub action_type: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub doc_ids: Vec<DocId>,
    pub reward: RewardVector<f64>,
    pub weights: WeightVector<f64>,
    pub aggregate: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryLine {
    pub episode_id: u64,
    pub question_id: u64,
    pub stage: StageId,
    pub schedule_mode: ScheduleMode,
    pub steps: Vec<StepLine>,
    pub final_answer: Option<String>,
    pub truncated: bool,
    pub em: u8,
    pub f1: f64,
}

impl TrajectoryLine {
    pub fn new(episode_id: u64, traj: &Trajectory, question: &QuestionInstance, mode: ScheduleMode) -> Self {
        let steps = traj
            .steps
            .iter()
            .map(|s| {
                let action = s.action();
                let (query, answer) = match action {
                    Action::Search(q) => (Some(q.clone()), None),
                    Action::Answer(a) => (None, Some(a.clone())),
                    _ => (None, None),
                };
                StepLine {
                    t: s.t,
                    action_type: action.kind(),
                    query,
                    answer,
                    doc_ids: s.retrieved.clone(),
                    reward: s.rewards,
                    weights: s.weights,
                    aggregate: s.aggregate,
                    log_prob: s.log_prob,
                }
            })
            .collect();
        let m = trainer::episode_metrics(traj, question);
        TrajectoryLine {
            episode_id,
            question_id: traj.question_id,
            stage: traj.stage,
            schedule_mode: mode,
            steps,
            final_answer: traj.final_answer.clone(),
            truncated: traj.truncated,
            em: m.em,
            f1: m.f1,
        }
    }

    /// Largest gap between a stored aggregate and its recomputation from the same line.
    pub fn aggregate_error(&self) -> f64 {
        self.steps.iter().map(|s| (reward::aggregate(&s.reward, &s.weights) - s.aggregate).abs()).fold(0.0, f64::max)
    }

    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.aggregate).sum()
    }
}

/// Rollout episodes of every cycle, in training order.
pub fn trajectory_lines(history: &[&CycleRecord], world: &World, mode: ScheduleMode) -> Result<Vec<TrajectoryLine>> {
    let mut out = Vec::new();
    for rec in history {
        for ep in &rec.episodes {
            let q = world.question(ep.trajectory.question_id)?;
            out.push(TrajectoryLine::new(ep.episode_id, &ep.trajectory, q, mode));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLine {
    pub cycle: usize,
    #[serde(flatten)]
    pub pair: PairSummary,
}

pub fn pair_lines(history: &[&CycleRecord]) -> Vec<PairLine> {
    history
        .iter()
        .flat_map(|rec| rec.rm_pairs.iter().chain(&rec.policy_pairs).map(|p| PairLine { cycle: rec.cycle, pair: p.clone() }))
        .collect()
}

const POLICY_KIND: &str = "policy";
const RM_KIND: &str = "reward_model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    kind: String,
    format_version: u32,
    stage: StageId,
    cycle: usize,
    params_version: u64,
    weights: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadFile {
    name: String,
    bias: f64,
    weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RmFile {
    kind: String,
    format_version: u32,
    stage: StageId,
    cycle: usize,
    embed_dim: usize,
    tied: bool,
    heads: Vec<HeadFile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedPolicy {
    pub stage: StageId,
    pub cycle: usize,
    pub params: PolicyParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedRm {
    pub stage: StageId,
    pub cycle: usize,
    pub embed_dim: usize,
    pub params: RmParams<f64>,
}

fn corrupt(what: &str, reason: impl Into<String>) -> Error {
    Error::Corrupt { what: what.to_string(), reason: reason.into() }
}

fn check_header(what: &str, kind: &str, expected: &str, version: u32) -> Result<()> {
    if kind != expected {
        return Err(corrupt(what, format!("kind `{kind}`, expected `{expected}`")));
    }
    if version != FORMAT_VERSION {
        return Err(corrupt(what, format!("unsupported format version {version}")));
    }
    Ok(())
}

pub fn encode_policy(saved: &SavedPolicy) -> Result<Vec<u8>> {
    let file = PolicyFile {
        kind: POLICY_KIND.into(),
        format_version: FORMAT_VERSION,
        stage: saved.stage,
        cycle: saved.cycle,
        params_version: saved.params.version,
        weights: saved.params.named(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn decode_policy(text: &str) -> Result<SavedPolicy> {
    const WHAT: &str = "policy checkpoint";
    let file: PolicyFile = serde_json::from_str(text).map_err(|e| corrupt(WHAT, e.to_string()))?;
    check_header(WHAT, &file.kind, POLICY_KIND, file.format_version)?;
    if file.weights.len() != FEATURE_DIM {
        return Err(corrupt(WHAT, format!("{} weights, expected {FEATURE_DIM}", file.weights.len())));
    }
    for ((name, w), expected) in file.weights.iter().zip(FEATURE_NAMES) {
        if name != expected {
            return Err(corrupt(WHAT, format!("feature `{name}` where `{expected}` was expected")));
        }
        if !w.is_finite() {
            return Err(corrupt(WHAT, format!("non-finite weight for `{name}`")));
        }
    }
    let params = PolicyParams { weights: file.weights.into_iter().map(|(_, w)| w).collect(), version: file.params_version };
    Ok(SavedPolicy { stage: file.stage, cycle: file.cycle, params })
}

pub fn save_policy(path: &Path, saved: &SavedPolicy) -> Result<()> {
    write_atomic(path, &encode_policy(saved)?)
}

pub fn load_policy(path: &Path) -> Result<SavedPolicy> {
    decode_policy(&read_text(path)?)
}

pub fn encode_rm(saved: &SavedRm) -> Result<Vec<u8>> {
    saved.params.validate()?;
    let heads = HEAD_NAMES
        .iter()
        .zip(&saved.params.heads)
        .zip(&saved.params.biases)
        .map(|((name, w), &bias)| HeadFile { name: name.to_string(), bias, weights: w.clone() })
        .collect();
    let file = RmFile {
        kind: RM_KIND.into(),
        format_version: FORMAT_VERSION,
        stage: saved.stage,
        cycle: saved.cycle,
        embed_dim: saved.embed_dim,
        tied: saved.params.tied,
        heads,
    };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn decode_rm(text: &str) -> Result<SavedRm> {
    const WHAT: &str = "reward model checkpoint";
    let file: RmFile = serde_json::from_str(text).map_err(|e| corrupt(WHAT, e.to_string()))?;
    check_header(WHAT, &file.kind, RM_KIND, file.format_version)?;
    if file.heads.len() != HEADS {
        return Err(corrupt(WHAT, format!("{} heads, expected {HEADS}", file.heads.len())));
    }
    let dim = file.embed_dim + FEATURE_DIM;
    for (h, expected) in file.heads.iter().zip(HEAD_NAMES) {
        if h.name != expected {
            return Err(corrupt(WHAT, format!("head `{}` where `{expected}` was expected", h.name)));
        }
        if h.weights.len() != dim {
            return Err(corrupt(WHAT, format!("head `{}` has {} weights, expected {dim}", h.name, h.weights.len())));
        }
    }
    let params = RmParams {
        biases: file.heads.iter().map(|h| h.bias).collect(),
        heads: file.heads.into_iter().map(|h| h.weights).collect(),
        tied: file.tied,
    };
    params.validate().map_err(|e| corrupt(WHAT, e.to_string()))?;
    Ok(SavedRm { stage: file.stage, cycle: file.cycle, embed_dim: file.embed_dim, params })
}

pub fn save_rm(path: &Path, saved: &SavedRm) -> Result<()> {
    write_atomic(path, &encode_rm(saved)?)
}

pub fn load_rm(path: &Path) -> Result<SavedRm> {
    decode_rm(&read_text(path)?)
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &to_csv(rows)?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schedule_mode: ScheduleMode,
    pub preset: String,
    pub stage: StageId,
    pub cycle: usize,
    pub episodes: usize,
    pub branches: usize,
    pub rm_pairs: usize,
    pub policy_pairs: usize,
    pub rm_loss: Option<f64>,
    pub dpo_loss: Option<f64>,
    pub dev_em: f64,
    pub dev_f1: f64,
    pub avg_steps: f64,
    pub refusal_accuracy: f64,
}

pub fn metrics_rows(history: &[&CycleRecord], mode: ScheduleMode, preset: &str) -> Vec<MetricsRow> {
    history
        .iter()
        .map(|r| MetricsRow {
            schedule_mode: mode,
            preset: preset.to_string(),
            stage: r.stage,
            cycle: r.cycle,
            episodes: r.episodes.len(),
            branches: r.branches,
            rm_pairs: r.rm_pairs.len(),
            policy_pairs: r.policy_pairs.len(),
            rm_loss: r.rm_loss,
            dpo_loss: r.dpo_loss(),
            dev_em: r.dev.em,
            dev_f1: r.dev.f1,
            avg_steps: r.dev.avg_steps,
            refusal_accuracy: r.dev.refusal_accuracy,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Rm,
    Dpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub stage: StageId,
    pub cycle: usize,
    pub loss: LossKind,
    pub epoch: usize,
    pub value: f64,
}

pub fn loss_rows(history: &[&CycleRecord]) -> Vec<LossRow> {
    let mut rows = Vec::new();
    for r in history {
        if let Some(v) = r.rm_loss {
            rows.push(LossRow { stage: r.stage, cycle: r.cycle, loss: LossKind::Rm, epoch: 0, value: v });
        }
        for (epoch, &v) in r.dpo_curve.iter().enumerate() {
            rows.push(LossRow { stage: r.stage, cycle: r.cycle, loss: LossKind::Dpo, epoch, value: v });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub schedule_mode: ScheduleMode,
    pub stage: StageId,
    pub t: usize,
    pub p: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub delta: f64,
    pub rho: f64,
    pub eta: f64,
    pub kappa: f64,
}

/// The schedule evaluated at every step of both stages.
pub fn weight_rows(cfg: &ScheduleConfig<f64>) -> Result<Vec<WeightRow>> {
    let mut rows = Vec::new();
    for stage in StageId::ALL {
        for t in 0..=cfg.t_max {
            let w = schedule::weights_at(cfg, stage, t)?;
            rows.push(WeightRow {
                schedule_mode: cfg.mode,
                stage,
                t,
                p: schedule::progress(t, cfg.t_max)?,
                beta: w.beta,
                lambda: w.lambda,
                gamma: w.gamma,
                delta: w.delta,
                rho: w.rho,
                eta: w.eta,
                kappa: w.kappa,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCountRow {
    pub label: String,
    pub steps: usize,
    pub episodes: usize,
}

/// Histogram of episode lengths, one row per observed length.
pub fn step_count_rows(label: &str, trajectories: &[Trajectory]) -> Vec<StepCountRow> {
    let mut counts = std::collections::BTreeMap::new();
    for t in trajectories {
        *counts.entry(t.len()).or_insert(0usize) += 1;
    }
    counts.into_iter().map(|(steps, episodes)| StepCountRow { label: label.to_string(), steps, episodes }).collect()
}

/// Standard file names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn world_dir(&self) -> PathBuf {
        self.root.join("world")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn weights(&self) -> PathBuf {
        self.root.join("weights.csv")
    }

    pub fn step_counts(&self) -> PathBuf {
        self.root.join("step_counts.csv")
    }

    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories.jsonl")
    }

    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join("compare.csv")
    }

    pub fn policy_checkpoint(&self, stage: StageId) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.policy.json"))
    }

    pub fn rm_checkpoint(&self, stage: StageId) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.rm.json"))
    }
}

pub fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}
